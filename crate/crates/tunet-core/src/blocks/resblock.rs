//! Residual conv block: conv -> instance norm -> GELU on the residual path,
//! identity / avg-pool / trilinear on the shortcut, pointwise projection
//! when the channel count changes. Also the plain (non-residual) conv block
//! used by the concatenating-skip baseline.

use crate::error::{Error, Result};
use crate::init::{component_rng, normal_fan_in, ParamId, ParamSet, PVars};
use crate::ops::{activation, conv, elementwise, norm, pool};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::NORM_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    None,
    /// Halve the spatial extents (stride-2 conv / avg pool).
    Down,
    /// Double the spatial extents (trilinear, then conv).
    Up,
}

pub struct ResBlock {
    conv_w: ParamId,
    conv_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    shortcut_w: Option<ParamId>,
    pub mode: Resample,
    pub c_in: usize,
    pub c_out: usize,
}

impl ResBlock {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        mode: Resample,
        seed: u64,
    ) -> Self {
        let mut rng = component_rng(seed, name);
        let conv_w = params.add(
            format!("{name}.conv.weight"),
            normal_fan_in([c_out, c_in, 3, 3, 3], c_in * 27, &mut rng),
        );
        let conv_b = params.add(format!("{name}.conv.bias"), Tensor::zeros([c_out]));
        let gamma = params.add(format!("{name}.norm.gamma"), Tensor::full([c_out], T::one()));
        let beta = params.add(format!("{name}.norm.beta"), Tensor::zeros([c_out]));
        let shortcut_w = (c_in != c_out).then(|| {
            params.add(
                format!("{name}.shortcut.weight"),
                normal_fan_in([c_out, c_in], c_in, &mut rng),
            )
        });
        ResBlock { conv_w, conv_b, gamma, beta, shortcut_w, mode, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &PVars, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().clone();
        if shape[0] != self.c_in {
            return Err(Error::shape(
                "res_block",
                format!("{shape} vs expected {} input channels", self.c_in),
            ));
        }
        let eps = T::from_f64(NORM_EPS);
        let residual = match self.mode {
            Resample::None => conv::conv3d(tape, x, pv.var(self.conv_w), Some(pv.var(self.conv_b)), 1)?,
            Resample::Down => conv::conv3d(tape, x, pv.var(self.conv_w), Some(pv.var(self.conv_b)), 2)?,
            Resample::Up => {
                let up = pool::trilinear_upsample3d(tape, x)?;
                conv::conv3d(tape, up, pv.var(self.conv_w), Some(pv.var(self.conv_b)), 1)?
            }
        };
        let residual = norm::instance_norm(tape, residual, pv.var(self.gamma), pv.var(self.beta), eps)?;
        let residual = activation::gelu(tape, residual);

        let mut shortcut = match self.mode {
            Resample::None => x,
            Resample::Down => pool::avg_pool3d(tape, x)?,
            Resample::Up => pool::trilinear_upsample3d(tape, x)?,
        };
        if let Some(w) = self.shortcut_w {
            shortcut = conv::pointwise_conv3d(tape, shortcut, pv.var(w), None)?;
        }
        elementwise::add(tape, residual, shortcut)
    }
}

/// conv -> instance norm -> LeakyReLU(0.01), the baseline's building block.
pub struct ConvBlock {
    conv_w: ParamId,
    conv_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvBlock {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let mut rng = component_rng(seed, name);
        let conv_w = params.add(
            format!("{name}.conv.weight"),
            normal_fan_in([c_out, c_in, 3, 3, 3], c_in * 27, &mut rng),
        );
        let conv_b = params.add(format!("{name}.conv.bias"), Tensor::zeros([c_out]));
        let gamma = params.add(format!("{name}.norm.gamma"), Tensor::full([c_out], T::one()));
        let beta = params.add(format!("{name}.norm.beta"), Tensor::zeros([c_out]));
        ConvBlock { conv_w, conv_b, gamma, beta, stride, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &PVars, x: Var) -> Result<Var> {
        let y = conv::conv3d(tape, x, pv.var(self.conv_w), Some(pv.var(self.conv_b)), self.stride)?;
        let y = norm::instance_norm(tape, y, pv.var(self.gamma), pv.var(self.beta), T::from_f64(NORM_EPS))?;
        Ok(activation::leaky_relu(tape, y, T::from_f64(0.01)))
    }
}
