//! Pre-norm Transformer encoder over the pooled tokens. Heads project the
//! full token width down to d/h (project-then-split); attention scores form
//! an N x N matrix regardless of the volume the tokens came from.

use crate::error::{Error, Result};
use crate::init::{component_rng, normal_fan_in, ParamId, ParamSet, PVars};
use crate::ops::{activation, elementwise, matmul, softmax};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::token::TokenSet;
use super::NORM_EPS;

pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Single-head scaled dot-product self-attention on [N, d] tokens,
/// producing [N, d/h]. Exactly N^2 score entries are computed.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    head: &AttentionHead,
    pv: &PVars,
    x: Var,
) -> Result<Var> {
    let (n, head_dim) = {
        let sx = tape.value(x).shape();
        (sx[0], tape.value(pv.var(head.wq)).shape()[1])
    };
    let q = matmul::matmul(tape, x, pv.var(head.wq))?;
    let k = matmul::matmul(tape, x, pv.var(head.wk))?;
    let v = matmul::matmul(tape, x, pv.var(head.wv))?;
    let kt = matmul::transpose2(tape, k)?;
    let scores = matmul::matmul(tape, q, kt)?;
    tape.add_attn_scores((n * n) as u64);
    let scaled = elementwise::affine(tape, scores, T::from_f64(1.0 / (head_dim as f64).sqrt()), T::zero());
    let attn = softmax::softmax_over_axes(tape, scaled, &[1])?;
    matmul::matmul(tape, attn, v)
}

pub struct TransformerBlock {
    heads: Vec<AttentionHead>,
    w_o: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

impl TransformerBlock {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> Self {
        let mut rng = component_rng(seed, name);
        let head_dim = dim / heads;
        let heads = (0..heads)
            .map(|h| AttentionHead {
                wq: params.add(
                    format!("{name}.head{h}.wq"),
                    normal_fan_in([dim, head_dim], dim, &mut rng),
                ),
                wk: params.add(
                    format!("{name}.head{h}.wk"),
                    normal_fan_in([dim, head_dim], dim, &mut rng),
                ),
                wv: params.add(
                    format!("{name}.head{h}.wv"),
                    normal_fan_in([dim, head_dim], dim, &mut rng),
                ),
            })
            .collect();
        let w_o = params.add(format!("{name}.wo"), normal_fan_in([dim, dim], dim, &mut rng));
        let ffn_w1 =
            params.add(format!("{name}.ffn1.weight"), normal_fan_in([dim, 4 * dim], dim, &mut rng));
        let ffn_b1 = params.add(format!("{name}.ffn1.bias"), Tensor::zeros([4 * dim]));
        let ffn_w2 = params.add(
            format!("{name}.ffn2.weight"),
            normal_fan_in([4 * dim, dim], 4 * dim, &mut rng),
        );
        let ffn_b2 = params.add(format!("{name}.ffn2.bias"), Tensor::zeros([dim]));
        let ln1_gamma = params.add(format!("{name}.ln1.gamma"), Tensor::full([dim], T::one()));
        let ln1_beta = params.add(format!("{name}.ln1.beta"), Tensor::zeros([dim]));
        let ln2_gamma = params.add(format!("{name}.ln2.gamma"), Tensor::full([dim], T::one()));
        let ln2_beta = params.add(format!("{name}.ln2.beta"), Tensor::zeros([dim]));
        TransformerBlock {
            heads,
            w_o,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
        }
    }

    pub fn head(&self, i: usize) -> &AttentionHead {
        &self.heads[i]
    }

    /// Concatenated head outputs projected by W_O.
    pub fn multi_head_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &PVars,
        x: Var,
    ) -> Result<Var> {
        let outs: Vec<Var> = self
            .heads
            .iter()
            .map(|h| self_attention(tape, h, pv, x))
            .collect::<Result<_>>()?;
        let cat = elementwise::concat(tape, &outs, 1)?;
        matmul::matmul(tape, cat, pv.var(self.w_o))
    }

    /// GELU between the expansion and contraction linear maps.
    pub fn ffn<T: Scalar>(&self, tape: &mut Tape<T>, pv: &PVars, x: Var) -> Result<Var> {
        let h = matmul::matmul(tape, x, pv.var(self.ffn_w1))?;
        let h = matmul::add_row_bias(tape, h, pv.var(self.ffn_b1))?;
        let h = activation::gelu(tape, h);
        let y = matmul::matmul(tape, h, pv.var(self.ffn_w2))?;
        matmul::add_row_bias(tape, y, pv.var(self.ffn_b2))
    }

    /// x + MHA(LN(x)), then + FFN(LN(.)).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &PVars, x: Var) -> Result<Var> {
        let eps = T::from_f64(NORM_EPS);
        let normed = crate::ops::norm::layer_norm(tape, x, pv.var(self.ln1_gamma), pv.var(self.ln1_beta), eps)?;
        let attn = self.multi_head_attention(tape, pv, normed)?;
        let x = elementwise::add(tape, x, attn)?;
        let normed = crate::ops::norm::layer_norm(tape, x, pv.var(self.ln2_gamma), pv.var(self.ln2_beta), eps)?;
        let f = self.ffn(tape, pv, normed)?;
        elementwise::add(tape, x, f)
    }
}

pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    final_gamma: ParamId,
    final_beta: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerStack {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "token width {dim} must be divisible by head count {heads}"
            )));
        }
        if depth == 0 {
            return Err(Error::InvalidArgument("transformer depth must be >= 1".into()));
        }
        let blocks = (0..depth)
            .map(|b| TransformerBlock::init(params, &format!("{name}.block{b}"), dim, heads, seed))
            .collect();
        let final_gamma = params.add(format!("{name}.final_ln.gamma"), Tensor::full([dim], T::one()));
        let final_beta = params.add(format!("{name}.final_ln.beta"), Tensor::zeros([dim]));
        Ok(TransformerStack { blocks, final_gamma, final_beta, dim, heads })
    }

    /// All blocks in sequence, then a final LayerNorm. No positional
    /// encodings: tokens are semantic pools without spatial identity.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &PVars,
        tokens: &TokenSet,
    ) -> Result<TokenSet> {
        let mut x = tokens.values;
        for block in &self.blocks {
            x = block.forward(tape, pv, x)?;
        }
        let out = crate::ops::norm::layer_norm(
            tape,
            x,
            pv.var(self.final_gamma),
            pv.var(self.final_beta),
            T::from_f64(NORM_EPS),
        )?;
        Ok(TokenSet { values: out })
    }
}
