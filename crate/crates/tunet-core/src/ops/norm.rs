//! Instance and layer normalization (biased variance, eps inside the sqrt).
//!
//! Both normalize contiguous groups of the flat buffer; they differ in how
//! the affine pair is indexed: instance norm scales each whole group by
//! gamma[channel], layer norm scales element j of every group by gamma[j].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{accum, Node, Record, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormKind {
    /// One gamma/beta per group (instance norm over spatial dims).
    PerGroup,
    /// One gamma/beta per within-group position (layer norm over features).
    PerElement,
}

pub(crate) struct NormRecord<T> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub out: Var,
    pub group_size: usize,
    pub kind: NormKind,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel, per-instance normalization of a [C, D, H, W] volume.
pub fn instance_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) -> Result<Var> {
    let s = tape.value(x).shape().clone();
    if s.rank() != 4 {
        return Err(Error::shape("instance_norm", format!("{s} (need [C,D,H,W])")));
    }
    let c = s[0];
    if tape.value(gamma).numel() != c || tape.value(beta).numel() != c {
        return Err(Error::shape(
            "instance_norm",
            format!(
                "affine {} / {} vs {c} channels",
                tape.value(gamma).shape(),
                tape.value(beta).shape()
            ),
        ));
    }
    let group_size = s[1] * s[2] * s[3];
    norm_impl(tape, x, gamma, beta, eps, group_size, NormKind::PerGroup)
}

/// Normalization over the last (feature) axis only.
pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) -> Result<Var> {
    let s = tape.value(x).shape().clone();
    let d = s[s.rank() - 1];
    if tape.value(gamma).numel() != d || tape.value(beta).numel() != d {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "affine {} / {} vs feature width {d}",
                tape.value(gamma).shape(),
                tape.value(beta).shape()
            ),
        ));
    }
    norm_impl(tape, x, gamma, beta, eps, d, NormKind::PerElement)
}

fn norm_impl<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: T,
    group_size: usize,
    kind: NormKind,
) -> Result<Var> {
    let xv = tape.value(x).data();
    let gv = tape.value(gamma).data().to_vec();
    let bv = tape.value(beta).data().to_vec();
    let groups = xv.len() / group_size;
    let n = T::from_usize(group_size);
    let mut mean = Vec::with_capacity(groups);
    let mut inv_std = Vec::with_capacity(groups);
    let mut data = vec![T::zero(); xv.len()];
    for gi in 0..groups {
        let grp = &xv[gi * group_size..(gi + 1) * group_size];
        let m = grp.iter().copied().sum::<T>() / n;
        let mut var = T::zero();
        for &v in grp {
            let d = v - m;
            var = var + d * d;
        }
        var = var / n;
        let is = T::one() / (var + eps).sqrt();
        mean.push(m);
        inv_std.push(is);
        let out = &mut data[gi * group_size..(gi + 1) * group_size];
        for (j, (&v, o)) in grp.iter().zip(out.iter_mut()).enumerate() {
            let (ga, be) = match kind {
                NormKind::PerGroup => (gv[gi % gv.len()], bv[gi % bv.len()]),
                NormKind::PerElement => (gv[j], bv[j]),
            };
            *o = ga * ((v - m) * is) + be;
        }
    }
    tape.add_flops(7 * xv.len() as u64);
    let t = Tensor::from_vec(tape.value(x).shape().clone(), data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::Norm(NormRecord { x, gamma, beta, out, group_size, kind, mean, inv_std }));
    Ok(out)
}

pub(crate) fn backward_norm<T: Scalar>(
    r: &NormRecord<T>,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[r.out.0].take() else { return };
    let xv = nodes[r.x.0].value.data();
    let gv = nodes[r.gamma.0].value.data();
    let n_affine = nodes[r.gamma.0].value.numel();
    let groups = xv.len() / r.group_size;
    let n = T::from_usize(r.group_size);

    let mut dgamma = vec![T::zero(); n_affine];
    let mut dbeta = vec![T::zero(); n_affine];
    let mut dx = vec![T::zero(); xv.len()];

    for gi in 0..groups {
        let base = gi * r.group_size;
        let grp_x = &xv[base..base + r.group_size];
        let grp_g = &g[base..base + r.group_size];
        let (m, is) = (r.mean[gi], r.inv_std[gi]);

        // dxhat, and the two reductions the chain rule needs
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for (j, (&xi, &gj)) in grp_x.iter().zip(grp_g).enumerate() {
            let ga = match r.kind {
                NormKind::PerGroup => gv[gi % n_affine],
                NormKind::PerElement => gv[j],
            };
            let xhat = (xi - m) * is;
            let dxhat = gj * ga;
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            let (ai, bi) = match r.kind {
                NormKind::PerGroup => (gi % n_affine, gi % n_affine),
                NormKind::PerElement => (j, j),
            };
            dgamma[ai] = dgamma[ai] + gj * xhat;
            dbeta[bi] = dbeta[bi] + gj;
        }
        // dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * inv_std
        for (j, &xi) in grp_x.iter().enumerate() {
            let ga = match r.kind {
                NormKind::PerGroup => gv[gi % n_affine],
                NormKind::PerElement => gv[j],
            };
            let xhat = (xi - m) * is;
            let dxhat = grp_g[j] * ga;
            dx[base + j] = (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n) * is;
        }
    }
    accum(grads, r.x, &dx);
    accum(grads, r.gamma, &dgamma);
    accum(grads, r.beta, &dbeta);
    grads[r.out.0] = Some(g);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn constant_channel_normalizes_to_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2, 2, 2], vec![5.0; 16]);
        let gamma = leaf(&mut tape, &[2], vec![3.0, 4.0]);
        let beta = leaf(&mut tape, &[2], vec![-1.0, 2.0]);
        let y = instance_norm(&mut tape, x, gamma, beta, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!(d[..8].iter().all(|&v| (v + 1.0).abs() < 1e-9));
        assert!(d[8..].iter().all(|&v| (v - 2.0).abs() < 1e-9));
    }

    #[test]
    fn unit_affine_gives_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| ((i * 17 + 3) % 11) as f64 - 5.0).collect();
        let x = leaf(&mut tape, &[2, 2, 2, 2], vals);
        let gamma = leaf(&mut tape, &[2], vec![1.0, 1.0]);
        let beta = leaf(&mut tape, &[2], vec![0.0, 0.0]);
        let y = instance_norm(&mut tape, x, gamma, beta, 1e-5).unwrap();
        for ch in tape.value(y).data().chunks(8) {
            let mean: f64 = ch.iter().sum::<f64>() / 8.0;
            let var: f64 = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn single_voxel_normalizes_to_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 1, 1, 1], vec![7.0, -3.0]);
        let gamma = leaf(&mut tape, &[2], vec![2.0, 2.0]);
        let beta = leaf(&mut tape, &[2], vec![0.5, -0.5]);
        let y = instance_norm(&mut tape, x, gamma, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5]);
    }

    #[test]
    fn layer_norm_constant_token_is_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4], vec![3.0; 8]);
        let gamma = leaf(&mut tape, &[4], vec![1.0; 4]);
        let beta = leaf(&mut tape, &[4], vec![0.1, 0.2, 0.3, 0.4]);
        let y = layer_norm(&mut tape, x, gamma, beta, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(4) {
            for (v, b) in row.iter().zip([0.1, 0.2, 0.3, 0.4]) {
                assert!((v - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_symmetric_pair_is_nearly_fixed() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], vec![-1.0, 1.0]);
        let gamma = leaf(&mut tape, &[2], vec![1.0, 1.0]);
        let beta = leaf(&mut tape, &[2], vec![0.0, 0.0]);
        let y = layer_norm(&mut tape, x, gamma, beta, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-4);
        assert!((d[1] - 1.0).abs() < 1e-4);
    }
}
