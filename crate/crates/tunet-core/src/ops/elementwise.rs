//! Elementwise and reduction ops, scalar arithmetic, concat/narrow, and the
//! fused stable binary cross-entropy.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{accum, grad_buf, Node, Record, Tape, Var};
use crate::tensor::Tensor;

fn check_same_shape<T: Scalar>(op: &'static str, tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa} vs {sb}")));
    }
    Ok(())
}

/// out = a + b (same shape).
pub fn add<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_same_shape("add", tape, a, b)?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x + y)
        .collect();
    let t = Tensor::from_vec(tape.value(a).shape().clone(), data)?;
    tape.add_flops(t.numel() as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::Add { a, b, out });
    Ok(out)
}

pub(crate) fn backward_add<T: Scalar>(a: Var, b: Var, out: Var, grads: &mut [Option<Vec<T>>]) {
    if let Some(g) = grads[out.0].take() {
        accum(grads, a, &g);
        accum(grads, b, &g);
        grads[out.0] = Some(g);
    }
}

/// out = a ⊙ b (same shape).
pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_same_shape("mul", tape, a, b)?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x * y)
        .collect();
    let t = Tensor::from_vec(tape.value(a).shape().clone(), data)?;
    tape.add_flops(t.numel() as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::Mul { a, b, out });
    Ok(out)
}

pub(crate) fn backward_mul<T: Scalar>(
    a: Var,
    b: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let da: Vec<T> = g.iter().zip(nodes[b.0].value.data()).map(|(&gi, &bi)| gi * bi).collect();
        let db: Vec<T> = g.iter().zip(nodes[a.0].value.data()).map(|(&gi, &ai)| gi * ai).collect();
        accum(grads, a, &da);
        accum(grads, b, &db);
        grads[out.0] = Some(g);
    }
}

/// out = mul * x + add, elementwise with scalar constants.
pub fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, mul: T, add: T) -> Var {
    let data = tape.value(x).data().iter().map(|&v| mul * v + add).collect();
    let t = Tensor::from_vec(tape.value(x).shape().clone(), data).expect("same shape");
    tape.add_flops(2 * t.numel() as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::Affine { x, mul, out });
    out
}

pub(crate) fn backward_affine<T: Scalar>(x: Var, mul: T, out: Var, grads: &mut [Option<Vec<T>>]) {
    if let Some(g) = grads[out.0].take() {
        let dx: Vec<T> = g.iter().map(|&gi| gi * mul).collect();
        accum(grads, x, &dx);
        grads[out.0] = Some(g);
    }
}

/// Full reduction to a scalar node.
pub fn sum_all<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let s: T = tape.value(x).data().iter().copied().sum();
    tape.add_flops(tape.value(x).numel() as u64);
    let out = tape.push_node(Tensor::scalar(s));
    tape.push_record(Record::SumAll { x, out });
    out
}

pub(crate) fn backward_sum_all<T: Scalar>(
    x: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let gx = vec![g[0]; nodes[x.0].value.numel()];
        accum(grads, x, &gx);
        grads[out.0] = Some(g);
    }
}

/// Scalar division num / den; both operands must be one-element tensors.
pub fn div_scalar<T: Scalar>(tape: &mut Tape<T>, num: Var, den: Var) -> Result<Var> {
    if !tape.value(num).shape().is_scalar() || !tape.value(den).shape().is_scalar() {
        return Err(Error::shape(
            "div_scalar",
            format!("{} vs {}", tape.value(num).shape(), tape.value(den).shape()),
        ));
    }
    let v = tape.value(num).item() / tape.value(den).item();
    tape.add_flops(1);
    let out = tape.push_node(Tensor::scalar(v));
    tape.push_record(Record::DivScalar { num, den, out });
    Ok(out)
}

pub(crate) fn backward_div_scalar<T: Scalar>(
    num: Var,
    den: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let n = nodes[num.0].value.item();
        let d = nodes[den.0].value.item();
        accum(grads, num, &[g[0] / d]);
        accum(grads, den, &[-g[0] * n / (d * d)]);
        grads[out.0] = Some(g);
    }
}

fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, inner)
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(tape: &mut Tape<T>, parts: &[Var], axis: usize) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let first = tape.value(parts[0]).shape().clone();
    if axis >= first.rank() {
        return Err(Error::InvalidArgument(format!(
            "concat axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    let mut axis_total = 0;
    for &p in parts {
        let s = tape.value(p).shape();
        if s.rank() != first.rank() {
            return Err(Error::shape("concat", format!("{first} vs {s}")));
        }
        for (i, (&d0, &d)) in first.iter().zip(s.iter()).enumerate() {
            if i != axis && d0 != d {
                return Err(Error::shape("concat", format!("{first} vs {s}")));
            }
        }
        axis_total += s[axis];
    }
    let mut out_dims = first.dims().to_vec();
    out_dims[axis] = axis_total;
    let (outer, inner) = split_at_axis(&out_dims, axis);
    let mut data = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0;
    for &p in parts {
        let s = tape.value(p).shape();
        let len = s[axis];
        let src = tape.value(p).data();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            let src_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        offset += len;
    }
    let t = Tensor::from_vec(out_dims, data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::Concat { parts: parts.to_vec(), axis, out });
    Ok(out)
}

pub(crate) fn backward_concat<T: Scalar>(
    parts: &[Var],
    axis: usize,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let out_dims = nodes[out.0].value.shape().dims().to_vec();
        let (outer, inner) = split_at_axis(&out_dims, axis);
        let axis_total = out_dims[axis];
        let mut offset = 0;
        for &p in parts {
            let len = nodes[p.0].value.shape()[axis];
            let mut dp = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let src_base = (o * axis_total + offset) * inner;
                let dst_base = o * len * inner;
                dp[dst_base..dst_base + len * inner]
                    .copy_from_slice(&g[src_base..src_base + len * inner]);
            }
            accum(grads, p, &dp);
            offset += len;
        }
        grads[out.0] = Some(g);
    }
}

/// Slice `len` channels starting at `start` along axis 0.
pub fn narrow_c0<T: Scalar>(tape: &mut Tape<T>, x: Var, start: usize, len: usize) -> Result<Var> {
    let s = tape.value(x).shape().clone();
    if start + len > s[0] {
        return Err(Error::InvalidArgument(format!(
            "narrow [{start}, {}) out of range for axis 0 of {s}",
            start + len
        )));
    }
    let inner: usize = s[1..].iter().product();
    let data = tape.value(x).data()[start * inner..(start + len) * inner].to_vec();
    let mut dims = s.dims().to_vec();
    dims[0] = len;
    let t = Tensor::from_vec(dims, data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::NarrowC0 { x, start, out });
    Ok(out)
}

pub(crate) fn backward_narrow_c0<T: Scalar>(
    x: Var,
    start: usize,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
        let numel = nodes[x.0].value.numel();
        let dx = grad_buf(grads, x, numel);
        for (i, &gi) in g.iter().enumerate() {
            dx[start * inner + i] = dx[start * inner + i] + gi;
        }
        grads[out.0] = Some(g);
    }
}

/// Mean binary cross-entropy from logits, in the stable log-sum-exp form
/// `max(z,0) - z*g + ln(1 + exp(-|z|))`, reduced over all elements.
pub fn bce_with_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    check_same_shape("bce_with_logits", tape, logits, target)?;
    let z = tape.value(logits).data();
    let g = tape.value(target).data();
    let n = z.len();
    let mut total = T::zero();
    for i in 0..n {
        let zi = z[i];
        let pos = if zi > T::zero() { zi } else { T::zero() };
        total = total + pos - zi * g[i] + (T::one() + (-zi.abs()).exp()).ln();
    }
    let mean = total / T::from_usize(n);
    tape.add_flops(6 * n as u64);
    let out = tape.push_node(Tensor::scalar(mean));
    tape.push_record(Record::BceWithLogits { logits, target, out });
    Ok(out)
}

pub(crate) fn backward_bce_with_logits<T: Scalar>(
    logits: Var,
    target: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let z = nodes[logits.0].value.data();
        let t = nodes[target.0].value.data();
        let n = z.len();
        let scale = g[0] / T::from_usize(n);
        // d/dz = sigmoid(z) - target; d/dtarget = -z.
        let dz: Vec<T> = z
            .iter()
            .zip(t)
            .map(|(&zi, &ti)| scale * (T::one() / (T::one() + (-zi).exp()) - ti))
            .collect();
        let dt: Vec<T> = z.iter().map(|&zi| -scale * zi).collect();
        accum(grads, logits, &dz);
        accum(grads, target, &dt);
        grads[out.0] = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        let t = Tensor::from_vec(shape, data).unwrap();
        tape.leaf(&t)
    }

    #[test]
    fn sum_all_grad_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = sum_all(&mut tape, x);
        assert_eq!(tape.value(s).item(), 10.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn half_square_sum_grad_is_x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let sq = mul(&mut tape, x, x).unwrap();
        let s = sum_all(&mut tape, sq);
        let loss = affine(&mut tape, s, 0.5, 0.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], vec![2.0]);
        let s = sum_all(&mut tape, x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let err = add(&mut tape, a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn concat_axis0_and_axis1_round() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, &[1, 2], vec![3.0, 4.0]);
        let c0 = concat(&mut tape, &[a, b], 0).unwrap();
        assert_eq!(tape.value(c0).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c1 = concat(&mut tape, &[a, b], 1).unwrap();
        assert_eq!(tape.value(c1).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(c1).shape().dims(), &[1, 4]);
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2, 1], vec![1.0, 2.0]);
        let b = leaf(&mut tape, &[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat(&mut tape, &[a, b], 1).unwrap();
        // loss = sum(c * c)/2 -> grad of each input is its own value
        let sq = mul(&mut tape, c, c).unwrap();
        let s = sum_all(&mut tape, sq);
        let loss = affine(&mut tape, s, 0.5, 0.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn narrow_selects_channels() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mid = narrow_c0(&mut tape, x, 1, 1).unwrap();
        assert_eq!(tape.value(mid).data(), &[3.0, 4.0]);
        let s = sum_all(&mut tape, mid);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_uniform_prediction_is_ln2() {
        // logits = 0 everywhere, target half ones -> mean BCE = ln 2 exactly
        let mut tape = Tape::<f64>::new();
        let z = leaf(&mut tape, &[4], vec![0.0; 4]);
        let g = leaf(&mut tape, &[4], vec![1.0, 0.0, 1.0, 0.0]);
        let loss = bce_with_logits(&mut tape, z, g).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut tape = Tape::<f64>::new();
        let zv = vec![1.5, -0.3, 0.0, 2.0, -4.0];
        let gv = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        let naive = zv
            .iter()
            .zip(&gv)
            .map(|(&z, &g): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / zv.len() as f64;
        let z = leaf(&mut tape, &[5], zv);
        let g = leaf(&mut tape, &[5], gv);
        let loss = bce_with_logits(&mut tape, z, g).unwrap();
        assert!((tape.value(loss).item() - naive).abs() < 1e-12);
    }
}
