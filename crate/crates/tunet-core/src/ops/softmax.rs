//! Joint softmax over a trailing block of axes, with max-subtraction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{accum, Node, Record, Tape, Var};
use crate::tensor::Tensor;

/// Exp-normalize jointly over the trailing `axes`. For every index of the
/// remaining axes the result sums to 1 over the named ones. The axis set
/// must be non-empty, in range, and form a contiguous trailing block (the
/// layout keeps those elements adjacent).
pub fn softmax_over_axes<T: Scalar>(tape: &mut Tape<T>, x: Var, axes: &[usize]) -> Result<Var> {
    let s = tape.value(x).shape().clone();
    if axes.is_empty() {
        return Err(Error::InvalidArgument("softmax over an empty axis set".into()));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || *sorted.last().unwrap() >= s.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axes {axes:?} invalid for shape {s}"
        )));
    }
    let first = s.rank() - sorted.len();
    if sorted[0] != first {
        return Err(Error::InvalidArgument(format!(
            "softmax axes {axes:?} must be the trailing axes of {s}"
        )));
    }
    let group_size: usize = s[first..].iter().product();
    softmax_groups(tape, x, group_size)
}

/// Softmax over each contiguous group of `group_size` elements.
pub(crate) fn softmax_groups<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    group_size: usize,
) -> Result<Var> {
    let numel = tape.value(x).numel();
    if group_size == 0 || numel % group_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "softmax group size {group_size} does not divide {numel} elements"
        )));
    }
    let xv = tape.value(x).data();
    let mut data = vec![T::zero(); numel];
    for (group, out) in xv.chunks(group_size).zip(data.chunks_mut(group_size)) {
        let max = group.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out.iter_mut().zip(group) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
    tape.add_flops(5 * numel as u64);
    let t = Tensor::from_vec(tape.value(x).shape().clone(), data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::SoftmaxGroups { x, group_size, out });
    Ok(out)
}

pub(crate) fn backward_softmax_groups<T: Scalar>(
    x: Var,
    group_size: usize,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let sv = nodes[out.0].value.data();
        let mut dx = vec![T::zero(); sv.len()];
        for ((grp_s, grp_g), grp_dx) in sv
            .chunks(group_size)
            .zip(g.chunks(group_size))
            .zip(dx.chunks_mut(group_size))
        {
            let mut dot = T::zero();
            for (&si, &gi) in grp_s.iter().zip(grp_g) {
                dot = dot + si * gi;
            }
            for ((d, &si), &gi) in grp_dx.iter_mut().zip(grp_s).zip(grp_g) {
                *d = si * (gi - dot);
            }
        }
        accum(grads, x, &dx);
        grads[out.0] = Some(g);
    }
}
