//! Forward operators and their backward rules.
//!
//! Each submodule owns both directions of its ops: the public forward
//! function validates shapes, runs the kernel, pushes the output node and a
//! record; a `backward_*` sibling implements the vector-Jacobian product and
//! is dispatched from [`backward_record`].

pub mod activation;
pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod softmax;

use crate::scalar::Scalar;
use crate::tape::{Node, Record};

pub(crate) fn backward_record<T: Scalar>(
    record: &Record<T>,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    use Record::*;
    match record {
        Add { a, b, out } => elementwise::backward_add(*a, *b, *out, grads),
        Mul { a, b, out } => elementwise::backward_mul(*a, *b, *out, nodes, grads),
        Affine { x, mul, out } => elementwise::backward_affine(*x, *mul, *out, grads),
        SumAll { x, out } => elementwise::backward_sum_all(*x, *out, nodes, grads),
        DivScalar { num, den, out } => {
            elementwise::backward_div_scalar(*num, *den, *out, nodes, grads)
        }
        MatMul { a, b, out, dims } => matmul::backward_matmul(*a, *b, *out, dims, nodes, grads),
        Transpose2 { x, out } => matmul::backward_transpose2(*x, *out, nodes, grads),
        AddRowBias { x, bias, out } => matmul::backward_add_row_bias(*x, *bias, *out, nodes, grads),
        Concat { parts, axis, out } => elementwise::backward_concat(parts, *axis, *out, nodes, grads),
        NarrowC0 { x, start, out } => elementwise::backward_narrow_c0(*x, *start, *out, nodes, grads),
        Conv3d { x, w, bias, stride, out } => {
            conv::backward_conv3d(*x, *w, *bias, *stride, *out, nodes, grads)
        }
        PointwiseConv { x, w, bias, out } => {
            conv::backward_pointwise(*x, *w, *bias, *out, nodes, grads)
        }
        AvgPool { x, out } => pool::backward_avg_pool(*x, *out, nodes, grads),
        Upsample { x, out } => pool::backward_upsample(*x, *out, nodes, grads),
        SoftmaxGroups { x, group_size, out } => {
            softmax::backward_softmax_groups(*x, *group_size, *out, nodes, grads)
        }
        Norm(r) => norm::backward_norm(r, nodes, grads),
        Gelu { x, out } => activation::backward_gelu(*x, *out, nodes, grads),
        LeakyRelu { x, slope, out } => activation::backward_leaky_relu(*x, *slope, *out, nodes, grads),
        Sigmoid { x, out } => activation::backward_sigmoid(*x, *out, nodes, grads),
        AttnPool { maps, x, out } => attention::backward_attn_pool(*maps, *x, *out, nodes, grads),
        AttnUnpool { maps, tokens, out } => {
            attention::backward_attn_unpool(*maps, *tokens, *out, nodes, grads)
        }
        BceWithLogits { logits, target, out } => {
            elementwise::backward_bce_with_logits(*logits, *target, *out, nodes, grads)
        }
    }
}
