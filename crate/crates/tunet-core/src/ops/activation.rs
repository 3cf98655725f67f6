//! Pointwise nonlinearities. GELU uses the exact error-function form
//! x * Phi(x), not the tanh approximation.

use crate::scalar::{norm_cdf, norm_pdf, Scalar};
use crate::tape::{accum, Node, Record, Tape, Var};
use crate::tensor::Tensor;

pub fn gelu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let data = tape.value(x).data().iter().map(|&v| v * norm_cdf(v)).collect();
    let t = Tensor::from_vec(tape.value(x).shape().clone(), data).expect("same shape");
    tape.add_flops(8 * t.numel() as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::Gelu { x, out });
    out
}

pub(crate) fn backward_gelu<T: Scalar>(
    x: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        // d/dx [x Phi(x)] = Phi(x) + x phi(x)
        let dx: Vec<T> = nodes[x.0]
            .value
            .data()
            .iter()
            .zip(&g)
            .map(|(&v, &gi)| gi * (norm_cdf(v) + v * norm_pdf(v)))
            .collect();
        accum(grads, x, &dx);
        grads[out.0] = Some(g);
    }
}

pub fn leaky_relu<T: Scalar>(tape: &mut Tape<T>, x: Var, slope: T) -> Var {
    let data = tape
        .value(x)
        .data()
        .iter()
        .map(|&v| if v >= T::zero() { v } else { slope * v })
        .collect();
    let t = Tensor::from_vec(tape.value(x).shape().clone(), data).expect("same shape");
    tape.add_flops(2 * t.numel() as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::LeakyRelu { x, slope, out });
    out
}

pub(crate) fn backward_leaky_relu<T: Scalar>(
    x: Var,
    slope: T,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let dx: Vec<T> = nodes[x.0]
            .value
            .data()
            .iter()
            .zip(&g)
            .map(|(&v, &gi)| if v >= T::zero() { gi } else { slope * gi })
            .collect();
        accum(grads, x, &dx);
        grads[out.0] = Some(g);
    }
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let data = tape
        .value(x)
        .data()
        .iter()
        .map(|&v| T::one() / (T::one() + (-v).exp()))
        .collect();
    let t = Tensor::from_vec(tape.value(x).shape().clone(), data).expect("same shape");
    tape.add_flops(4 * t.numel() as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::Sigmoid { x, out });
    out
}

pub(crate) fn backward_sigmoid<T: Scalar>(
    x: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let dx: Vec<T> = nodes[out.0]
            .value
            .data()
            .iter()
            .zip(&g)
            .map(|(&s, &gi)| gi * s * (T::one() - s))
            .collect();
        accum(grads, x, &dx);
        grads[out.0] = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl Fn(&mut Tape<f64>, Var) -> Var, xs: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec([xs.len()], xs.to_vec()).unwrap());
        let y = f(&mut tape, x);
        tape.value(y).data().to_vec()
    }

    #[test]
    fn gelu_reference_points() {
        let ys = eval(gelu, &[0.0, 1.0, -1.0]);
        assert_eq!(ys[0], 0.0);
        // GELU(1) = Phi(1) = 0.8413447460685429
        assert!((ys[1] - 0.8413447460685429).abs() < 1e-12);
        assert!((ys[2] - (-1.0 + 0.8413447460685429)).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_slope() {
        let ys = eval(|t, x| leaky_relu(t, x, 0.01), &[-2.0, 3.0]);
        assert_eq!(ys, vec![-0.02, 3.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let ys = eval(sigmoid, &[0.0]);
        assert_eq!(ys, vec![0.5]);
    }
}
