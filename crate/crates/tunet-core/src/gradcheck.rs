//! Central-difference verification of tape gradients.
//!
//! Meant to run in 64-bit mode: with h = 1e-4 the truncation error of the
//! central difference sits far below the 1e-4 relative tolerance.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl GradReport {
    fn from_errors(errors: &[(f64, f64)], tol: f64) -> Self {
        let max_rel_err = errors.iter().map(|e| e.0).fold(0.0, f64::max);
        let max_abs_err = errors.iter().map(|e| e.1).fold(0.0, f64::max);
        GradReport { max_rel_err, max_abs_err, coords_checked: errors.len(), tol, pass: max_rel_err <= tol }
    }
}

/// Relative error with a floor so that near-zero gradient pairs compare in
/// absolute terms: central differences at h = 1e-4 carry ~1e-8 of absolute
/// truncation noise, which would swamp a pure ratio on tiny coordinates.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-3);
    (a - b).abs() / denom
}

/// Central finite differences of a scalar-valued tensor function at `x`,
/// one coordinate per entry of the returned buffer.
pub fn numeric_gradient<T, F>(f: &F, inputs: &[Tensor<T>], which: usize, h: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::forward_only();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().to_f64())
    };
    let mut grad = Vec::with_capacity(inputs[which].numel());
    for i in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let mut dp = inputs[which].data().to_vec();
        let mut dm = dp.clone();
        dp[i] = dp[i] + T::from_f64(h);
        dm[i] = dm[i] - T::from_f64(h);
        plus[which] = Tensor::from_vec(inputs[which].shape().clone(), dp)?;
        minus[which] = Tensor::from_vec(inputs[which].shape().clone(), dm)?;
        grad.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }
    Ok(grad)
}

/// Compare an analytic gradient against a numeric one.
pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> GradReport {
    let errors: Vec<(f64, f64)> = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (relative_error(a, n), (a - n).abs()))
        .collect();
    GradReport::from_errors(&errors, tol)
}

/// Run `f` on a recording tape, backpropagate, and check the gradient of
/// every input against central differences. `max_coords_per_input` bounds
/// the work on large inputs by checking a seeded random subsample.
pub fn finite_diff_check<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: f64,
    tol: f64,
    max_coords_per_input: usize,
) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = StdRng::seed_from_u64(0x5eed_c0de);
    let mut errors = Vec::new();
    for (which, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[which]) {
            Some(g) => g.iter().map(|&v| Scalar::to_f64(v)).collect(),
            None => vec![0.0; input.numel()],
        };
        let coords: Vec<usize> = if input.numel() <= max_coords_per_input {
            (0..input.numel()).collect()
        } else {
            (0..max_coords_per_input).map(|_| rng.gen_range(0..input.numel())).collect()
        };
        for &i in &coords {
            let numeric = numeric_at(&f, inputs, which, i, h)?;
            errors.push((relative_error(analytic[i], numeric), (analytic[i] - numeric).abs()));
        }
    }
    Ok(GradReport::from_errors(&errors, tol))
}

fn numeric_at<T, F>(f: &F, inputs: &[Tensor<T>], which: usize, i: usize, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut shifted = inputs.to_vec();
        let mut d = inputs[which].data().to_vec();
        d[i] = d[i] + T::from_f64(delta);
        shifted[which] = Tensor::from_vec(inputs[which].shape().clone(), d)?;
        let mut tape = Tape::forward_only();
        let vars: Vec<Var> = shifted.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().to_f64())
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// Uniform random tensor in [-1, 1], seeded.
pub fn random_tensor<T: Scalar>(shape: impl Into<crate::shape::Shape>, seed: u64) -> Tensor<T> {
    let shape = shape.into();
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{activation, elementwise};

    #[test]
    fn linear_function_has_tiny_error() {
        let x = random_tensor::<f64>([3, 3], 1);
        let report = finite_diff_check(
            |tape, vars| Ok(elementwise::sum_all(tape, vars[0])),
            &[x],
            1e-4,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_abs_err < 1e-9, "linearity should give ~machine-eps: {report:?}");
    }

    #[test]
    fn gelu_sum_passes() {
        let x = random_tensor::<f64>([4, 4], 2);
        let report = finite_diff_check(
            |tape, vars| {
                let y = activation::gelu(tape, vars[0]);
                Ok(elementwise::sum_all(tape, y))
            },
            &[x],
            1e-4,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = random_tensor::<f64>([8], 3);
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = activation::gelu(tape, vars[0]);
            Ok(elementwise::sum_all(tape, y))
        };
        let numeric = numeric_gradient(&f, &[x.clone()], 0, 1e-4).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let out = f(&mut tape, &[v]).unwrap();
        tape.backward(out).unwrap();
        let mut analytic: Vec<f64> =
            tape.grad(v).unwrap().to_vec();
        analytic[3] *= 1.5; // deliberately corrupt one backward entry
        let report = compare(&analytic, &numeric, 1e-4);
        assert!(!report.pass, "corruption must be detected: {report:?}");
    }
}
