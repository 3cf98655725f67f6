//! Finite-difference checks through whole blocks (parameters and input
//! jointly), in f64.

use tunet_core::blocks::{Resample, ResBlock, TokenFuser, TokenLearner, TransformerBlock, TransformerStack};
use tunet_core::gradcheck::{finite_diff_check, random_tensor};
use tunet_core::init::{ParamSet, PVars};
use tunet_core::ops::elementwise;
use tunet_core::{Result, Tape, Tensor, Var};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

/// Check gradients of a block forward w.r.t. every parameter and the input.
fn check_block<F>(name: &str, params: &ParamSet<f64>, input: Tensor<f64>, forward: F)
where
    F: Fn(&mut Tape<f64>, &PVars, Var) -> Result<Var>,
{
    let n_params = params.len();
    let inputs: Vec<Tensor<f64>> =
        params.iter().map(|e| e.tensor.clone()).chain([input]).collect();
    let report = finite_diff_check(
        |tape, vars| {
            let pv = PVars::from_vars(vars[..n_params].to_vec());
            let y = forward(tape, &pv, vars[n_params])?;
            let sq = elementwise::mul(tape, y, y)?;
            Ok(elementwise::sum_all(tape, sq))
        },
        &inputs,
        H,
        TOL,
        24,
    )
    .unwrap();
    assert!(
        report.pass,
        "{name}: max rel err {:.3e} over {} coords",
        report.max_rel_err, report.coords_checked
    );
}

#[test]
fn res_block_gradients() {
    for (seed, mode, c_in, c_out) in
        [(0u64, Resample::None, 2, 2), (1, Resample::Down, 2, 3), (2, Resample::Up, 3, 2)]
    {
        let mut params = ParamSet::new();
        let block = ResBlock::init(&mut params, "blk", c_in, c_out, mode, seed);
        let x = random_tensor([c_in, 4, 4, 4], 100 + seed);
        check_block("res_block", &params, x, move |tape, pv, x| block.forward(tape, pv, x));
    }
}

#[test]
fn token_learner_gradients() {
    for seed in 0..3u64 {
        let mut params = ParamSet::new();
        let tl = TokenLearner::init(&mut params, "tl", 8, 3, seed).unwrap();
        let x = random_tensor([8, 2, 2, 2], 200 + seed);
        check_block("token_learner", &params, x, move |tape, pv, x| {
            let (tokens, _) = tl.forward(tape, pv, x)?;
            Ok(tokens.values)
        });
    }
}

#[test]
fn token_fuser_gradients() {
    for seed in 0..3u64 {
        let mut params = ParamSet::new();
        let tl = TokenLearner::init(&mut params, "tl", 8, 3, seed).unwrap();
        let tf = TokenFuser::init(&mut params, "tf", 8, 3, seed + 10).unwrap();
        // perturb the fuser's zero-init output layer so its gradient path is live
        let w2 = params.find("tf.mlp2.weight").unwrap();
        params.set(w2, random_tensor([3, 2], 300 + seed));
        let x = random_tensor([8, 2, 2, 2], 310 + seed);
        check_block("token_fuser", &params, x, move |tape, pv, x| {
            let (tokens, _) = tl.forward(tape, pv, x)?;
            tf.forward(tape, pv, x, &tokens)
        });
    }
}

#[test]
fn self_attention_and_mha_gradients() {
    for seed in 0..3u64 {
        let mut params = ParamSet::new();
        let block = TransformerBlock::init(&mut params, "b", 8, 2, seed);
        let x = random_tensor([3, 8], 400 + seed);
        check_block("multi_head_attention", &params, x, move |tape, pv, x| {
            block.multi_head_attention(tape, pv, x)
        });
    }
}

#[test]
fn ffn_gradients() {
    for seed in 0..3u64 {
        let mut params = ParamSet::new();
        let block = TransformerBlock::init(&mut params, "b", 8, 2, seed);
        let x = random_tensor([3, 8], 410 + seed);
        check_block("ffn", &params, x, move |tape, pv, x| block.ffn(tape, pv, x));
    }
}

#[test]
fn transformer_block_and_stack_gradients() {
    for seed in 0..3u64 {
        let mut params = ParamSet::new();
        let block = TransformerBlock::init(&mut params, "b", 8, 2, seed);
        let x = random_tensor([3, 8], 500 + seed);
        check_block("transformer_block", &params, x, move |tape, pv, x| {
            block.forward(tape, pv, x)
        });

        let mut params = ParamSet::new();
        let stack = TransformerStack::init(&mut params, "tf", 8, 2, 2, seed).unwrap();
        let x = random_tensor([3, 8], 510 + seed);
        check_block("transformer_stack", &params, x, move |tape, pv, x| {
            let out = stack.forward(tape, pv, &tunet_core::blocks::TokenSet { values: x })?;
            Ok(out.values)
        });
    }
}
