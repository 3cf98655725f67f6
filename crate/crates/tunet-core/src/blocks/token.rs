//! TokenLearner pools N semantic tokens from a feature volume through
//! spatially-softmaxed attention maps; TokenFuser scores voxels against the
//! (mixed) tokens and adds the broadcast result back onto the volume.

use crate::error::{Error, Result};
use crate::init::{component_rng, identity_matrix, normal_fan_in, ParamId, ParamSet, PVars};
use crate::ops::{activation, attention, conv, elementwise, matmul, softmax};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// N pooled tokens, one feature vector per learned semantic class.
pub struct TokenSet {
    pub values: Var,
}

/// N spatial score volumes. TokenLearner maps are softmax-normalized over
/// space; TokenFuser maps are raw scores.
pub struct AttentionMaps {
    pub values: Var,
}

/// Two-layer per-voxel MLP (hidden width F/4, GELU) producing N channels.
struct VoxelMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl VoxelMlp {
    fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        feat: usize,
        tokens: usize,
        zero_output: bool,
        seed: u64,
    ) -> Self {
        let mut rng = component_rng(seed, name);
        let hidden = feat / 4;
        let w1 = params.add(
            format!("{name}.mlp1.weight"),
            normal_fan_in([hidden, feat], feat, &mut rng),
        );
        let b1 = params.add(format!("{name}.mlp1.bias"), Tensor::zeros([hidden]));
        let w2_init = if zero_output {
            Tensor::zeros([tokens, hidden])
        } else {
            normal_fan_in([tokens, hidden], hidden, &mut rng)
        };
        let w2 = params.add(format!("{name}.mlp2.weight"), w2_init);
        let b2 = params.add(format!("{name}.mlp2.bias"), Tensor::zeros([tokens]));
        VoxelMlp { w1, b1, w2, b2 }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &PVars, x: Var) -> Result<Var> {
        let h = conv::pointwise_conv3d(tape, x, pv.var(self.w1), Some(pv.var(self.b1)))?;
        let h = activation::gelu(tape, h);
        conv::pointwise_conv3d(tape, h, pv.var(self.w2), Some(pv.var(self.b2)))
    }
}

pub struct TokenLearner {
    mlp: VoxelMlp,
    pub tokens: usize,
    pub feat: usize,
}

impl TokenLearner {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        feat: usize,
        tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::InvalidArgument("token count must be >= 1".into()));
        }
        if feat % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "feature width {feat} must be divisible by 4 for the token MLPs"
            )));
        }
        Ok(TokenLearner { mlp: VoxelMlp::init(params, name, feat, tokens, false, seed), tokens, feat })
    }

    /// Per-voxel logits -> softmax over all spatial positions per map ->
    /// attention-weighted pooling. Maps are returned for export and fusing.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &PVars,
        x: Var,
    ) -> Result<(TokenSet, AttentionMaps)> {
        let s = tape.value(x).shape();
        if s[0] != self.feat {
            return Err(Error::shape(
                "token_learner",
                format!("{s} vs expected {} feature channels", self.feat),
            ));
        }
        let logits = self.mlp.forward(tape, pv, x)?;
        let maps = softmax::softmax_over_axes(tape, logits, &[1, 2, 3])?;
        let tokens = attention::attention_pool(tape, maps, x)?;
        Ok((TokenSet { values: tokens }, AttentionMaps { values: maps }))
    }
}

pub struct TokenFuser {
    mlp: VoxelMlp,
    mix: ParamId,
    pub tokens: usize,
}

impl TokenFuser {
    /// The mixing matrix starts as the identity and the score MLP's output
    /// layer at zero, so a fresh bottleneck is an exact identity on x.
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        feat: usize,
        tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if feat % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "feature width {feat} must be divisible by 4 for the token MLPs"
            )));
        }
        let mlp = VoxelMlp::init(params, name, feat, tokens, true, seed);
        let mix = params.add(format!("{name}.mix"), identity_matrix(tokens));
        Ok(TokenFuser { mlp, mix, tokens })
    }

    /// B = MLP(x) per voxel (no softmax), T' = M T, y = unpool(B, T'),
    /// returns x + y.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &PVars,
        x: Var,
        tokens: &TokenSet,
    ) -> Result<Var> {
        let st = tape.value(tokens.values).shape();
        if st[0] != self.tokens {
            return Err(Error::shape(
                "token_fuser",
                format!("tokens {st} vs mixing matrix {0}x{0}", self.tokens),
            ));
        }
        let scores = self.mlp.forward(tape, pv, x)?;
        let mixed = matmul::matmul(tape, pv.var(self.mix), tokens.values)?;
        let y = attention::attention_unpool(tape, scores, mixed)?;
        elementwise::add(tape, x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn setup(feat: usize, tokens: usize) -> (ParamSet<f64>, TokenLearner, TokenFuser) {
        let mut params = ParamSet::new();
        let tl = TokenLearner::init(&mut params, "tl", feat, tokens, 3).unwrap();
        let tf = TokenFuser::init(&mut params, "tf", feat, tokens, 4).unwrap();
        (params, tl, tf)
    }

    #[test]
    fn degenerate_single_voxel_maps_are_one() {
        let (params, tl, _) = setup(8, 3);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.leaf(&random_tensor([8, 1, 1, 1], 9));
        let (toks, maps) = tl.forward(&mut tape, &pv, x).unwrap();
        assert_eq!(tape.value(maps.values).data(), &[1.0, 1.0, 1.0]);
        // each token equals the single voxel's feature vector
        let xd = tape.value(x).data().to_vec();
        for row in tape.value(toks.values).data().chunks(8) {
            for (a, b) in row.iter().zip(&xd) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_logits_pool_the_global_mean() {
        let (mut params, tl, _) = setup(8, 2);
        // zero both MLP layers: logits constant -> uniform maps
        params.set(tl.mlp.w1, Tensor::zeros([2, 8]));
        params.set(tl.mlp.w2, Tensor::zeros([2, 2]));
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.leaf(&random_tensor([8, 2, 2, 2], 10));
        let (toks, maps) = tl.forward(&mut tape, &pv, x).unwrap();
        assert!(tape.value(maps.values).data().iter().all(|&v| (v - 0.125).abs() < 1e-12));
        let xd = tape.value(x).data();
        for row in tape.value(toks.values).data().chunks(8) {
            for (f, t) in row.iter().enumerate() {
                let mean: f64 = xd[f * 8..(f + 1) * 8].iter().sum::<f64>() / 8.0;
                assert!((t - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokens_match_brute_force_pooling() {
        let (params, tl, _) = setup(8, 3);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.leaf(&random_tensor([8, 2, 2, 2], 11));
        let (toks, maps) = tl.forward(&mut tape, &pv, x).unwrap();
        let m = tape.value(maps.values).data();
        let xd = tape.value(x).data();
        let got = tape.value(toks.values).data();
        for n in 0..3 {
            for f in 0..8 {
                let mut s = 0.0;
                for v in 0..8 {
                    s += m[n * 8 + v] * xd[f * 8 + v];
                }
                assert!((got[n * 8 + f] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fresh_fuser_is_identity() {
        let (params, tl, tf) = setup(8, 3);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.leaf(&random_tensor([8, 2, 2, 2], 12));
        let (toks, _) = tl.forward(&mut tape, &pv, x).unwrap();
        let y = tf.forward(&mut tape, &pv, x, &toks).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn single_token_unit_scores_tile_the_token() {
        // N = 1, scores forced to 1 everywhere, M = [1] -> output = x + tiled token
        let mut params = ParamSet::<f64>::new();
        let tl = TokenLearner::init(&mut params, "tl", 8, 1, 20).unwrap();
        let tf = TokenFuser::init(&mut params, "tf", 8, 1, 21).unwrap();
        // zero both fuser MLP layers, then bias the output layer to 1
        params.set(tf.mlp.w1, Tensor::zeros([2, 8]));
        params.set(tf.mlp.b1, Tensor::zeros([2]));
        params.set(tf.mlp.w2, Tensor::zeros([1, 2]));
        params.set(tf.mlp.b2, Tensor::from_vec([1], vec![1.0]).unwrap());
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.leaf(&random_tensor([8, 2, 2, 2], 22));
        let (tokens, _) = tl.forward(&mut tape, &pv, x).unwrap();
        let y = tf.forward(&mut tape, &pv, x, &tokens).unwrap();
        let t = tape.value(tokens.values).data().to_vec();
        let (xd, yd) = (tape.value(x).data(), tape.value(y).data());
        for f in 0..8 {
            for v in 0..8 {
                assert!((yd[f * 8 + v] - (xd[f * 8 + v] + t[f])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuser_matches_brute_force_unpool() {
        let (mut params, tl, tf) = setup(8, 3);
        // make the fuser act: random output layer and mixing matrix
        params.set(tf.mlp.w2, random_tensor([3, 2], 13));
        params.set(tf.mix, random_tensor([3, 3], 14));
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.leaf(&random_tensor([8, 2, 2, 2], 15));
        let (toks, _) = tl.forward(&mut tape, &pv, x).unwrap();
        let y = tf.forward(&mut tape, &pv, x, &toks).unwrap();

        // brute force: y = x + B (M T)
        let scores_v = tf.mlp.forward(&mut tape, &pv, x).unwrap();
        let b = tape.value(scores_v).data().to_vec();
        let m = tape.value(pv.var(tf.mix)).data().to_vec();
        let t = tape.value(toks.values).data().to_vec();
        let xd = tape.value(x).data();
        let got = tape.value(y).data();
        for f in 0..8 {
            for v in 0..8 {
                let mut s = xd[f * 8 + v];
                for n in 0..3 {
                    let mut mt = 0.0;
                    for k in 0..3 {
                        mt += m[n * 3 + k] * t[k * 8 + f];
                    }
                    s += b[n * 8 + v] * mt;
                }
                assert!((got[f * 8 + v] - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn token_convex_hull_bound() {
        let (params, tl, _) = setup(8, 4);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.leaf(&random_tensor([8, 2, 2, 2], 16));
        let (toks, _) = tl.forward(&mut tape, &pv, x).unwrap();
        let xd = tape.value(x).data();
        for row in tape.value(toks.values).data().chunks(8) {
            for (f, &t) in row.iter().enumerate() {
                let ch = &xd[f * 8..(f + 1) * 8];
                let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(t >= lo - 1e-9 && t <= hi + 1e-9, "token {t} outside [{lo}, {hi}]");
            }
        }
    }
}
