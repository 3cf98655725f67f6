//! Inference measurement harness: monotonic-clock timing with a warmup run
//! excluded, peak bytes from the allocation gauge, and the analytic FLOP
//! split from the op-dispatch counters.

use std::time::Instant;

use serde::Serialize;

use crate::alloc;
use crate::error::{Error, Result};
use crate::gradcheck::random_tensor;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::{CostCounter, Tape};

/// FLOPs by model section. "bottleneck" is the token-processing core
/// (Transformer stack and decoupling projections), whose cost depends only
/// on (N, d); TokenLearner and TokenFuser scale with the feature grid and
/// are reported separately.
#[derive(Clone, Debug, Serialize)]
pub struct FlopSplit {
    pub encoder: u64,
    pub token_learner: u64,
    pub bottleneck: u64,
    pub token_fuser: u64,
    pub decoder: u64,
    pub other: u64,
    pub total: u64,
}

impl From<&CostCounter> for FlopSplit {
    fn from(c: &CostCounter) -> Self {
        FlopSplit {
            encoder: c.encoder_flops,
            token_learner: c.token_learner_flops,
            bottleneck: c.bottleneck_flops,
            token_fuser: c.token_fuser_flops,
            decoder: c.decoder_flops,
            other: c.other_flops,
            total: c.total_flops(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub variant: String,
    pub size: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub peak_bytes: u64,
    pub flops: FlopSplit,
    pub attn_score_entries: u64,
}

/// Time `repeats` forward passes of the model on a random cubic input of
/// the given extent. One warmup pass runs first and is excluded.
pub fn bench_forward<T: Scalar>(model: &Model<T>, size: usize, repeats: usize) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!("repeats {repeats} must be >= 3")));
    }
    let stride = model.config.spatial_stride();
    if size == 0 || size % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "size {size} must be a positive multiple of the model stride {stride}"
        )));
    }
    let x = random_tensor::<T>([model.config.in_channels, size, size, size], 0xbe7c);
    let run = || -> Result<(f64, u64, CostCounter)> {
        alloc::reset_peak();
        let t0 = Instant::now();
        let mut tape = Tape::forward_only();
        let pass = model.forward(&mut tape, &x)?;
        let _ = tape.value(pass.logits);
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        Ok((elapsed, alloc::peak_bytes() as u64, tape.cost().clone()))
    };
    run()?; // warmup, excluded

    let mut times = Vec::with_capacity(repeats);
    let mut peak = 0u64;
    let mut cost = CostCounter::default();
    for _ in 0..repeats {
        let (ms, bytes, c) = run()?;
        times.push(ms);
        peak = peak.max(bytes);
        cost = c;
    }
    times.sort_by(f64::total_cmp);
    let median_ms = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    Ok(BenchReport {
        variant: model.config.variant.to_string(),
        size,
        repeats,
        median_ms,
        min_ms: times[0],
        max_ms: times[repeats - 1],
        peak_bytes: peak,
        flops: FlopSplit::from(&cost),
        attn_score_entries: cost.attn_score_entries,
    })
}
