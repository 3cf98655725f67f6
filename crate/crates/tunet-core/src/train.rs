//! Optimization recipe: combined soft-Dice + cross-entropy objective,
//! Nesterov-momentum SGD under cosine annealing, gradient accumulation to an
//! effective batch of 16 at batch-1 memory, Dice evaluation over sliding
//! windows, and the k-fold cross-validation driver.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::data::{sample_patch, sliding_window_infer, VolumeSample};
use crate::error::{Error, Result};
use crate::init::component_rng;
use crate::model::{build_model, Model, ModelConfig};
use crate::ops::{activation, elementwise};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub folds: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub accumulation_steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub loss_eps: f64,
    /// Sliding-window overlap at evaluation time.
    pub overlap: f64,
    /// Stream for patch sampling and epoch shuffling.
    pub seed: u64,
    /// Fold assignment stream, deliberately separate from every model seed
    /// so all variants consume identical splits.
    pub fold_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            folds: 5,
            base_lr: 1e-2,
            momentum: 0.9,
            accumulation_steps: 16,
            batch_size: 1,
            patch_size: 32,
            loss_eps: 1e-5,
            overlap: 0.5,
            seed: 1,
            fold_seed: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.folds == 0 {
            return Err(Error::InvalidArgument("epochs and folds must be >= 1".into()));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::InvalidArgument("accumulation_steps must be >= 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::InvalidArgument(
                "batch_size must be 1 (one random patch per subject; accumulation provides the effective batch)".into(),
            ));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidArgument("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!("overlap {} must be in [0, 1)", self.overlap)));
        }
        Ok(())
    }
}

/// One JSON-lines metrics entry. Key set is part of the external interface.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fold: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub dice_wt: f64,
    pub dice_tc: f64,
    pub dice_at: f64,
    pub dice_mean: f64,
    pub lr: f64,
    pub time_s: f64,
    pub peak_bytes: u64,
}

/// loss = (mean soft-Dice loss over labels + binary cross-entropy) / 2,
/// with p = sigmoid(logits) and the eps-smoothed Dice ratio.
pub fn dice_ce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: Var, eps: T) -> Result<Var> {
    let s = tape.value(logits).shape().clone();
    if s != *tape.value(target).shape() {
        return Err(Error::shape(
            "dice_ce_loss",
            format!("{s} vs {}", tape.value(target).shape()),
        ));
    }
    let labels = s[0];
    let p = activation::sigmoid(tape, logits);
    let mut dice_sum: Option<Var> = None;
    for l in 0..labels {
        let p_l = elementwise::narrow_c0(tape, p, l, 1)?;
        let g_l = elementwise::narrow_c0(tape, target, l, 1)?;
        let pg = elementwise::mul(tape, p_l, g_l)?;
        let inter = elementwise::sum_all(tape, pg);
        let sp = elementwise::sum_all(tape, p_l);
        let sg = elementwise::sum_all(tape, g_l);
        let num = elementwise::affine(tape, inter, T::from_f64(2.0), eps);
        let den_sum = elementwise::add(tape, sp, sg)?;
        let den = elementwise::affine(tape, den_sum, T::one(), eps);
        let ratio = elementwise::div_scalar(tape, num, den)?;
        let dice_l = elementwise::affine(tape, ratio, -T::one(), T::one());
        dice_sum = Some(match dice_sum {
            Some(acc) => elementwise::add(tape, acc, dice_l)?,
            None => dice_l,
        });
    }
    let dice_term = elementwise::affine(
        tape,
        dice_sum.expect("labels >= 1"),
        T::from_f64(0.5 / labels as f64),
        T::zero(),
    );
    let bce = elementwise::bce_with_logits(tape, logits, target)?;
    let bce_term = elementwise::affine(tape, bce, T::from_f64(0.5), T::zero());
    elementwise::add(tape, dice_term, bce_term)
}

/// Per-label overlap 2|P∩G| / (|P|+|G|) on binary volumes; both empty
/// counts as a perfect 1.0.
pub fn dice_score<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<f64>> {
    let s = pred.shape();
    if s != target.shape() {
        return Err(Error::shape("dice_score", format!("{s} vs {}", target.shape())));
    }
    let labels = s[0];
    let spatial: usize = s[1..].iter().product();
    let mut out = Vec::with_capacity(labels);
    for l in 0..labels {
        let p = &pred.data()[l * spatial..(l + 1) * spatial];
        let g = &target.data()[l * spatial..(l + 1) * spatial];
        let mut inter = 0u64;
        let mut np = 0u64;
        let mut ng = 0u64;
        for (&pi, &gi) in p.iter().zip(g) {
            let pb = pi != T::zero();
            let gb = gi != T::zero();
            inter += (pb && gb) as u64;
            np += pb as u64;
            ng += gb as u64;
        }
        out.push(if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 });
    }
    Ok(out)
}

/// Threshold logits at 0.5 post-sigmoid (logit > 0) into a binary volume.
pub fn binarize_logits<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let data = logits
        .data()
        .iter()
        .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(logits.shape().clone(), data).expect("same extent")
}

/// lr(t) = base * (1 + cos(pi t / T)) / 2.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs a positive horizon".into()));
    }
    let t = (step.min(total)) as f64 / total as f64;
    Ok((base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0).max(0.0))
}

/// One Nesterov-momentum update on a flat buffer:
/// v <- mu v + g; p <- p - lr (g + mu v).
pub fn nesterov_update<T: Scalar>(params: &mut [T], velocity: &mut [T], grads: &[T], lr: T, mu: T) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = mu * *v + g;
        *p = *p - lr * (g + mu * *v);
    }
}

/// Nesterov-momentum SGD state over a model's parameter set.
pub struct Nesterov<T> {
    velocity: Vec<Vec<T>>,
    pub momentum: f64,
}

impl<T: Scalar> Nesterov<T> {
    pub fn new(model: &Model<T>, momentum: f64) -> Self {
        let velocity = model.params.iter().map(|e| vec![T::zero(); e.tensor.numel()]).collect();
        Nesterov { velocity, momentum }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for (i, g) in grads.iter().enumerate() {
            let v = &mut self.velocity[i];
            let tensor = model.params.tensor_mut_by_index(i);
            if let Some(p) = tensor.data_mut() {
                nesterov_update(p, v, g, lr, mu);
            } else {
                let mut data = tensor.data().to_vec();
                nesterov_update(&mut data, v, g, lr, mu);
                let shape = tensor.shape().clone();
                model.params.set_by_index(i, Tensor::from_vec(shape, data).expect("same extent"));
            }
        }
    }
}

/// Gradient accumulation buffers, one per parameter.
pub struct GradAccum<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Scalar> GradAccum<T> {
    pub fn new(model: &Model<T>) -> Self {
        GradAccum { bufs: model.params.iter().map(|e| vec![T::zero(); e.tensor.numel()]).collect() }
    }

    pub fn add_from(&mut self, tape: &Tape<T>, pvars: &crate::init::PVars) {
        for (i, var) in pvars.iter().enumerate() {
            if let Some(g) = tape.grad(var) {
                for (b, &gi) in self.bufs[i].iter_mut().zip(g) {
                    *b = *b + gi;
                }
            }
        }
    }

    pub fn bufs(&self) -> &[Vec<T>] {
        &self.bufs
    }

    pub fn reset(&mut self) {
        for b in &mut self.bufs {
            b.fill(T::zero());
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|&v| v == T::zero()))
    }
}

/// Per-epoch aggregates used to fill a [`MetricsRecord`].
pub struct EpochStats {
    pub mean_loss: f64,
    pub dice: [f64; 3],
    pub dice_mean: f64,
    pub lr_last: f64,
    pub steps_applied: usize,
}

/// One pass over the shuffled subjects: per subject sample one random
/// patch, forward, scale the loss by 1/(group size), accumulate gradients;
/// apply the optimizer every `accumulation_steps` subjects and at epoch end.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    subjects: &[VolumeSample<T>],
    cfg: &TrainConfig,
    opt: &mut Nesterov<T>,
    accum: &mut GradAccum<T>,
    step_counter: &mut usize,
    total_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("training fold is empty".into()));
    }
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.shuffle(rng);

    let mut loss_sum = 0.0;
    let mut dice_sum = [0.0f64; 3];
    let mut lr_last = 0.0;
    let mut steps_applied = 0;
    for group in order.chunks(cfg.accumulation_steps) {
        let scale = 1.0 / group.len() as f64;
        for &si in group {
            let (img, lab) = sample_patch(&subjects[si], cfg.patch_size, rng)?;
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &img)?;
            let target = tape.leaf(&lab);
            let loss = dice_ce_loss(&mut tape, pass.logits, target, T::from_f64(cfg.loss_eps))?;
            let scaled = elementwise::affine(&mut tape, loss, T::from_f64(scale), T::zero());
            tape.backward(scaled)?;
            accum.add_from(&tape, &pass.pvars);

            loss_sum += tape.value(loss).item().to_f64();
            let pred = binarize_logits(tape.value(pass.logits));
            let d = dice_score(&pred, &lab)?;
            for (acc, v) in dice_sum.iter_mut().zip(&d) {
                *acc += v;
            }
        }
        let lr = cosine_lr(*step_counter, total_steps, cfg.base_lr)?;
        opt.step(model, accum.bufs(), lr);
        accum.reset();
        *step_counter += 1;
        steps_applied += 1;
        lr_last = lr;
    }
    let n = subjects.len() as f64;
    let dice = [dice_sum[0] / n, dice_sum[1] / n, dice_sum[2] / n];
    Ok(EpochStats {
        mean_loss: loss_sum / n,
        dice,
        dice_mean: (dice[0] + dice[1] + dice[2]) / 3.0,
        lr_last,
        steps_applied,
    })
}

/// Held-out evaluation: sliding-window logits per subject, thresholded,
/// scored per label; the stitched-logits loss is reported alongside.
pub struct EvalResult {
    pub per_subject: Vec<(String, [f64; 3])>,
    pub mean: [f64; 3],
    pub grand_mean: f64,
    pub mean_loss: f64,
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    subjects: &[VolumeSample<T>],
    window: usize,
    overlap: f64,
) -> Result<EvalResult> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("evaluation fold is empty".into()));
    }
    let stride = model.config.spatial_stride();
    if window % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be divisible by the model stride {stride}"
        )));
    }
    let mut per_subject = Vec::with_capacity(subjects.len());
    let mut mean = [0.0f64; 3];
    let mut loss_sum = 0.0;
    for s in subjects {
        let logits = sliding_window_infer(&s.image, window, overlap, model.config.out_channels, |patch| {
            let mut tape = Tape::forward_only();
            let pass = model.forward(&mut tape, patch)?;
            Ok(tape.value(pass.logits).clone())
        })?;
        let pred = binarize_logits(&logits);
        let d = dice_score(&pred, &s.label)?;
        for (m, v) in mean.iter_mut().zip(&d) {
            *m += v;
        }
        let mut tape = Tape::forward_only();
        let lv = tape.leaf(&logits);
        let gv = tape.leaf(&s.label);
        let loss = dice_ce_loss(&mut tape, lv, gv, T::from_f64(1e-5))?;
        loss_sum += tape.value(loss).item().to_f64();
        per_subject.push((s.subject_id.clone(), [d[0], d[1], d[2]]));
    }
    let n = subjects.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(EvalResult {
        per_subject,
        mean,
        grand_mean: (mean[0] + mean[1] + mean[2]) / 3.0,
        mean_loss: loss_sum / n,
    })
}

/// Deterministic fold assignment: shuffle subject indices with the fold
/// seed only, deal them round-robin. Same subject order + same fold seed
/// means identical splits for every variant.
pub fn fold_assignment(n_subjects: usize, folds: usize, fold_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut rng = component_rng(fold_seed, "fold_split");
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n_subjects];
    for (pos, &subject) in order.iter().enumerate() {
        assignment[subject] = pos % folds;
    }
    assignment
}

/// Model seed for a fold, derived from the configured seed.
pub fn fold_model_seed(base: u64, fold: usize) -> u64 {
    base ^ (fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub struct FoldOutcome<T: Scalar> {
    pub fold: usize,
    pub model: Model<T>,
    pub eval: EvalResult,
}

/// Train one fold from scratch and evaluate its held-out subjects. Emits a
/// metrics record per epoch plus one final record carrying the held-out
/// Dice. `clock` turns wall-time measurement off for byte-reproducible logs.
pub fn run_fold<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[VolumeSample<T>],
    fold: usize,
    clock: bool,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<FoldOutcome<T>> {
    cfg.validate()?;
    if samples.len() < cfg.folds {
        return Err(Error::InvalidArgument(format!(
            "{} subjects cannot fill {} folds",
            samples.len(),
            cfg.folds
        )));
    }
    if fold >= cfg.folds {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} out of range for {} folds",
            cfg.folds
        )));
    }
    let assignment = fold_assignment(samples.len(), cfg.folds, cfg.fold_seed);
    let train_idx: Vec<usize> =
        (0..samples.len()).filter(|i| assignment[*i] != fold).collect();
    let val_idx: Vec<usize> = (0..samples.len()).filter(|i| assignment[*i] == fold).collect();

    let mut fold_model_cfg = model_cfg.clone();
    fold_model_cfg.seed = fold_model_seed(model_cfg.seed, fold);
    let mut model = build_model::<T>(&fold_model_cfg)?;
    let mut opt = Nesterov::new(&model, cfg.momentum);
    let mut accum = GradAccum::new(&model);

    let groups_per_epoch = train_idx.len().div_ceil(cfg.accumulation_steps);
    let total_steps = groups_per_epoch * cfg.epochs;
    let mut step_counter = 0usize;

    // Borrowing the subset per epoch keeps the copies to references only.
    let train_set: Vec<VolumeSample<T>> = train_idx
        .iter()
        .map(|&i| VolumeSample {
            subject_id: samples[i].subject_id.clone(),
            image: samples[i].image.clone(),
            label: samples[i].label.clone(),
        })
        .collect();
    let val_set: Vec<VolumeSample<T>> = val_idx
        .iter()
        .map(|&i| VolumeSample {
            subject_id: samples[i].subject_id.clone(),
            image: samples[i].image.clone(),
            label: samples[i].label.clone(),
        })
        .collect();

    for epoch in 0..cfg.epochs {
        alloc::reset_peak();
        let t0 = Instant::now();
        let mut rng = component_rng(cfg.seed, &format!("train.f{fold}.e{epoch}"));
        let stats = train_epoch(
            &mut model,
            &train_set,
            cfg,
            &mut opt,
            &mut accum,
            &mut step_counter,
            total_steps,
            &mut rng,
        )?;
        sink(&MetricsRecord {
            fold,
            epoch,
            step: step_counter,
            loss: stats.mean_loss,
            dice_wt: stats.dice[0],
            dice_tc: stats.dice[1],
            dice_at: stats.dice[2],
            dice_mean: stats.dice_mean,
            lr: stats.lr_last,
            time_s: if clock { t0.elapsed().as_secs_f64() } else { 0.0 },
            peak_bytes: alloc::peak_bytes() as u64,
        });
    }

    alloc::reset_peak();
    let t0 = Instant::now();
    let eval = evaluate(&model, &val_set, cfg.patch_size, cfg.overlap)?;
    sink(&MetricsRecord {
        fold,
        epoch: cfg.epochs,
        step: step_counter,
        loss: eval.mean_loss,
        dice_wt: eval.mean[0],
        dice_tc: eval.mean[1],
        dice_at: eval.mean[2],
        dice_mean: eval.grand_mean,
        lr: 0.0,
        time_s: if clock { t0.elapsed().as_secs_f64() } else { 0.0 },
        peak_bytes: alloc::peak_bytes() as u64,
    });
    Ok(FoldOutcome { fold, model, eval })
}

pub struct CvOutcome<T: Scalar> {
    pub folds: Vec<FoldOutcome<T>>,
}

impl<T: Scalar> CvOutcome<T> {
    /// Median of the per-fold mean held-out Dice.
    pub fn median_dice(&self) -> f64 {
        let mut v: Vec<f64> = self.folds.iter().map(|f| f.eval.grand_mean).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// The full k-fold driver: identical splits across variants, fresh model
/// per fold.
pub fn run_cross_validation<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[VolumeSample<T>],
    clock: bool,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<CvOutcome<T>> {
    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        folds.push(run_fold(model_cfg, cfg, samples, fold, clock, sink)?);
    }
    Ok(CvOutcome { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn loss_of(logits: Vec<f64>, target: Vec<f64>, shape: &[usize], eps: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(&Tensor::from_vec(shape, logits).unwrap());
        let g = tape.leaf(&Tensor::from_vec(shape, target).unwrap());
        let loss = dice_ce_loss(&mut tape, l, g, eps).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let target: Vec<f64> = (0..3 * 8).map(|i| ((i % 3) == 0) as u8 as f64).collect();
        let logits: Vec<f64> = target.iter().map(|&g| if g > 0.5 { 40.0 } else { -40.0 }).collect();
        let loss = loss_of(logits, target, &[3, 2, 2, 2], 1e-5);
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn uniform_logits_bce_term_is_ln2() {
        // logits = 0, target half ones: BCE = ln 2; dice term = 1/2 (1 - (S+eps)/(3S/2+eps))
        let spatial = 8;
        let target: Vec<f64> = (0..3 * spatial).map(|i| (i % 2) as f64).collect();
        let logits = vec![0.0; 3 * spatial];
        let loss = loss_of(logits, target, &[3, 2, 2, 2], 0.0);
        // per label: p = 1/2 everywhere, sum p = S/2, sum g = S/2, inter = S/4
        // dice loss = 1 - (2 S/4)/(S/2 + S/2) = 1/2
        let expected = 0.5 * 0.5 + 0.5 * std::f64::consts::LN_2;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn loss_matches_brute_force_oracle() {
        // explicit per-voxel summation in plain f64, volumes <= 4^3
        let shape = [3usize, 4, 4, 4];
        let n = 3 * 64;
        let logits: Vec<f64> = (0..n).map(|i| ((i * 37 + 5) % 19) as f64 / 3.0 - 3.0).collect();
        let target: Vec<f64> = (0..n).map(|i| ((i * 13 + 1) % 3 == 0) as u8 as f64).collect();
        let eps = 1e-5;

        let spatial = 64;
        let mut dice_sum = 0.0;
        for l in 0..3 {
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for v in 0..spatial {
                let p = 1.0 / (1.0 + (-logits[l * spatial + v]).exp());
                let g = target[l * spatial + v];
                inter += p * g;
                sp += p;
                sg += g;
            }
            dice_sum += 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
        }
        let mut bce = 0.0;
        for i in 0..n {
            let p = 1.0 / (1.0 + (-logits[i]).exp());
            bce += -(target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln());
        }
        let oracle = 0.5 * dice_sum / 3.0 + 0.5 * bce / n as f64;
        let got = loss_of(logits, target, &shape, eps);
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn loss_is_nonnegative_on_random_cases() {
        for seed in 0..5u64 {
            let logits = random_tensor::<f64>([3, 2, 2, 2], seed).data().to_vec();
            let target: Vec<f64> =
                (0..24).map(|i| ((i as u64 + seed) % 3 == 0) as u8 as f64).collect();
            let loss = loss_of(logits, target, &[3, 2, 2, 2], 1e-5);
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn dice_score_reference_cases() {
        let ones = Tensor::from_vec([1, 2, 2, 2], vec![1.0f32; 8]).unwrap();
        let zeros = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert_eq!(dice_score(&ones, &ones).unwrap(), vec![1.0]);
        assert_eq!(dice_score(&zeros, &zeros).unwrap(), vec![1.0]); // both empty
        assert_eq!(dice_score(&ones, &zeros).unwrap(), vec![0.0]);
        // |P| = |G| = 8, overlap 4 -> 0.5
        let mut a = vec![0.0f32; 16];
        let mut b = vec![0.0f32; 16];
        for i in 0..8 {
            a[i] = 1.0;
            b[i + 4] = 1.0;
        }
        let p = Tensor::from_vec([1, 2, 2, 4], a).unwrap();
        let g = Tensor::from_vec([1, 2, 2, 4], b).unwrap();
        assert_eq!(dice_score(&p, &g).unwrap(), vec![0.5]);
    }

    #[test]
    fn dice_score_is_symmetric_and_permutation_invariant() {
        let a: Vec<f32> = (0..27).map(|i| (i % 2) as f32).collect();
        let b: Vec<f32> = (0..27).map(|i| ((i / 2) % 2) as f32).collect();
        let pa = Tensor::from_vec([1, 3, 3, 3], a.clone()).unwrap();
        let pb = Tensor::from_vec([1, 3, 3, 3], b.clone()).unwrap();
        assert_eq!(dice_score(&pa, &pb).unwrap(), dice_score(&pb, &pa).unwrap());
        // same spatial permutation applied to both leaves the score unchanged
        let perm: Vec<usize> = (0..27).rev().collect();
        let ap: Vec<f32> = perm.iter().map(|&i| a[i]).collect();
        let bp: Vec<f32> = perm.iter().map(|&i| b[i]).collect();
        let qa = Tensor::from_vec([1, 3, 3, 3], ap).unwrap();
        let qb = Tensor::from_vec([1, 3, 3, 3], bp).unwrap();
        assert_eq!(dice_score(&pa, &pb).unwrap(), dice_score(&qa, &qb).unwrap());
    }

    #[test]
    fn nesterov_reference_behaviour() {
        // mu = 0, lr = 1: plain gradient descent
        let mut p = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        nesterov_update(&mut p, &mut v, &[0.5, -0.5], 1.0, 0.0);
        assert_eq!(p, vec![0.5, -1.5]);
        // zero gradients (and zero momentum state) forever: parameters frozen
        v.fill(0.0);
        for _ in 0..10 {
            nesterov_update(&mut p, &mut v, &[0.0, 0.0], 0.3, 0.9);
        }
        assert_eq!(p, vec![0.5, -1.5]);
    }

    #[test]
    fn nesterov_descends_a_quadratic_bowl() {
        // f(p) = p^2 / 2, grad = p
        let mut p = [5.0f64];
        let mut v = [0.0f64];
        for step in 0..200 {
            let g = [p[0]];
            nesterov_update(&mut p, &mut v, &g, 0.1, 0.9);
            if p[0].abs() < 1e-3 {
                assert!(step < 200);
                return;
            }
        }
        panic!("|p| = {} after 200 steps", p[0].abs());
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotonicity() {
        assert_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01);
        assert!((cosine_lr(50, 100, 0.01).unwrap() - 0.005).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 0.01).unwrap().abs() < 1e-18);
        assert!(cosine_lr(1, 0, 0.01).is_err());
        let mut last = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(t, 100, 0.01).unwrap();
            assert!(lr <= last + 1e-15, "not non-increasing at {t}");
            last = lr;
        }
    }

    #[test]
    fn fold_assignment_partitions_and_is_variant_independent() {
        let a = fold_assignment(23, 5, 42);
        let b = fold_assignment(23, 5, 42);
        assert_eq!(a, b);
        let mut counts = [0usize; 5];
        for &f in &a {
            assert!(f < 5);
            counts[f] += 1;
        }
        // every subject in exactly one fold, sizes within 1 of each other
        assert_eq!(counts.iter().sum::<usize>(), 23);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_ne!(fold_assignment(23, 5, 43), a, "fold seed must matter");
    }
}
