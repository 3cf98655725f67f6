//! Synthetic multimodal phantoms, the TVOL volume format, patch extraction,
//! and sliding-window inference assembly.
//!
//! Phantoms stand in for real multi-institutional scans: a smooth brain
//! ellipsoid, one to three nested tumor ellipsoid triples (WT ⊇ TC ⊇ AT),
//! per-modality linear contrast mixes, and Gaussian noise. Everything is a
//! pure function of (spec, seed, subject id).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{component_rng, std_normal};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TVOL_MAGIC: &[u8; 4] = b"TVOL";
pub const TVOL_VERSION: u32 = 1;

/// One subject: 4-modality image plus 3-channel nested binary label
/// (whole tumor / tumor core / active tumor).
pub struct VolumeSample<T> {
    pub subject_id: String,
    pub image: Tensor<T>,
    pub label: Tensor<T>,
}

/// Generation recipe for the synthetic dataset.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    /// Cubic extent; must be divisible by 8.
    pub size: usize,
    pub subjects: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub tumors_min: usize,
    pub tumors_max: usize,
    /// WT semi-axis range as a fraction of the volume extent.
    pub wt_radius_frac: (f64, f64),
    /// TC semi-axes as a fraction of WT's, strictly below 1.
    pub tc_ratio: (f64, f64),
    /// AT semi-axes as a fraction of TC's, strictly below 1.
    pub at_ratio: (f64, f64),
    /// Per-modality mixing of [brain, WT, TC, AT] region signals.
    pub contrast: [[f64; 4]; 4],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 32,
            subjects: 20,
            seed: 7,
            noise_sigma: 0.05,
            tumors_min: 1,
            tumors_max: 3,
            wt_radius_frac: (0.14, 0.24),
            tc_ratio: (0.55, 0.8),
            at_ratio: (0.5, 0.8),
            contrast: [
                [0.90, -0.20, 0.15, 0.30],
                [0.80, 0.05, 0.30, 0.90],
                [0.70, 0.60, 0.35, 0.15],
                [0.75, 1.00, 0.25, 0.00],
            ],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "phantom size {} must be a positive multiple of 8",
                self.size
            )));
        }
        if self.tumors_min == 0 || self.tumors_min > self.tumors_max {
            return Err(Error::InvalidArgument(format!(
                "tumor count range [{}, {}] invalid",
                self.tumors_min, self.tumors_max
            )));
        }
        for (lo, hi) in [self.wt_radius_frac, self.tc_ratio, self.at_ratio] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidArgument(format!("bad radius range ({lo}, {hi})")));
            }
        }
        if self.tc_ratio.1 >= 1.0 || self.at_ratio.1 >= 1.0 {
            return Err(Error::InvalidArgument(
                "nested region ratios must stay strictly below 1".into(),
            ));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius; <= 1 means inside.
    fn r2(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi[a];
            s += d * d;
        }
        s
    }

    fn scaled(&self, f: f64) -> Ellipsoid {
        Ellipsoid { center: self.center, semi: [self.semi[0] * f, self.semi[1] * f, self.semi[2] * f] }
    }
}

/// Generate one subject's image and label volumes.
pub fn generate_subject(spec: &PhantomSpec, subject: usize) -> (Tensor<f32>, Tensor<f32>) {
    let s = spec.size;
    let sf = s as f64;
    let mut rng = component_rng(spec.seed, &format!("phantom.s{subject:04}"));

    let brain = Ellipsoid {
        center: [
            sf * 0.5 + rng.gen_range(-sf / 20.0..sf / 20.0),
            sf * 0.5 + rng.gen_range(-sf / 20.0..sf / 20.0),
            sf * 0.5 + rng.gen_range(-sf / 20.0..sf / 20.0),
        ],
        semi: [
            sf * rng.gen_range(0.34..0.42),
            sf * rng.gen_range(0.34..0.42),
            sf * rng.gen_range(0.34..0.42),
        ],
    };

    let count = rng.gen_range(spec.tumors_min..=spec.tumors_max);
    let mut tumors: Vec<[Ellipsoid; 3]> = Vec::with_capacity(count);
    for _ in 0..count {
        let semi = [
            sf * rng.gen_range(spec.wt_radius_frac.0..spec.wt_radius_frac.1),
            sf * rng.gen_range(spec.wt_radius_frac.0..spec.wt_radius_frac.1),
            sf * rng.gen_range(spec.wt_radius_frac.0..spec.wt_radius_frac.1),
        ];
        // keep the whole WT ellipsoid inside the brain: sample the center in
        // a shrunken copy of the brain ellipsoid
        let max_semi = semi.iter().cloned().fold(0.0, f64::max);
        let min_brain = brain.semi.iter().cloned().fold(f64::INFINITY, f64::min);
        let shrink = (1.0 - max_semi / min_brain).max(0.1);
        let inner = brain.scaled(shrink);
        let mut center = brain.center;
        for _ in 0..64 {
            let cand = [
                brain.center[0] + rng.gen_range(-inner.semi[0]..inner.semi[0]),
                brain.center[1] + rng.gen_range(-inner.semi[1]..inner.semi[1]),
                brain.center[2] + rng.gen_range(-inner.semi[2]..inner.semi[2]),
            ];
            if inner.r2(cand) <= 1.0 {
                center = cand;
                break;
            }
        }
        let tc_f = rng.gen_range(spec.tc_ratio.0..spec.tc_ratio.1);
        let at_f = rng.gen_range(spec.at_ratio.0..spec.at_ratio.1);
        let wt = Ellipsoid { center, semi };
        let tc = wt.scaled(tc_f);
        let at = tc.scaled(at_f);
        tumors.push([wt, tc, at]);
    }

    let voxels = s * s * s;
    let mut image = vec![0.0f32; 4 * voxels];
    let mut label = vec![0.0f32; 3 * voxels];
    let mut idx = 0;
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let br = brain.r2(p);
                let brain_signal = if br <= 1.0 { 1.0 - 0.5 * br } else { 0.0 };
                let mut regions = [brain_signal, 0.0, 0.0, 0.0];
                for t in &tumors {
                    if t[0].r2(p) <= 1.0 {
                        regions[1] = 1.0;
                    }
                    if t[1].r2(p) <= 1.0 {
                        regions[2] = 1.0;
                    }
                    if t[2].r2(p) <= 1.0 {
                        regions[3] = 1.0;
                    }
                }
                label[idx] = regions[1] as f32;
                label[voxels + idx] = regions[2] as f32;
                label[2 * voxels + idx] = regions[3] as f32;
                for m in 0..4 {
                    let mut v = 0.0;
                    for r in 0..4 {
                        v += spec.contrast[m][r] * regions[r];
                    }
                    v += spec.noise_sigma * std_normal(&mut rng);
                    image[m * voxels + idx] = v as f32;
                }
                idx += 1;
            }
        }
    }
    (
        Tensor::from_vec([4, s, s, s], image).expect("image extent"),
        Tensor::from_vec([3, s, s, s], label).expect("label extent"),
    )
}

/// Directory layout: `<root>/<subject_id>/{image,label}.tvol`.
pub fn generate_phantoms(spec: &PhantomSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut written = Vec::new();
    for subject in 0..spec.subjects {
        let sid = format!("s{subject:04}");
        let dir = out.join(&sid);
        fs::create_dir_all(&dir)?;
        let (image, label) = generate_subject(spec, subject);
        let image_path = dir.join("image.tvol");
        let label_path = dir.join("label.tvol");
        save_volume(&image, &image_path)?;
        save_volume(&label, &label_path)?;
        written.push(image_path);
        written.push(label_path);
    }
    Ok(written)
}

/// Write a [C, D, H, W] tensor in the TVOL format (little-endian f32).
pub fn save_volume<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.rank() != 4 {
        return Err(Error::shape("save_volume", format!("{s} (need [C,D,H,W])")));
    }
    let mut buf = Vec::with_capacity(24 + 4 * t.numel());
    buf.extend_from_slice(TVOL_MAGIC);
    buf.extend_from_slice(&TVOL_VERSION.to_le_bytes());
    for &d in s.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_volume<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let fmt = |reason: &str| Error::Format { path: path.display().to_string(), reason: reason.into() };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 {
        return Err(fmt("truncated header"));
    }
    if &bytes[..4] != TVOL_MAGIC {
        return Err(fmt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != TVOL_VERSION {
        return Err(fmt("unsupported version"));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let numel: usize = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt("extent overflow"))?;
    let expected = 24usize.checked_add(numel.checked_mul(4).ok_or_else(|| fmt("extent overflow"))?)
        .ok_or_else(|| fmt("extent overflow"))?;
    if bytes.len() != expected {
        return Err(fmt("truncated or oversized payload"));
    }
    let data: Vec<T> = bytes[24..]
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::from_vec(dims, data)
}

/// Per-modality z-scoring over nonzero voxels, the only intensity
/// preprocessing applied at load time.
pub fn zscore<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape().clone();
    let spatial: usize = s[1..].iter().product();
    let mut data = image.data().to_vec();
    for c in 0..s[0] {
        let ch = &mut data[c * spatial..(c + 1) * spatial];
        let nonzero: Vec<f64> =
            ch.iter().filter(|v| **v != T::zero()).map(|v| Scalar::to_f64(*v)).collect();
        if nonzero.is_empty() {
            continue;
        }
        let n = nonzero.len() as f64;
        let mean = nonzero.iter().sum::<f64>() / n;
        let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-12);
        for v in ch.iter_mut() {
            *v = T::from_f64((Scalar::to_f64(*v) - mean) * inv);
        }
    }
    Tensor::from_vec(s, data).expect("same extent")
}

fn check_nesting<T: Scalar>(label: &Tensor<T>, path: &Path) -> Result<()> {
    let s = label.shape();
    let spatial: usize = s[1..].iter().product();
    let d = label.data();
    for v in 0..spatial {
        let (wt, tc, at) = (d[v], d[spatial + v], d[2 * spatial + v]);
        for x in [wt, tc, at] {
            if x != T::zero() && x != T::one() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("label values must be 0 or 1, found {x}"),
                });
            }
        }
        if (at == T::one() && tc != T::one()) || (tc == T::one() && wt != T::one()) {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "label nesting AT ⊆ TC ⊆ WT violated".into(),
            });
        }
    }
    Ok(())
}

/// Load every subject under `root`, sorted by subject id; images are
/// z-scored, labels validated for the nesting invariant.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Vec<VolumeSample<T>>> {
    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    for sid in ids {
        let dir = root.join(&sid);
        let image = load_volume::<T>(&dir.join("image.tvol"))?;
        let label_path = dir.join("label.tvol");
        let label = load_volume::<T>(&label_path)?;
        if image.shape()[1..] != label.shape()[1..] {
            return Err(Error::Format {
                path: dir.display().to_string(),
                reason: format!(
                    "image {} and label {} extents differ",
                    image.shape(),
                    label.shape()
                ),
            });
        }
        check_nesting(&label, &label_path)?;
        samples.push(VolumeSample { subject_id: sid, image: zscore(&image), label });
    }
    Ok(samples)
}

/// Uniform random congruent crop of image and label.
pub fn sample_patch<T: Scalar>(
    sample: &VolumeSample<T>,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = sample.image.shape().clone();
    let (d, h, w) = (s[1], s[2], s[3]);
    if size > d || size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} exceeds volume extents {s}"
        )));
    }
    let corner = [
        rng.gen_range(0..=d - size),
        rng.gen_range(0..=h - size),
        rng.gen_range(0..=w - size),
    ];
    Ok((crop(&sample.image, corner, size), crop(&sample.label, corner, size)))
}

fn crop<T: Scalar>(t: &Tensor<T>, corner: [usize; 3], size: usize) -> Tensor<T> {
    let s = t.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let mut data = Vec::with_capacity(c * size * size * size);
    for ci in 0..c {
        for z in 0..size {
            for y in 0..size {
                let base = ((ci * d + corner[0] + z) * h + corner[1] + y) * w + corner[2];
                data.extend_from_slice(&src[base..base + size]);
            }
        }
    }
    Tensor::from_vec([c, size, size, size], data).expect("crop extent")
}

fn window_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut p = 0;
    while p + window < extent {
        pos.push(p);
        p += stride;
    }
    pos.push(extent - window);
    pos.dedup();
    pos
}

/// Tile the volume with overlapping cubic windows, run `forward` on each,
/// and average the per-voxel logits over covering windows. Volumes smaller
/// than the window are zero-padded, then the output is cropped back.
pub fn sliding_window_infer<T: Scalar>(
    image: &Tensor<T>,
    window: usize,
    overlap: f64,
    out_channels: usize,
    mut forward: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let s = image.shape().clone();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} must be in [0, 1)")));
    }
    let stride = (window as f64 * (1.0 - overlap)).floor() as usize;
    if stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} with overlap {overlap} gives a zero stride"
        )));
    }
    if d < window || h < window || w < window {
        let (pd, ph, pw) = (d.max(window), h.max(window), w.max(window));
        let mut padded = vec![T::zero(); c * pd * ph * pw];
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((ci * d + z) * h + y) * w;
                    let dst = ((ci * pd + z) * ph + y) * pw;
                    padded[dst..dst + w].copy_from_slice(&image.data()[src..src + w]);
                }
            }
        }
        let padded = Tensor::from_vec([c, pd, ph, pw], padded)?;
        let full = sliding_window_infer(&padded, window, overlap, out_channels, forward)?;
        return Ok(full.clone_region(d, h, w));
    }

    let mut sum = vec![T::zero(); out_channels * d * h * w];
    let mut cover = vec![0u32; d * h * w];
    for &zd in &window_positions(d, window, stride) {
        for &zh in &window_positions(h, window, stride) {
            for &zw in &window_positions(w, window, stride) {
                let patch = crop(image, [zd, zh, zw], window);
                let logits = forward(&patch)?;
                let ls = logits.shape();
                if ls.dims() != [out_channels, window, window, window] {
                    return Err(Error::shape(
                        "sliding_window_infer",
                        format!("window output {ls}, expected [{out_channels}x{window}^3]"),
                    ));
                }
                let lv = logits.data();
                for co in 0..out_channels {
                    for z in 0..window {
                        for y in 0..window {
                            let src = ((co * window + z) * window + y) * window;
                            let dst = ((co * d + zd + z) * h + zh + y) * w + zw;
                            let row = &mut sum[dst..dst + window];
                            for (o, &v) in row.iter_mut().zip(&lv[src..src + window]) {
                                *o = *o + v;
                            }
                        }
                    }
                }
                for z in 0..window {
                    for y in 0..window {
                        let dst = ((zd + z) * h + zh + y) * w + zw;
                        for cvr in &mut cover[dst..dst + window] {
                            *cvr += 1;
                        }
                    }
                }
            }
        }
    }
    debug_assert!(cover.iter().all(|&c| c >= 1), "every voxel must be covered");
    let spatial = d * h * w;
    for co in 0..out_channels {
        for v in 0..spatial {
            sum[co * spatial + v] = sum[co * spatial + v] / T::from_usize(cover[v] as usize);
        }
    }
    Tensor::from_vec([out_channels, d, h, w], sum)
}

impl<T: Scalar> Tensor<T> {
    /// Crop a padded volume back to its pre-padding extents.
    fn clone_region(&self, d: usize, h: usize, w: usize) -> Tensor<T> {
        let s = self.shape();
        let (c, pd, ph, pw) = (s[0], s[1], s[2], s[3]);
        if (pd, ph, pw) == (d, h, w) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(c * d * h * w);
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let base = ((ci * pd + z) * ph + y) * pw;
                    data.extend_from_slice(&self.data()[base..base + w]);
                }
            }
        }
        Tensor::from_vec([c, d, h, w], data).expect("crop extent")
    }
}
