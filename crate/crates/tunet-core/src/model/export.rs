//! Attention-map export: per token map, binary PGM slices at 25% / 50% /
//! 75% depth (min-max normalized per map) plus the raw maps as one TVOL
//! volume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::save_volume;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Write one 8-bit binary PGM (P5).
pub(crate) fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Run the model on `image` and write its TokenLearner maps under `out`:
/// 3 axial slices per map plus `maps.tvol` with the raw [N, D, H, W] scores.
/// Returns the written paths.
pub fn export_attention_maps<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if !model.config.variant.has_tokens() {
        return Err(Error::UnsupportedVariant(format!(
            "{} has no attention maps to export",
            model.config.variant
        )));
    }
    let mut tape = Tape::forward_only();
    let pass = model.forward(&mut tape, image)?;
    let maps_var = pass.attention_maps.expect("token variants return maps");
    let maps = tape.value(maps_var).clone();

    fs::create_dir_all(out)?;
    let s = maps.shape().clone();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let spatial = d * h * w;
    let mut written = Vec::new();
    for map_idx in 0..n {
        let map = &maps.data()[map_idx * spatial..(map_idx + 1) * spatial];
        let lo = Scalar::to_f64(map.iter().copied().fold(T::infinity(), T::min));
        let hi = Scalar::to_f64(map.iter().copied().fold(T::neg_infinity(), T::max));
        let range = hi - lo;
        for (tag, frac) in [("d25", 0.25f64), ("d50", 0.5), ("d75", 0.75)] {
            let depth = ((d as f64 * frac) as usize).min(d - 1);
            let slice = &map[depth * h * w..(depth + 1) * h * w];
            let pixels: Vec<u8> = slice
                .iter()
                .map(|&v| {
                    if range == 0.0 {
                        0u8
                    } else {
                        (((Scalar::to_f64(v) - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8
                    }
                })
                .collect();
            let path = out.join(format!("map{map_idx:02}_{tag}.pgm"));
            write_pgm(&path, w, h, &pixels)?;
            written.push(path);
        }
    }
    let raw_path = out.join("maps.tvol");
    save_volume(&maps, &raw_path)?;
    written.push(raw_path);
    Ok(written)
}
