//! Flat `section.key = value` run configuration: parse-then-validate, every
//! default overridable, unknown keys rejected. The model section doubles as
//! the config block embedded in checkpoints.

use std::fmt::Write as _;

use crate::data::PhantomSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(Variant::TokenUnetTransformer),
            train: TrainConfig::default(),
            phantom: PhantomSpec::default(),
        }
    }
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidArgument(format!(
                "config line {}: expected `section.key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse `{value}`")))
}

fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let v: Vec<f64> = parse_list(key, value)?;
    if v.len() != 2 {
        return Err(Error::InvalidArgument(format!("config key {key}: expected two values")));
    }
    Ok((v[0], v[1]))
}

fn parse_opt_usize(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "auto" | "none" => Ok(None),
        _ => Ok(Some(parse_num(key, value)?)),
    }
}

fn apply_model(cfg: &mut ModelConfig, key: &str, full: &str, value: &str) -> Result<()> {
    match key {
        "variant" => cfg.variant = Variant::parse(value)?,
        "in_channels" => cfg.in_channels = parse_num(full, value)?,
        "out_channels" => cfg.out_channels = parse_num(full, value)?,
        "stage_widths" => cfg.stage_widths = parse_list(full, value)?,
        "blocks_per_stage" => cfg.blocks_per_stage = parse_num(full, value)?,
        "token_count" => cfg.token_count = parse_num(full, value)?,
        "token_width" => cfg.token_width = parse_opt_usize(full, value)?,
        "decoupled_token_width" => cfg.decoupled_token_width = parse_opt_usize(full, value)?,
        "heads" => cfg.heads = parse_num(full, value)?,
        "transformer_blocks" => cfg.transformer_blocks = parse_num(full, value)?,
        "seed" => cfg.seed = parse_num(full, value)?,
        _ => return Err(Error::InvalidArgument(format!("unknown config key {full}"))),
    }
    Ok(())
}

fn apply_train(cfg: &mut TrainConfig, key: &str, full: &str, value: &str) -> Result<()> {
    match key {
        "epochs" => cfg.epochs = parse_num(full, value)?,
        "folds" => cfg.folds = parse_num(full, value)?,
        "base_lr" => cfg.base_lr = parse_num(full, value)?,
        "momentum" => cfg.momentum = parse_num(full, value)?,
        "accumulation_steps" => cfg.accumulation_steps = parse_num(full, value)?,
        "batch_size" => cfg.batch_size = parse_num(full, value)?,
        "patch_size" => cfg.patch_size = parse_num(full, value)?,
        "loss_eps" => cfg.loss_eps = parse_num(full, value)?,
        "overlap" => cfg.overlap = parse_num(full, value)?,
        "seed" => cfg.seed = parse_num(full, value)?,
        "fold_seed" => cfg.fold_seed = parse_num(full, value)?,
        _ => return Err(Error::InvalidArgument(format!("unknown config key {full}"))),
    }
    Ok(())
}

fn apply_phantom(cfg: &mut PhantomSpec, key: &str, full: &str, value: &str) -> Result<()> {
    match key {
        "size" => cfg.size = parse_num(full, value)?,
        "subjects" => cfg.subjects = parse_num(full, value)?,
        "seed" => cfg.seed = parse_num(full, value)?,
        "noise_sigma" => cfg.noise_sigma = parse_num(full, value)?,
        "tumors_min" => cfg.tumors_min = parse_num(full, value)?,
        "tumors_max" => cfg.tumors_max = parse_num(full, value)?,
        "wt_radius_frac" => cfg.wt_radius_frac = parse_pair(full, value)?,
        "tc_ratio" => cfg.tc_ratio = parse_pair(full, value)?,
        "at_ratio" => cfg.at_ratio = parse_pair(full, value)?,
        "contrast" => {
            let v: Vec<f64> = parse_list(full, value)?;
            if v.len() != 16 {
                return Err(Error::InvalidArgument(format!(
                    "config key {full}: expected 16 values (4 modalities x 4 regions), got {}",
                    v.len()
                )));
            }
            for m in 0..4 {
                for r in 0..4 {
                    cfg.contrast[m][r] = v[m * 4 + r];
                }
            }
        }
        _ => return Err(Error::InvalidArgument(format!("unknown config key {full}"))),
    }
    Ok(())
}

impl RunConfig {
    /// Apply overrides on top of defaults. Every key must be known.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_lines(text)? {
            let Some((section, rest)) = key.split_once('.') else {
                return Err(Error::InvalidArgument(format!(
                    "config key {key}: expected `section.key`"
                )));
            };
            match section {
                "model" => apply_model(&mut self.model, rest, &key, &value)?,
                "train" => apply_train(&mut self.train, rest, &key, &value)?,
                "phantom" => apply_phantom(&mut self.phantom, rest, &key, &value)?,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown config section `{section}` in key {key}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.phantom.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = model_section_text(&self.model);
        let t = &self.train;
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.folds = {}", t.folds);
        let _ = writeln!(out, "train.base_lr = {}", t.base_lr);
        let _ = writeln!(out, "train.momentum = {}", t.momentum);
        let _ = writeln!(out, "train.accumulation_steps = {}", t.accumulation_steps);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.patch_size = {}", t.patch_size);
        let _ = writeln!(out, "train.loss_eps = {}", t.loss_eps);
        let _ = writeln!(out, "train.overlap = {}", t.overlap);
        let _ = writeln!(out, "train.seed = {}", t.seed);
        let _ = writeln!(out, "train.fold_seed = {}", t.fold_seed);
        let p = &self.phantom;
        let _ = writeln!(out, "phantom.size = {}", p.size);
        let _ = writeln!(out, "phantom.subjects = {}", p.subjects);
        let _ = writeln!(out, "phantom.seed = {}", p.seed);
        let _ = writeln!(out, "phantom.noise_sigma = {}", p.noise_sigma);
        let _ = writeln!(out, "phantom.tumors_min = {}", p.tumors_min);
        let _ = writeln!(out, "phantom.tumors_max = {}", p.tumors_max);
        let _ = writeln!(out, "phantom.wt_radius_frac = {},{}", p.wt_radius_frac.0, p.wt_radius_frac.1);
        let _ = writeln!(out, "phantom.tc_ratio = {},{}", p.tc_ratio.0, p.tc_ratio.1);
        let _ = writeln!(out, "phantom.at_ratio = {},{}", p.at_ratio.0, p.at_ratio.1);
        let contrast: Vec<String> =
            p.contrast.iter().flatten().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "phantom.contrast = {}", contrast.join(","));
        out
    }
}

/// The model section alone, the canonical config block inside checkpoints.
pub fn model_section_text(m: &ModelConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model.variant = {}", m.variant);
    let _ = writeln!(out, "model.in_channels = {}", m.in_channels);
    let _ = writeln!(out, "model.out_channels = {}", m.out_channels);
    let widths: Vec<String> = m.stage_widths.iter().map(|w| w.to_string()).collect();
    let _ = writeln!(out, "model.stage_widths = {}", widths.join(","));
    let _ = writeln!(out, "model.blocks_per_stage = {}", m.blocks_per_stage);
    let _ = writeln!(out, "model.token_count = {}", m.token_count);
    let _ = writeln!(
        out,
        "model.token_width = {}",
        m.token_width.map_or("auto".to_string(), |v| v.to_string())
    );
    let _ = writeln!(
        out,
        "model.decoupled_token_width = {}",
        m.decoupled_token_width.map_or("none".to_string(), |v| v.to_string())
    );
    let _ = writeln!(out, "model.heads = {}", m.heads);
    let _ = writeln!(out, "model.transformer_blocks = {}", m.transformer_blocks);
    let _ = writeln!(out, "model.seed = {}", m.seed);
    out
}

/// Parse a standalone model section (checkpoint config block).
pub fn parse_model_section(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk(Variant::UnetStar);
    for (key, value) in parse_lines(text)? {
        let Some(rest) = key.strip_prefix("model.") else {
            return Err(Error::InvalidArgument(format!(
                "checkpoint config block: unexpected key {key}"
            )));
        };
        apply_model(&mut cfg, rest, &key, &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.model.stage_widths, cfg.model.stage_widths);
        assert_eq!(back.model.variant, cfg.model.variant);
        assert_eq!(back.train.epochs, cfg.train.epochs);
        assert_eq!(back.phantom.contrast, cfg.phantom.contrast);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("model.bogus = 1").unwrap_err().to_string();
        assert!(err.contains("model.bogus"), "{err}");
        assert!(RunConfig::parse("nosuch.key = 1").is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse(
            "model.variant = unet_star\nmodel.stage_widths = 4, 8, 12\ntrain.epochs = 3\nphantom.size = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.model.variant, Variant::UnetStar);
        assert_eq!(cfg.model.stage_widths, vec![4, 8, 12]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.phantom.size, 16);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# comment\n\n  train.folds = 2  \n").unwrap();
        assert_eq!(cfg.train.folds, 2);
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert!(RunConfig::parse("train.folds 2").is_err());
    }

    #[test]
    fn model_section_round_trips() {
        let mut m = ModelConfig::paper(Variant::TokenUnetTransformer);
        m.decoupled_token_width = Some(128);
        m.seed = 99;
        let text = model_section_text(&m);
        let back = parse_model_section(&text).unwrap();
        assert_eq!(back.variant, m.variant);
        assert_eq!(back.stage_widths, m.stage_widths);
        assert_eq!(back.decoupled_token_width, Some(128));
        assert_eq!(back.seed, 99);
    }
}
