//! Model assembly for the four architecture variants, forward inference,
//! parameter accounting, checkpointing, and attention-map export.
//!
//! `unet_star` is the additive-skip residual GELU UNet with the deepest
//! stage removed; token variants insert TokenLearner (+ Transformer) +
//! TokenFuser at its bottleneck; `unet_baseline` is the conventional
//! concatenating-skip comparator with one extra, deeper stage and LeakyReLU
//! activations.

mod checkpoint;
mod export;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use export::export_attention_maps;

use crate::blocks::{ConvBlock, Resample, ResBlock, TokenFuser, TokenLearner, TokenSet, TransformerStack};
use crate::error::{Error, Result};
use crate::init::{component_rng, normal_fan_in, ParamId, ParamSet, PVars};
use crate::ops::{conv, elementwise, matmul, pool};
use crate::scalar::Scalar;
use crate::tape::{Phase, Tape, Var};
use crate::tensor::Tensor;

/// Deepest width the baseline's extra stage is allowed to reach.
const BASELINE_WIDTH_CAP: usize = 320;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    UnetBaseline,
    UnetStar,
    TokenUnetPlain,
    TokenUnetTransformer,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet_baseline" => Ok(Variant::UnetBaseline),
            "unet_star" => Ok(Variant::UnetStar),
            "token_unet_plain" => Ok(Variant::TokenUnetPlain),
            "token_unet_transformer" => Ok(Variant::TokenUnetTransformer),
            other => Err(Error::UnsupportedVariant(format!(
                "{other} (expected unet_baseline | unet_star | token_unet_plain | token_unet_transformer)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::UnetBaseline => "unet_baseline",
            Variant::UnetStar => "unet_star",
            Variant::TokenUnetPlain => "token_unet_plain",
            Variant::TokenUnetTransformer => "token_unet_transformer",
        }
    }

    pub fn all() -> [Variant; 4] {
        [Variant::UnetBaseline, Variant::UnetStar, Variant::TokenUnetPlain, Variant::TokenUnetTransformer]
    }

    pub fn has_tokens(&self) -> bool {
        matches!(self, Variant::TokenUnetPlain | Variant::TokenUnetTransformer)
    }

    pub fn has_transformer(&self) -> bool {
        matches!(self, Variant::TokenUnetTransformer)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Strictly increasing; the last entry is the bottleneck width of the
    /// residual variants. The baseline appends one deeper stage on top.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub token_count: usize,
    /// Token width; None means "bottleneck width", the only legal value
    /// without decoupling projections.
    pub token_width: Option<usize>,
    /// When set, tokens are linearly expanded to this width before the
    /// Transformer and shrunk back after it.
    pub decoupled_token_width: Option<usize>,
    pub heads: usize,
    pub transformer_blocks: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: everything verifiable on a laptop CPU.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            variant,
            in_channels: 4,
            out_channels: 3,
            stage_widths: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            token_count: 8,
            token_width: None,
            decoupled_token_width: None,
            heads: 8,
            transformer_blocks: 4,
            seed: 0,
        }
    }

    /// Published-scale widths (bottleneck 256).
    pub fn paper(variant: Variant) -> Self {
        ModelConfig { stage_widths: vec![32, 64, 128, 256], ..Self::desk(variant) }
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    pub fn effective_token_width(&self) -> usize {
        self.token_width.unwrap_or_else(|| self.bottleneck_width())
    }

    /// Width the Transformer actually runs at.
    pub fn transformer_dim(&self) -> usize {
        self.decoupled_token_width.unwrap_or_else(|| self.effective_token_width())
    }

    /// The baseline's widths: one extra stage, doubling capped at 320.
    pub fn baseline_widths(&self) -> Vec<usize> {
        let mut widths = self.stage_widths.clone();
        widths.push((2 * self.bottleneck_width()).min(BASELINE_WIDTH_CAP));
        widths
    }

    pub fn downsamplings(&self) -> usize {
        match self.variant {
            Variant::UnetBaseline => self.baseline_widths().len() - 1,
            _ => self.stage_widths.len() - 1,
        }
    }

    /// Input extents must be divisible by this.
    pub fn spatial_stride(&self) -> usize {
        1 << self.downsamplings()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if self.stage_widths.len() < 2 {
            return bad(format!("need at least 2 stage widths, got {:?}", self.stage_widths));
        }
        if !self.stage_widths.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("stage widths must be strictly increasing: {:?}", self.stage_widths));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be >= 1".into());
        }
        if self.variant.has_tokens() {
            if self.token_count == 0 {
                return bad("token_count must be >= 1".into());
            }
            let f = self.bottleneck_width();
            if f % 4 != 0 {
                return bad(format!("bottleneck width {f} must be divisible by 4 for the token MLPs"));
            }
            if let Some(w) = self.token_width {
                if w != f {
                    return bad(format!(
                        "token_width {w} must equal the bottleneck width {f}; use decoupled_token_width to run the transformer at a different width"
                    ));
                }
            }
        }
        if self.variant.has_transformer() {
            let d = self.transformer_dim();
            if self.heads == 0 || d % self.heads != 0 {
                return bad(format!("transformer width {d} must divide evenly into {} heads", self.heads));
            }
            if self.transformer_blocks == 0 {
                return bad("transformer_blocks must be >= 1".into());
            }
        } else if self.decoupled_token_width.is_some() {
            return bad("decoupled_token_width requires the token_unet_transformer variant".into());
        }
        Ok(())
    }
}

struct TokenBottleneck {
    learner: TokenLearner,
    transformer: Option<TransformerStack>,
    fuser: TokenFuser,
    expand: Option<ParamId>,
    shrink: Option<ParamId>,
}

enum Net {
    Residual {
        encoder_stages: Vec<Vec<ResBlock>>,
        decoder_stages: Vec<Vec<ResBlock>>,
        bottleneck: Option<TokenBottleneck>,
    },
    Baseline {
        encoder_stages: Vec<Vec<ConvBlock>>,
        decoder_stages: Vec<BaselineDecoder>,
    },
}

struct BaselineDecoder {
    up: ConvBlock,
    fuse: ConvBlock,
    refine: ConvBlock,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    net: Net,
    head_w: ParamId,
    head_b: ParamId,
}

/// Result of one forward pass; values are read out of the tape.
pub struct ForwardPass {
    pub logits: Var,
    /// TokenLearner maps, present for token variants.
    pub attention_maps: Option<Var>,
    /// Handles for every parameter, aligned with `model.params`.
    pub pvars: PVars,
    /// The registered input leaf.
    pub input: Var,
}

pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParamSet::new();
    let seed = config.seed;
    let net = match config.variant {
        Variant::UnetBaseline => build_baseline(config, &mut params),
        _ => build_residual(config, &mut params)?,
    };
    let w0 = config.stage_widths[0];
    let mut rng = component_rng(seed, "head");
    let head_w = params.add("head.weight", normal_fan_in([config.out_channels, w0], w0, &mut rng));
    let head_b = params.add("head.bias", Tensor::zeros([config.out_channels]));
    Ok(Model { config: config.clone(), params, net, head_w, head_b })
}

fn build_residual<T: Scalar>(config: &ModelConfig, params: &mut ParamSet<T>) -> Result<Net> {
    let widths = &config.stage_widths;
    let seed = config.seed;
    let mut encoder_stages = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        let (c_in, mode) = if i == 0 {
            (config.in_channels, Resample::None)
        } else {
            (widths[i - 1], Resample::Down)
        };
        let mut stage = vec![ResBlock::init(params, &format!("encoder.s{i}.b0"), c_in, w, mode, seed)];
        for j in 1..config.blocks_per_stage {
            stage.push(ResBlock::init(params, &format!("encoder.s{i}.b{j}"), w, w, Resample::None, seed));
        }
        encoder_stages.push(stage);
    }

    let bottleneck = if config.variant.has_tokens() {
        let f = config.bottleneck_width();
        let n = config.token_count;
        let learner = TokenLearner::init(params, "token_learner", f, n, seed)?;
        let (transformer, expand, shrink) = if config.variant.has_transformer() {
            let d = config.transformer_dim();
            let (expand, shrink) = if let Some(dt) = config.decoupled_token_width {
                let mut rng = component_rng(seed, "decouple");
                (
                    Some(params.add("decouple.expand", normal_fan_in([f, dt], f, &mut rng))),
                    Some(params.add("decouple.shrink", normal_fan_in([dt, f], dt, &mut rng))),
                )
            } else {
                (None, None)
            };
            let stack =
                TransformerStack::init(params, "transformer", d, config.heads, config.transformer_blocks, seed)?;
            (Some(stack), expand, shrink)
        } else {
            (None, None, None)
        };
        let fuser = TokenFuser::init(params, "token_fuser", f, n, seed)?;
        Some(TokenBottleneck { learner, transformer, fuser, expand, shrink })
    } else {
        None
    };

    let mut decoder_stages = Vec::with_capacity(widths.len() - 1);
    for i in 0..widths.len() - 1 {
        let mut stage =
            vec![ResBlock::init(params, &format!("decoder.s{i}.b0"), widths[i + 1], widths[i], Resample::Up, seed)];
        for j in 1..config.blocks_per_stage {
            stage.push(ResBlock::init(params, &format!("decoder.s{i}.b{j}"), widths[i], widths[i], Resample::None, seed));
        }
        decoder_stages.push(stage);
    }
    Ok(Net::Residual { encoder_stages, decoder_stages, bottleneck })
}

fn build_baseline<T: Scalar>(config: &ModelConfig, params: &mut ParamSet<T>) -> Net {
    let widths = config.baseline_widths();
    let seed = config.seed;
    let mut encoder_stages = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        let (c_in, stride) = if i == 0 { (config.in_channels, 1) } else { (widths[i - 1], 2) };
        let mut stage = vec![ConvBlock::init(params, &format!("encoder.s{i}.b0"), c_in, w, stride, seed)];
        for j in 1..config.blocks_per_stage {
            stage.push(ConvBlock::init(params, &format!("encoder.s{i}.b{j}"), w, w, 1, seed));
        }
        encoder_stages.push(stage);
    }
    let mut decoder_stages = Vec::with_capacity(widths.len() - 1);
    for i in 0..widths.len() - 1 {
        let (w_hi, w) = (widths[i + 1], widths[i]);
        decoder_stages.push(BaselineDecoder {
            up: ConvBlock::init(params, &format!("decoder.s{i}.up"), w_hi, w, 1, seed),
            fuse: ConvBlock::init(params, &format!("decoder.s{i}.c0"), 2 * w, w, 1, seed),
            refine: ConvBlock::init(params, &format!("decoder.s{i}.c1"), w, w, 1, seed),
        });
    }
    Net::Baseline { encoder_stages, decoder_stages }
}

impl<T: Scalar> Model<T> {
    /// Forward pass on a [C, D, H, W] input. Spatial extents must be
    /// divisible by the model's stride; logits are pre-sigmoid.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<ForwardPass> {
        let s = x.shape();
        if s.rank() != 4 || s[0] != self.config.in_channels {
            return Err(Error::shape(
                "model_forward",
                format!("input {s}, expected [{}, D, H, W]", self.config.in_channels),
            ));
        }
        let stride = self.config.spatial_stride();
        if s[1] % stride != 0 || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::shape(
                "model_forward",
                format!("spatial extents of {s} must be divisible by {stride}"),
            ));
        }
        let pvars = self.params.vars(tape);
        let input = tape.leaf(x);
        let (logits, attention_maps) = match &self.net {
            Net::Residual { encoder_stages, decoder_stages, bottleneck } => {
                self.forward_residual(tape, &pvars, input, encoder_stages, decoder_stages, bottleneck)?
            }
            Net::Baseline { encoder_stages, decoder_stages } => {
                self.forward_baseline(tape, &pvars, input, encoder_stages, decoder_stages)?
            }
        };
        Ok(ForwardPass { logits, attention_maps, pvars, input })
    }

    fn forward_residual(
        &self,
        tape: &mut Tape<T>,
        pv: &PVars,
        input: Var,
        encoder_stages: &[Vec<ResBlock>],
        decoder_stages: &[Vec<ResBlock>],
        bottleneck: &Option<TokenBottleneck>,
    ) -> Result<(Var, Option<Var>)> {
        tape.set_phase(Phase::Encoder);
        let mut h = input;
        let mut skips = Vec::with_capacity(encoder_stages.len() - 1);
        for (i, stage) in encoder_stages.iter().enumerate() {
            for block in stage {
                h = block.forward(tape, pv, h)?;
            }
            if i + 1 < encoder_stages.len() {
                skips.push(h);
            }
        }

        let mut maps = None;
        if let Some(tb) = bottleneck {
            tape.set_phase(Phase::TokenLearner);
            let (pooled, m) = tb.learner.forward(tape, pv, h)?;
            maps = Some(m.values);
            let mut tokens = pooled;
            if let Some(stack) = &tb.transformer {
                tape.set_phase(Phase::Bottleneck);
                if let Some(we) = tb.expand {
                    tokens = TokenSet { values: matmul::matmul(tape, tokens.values, pv.var(we))? };
                }
                tokens = stack.forward(tape, pv, &tokens)?;
                if let Some(ws) = tb.shrink {
                    tokens = TokenSet { values: matmul::matmul(tape, tokens.values, pv.var(ws))? };
                }
            }
            tape.set_phase(Phase::TokenFuser);
            h = tb.fuser.forward(tape, pv, h, &tokens)?;
        }

        tape.set_phase(Phase::Decoder);
        for i in (0..decoder_stages.len()).rev() {
            for block in &decoder_stages[i] {
                h = block.forward(tape, pv, h)?;
            }
            h = elementwise::add(tape, h, skips[i])?;
        }
        let logits = conv::pointwise_conv3d(tape, h, pv.var(self.head_w), Some(pv.var(self.head_b)))?;
        tape.set_phase(Phase::Other);
        Ok((logits, maps))
    }

    fn forward_baseline(
        &self,
        tape: &mut Tape<T>,
        pv: &PVars,
        input: Var,
        encoder_stages: &[Vec<ConvBlock>],
        decoder_stages: &[BaselineDecoder],
    ) -> Result<(Var, Option<Var>)> {
        tape.set_phase(Phase::Encoder);
        let mut h = input;
        let mut skips = Vec::with_capacity(encoder_stages.len() - 1);
        for (i, stage) in encoder_stages.iter().enumerate() {
            for block in stage {
                h = block.forward(tape, pv, h)?;
            }
            if i + 1 < encoder_stages.len() {
                skips.push(h);
            }
        }
        tape.set_phase(Phase::Decoder);
        for i in (0..decoder_stages.len()).rev() {
            let stage = &decoder_stages[i];
            h = pool::trilinear_upsample3d(tape, h)?;
            h = stage.up.forward(tape, pv, h)?;
            h = elementwise::concat(tape, &[skips[i], h], 0)?;
            h = stage.fuse.forward(tape, pv, h)?;
            h = stage.refine.forward(tape, pv, h)?;
        }
        let logits = conv::pointwise_conv3d(tape, h, pv.var(self.head_w), Some(pv.var(self.head_b)))?;
        tape.set_phase(Phase::Other);
        Ok((logits, None))
    }

    /// Scalar counts by top-level component plus the grand total, from
    /// enumeration of the stored arrays.
    pub fn count_parameters(&self) -> ParamCounts {
        let mut components: Vec<(String, usize)> = Vec::new();
        for entry in self.params.iter() {
            let comp = entry.name.split('.').next().unwrap_or("other").to_string();
            match components.iter_mut().find(|(name, _)| *name == comp) {
                Some((_, n)) => *n += entry.tensor.numel(),
                None => components.push((comp, entry.tensor.numel())),
            }
        }
        let total = components.iter().map(|(_, n)| n).sum();
        ParamCounts { components, total }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCounts {
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCounts {
    pub fn component(&self, name: &str) -> usize {
        self.components.iter().find(|(c, _)| c == name).map_or(0, |(_, n)| *n)
    }
}
