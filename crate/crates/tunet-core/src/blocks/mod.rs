//! Composable network blocks: residual conv blocks, the token bottleneck
//! (TokenLearner / TokenFuser), and the pre-norm Transformer stack.

mod resblock;
mod token;
mod transformer;

pub use resblock::{ConvBlock, ResBlock, Resample};
pub use token::{AttentionMaps, TokenLearner, TokenFuser, TokenSet};
pub use transformer::{self_attention, AttentionHead, TransformerBlock, TransformerStack};

/// Epsilon shared by both normalizations.
pub const NORM_EPS: f64 = 1e-5;
