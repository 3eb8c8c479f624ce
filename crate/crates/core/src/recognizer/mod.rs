//! Attention encoder-decoder that reads a page image and emits the
//! transcript token sequence.
//!
//! A small stride-2 convolution stack turns the image into a feature grid;
//! an LSTM decoder with additive attention over the grid cells emits one
//! token per step. Attention maps double as a character locator: the
//! argmax cell of a token's map is taken as that character's position.
//!
//! Everything is plain `f64` ndarray code with hand-written backprop, so
//! gradients can be verified against central finite differences.

mod backward;
mod ckpt;
mod forward;
mod gradcheck;
mod params;
mod train;

pub use backward::sample_loss_grads;
pub use ckpt::{load_params, save_params, CKPT_HEADER};
pub use forward::{
    attend, decode_step, encode, greedy_decode, greedy_decode_gray, to_gray, DecodeOutput,
};
pub use gradcheck::{grad_check, grad_check_with, toy_grad_check};
pub use params::ModelParams;
pub use train::{
    build_sample_bank, sample_from_image, save_training_log, train_curriculum, EpochLog,
    TrainOutcome, TrainSample, Trainer, TRAINLOG_HEADER,
};

use crate::annotation::CodepointMap;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// Reserved token indices. Codepoint tokens start at [`Vocabulary::BASE`].
pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

/// Dense, order-stable token table: four specials followed by the
/// codepoints in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    codepoints: Vec<u32>,
}

impl Vocabulary {
    pub const BASE: usize = 4;

    pub fn from_codepoints(cps: &[u32]) -> Vocabulary {
        let mut codepoints = cps.to_vec();
        codepoints.sort_unstable();
        codepoints.dedup();
        Vocabulary { codepoints }
    }

    pub fn from_map(map: &CodepointMap) -> Vocabulary {
        let cps: Vec<u32> = map.iter().map(|(cp, _)| cp).collect();
        Vocabulary::from_codepoints(&cps)
    }

    pub fn len(&self) -> usize {
        Self::BASE + self.codepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the four specials are always present
    }

    pub fn codepoints(&self) -> &[u32] {
        &self.codepoints
    }

    pub fn token_of_codepoint(&self, cp: u32) -> Option<usize> {
        self.codepoints.binary_search(&cp).ok().map(|i| Self::BASE + i)
    }

    pub fn codepoint_of_token(&self, token: usize) -> Option<u32> {
        token
            .checked_sub(Self::BASE)
            .and_then(|i| self.codepoints.get(i).copied())
    }

    /// Encode a flat transcript (lines separated by `\n`) into tokens,
    /// without the start/end markers.
    pub fn encode(&self, text: &str, context: &str) -> Result<Vec<usize>> {
        let mut tokens = Vec::with_capacity(text.chars().count());
        for ch in text.chars() {
            if ch == crate::lines::LINE_SEPARATOR {
                tokens.push(SEP);
            } else {
                let cp = ch as u32;
                tokens.push(self.token_of_codepoint(cp).ok_or_else(|| {
                    Error::UnknownCodepoint { codepoint: cp, page: context.to_string() }
                })?);
            }
        }
        Ok(tokens)
    }

    /// Render tokens back to a flat transcript; specials other than `<sep>`
    /// are dropped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        for &t in tokens {
            if t == SEP {
                out.push(crate::lines::LINE_SEPARATOR);
            } else if let Some(cp) = self.codepoint_of_token(t) {
                if let Some(ch) = char::from_u32(cp) {
                    out.push(ch);
                }
            }
        }
        out
    }
}

/// Architecture of the model (everything the checkpoint must restore).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Output channels of each stride-2 convolution block.
    pub channels: Vec<usize>,
    /// Token embedding width; also the width the output projections map into.
    pub embed_dim: usize,
    /// LSTM hidden width.
    pub hidden_dim: usize,
    /// Attention scoring width.
    pub attn_dim: usize,
    /// Append normalized (row, col) coordinate channels to the feature grid
    /// so attention can address positions, not only content.
    pub attend_coords: bool,
    /// Maximum accepted image side in pixels.
    pub max_image: u32,
    pub vocab: Vocabulary,
}

impl ModelConfig {
    pub fn new(vocab: Vocabulary) -> ModelConfig {
        ModelConfig {
            channels: vec![16, 32, 64],
            embed_dim: 48,
            hidden_dim: 64,
            attn_dim: 48,
            attend_coords: true,
            max_image: 512,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channels must be nonempty and positive".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.max_image == 0 {
            return Err(Error::Config("max_image must be positive".into()));
        }
        Ok(())
    }

    /// Pixels per feature cell (both axes): 2 per convolution block.
    pub fn stride(&self) -> u32 {
        1u32 << self.channels.len()
    }

    /// Channels of the raw feature grid.
    pub fn feat_dim(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Channels attention and context actually see (raw + coordinates).
    pub fn ctx_dim(&self) -> usize {
        self.feat_dim() + if self.attend_coords { 2 } else { 0 }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub rho: f64,
    pub epsilon: f64,
    /// Update-scale multiplier applied to each AdaDelta step.
    pub scale: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            rho: 0.95,
            epsilon: 1e-6,
            scale: 0.1,
            clip_norm: 5.0,
            batch_size: 8,
            max_decode_len: 160,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config("rho must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.scale > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("epsilon, scale, and clip_norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoded image: one feature vector per grid cell, row-major cells.
/// `feats[[r*wp + c, :]]` is the cell at feature row `r`, column `c`.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub feats: Array2<f64>,
    pub hp: usize,
    pub wp: usize,
    pub stride: u32,
    pub image_w: u32,
    pub image_h: u32,
}

impl FeatureGrid {
    pub fn cells(&self) -> usize {
        self.hp * self.wp
    }
}

/// Normalized attention weights over the feature grid.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub weights: Array2<f64>,
}

impl AttentionMap {
    /// Argmax cell; ties resolve to the smallest row, then smallest column.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut best_w = f64::NEG_INFINITY;
        for ((r, c), &w) in self.weights.indexed_iter() {
            if w > best_w {
                best_w = w;
                best = (r, c);
            }
        }
        best
    }
}

/// Recurrent decoder state carried between steps.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Array1<f64>,
    pub cell: Array1<f64>,
    /// Previous context vector, fed into the next LSTM input.
    pub ctx: Array1<f64>,
}

impl DecoderState {
    pub fn initial(config: &ModelConfig) -> DecoderState {
        DecoderState {
            h: Array1::zeros(config.hidden_dim),
            cell: Array1::zeros(config.hidden_dim),
            ctx: Array1::zeros(config.ctx_dim()),
        }
    }
}

/// Pixel position of a token read off its attention map: the center of the
/// argmax cell, clamped into the image.
pub fn locate_from_attention(map: &AttentionMap, grid: &FeatureGrid) -> (f64, f64) {
    let (row, col) = map.peak();
    let s = grid.stride as f64;
    let x = ((col as f64 + 0.5) * s).min(grid.image_w.saturating_sub(1) as f64);
    let y = ((row as f64 + 0.5) * s).min(grid.image_h.saturating_sub(1) as f64);
    (x, y)
}
