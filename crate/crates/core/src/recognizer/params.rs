//! Model parameters: typed tensors plus uniform flat access for the
//! optimizer, gradient clipping, checkpointing, and finite differences.

use super::ModelConfig;
#[cfg(test)]
use super::Vocabulary;
use crate::error::{Error, Result};
use crate::seed;
use ndarray::{Array1, Array2};
use rand::Rng;

/// One stride-2 convolution block (3×3 kernel, pad 1, ReLU). The weight is
/// stored in patch layout: `[out_channels, in_channels * 9]`, one column
/// per (in-channel, kernel-row, kernel-col) tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// LSTM weights with gate order (input, forget, cell, output) stacked
/// along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b: Array1<f64>,
}

/// Additive attention scorer: `score_j = v · tanh(w_h·h + u_f·f_j + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub w_h: Array2<f64>,
    pub u_f: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
}

/// All trainable tensors. The same struct doubles as a gradient holder
/// (via [`ModelParams::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv: Vec<ConvLayer>,
    /// Token embedding table, one row per vocabulary entry.
    pub embed: Array2<f64>,
    pub lstm: LstmParams,
    pub attn: AttnParams,
    /// Maps the hidden state into embedding space for the output sum.
    pub hidden_proj: Array2<f64>,
    /// Maps the context vector into embedding space for the output sum.
    pub context_proj: Array2<f64>,
    /// Maps the embedding-space sum onto vocabulary logits.
    pub out_proj: Array2<f64>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-lim..=lim))
}

impl ModelParams {
    /// Seeded random initialization. Biases start at zero except the LSTM
    /// forget gate, which starts at 1 to keep early memory open.
    pub fn init(config: ModelConfig, seed_value: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive_seed(seed_value, "params"));
        let mut conv = Vec::with_capacity(config.channels.len());
        let mut in_ch = 1usize;
        for &out_ch in &config.channels {
            let fan_in = in_ch * 9;
            conv.push(ConvLayer {
                w: glorot(&mut rng, out_ch, fan_in, fan_in, out_ch),
                b: Array1::zeros(out_ch),
            });
            in_ch = out_ch;
        }
        let v = config.vocab_size();
        let p = config.embed_dim;
        let h = config.hidden_dim;
        let a = config.attn_dim;
        let dc = config.ctx_dim();
        let x_dim = p + dc;

        let embed = glorot(&mut rng, v, p, v, p);
        let lstm = LstmParams {
            w_ih: glorot(&mut rng, 4 * h, x_dim, x_dim, h),
            w_hh: glorot(&mut rng, 4 * h, h, h, h),
            b: {
                let mut b = Array1::zeros(4 * h);
                b.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
                b
            },
        };
        let attn = AttnParams {
            w_h: glorot(&mut rng, a, h, h, a),
            u_f: glorot(&mut rng, a, dc, dc, a),
            b: Array1::zeros(a),
            v: glorot(&mut rng, 1, a, a, 1).row(0).to_owned(),
        };
        let hidden_proj = glorot(&mut rng, p, h, h, p);
        let context_proj = glorot(&mut rng, p, dc, dc, p);
        let out_proj = glorot(&mut rng, v, p, p, v);

        Ok(ModelParams {
            config,
            conv,
            embed,
            lstm,
            attn,
            hidden_proj,
            context_proj,
            out_proj,
        })
    }

    /// Same shapes, all zeros — the gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for s in z.slices_mut() {
            for v in s {
                *v = 0.0;
            }
        }
        z
    }

    /// Expected shape of every tensor, in serialization order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut in_ch = 1usize;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            shapes.push((format!("conv{i}.w"), vec![out_ch, in_ch * 9]));
            shapes.push((format!("conv{i}.b"), vec![out_ch]));
            in_ch = out_ch;
        }
        let v = config.vocab_size();
        let p = config.embed_dim;
        let h = config.hidden_dim;
        let a = config.attn_dim;
        let dc = config.ctx_dim();
        shapes.push(("embed".into(), vec![v, p]));
        shapes.push(("lstm.w_ih".into(), vec![4 * h, p + dc]));
        shapes.push(("lstm.w_hh".into(), vec![4 * h, h]));
        shapes.push(("lstm.b".into(), vec![4 * h]));
        shapes.push(("attn.w_h".into(), vec![a, h]));
        shapes.push(("attn.u_f".into(), vec![a, dc]));
        shapes.push(("attn.b".into(), vec![a]));
        shapes.push(("attn.v".into(), vec![a]));
        shapes.push(("proj.hidden".into(), vec![p, h]));
        shapes.push(("proj.context".into(), vec![p, dc]));
        shapes.push(("proj.out".into(), vec![v, p]));
        shapes
    }

    /// Tensor names paired with flat value slices, in serialization order.
    pub fn named_slices(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.w"), layer.w.as_slice().unwrap()));
            out.push((format!("conv{i}.b"), layer.b.as_slice().unwrap()));
        }
        out.push(("embed".into(), self.embed.as_slice().unwrap()));
        out.push(("lstm.w_ih".into(), self.lstm.w_ih.as_slice().unwrap()));
        out.push(("lstm.w_hh".into(), self.lstm.w_hh.as_slice().unwrap()));
        out.push(("lstm.b".into(), self.lstm.b.as_slice().unwrap()));
        out.push(("attn.w_h".into(), self.attn.w_h.as_slice().unwrap()));
        out.push(("attn.u_f".into(), self.attn.u_f.as_slice().unwrap()));
        out.push(("attn.b".into(), self.attn.b.as_slice().unwrap()));
        out.push(("attn.v".into(), self.attn.v.as_slice().unwrap()));
        out.push(("proj.hidden".into(), self.hidden_proj.as_slice().unwrap()));
        out.push(("proj.context".into(), self.context_proj.as_slice().unwrap()));
        out.push(("proj.out".into(), self.out_proj.as_slice().unwrap()));
        out
    }

    /// Flat mutable slices in the same order as [`Self::named_slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.conv {
            out.push(layer.w.as_slice_mut().unwrap());
            out.push(layer.b.as_slice_mut().unwrap());
        }
        out.push(self.embed.as_slice_mut().unwrap());
        out.push(self.lstm.w_ih.as_slice_mut().unwrap());
        out.push(self.lstm.w_hh.as_slice_mut().unwrap());
        out.push(self.lstm.b.as_slice_mut().unwrap());
        out.push(self.attn.w_h.as_slice_mut().unwrap());
        out.push(self.attn.u_f.as_slice_mut().unwrap());
        out.push(self.attn.b.as_slice_mut().unwrap());
        out.push(self.attn.v.as_slice_mut().unwrap());
        out.push(self.hidden_proj.as_slice_mut().unwrap());
        out.push(self.context_proj.as_slice_mut().unwrap());
        out.push(self.out_proj.as_slice_mut().unwrap());
        out
    }

    pub fn flat_len(&self) -> usize {
        self.named_slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn to_flat_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        for (_, s) in self.named_slices() {
            v.extend_from_slice(s);
        }
        v
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0usize;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        debug_assert_eq!(offset, flat.len());
    }

    /// Element-wise `self += other` over every tensor (gradient reduce).
    pub fn add_assign(&mut self, other: &ModelParams) {
        let theirs = other.to_flat_vec();
        let mut offset = 0usize;
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v += theirs[offset];
                offset += 1;
            }
        }
    }

    pub fn scale_by(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.named_slices()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.named_slices()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named_slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Verify every tensor matches the architecture (used after load).
    pub fn check_shapes(&self) -> Result<()> {
        let expected = Self::expected_shapes(&self.config);
        let have: Vec<(String, Vec<usize>)> = {
            let mut v = Vec::new();
            for (i, layer) in self.conv.iter().enumerate() {
                v.push((format!("conv{i}.w"), layer.w.shape().to_vec()));
                v.push((format!("conv{i}.b"), layer.b.shape().to_vec()));
            }
            v.push(("embed".into(), self.embed.shape().to_vec()));
            v.push(("lstm.w_ih".into(), self.lstm.w_ih.shape().to_vec()));
            v.push(("lstm.w_hh".into(), self.lstm.w_hh.shape().to_vec()));
            v.push(("lstm.b".into(), self.lstm.b.shape().to_vec()));
            v.push(("attn.w_h".into(), self.attn.w_h.shape().to_vec()));
            v.push(("attn.u_f".into(), self.attn.u_f.shape().to_vec()));
            v.push(("attn.b".into(), self.attn.b.shape().to_vec()));
            v.push(("attn.v".into(), self.attn.v.shape().to_vec()));
            v.push(("proj.hidden".into(), self.hidden_proj.shape().to_vec()));
            v.push(("proj.context".into(), self.context_proj.shape().to_vec()));
            v.push(("proj.out".into(), self.out_proj.shape().to_vec()));
            v
        };
        for ((name, want), (_, got)) in expected.iter().zip(have.iter()) {
            if want != got {
                return Err(Error::Shape {
                    tensor: name.clone(),
                    expected: want.clone(),
                    found: got.clone(),
                });
            }
        }
        Ok(())
    }

    /// Zero-valued parameters for hand-built test fixtures.
    pub fn zero_init(config: ModelConfig) -> Result<ModelParams> {
        let mut p = ModelParams::init(config, 0)?;
        for s in p.slices_mut() {
            for v in s {
                *v = 0.0;
            }
        }
        Ok(p)
    }
}

/// Tiny architecture used by gradient checks and unit tests: vocabulary of
/// `n_cps` codepoints starting at 'a', two small blocks, narrow widths.
#[cfg(test)]
pub fn tiny_config(n_cps: usize) -> ModelConfig {
    let cps: Vec<u32> = (0..n_cps as u32).map(|i| 'a' as u32 + i).collect();
    ModelConfig {
        channels: vec![3, 4],
        embed_dim: 4,
        hidden_dim: 5,
        attn_dim: 4,
        attend_coords: true,
        max_image: 64,
        vocab: Vocabulary::from_codepoints(&cps),
    }
}
