//! Training: teacher-forced cross-entropy, global-norm gradient clipping,
//! AdaDelta updates, and the curriculum-stage trainer.
//!
//! Batches are gradient accumulations: per-sample gradients are computed
//! in parallel, then reduced in a fixed order, so results do not depend on
//! thread timing — only on the seeded shuffle.

use super::backward::sample_loss_grads;
use super::forward::{greedy_decode_gray, to_gray};
use super::params::ModelParams;
use super::{Hyperparams, Vocabulary, EOS};
use crate::curriculum::{self, CurriculumManifest, CurriculumTrainer, ManifestEntry, StopRule};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalPair};
use crate::textio;
use crate::{par, seed};
use image::RgbImage;
use ndarray::Array3;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

pub const TRAINLOG_HEADER: &str = "#kforge-trainlog v1";

/// One training (or validation) sample: ink raster plus target tokens.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub gray: Arc<Array3<f64>>,
    /// Transcript tokens with the trailing end marker.
    pub tokens: Vec<usize>,
    pub text: String,
}

/// Build a sample from an in-memory image and its flat transcript.
pub fn sample_from_image(
    image: &RgbImage,
    transcript: &str,
    vocab: &Vocabulary,
    context: &str,
) -> Result<TrainSample> {
    let mut tokens = vocab.encode(transcript, context)?;
    tokens.push(EOS);
    Ok(TrainSample {
        gray: Arc::new(to_gray(image)),
        tokens,
        text: transcript.to_string(),
    })
}

/// Load every distinct sample of a manifest entry list from disk, keyed by
/// sample id. Stages share ids, so the union of all stages loads each
/// image once.
pub fn build_sample_bank(
    entries: &[ManifestEntry],
    root: &Path,
    vocab: &Vocabulary,
) -> Result<HashMap<String, TrainSample>> {
    let mut unique: Vec<&ManifestEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if seen.insert(e.sample_id.as_str()) {
            unique.push(e);
        }
    }
    let loaded = par::try_map_ordered(&unique, |e| -> Result<(String, TrainSample)> {
        let path = root.join(&e.image_path);
        let pathstr = path.display().to_string();
        let image = image::open(&path)
            .map_err(|source| Error::Image { path: pathstr, source })?
            .to_rgb8();
        let sample = sample_from_image(&image, &e.transcript, vocab, &e.sample_id)?;
        Ok((e.sample_id.clone(), sample))
    })?;
    Ok(loaded.into_iter().collect())
}

/// Scale gradients so their global L2 norm does not exceed `clip`.
/// Returns the post-clip norm.
pub fn clip_global_norm(grads: &mut ModelParams, clip: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > clip {
        grads.scale_by(clip / norm);
        clip
    } else {
        norm
    }
}

fn adadelta_update(
    params: &mut ModelParams,
    grads: &ModelParams,
    eg2: &mut [f64],
    ed2: &mut [f64],
    hp: &Hyperparams,
) {
    let g = grads.to_flat_vec();
    let mut idx = 0usize;
    for slice in params.slices_mut() {
        for p in slice {
            let gv = g[idx];
            eg2[idx] = hp.rho * eg2[idx] + (1.0 - hp.rho) * gv * gv;
            let delta = -((ed2[idx] + hp.epsilon).sqrt() / (eg2[idx] + hp.epsilon).sqrt()) * gv;
            ed2[idx] = hp.rho * ed2[idx] + (1.0 - hp.rho) * delta * delta;
            *p += hp.scale * delta;
            idx += 1;
        }
    }
}

/// Per-epoch record of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_crr: f64,
}

/// Stage-by-stage trainer over a preloaded sample bank. Implements
/// [`CurriculumTrainer`], so `curriculum::run_schedule` drives the stages,
/// early stopping, and checkpoint selection.
pub struct Trainer {
    pub params: ModelParams,
    pub hp: Hyperparams,
    bank: HashMap<String, TrainSample>,
    valid: Vec<TrainSample>,
    samples: Vec<TrainSample>,
    stage: u8,
    eg2: Vec<f64>,
    ed2: Vec<f64>,
    pending: Option<(usize, f64)>,
    /// Epoch/loss/score history, appended as the schedule runs.
    pub logs: Vec<EpochLog>,
    /// Post-clip global gradient norms of the most recent epoch.
    pub last_clip_norms: Vec<f64>,
}

impl Trainer {
    pub fn new(
        params: ModelParams,
        hp: Hyperparams,
        bank: HashMap<String, TrainSample>,
        valid: Vec<TrainSample>,
    ) -> Result<Trainer> {
        hp.validate()?;
        params.config.validate()?;
        if valid.is_empty() {
            return Err(Error::InvalidInput("validation set is empty".into()));
        }
        let n = params.flat_len();
        Ok(Trainer {
            params,
            hp,
            bank,
            valid,
            samples: Vec::new(),
            stage: 0,
            eg2: vec![0.0; n],
            ed2: vec![0.0; n],
            pending: None,
            logs: Vec::new(),
            last_clip_norms: Vec::new(),
        })
    }

    /// Greedy-decode the validation set and score it.
    pub fn compute_valid_crr(&self) -> Result<f64> {
        let params = &self.params;
        let max_len = self.hp.max_decode_len;
        let pairs: Vec<EvalPair> = par::try_map_ordered(&self.valid, |s| -> Result<EvalPair> {
            let out = greedy_decode_gray(params, &s.gray, max_len, 1.0)?;
            Ok(EvalPair::new(s.text.clone(), out.text))
        })?;
        metrics::crr(&pairs)
    }
}

impl CurriculumTrainer for Trainer {
    type Checkpoint = ModelParams;

    fn begin_stage(&mut self, manifest: &CurriculumManifest) -> Result<()> {
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let s = self.bank.get(&e.sample_id).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "sample {:?} is not in the loaded bank",
                    e.sample_id
                ))
            })?;
            samples.push(s.clone());
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput(format!(
                "stage {} manifest has no samples",
                manifest.stage
            )));
        }
        self.stage = manifest.stage;
        self.samples = samples;
        // Fresh optimizer statistics for each stage; parameters carry over.
        self.eg2.fill(0.0);
        self.ed2.fill(0.0);
        Ok(())
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let n = self.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        let stage_seed = seed::derive_seed_indexed(self.hp.seed, "stage", self.stage as u64);
        let mut rng = seed::rng(seed::derive_seed_indexed(stage_seed, "shuffle", epoch as u64));
        seed::shuffle(&mut order, &mut rng);

        self.last_clip_norms.clear();
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (batch_idx, chunk) in order.chunks(self.hp.batch_size).enumerate() {
            let params = &self.params;
            let samples = &self.samples;
            let results: Vec<(ModelParams, f64, usize)> =
                par::try_map_ordered(chunk, |&i| -> Result<(ModelParams, f64, usize)> {
                    let s = &samples[i];
                    let mut g = params.zeros_like();
                    let (loss, tokens) = sample_loss_grads(params, &s.gray, &s.tokens, &mut g)?;
                    Ok((g, loss, tokens))
                })?;

            let mut grads = self.params.zeros_like();
            let mut batch_loss = 0.0;
            let mut batch_tokens = 0usize;
            for (g, l, t) in &results {
                grads.add_assign(g);
                batch_loss += l;
                batch_tokens += t;
            }
            let max_grad = grads.max_abs();
            if !max_grad.is_finite() || !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    stage: self.stage as usize,
                    epoch,
                    batch: batch_idx,
                    max_grad,
                });
            }
            grads.scale_by(1.0 / batch_tokens.max(1) as f64);
            let post = clip_global_norm(&mut grads, self.hp.clip_norm);
            self.last_clip_norms.push(post);
            adadelta_update(&mut self.params, &grads, &mut self.eg2, &mut self.ed2, &self.hp);
            loss_sum += batch_loss;
            token_sum += batch_tokens;
        }
        let mean = loss_sum / token_sum.max(1) as f64;
        self.pending = Some((epoch, mean));
        Ok(mean)
    }

    fn validation_score(&mut self) -> Result<f64> {
        let crr = self.compute_valid_crr()?;
        if let Some((epoch, mean_loss)) = self.pending.take() {
            self.logs.push(EpochLog { stage: self.stage, epoch, mean_loss, valid_crr: crr });
        }
        Ok(crr)
    }

    fn snapshot(&self) -> ModelParams {
        self.params.clone()
    }

    fn restore(&mut self, checkpoint: &ModelParams) {
        self.params = checkpoint.clone();
    }
}

/// Summary of one stage of a finished run.
#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: u8,
    pub best_epoch: usize,
    pub best_crr: f64,
    pub epochs_run: usize,
    pub diverged: bool,
}

/// A finished curriculum run: final parameters (the last stage's best),
/// the epoch log, and per-stage summaries.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub logs: Vec<EpochLog>,
    pub stages: Vec<StageSummary>,
}

/// Run the full staged schedule from an initialized model.
pub fn train_curriculum(
    init: ModelParams,
    hp: Hyperparams,
    manifests: &[CurriculumManifest],
    bank: HashMap<String, TrainSample>,
    valid: Vec<TrainSample>,
    stop: StopRule,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(init, hp, bank, valid)?;
    let outcomes = curriculum::run_schedule(&mut trainer, manifests, stop)?;
    let stages = outcomes
        .iter()
        .map(|o| StageSummary {
            stage: o.stage,
            best_epoch: o.best_epoch,
            best_crr: o.best_score,
            epochs_run: o.epochs_run,
            diverged: o.diverged,
        })
        .collect();
    Ok(TrainOutcome { params: trainer.params, logs: trainer.logs, stages })
}

/// Persist the epoch log: `stage TAB epoch TAB loss TAB crr`.
pub fn save_training_log(path: &Path, logs: &[EpochLog], meta: &[String]) -> Result<()> {
    let records: Vec<String> = logs
        .iter()
        .map(|l| format!("{}\t{}\t{}\t{}", l.stage, l.epoch, l.mean_loss, l.valid_crr))
        .collect();
    textio::write_records(path, TRAINLOG_HEADER, meta, &records)
}
