//! `kforge` — one binary exposing the dataset pipeline end to end:
//! ingest → lines → crops/augment → stage → train → eval/locate/submit,
//! plus a synthetic-corpus generator and a gradient audit.
//!
//! Configuration comes from one file (`--config`, else `$KFORGE_CONFIG`,
//! else built-in defaults); `--seed` overrides the master seed. Every
//! output artifact is stamped with the effective config hash and seed, and
//! re-running any subcommand with the same inputs and settings reproduces
//! its outputs byte for byte.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use kforge::error::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kforge", version, about = "Vertical-text transcription dataset pipeline")]
struct Cli {
    /// Config file; defaults to $KFORGE_CONFIG when set, else built-ins.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed, overriding the configured value.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for page-parallel steps (0 = one per core).
    /// Output ordering does not depend on this.
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    jobs: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a character-box annotation CSV into the pages format.
    Ingest(IngestArgs),
    /// Assemble each page's boxes into reading-ordered text lines.
    Lines(LinesArgs),
    /// Cut pages into multiline crops with aligned transcripts.
    Crops(CropsArgs),
    /// Generate erased/skewed/distorted page variants with provenance.
    Augment(AugmentArgs),
    /// Assemble one curriculum stage's training manifest.
    Stage(StageArgs),
    /// Render a synthetic vertical-text corpus with exact ground truth.
    Synth(SynthArgs),
    /// Train the recognizer over the staged curriculum.
    Train(TrainArgs),
    /// Score hypothesis transcripts against references (prints CRR).
    EvalCrr(EvalCrrArgs),
    /// Score a prediction file against ground-truth boxes (prints P/R/F1).
    EvalF1(EvalF1Args),
    /// Decode one image and report per-character locations.
    Locate(LocateArgs),
    /// Transcribe a directory of pages into a competition prediction file.
    Submit(SubmitArgs),
    /// Audit analytic gradients against finite differences on a toy model.
    Gradcheck,
}

#[derive(Args)]
struct IngestArgs {
    /// Annotation CSV: image_id, space-separated `U+XXXX x y w h` runs.
    #[arg(long, value_name = "FILE")]
    annotations: PathBuf,
    /// Directory holding `{image_id}.png` page images.
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    /// Output pages file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct LinesArgs {
    /// Pages file from `ingest`.
    #[arg(long, value_name = "FILE")]
    pages: PathBuf,
    /// Output lines file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write full-page training samples here (needs --images, --map).
    #[arg(long, value_name = "FILE")]
    samples: Option<PathBuf>,
    /// Directory holding `{image_id}.png` page images.
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    /// Codepoint map CSV (Unicode, char).
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
}

#[derive(Args)]
struct CropsArgs {
    /// Pages file from `ingest`.
    #[arg(long, value_name = "FILE")]
    pages: PathBuf,
    /// Directory holding `{image_id}.png` page images.
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    /// Codepoint map CSV (Unicode, char).
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    /// Directory the crop images are written into.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Output samples file listing every crop.
    #[arg(long, value_name = "FILE")]
    samples: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    /// Pages file from `ingest`.
    #[arg(long, value_name = "FILE")]
    pages: PathBuf,
    /// Directory holding `{image_id}.png` page images.
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    /// Codepoint map CSV (Unicode, char).
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    /// Directory the generated images are written into.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Output provenance file (one record per generated page).
    #[arg(long, value_name = "FILE")]
    prov: PathBuf,
    /// Output samples file listing every generated page.
    #[arg(long, value_name = "FILE")]
    samples: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    /// Curriculum stage to assemble (1, 2, or 3).
    #[arg(long, value_name = "N")]
    stage: u8,
    /// Multiline-crop samples file (every stage).
    #[arg(long, value_name = "FILE")]
    crops: Option<PathBuf>,
    /// Full-page samples file (stages 2 and 3).
    #[arg(long, value_name = "FILE")]
    full: Option<PathBuf>,
    /// Generated-page samples file (stage 3).
    #[arg(long, value_name = "FILE")]
    generated: Option<PathBuf>,
    /// Output manifest file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory the corpus is written into.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Number of pages to render.
    #[arg(long, default_value_t = 240, value_name = "N")]
    pages: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage 1 manifest.
    #[arg(long, value_name = "FILE")]
    stage1: Option<PathBuf>,
    /// Stage 2 manifest.
    #[arg(long, value_name = "FILE")]
    stage2: Option<PathBuf>,
    /// Stage 3 manifest.
    #[arg(long, value_name = "FILE")]
    stage3: Option<PathBuf>,
    /// Validation samples file (early stopping scores against these).
    #[arg(long, value_name = "FILE")]
    valid: PathBuf,
    /// Codepoint map CSV fixing the vocabulary.
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    /// Directory sample image paths are resolved against.
    #[arg(long, default_value = ".", value_name = "DIR")]
    root: PathBuf,
    /// Output model checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write the per-epoch training log here.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// Warm-start from this checkpoint instead of random initialization.
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCrrArgs {
    /// Reference transcripts (keyed transcripts file or plain text).
    #[arg(long = "ref", value_name = "FILE")]
    reference: PathBuf,
    /// Hypothesis transcripts in the same format.
    #[arg(long, value_name = "FILE")]
    hyp: PathBuf,
    /// Also write a per-page report here.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalF1Args {
    /// Prediction file in competition format.
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Pages file holding the ground-truth boxes.
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
    /// Also write a per-page report here.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct LocateArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Page image to decode.
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Write locations here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SubmitArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Directory of `{image_id}.png` pages to transcribe.
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    /// Output prediction file (a `.meta` sidecar carries provenance).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<i32> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot honor --jobs {}: {e}", cli.jobs)))?;
    }
    let mut cfg = config::Config::resolve(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    match &cli.cmd {
        Cmd::Ingest(a) => commands::ingest(&cfg, &a.annotations, &a.images, &a.out)?,
        Cmd::Lines(a) => commands::assemble(
            &cfg,
            &a.pages,
            &a.out,
            a.samples.as_deref(),
            a.images.as_deref(),
            a.map.as_deref(),
        )?,
        Cmd::Crops(a) => {
            commands::crops(&cfg, &a.pages, &a.images, &a.map, &a.out_dir, &a.samples)?
        }
        Cmd::Augment(a) => commands::augment(
            &cfg,
            &a.pages,
            &a.images,
            &a.map,
            &a.out_dir,
            &a.prov,
            &a.samples,
        )?,
        Cmd::Stage(a) => commands::stage(
            &cfg,
            a.stage,
            a.crops.as_deref(),
            a.full.as_deref(),
            a.generated.as_deref(),
            &a.out,
        )?,
        Cmd::Synth(a) => commands::synthesize(&cfg, &a.out_dir, a.pages)?,
        Cmd::Train(a) => commands::train(
            &cfg,
            &[a.stage1.clone(), a.stage2.clone(), a.stage3.clone()],
            &a.valid,
            &a.map,
            &a.root,
            &a.out,
            a.log.as_deref(),
            a.init.as_deref(),
        )?,
        Cmd::EvalCrr(a) => {
            commands::eval_crr(&cfg, &a.reference, &a.hyp, a.report.as_deref())?
        }
        Cmd::EvalF1(a) => commands::eval_f1(&cfg, &a.pred, &a.truth, a.report.as_deref())?,
        Cmd::Locate(a) => commands::locate(&cfg, &a.model, &a.image, a.out.as_deref())?,
        Cmd::Submit(a) => commands::submit(&cfg, &a.model, &a.images, &a.out)?,
        Cmd::Gradcheck => return commands::gradcheck(&cfg),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
