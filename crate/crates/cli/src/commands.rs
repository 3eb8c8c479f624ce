//! Implementations of the subcommands: thin orchestration over the library,
//! plus the provenance stamping and ordering guarantees the tool promises.
//!
//! Every artifact written here carries the config hash and master seed in
//! its meta lines (the competition CSV, whose format has no room for them,
//! gets a `.meta` sidecar). Page-parallel work fans out through ordered
//! maps, so outputs follow input order no matter how many workers run.

use crate::config::Config;
use image::RgbImage;
use kforge::annotation::{self, CharBox, CodepointMap, PageAnnotation};
use kforge::curriculum::{self, ManifestEntry, SampleKind};
use kforge::error::{Error, Result};
use kforge::lines::{self, TextLine};
use kforge::metrics::{self, EvalPair, EvalReport, PointPrediction};
use kforge::recognizer::{self, ModelParams, Vocabulary, SEP};
use kforge::seed;
use kforge::synth;
use kforge::{par, textio};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

pub const LOCATIONS_HEADER: &str = "#kforge-locations v1";
pub const META_HEADER: &str = "#kforge-meta v1";

/// Tolerance the gradient check is judged against.
pub const GRADCHECK_TOL: f64 = 1e-4;

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn load_map(path: &Path) -> Result<CodepointMap> {
    let (map, warnings) = annotation::load_codepoint_map(path)?;
    warn_all(&warnings);
    Ok(map)
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    let pathstr = path.display().to_string();
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: pathstr, source })?
        .to_rgb8())
}

fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)
        .map_err(|source| Error::Image { path: path.display().to_string(), source })
}

fn page_image_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.png"))
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

pub fn ingest(cfg: &Config, annotations: &Path, images: &Path, out: &Path) -> Result<()> {
    let parsed = annotation::parse_dataset(annotations, images)?;
    warn_all(&parsed.warnings);
    annotation::save_pages(out, &parsed.pages, &cfg.meta())?;
    let boxes: usize = parsed.pages.iter().map(|p| p.boxes.len()).sum();
    println!(
        "ingested {} pages ({} boxes, {} warnings) -> {}",
        parsed.pages.len(),
        boxes,
        parsed.warnings.len(),
        out.display()
    );
    Ok(())
}

pub fn assemble(
    cfg: &Config,
    pages_path: &Path,
    out: &Path,
    samples: Option<&Path>,
    images: Option<&Path>,
    map_path: Option<&Path>,
) -> Result<()> {
    let pages = annotation::load_pages(pages_path)?;
    let per_page: Vec<(String, Vec<TextLine>)> = pages
        .iter()
        .map(|p| {
            (p.image_id.clone(), lines::assemble_lines(p, cfg.lines.overlap_threshold))
        })
        .collect();
    lines::save_lines(out, &per_page, &cfg.meta())?;
    let total: usize = per_page.iter().map(|(_, l)| l.len()).sum();
    println!("assembled {} lines over {} pages -> {}", total, pages.len(), out.display());

    if let Some(samples_path) = samples {
        let (Some(images_dir), Some(map_path)) = (images, map_path) else {
            return Err(Error::Config(
                "--samples needs --images and --map to build full-page entries".into(),
            ));
        };
        let map = load_map(map_path)?;
        let entries: Vec<ManifestEntry> = pages
            .iter()
            .zip(&per_page)
            .map(|(p, (_, line_set))| -> Result<ManifestEntry> {
                let t = lines::transcript_of(p, line_set, &map)?;
                Ok(ManifestEntry {
                    sample_id: p.image_id.clone(),
                    kind: SampleKind::FullPage,
                    image_path: path_string(&page_image_path(images_dir, &p.image_id)),
                    transcript: t.flat,
                })
            })
            .collect::<Result<_>>()?;
        curriculum::save_samples(samples_path, &entries, &cfg.meta())?;
        println!("wrote {} full-page samples -> {}", entries.len(), samples_path.display());
    }
    Ok(())
}

pub fn crops(
    cfg: &Config,
    pages_path: &Path,
    images: &Path,
    map_path: &Path,
    out_dir: &Path,
    samples_path: &Path,
) -> Result<()> {
    let pages = annotation::load_pages(pages_path)?;
    let map = load_map(map_path)?;
    make_dir(out_dir)?;
    let crops_seed = seed::derive_seed(cfg.seed, "crops");
    let per_page = par::try_map_ordered(&pages, |p| -> Result<Vec<(String, RgbImage, String)>> {
        let img = open_rgb(&page_image_path(images, &p.image_id))?;
        let line_set = lines::assemble_lines(p, cfg.lines.overlap_threshold);
        let groups = curriculum::make_multiline_crops(
            &img,
            p,
            &line_set,
            &map,
            cfg.crops.group_min,
            cfg.crops.group_max,
            cfg.crops.margin,
            seed::derive_seed(crops_seed, &p.image_id),
        )?;
        Ok(groups
            .into_iter()
            .enumerate()
            .map(|(k, (crop, text))| (format!("{}-crop{:03}", p.image_id, k), crop, text))
            .collect())
    })?;

    let mut entries = Vec::new();
    for group in per_page {
        for (sample_id, crop, transcript) in group {
            let path = page_image_path(out_dir, &sample_id);
            save_rgb(&path, &crop)?;
            entries.push(ManifestEntry {
                sample_id,
                kind: SampleKind::MultilineCrop,
                image_path: path_string(&path),
                transcript,
            });
        }
    }
    curriculum::save_samples(samples_path, &entries, &cfg.meta())?;
    println!(
        "wrote {} crops from {} pages -> {}",
        entries.len(),
        pages.len(),
        samples_path.display()
    );
    Ok(())
}

pub fn augment(
    cfg: &Config,
    pages_path: &Path,
    images: &Path,
    map_path: &Path,
    out_dir: &Path,
    prov_path: &Path,
    samples_path: &Path,
) -> Result<()> {
    let pages = annotation::load_pages(pages_path)?;
    let map = load_map(map_path)?;
    let pairs = par::try_map_ordered(&pages, |p| -> Result<(RgbImage, PageAnnotation)> {
        Ok((open_rgb(&page_image_path(images, &p.image_id))?, p.clone()))
    })?;
    let spec = cfg.augmentation_spec();
    let (records, warnings) = kforge::augment::generate_erasure_set(&pairs, &map, &spec)?;
    warn_all(&warnings);

    make_dir(out_dir)?;
    let mut entries = Vec::with_capacity(records.len());
    for r in &records {
        let path = page_image_path(out_dir, &r.annotation.image_id);
        save_rgb(&path, &r.image)?;
        entries.push(ManifestEntry {
            sample_id: r.annotation.image_id.clone(),
            kind: SampleKind::Generated,
            image_path: path_string(&path),
            transcript: r.transcript.flat.clone(),
        });
    }
    kforge::augment::save_provenance(prov_path, &records, &cfg.meta())?;
    curriculum::save_samples(samples_path, &entries, &cfg.meta())?;
    println!(
        "generated {} pages -> {} (provenance {})",
        entries.len(),
        samples_path.display(),
        prov_path.display()
    );
    Ok(())
}

pub fn stage(
    cfg: &Config,
    stage: u8,
    crops: Option<&Path>,
    full: Option<&Path>,
    generated: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let load = |arg: Option<&Path>, needed: bool, flag: &str| -> Result<Vec<ManifestEntry>> {
        match arg {
            Some(path) => curriculum::load_samples(path),
            None if needed => {
                Err(Error::Config(format!("stage {stage} requires --{flag}")))
            }
            None => Ok(Vec::new()),
        }
    };
    let crop_entries = load(crops, true, "crops")?;
    let full_entries = load(full, stage >= 2, "full")?;
    let gen_entries = load(generated, stage >= 3, "generated")?;
    let manifest =
        curriculum::build_stage_manifest(stage, &crop_entries, &full_entries, &gen_entries)?;
    curriculum::save_manifest(out, &manifest, &cfg.meta())?;
    println!(
        "stage {} manifest: {} entries -> {}",
        manifest.stage,
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

pub fn synthesize(cfg: &Config, out_dir: &Path, n_pages: usize) -> Result<()> {
    let params = cfg.corpus_params();
    let corpus = synth::gen_corpus(&params, n_pages)?;
    synth::write_corpus(out_dir, &corpus, &cfg.meta())?;
    println!(
        "synthesized {} pages (alphabet {}, {} train / {} valid) -> {}",
        corpus.pages.len(),
        params.alphabet_size,
        corpus.split.train.len(),
        corpus.split.valid.len(),
        out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &Config,
    stage_paths: &[Option<PathBuf>; 3],
    valid_path: &Path,
    map_path: &Path,
    root: &Path,
    out: &Path,
    log: Option<&Path>,
    init: Option<&Path>,
) -> Result<()> {
    let map = load_map(map_path)?;
    let vocab = Vocabulary::from_map(&map);

    let mut manifests = Vec::new();
    for (idx, arg) in stage_paths.iter().enumerate() {
        let want = (idx + 1) as u8;
        if let Some(path) = arg {
            let m = curriculum::load_manifest(path)?;
            if m.stage != want {
                return Err(Error::Config(format!(
                    "{} holds a stage {} manifest, expected stage {want}",
                    path.display(),
                    m.stage
                )));
            }
            manifests.push(m);
        }
    }
    if manifests.is_empty() {
        return Err(Error::Config("no stage manifests given".into()));
    }

    let all_entries: Vec<ManifestEntry> =
        manifests.iter().flat_map(|m| m.entries.iter().cloned()).collect();
    let bank = recognizer::build_sample_bank(&all_entries, root, &vocab)?;

    let valid_entries = curriculum::load_samples(valid_path)?;
    if valid_entries.is_empty() {
        return Err(Error::Config(format!("{} holds no samples", valid_path.display())));
    }
    let valid_bank = recognizer::build_sample_bank(&valid_entries, root, &vocab)?;
    let valid: Vec<_> = valid_entries
        .iter()
        .map(|e| valid_bank[e.sample_id.as_str()].clone())
        .collect();

    let params = match init {
        Some(path) => {
            let p = recognizer::load_params(path)?;
            eprintln!("starting from {}", path.display());
            p
        }
        None => ModelParams::init(cfg.model_config(vocab), cfg.seed)?,
    };
    let outcome = recognizer::train_curriculum(
        params,
        cfg.hyperparams(),
        &manifests,
        bank,
        valid,
        cfg.stop_rule(),
    )?;
    recognizer::save_params(out, &outcome.params, &cfg.meta())?;
    if let Some(log_path) = log {
        recognizer::save_training_log(log_path, &outcome.logs, &cfg.meta())?;
    }
    for s in &outcome.stages {
        println!(
            "stage {}: best CRR {:.2} at epoch {} of {}{}",
            s.stage,
            s.best_crr,
            s.best_epoch,
            s.epochs_run,
            if s.diverged { " (diverged)" } else { "" }
        );
    }
    println!("saved model -> {}", out.display());
    Ok(())
}

/// Read transcripts for scoring: either the keyed transcripts format, or a
/// plain text file treated as one transcript (a single trailing newline is
/// not part of the text).
fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if text.lines().next() == Some(lines::TRANSCRIPTS_HEADER) {
        return lines::load_transcripts(path);
    }
    let body = text.strip_suffix('\n').unwrap_or(&text);
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(vec![(id, body.to_string())])
}

fn paired_transcripts(
    ref_path: &Path,
    hyp_path: &Path,
) -> Result<(Vec<String>, Vec<EvalPair>)> {
    let refs = read_transcripts(ref_path)?;
    let hyps = read_transcripts(hyp_path)?;
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, text) in &hyps {
        if by_id.insert(id, text).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate hypothesis for {id:?} in {}",
                hyp_path.display()
            )));
        }
    }
    // Single-transcript files pair up regardless of their stem names.
    if refs.len() == 1 && hyps.len() == 1 {
        let (id, r) = &refs[0];
        return Ok((vec![id.clone()], vec![EvalPair::new(r, &hyps[0].1)]));
    }
    let mut ids = Vec::with_capacity(refs.len());
    let mut pairs = Vec::with_capacity(refs.len());
    let mut seen = HashSet::new();
    for (id, r) in &refs {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "duplicate reference for {id:?} in {}",
                ref_path.display()
            )));
        }
        let h = by_id.remove(id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("no hypothesis for {id:?} in {}", hyp_path.display()))
        })?;
        ids.push(id.clone());
        pairs.push(EvalPair::new(r, h));
    }
    if let Some((id, _)) = by_id.pop_first() {
        return Err(Error::InvalidInput(format!(
            "hypothesis for unknown id {id:?} in {}",
            hyp_path.display()
        )));
    }
    Ok((ids, pairs))
}

pub fn eval_crr(
    cfg: &Config,
    ref_path: &Path,
    hyp_path: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let (ids, pairs) = paired_transcripts(ref_path, hyp_path)?;
    let options = cfg.crr_options();
    let value = metrics::crr_with(&pairs, options)?;
    println!("CRR {value:.2}");
    if let Some(report_path) = report {
        let rep = EvalReport::from_pairs(&ids, &pairs, options)?;
        metrics::save_report(report_path, &rep, &cfg.meta())?;
        eprintln!("report -> {}", report_path.display());
    }
    Ok(())
}

pub fn eval_f1(
    cfg: &Config,
    pred_path: &Path,
    truth_path: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let submission = metrics::load_submission(pred_path)?;
    let pages = annotation::load_pages(truth_path)?;
    let mut by_id: BTreeMap<&str, &[PointPrediction]> = BTreeMap::new();
    for (id, preds) in &submission {
        if by_id.insert(id, preds).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate predictions for {id:?} in {}",
                pred_path.display()
            )));
        }
    }
    let known: HashSet<&str> = pages.iter().map(|p| p.image_id.as_str()).collect();
    for (id, _) in &submission {
        if !known.contains(id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "predictions for unknown page {id:?} in {}",
                pred_path.display()
            )));
        }
    }
    let rows: Vec<(String, Vec<PointPrediction>, Vec<CharBox>)> = pages
        .iter()
        .map(|p| {
            let preds =
                by_id.get(p.image_id.as_str()).map(|s| s.to_vec()).unwrap_or_default();
            (p.image_id.clone(), preds, p.boxes.clone())
        })
        .collect();
    let rep = EvalReport::from_detections(&rows);
    println!("precision {:.4} recall {:.4} F1 {:.4}", rep.precision, rep.recall, rep.f1);
    if let Some(report_path) = report {
        metrics::save_report(report_path, &rep, &cfg.meta())?;
        eprintln!("report -> {}", report_path.display());
    }
    Ok(())
}

/// Decode one image and name each emitted token with its attention-argmax
/// location. Records are `position TAB label TAB x TAB y`, where the label
/// is `U+XXXX` for characters and `<sep>` for the line separator.
pub fn locate(cfg: &Config, model: &Path, image: &Path, out: Option<&Path>) -> Result<()> {
    let params = recognizer::load_params(model)?;
    let img = open_rgb(image)?;
    let decoded = recognizer::greedy_decode(&params, &img, cfg.recognizer.max_decode_len)?;
    if decoded.truncated {
        eprintln!(
            "warning: decode stopped at the {}-token cap without emitting a stop symbol",
            cfg.recognizer.max_decode_len
        );
    }
    let mut records = Vec::with_capacity(decoded.tokens.len());
    for (i, (&tok, map)) in decoded.tokens.iter().zip(&decoded.maps).enumerate() {
        let (x, y) = recognizer::locate_from_attention(map, &decoded.grid);
        let label = match params.config.vocab.codepoint_of_token(tok) {
            Some(cp) => annotation::format_codepoint(cp),
            None if tok == SEP => "<sep>".to_string(),
            None => format!("<{tok}>"),
        };
        records.push(format!("{i}\t{label}\t{x}\t{y}"));
    }
    match out {
        Some(path) => {
            textio::write_records(path, LOCATIONS_HEADER, &cfg.meta(), &records)?;
            println!("located {} tokens -> {}", records.len(), path.display());
        }
        None => {
            for r in &records {
                println!("{r}");
            }
        }
    }
    Ok(())
}

/// Transcribe every page image in a directory and write the competition
/// prediction file: one row per page, `U+XXXX x y` triplets. Pages are
/// processed in filename order; a `.meta` sidecar carries the provenance
/// the CSV format cannot.
pub fn submit(cfg: &Config, model: &Path, images: &Path, out: &Path) -> Result<()> {
    let params = recognizer::load_params(model)?;
    let mut ids: Vec<String> = std::fs::read_dir(images)
        .map_err(|e| Error::io(images.display().to_string(), e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            if path.extension().is_some_and(|e| e == "png") {
                Some(path.file_stem()?.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .png images under {}",
            images.display()
        )));
    }
    let pages = par::try_map_ordered(&ids, |id| -> Result<(String, Vec<PointPrediction>)> {
        let img = open_rgb(&page_image_path(images, id))?;
        let decoded = recognizer::greedy_decode(&params, &img, cfg.recognizer.max_decode_len)?;
        let preds = decoded
            .tokens
            .iter()
            .zip(&decoded.maps)
            .filter_map(|(&tok, map)| {
                params.config.vocab.codepoint_of_token(tok).map(|codepoint| {
                    let (x, y) = recognizer::locate_from_attention(map, &decoded.grid);
                    PointPrediction { codepoint, x, y }
                })
            })
            .collect();
        Ok((id.clone(), preds))
    })?;
    metrics::save_submission(out, &pages)?;
    let sidecar = out.with_file_name(format!(
        "{}.meta",
        out.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    textio::write_records(&sidecar, META_HEADER, &cfg.meta(), &[])?;
    let total: usize = pages.iter().map(|(_, p)| p.len()).sum();
    println!("predicted {total} characters over {} pages -> {}", pages.len(), out.display());
    Ok(())
}

/// Finite-difference audit of the analytic gradients on a toy model.
/// Returns the process exit code: 0 on pass, 1 on fail.
pub fn gradcheck(cfg: &Config) -> Result<i32> {
    let err = recognizer::toy_grad_check(seed::derive_seed(cfg.seed, "gradcheck"))?;
    let pass = err <= GRADCHECK_TOL;
    println!(
        "max relative error {err:.3e}: {} (tolerance {GRADCHECK_TOL:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { 1 })
}
