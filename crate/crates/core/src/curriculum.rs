//! Curriculum staging and the stage-by-stage training schedule.
//!
//! Stage 1 trains on multiline crops, stage 2 adds full pages, stage 3 adds
//! generated (augmented) pages. Each stage warm-starts from the previous
//! stage's best parameters, keeps the epoch with the highest validation
//! recognition rate, and stops once that rate has not improved for
//! `patience` consecutive epochs.

use crate::annotation::{CodepointMap, PageAnnotation};
use crate::error::{Error, Result};
use crate::lines::TextLine;
use crate::textio;
use image::RgbImage;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const MANIFEST_HEADER: &str = "#kforge-manifest v1";
pub const SAMPLES_HEADER: &str = "#kforge-samples v1";

pub const DEFAULT_GROUP_MIN: usize = 1;
pub const DEFAULT_GROUP_MAX: usize = 5;
pub const DEFAULT_CROP_MARGIN: u32 = 8;

/// What a training sample is: a crop of consecutive lines, an original full
/// page, or an augmentation-generated page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKind {
    MultilineCrop,
    FullPage,
    Generated,
}

impl SampleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleKind::MultilineCrop => "multiline_crop",
            SampleKind::FullPage => "full_page",
            SampleKind::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Option<SampleKind> {
        match s {
            "multiline_crop" => Some(SampleKind::MultilineCrop),
            "full_page" => Some(SampleKind::FullPage),
            "generated" => Some(SampleKind::Generated),
            _ => None,
        }
    }
}

/// One training sample: where its image lives and what it reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub kind: SampleKind,
    pub image_path: String,
    /// Flat transcript; lines separated by `\n`.
    pub transcript: String,
}

/// The sample list of one curriculum stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurriculumManifest {
    pub stage: u8,
    pub entries: Vec<ManifestEntry>,
}

/// Early-stopping rule: stop a stage after `patience` consecutive epochs
/// without a strict improvement in validation recognition rate.
/// `max_epochs_per_stage` is a hard safety cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopRule {
    pub patience: usize,
    pub max_epochs_per_stage: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { patience: 10, max_epochs_per_stage: 200 }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidInput("patience must be at least 1".into()));
        }
        if self.max_epochs_per_stage == 0 {
            return Err(Error::InvalidInput("max_epochs_per_stage must be at least 1".into()));
        }
        Ok(())
    }
}

/// Consecutive group sizes covering `n` lines, each drawn uniform from
/// {group_min..group_max} (the final group absorbs the remainder when it
/// is smaller than group_min).
pub fn partition_group_sizes(
    n: usize,
    group_min: usize,
    group_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if group_min < 1 || group_min > group_max {
        return Err(Error::InvalidInput(format!(
            "group size range {group_min}..={group_max} invalid"
        )));
    }
    let mut sizes = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        use rand::Rng;
        let g = rng.gen_range(group_min..=group_max).min(remaining);
        sizes.push(g);
        remaining -= g;
    }
    Ok(sizes)
}

/// Split a page into crops of consecutive line groups (reading order).
/// Each crop is the union of its lines' bounding boxes, padded by `margin`
/// and clipped to the page; its transcript is those lines joined by the
/// separator. Empty line sets yield an empty list.
pub fn make_multiline_crops(
    image: &RgbImage,
    page: &PageAnnotation,
    line_set: &[TextLine],
    map: &CodepointMap,
    group_min: usize,
    group_max: usize,
    margin: u32,
    seed: u64,
) -> Result<Vec<(RgbImage, String)>> {
    if line_set.is_empty() {
        return Ok(Vec::new());
    }
    let transcript = crate::lines::transcript_of(page, line_set, map)?;
    let mut rng = crate::seed::rng(seed);
    let sizes = partition_group_sizes(line_set.len(), group_min, group_max, &mut rng)?;

    let (w, h) = image.dimensions();
    let mut crops = Vec::with_capacity(sizes.len());
    let mut start = 0usize;
    for g in sizes {
        let group = &line_set[start..start + g];
        let x0 = group.iter().map(|l| l.line_bbox.0).min().unwrap().saturating_sub(margin);
        let y0 = group.iter().map(|l| l.line_bbox.1).min().unwrap().saturating_sub(margin);
        let x1 = group.iter().map(|l| l.bbox_right()).max().unwrap().saturating_add(margin).min(w);
        let y1 = group.iter().map(|l| l.bbox_bottom()).max().unwrap().saturating_add(margin).min(h);
        let crop = image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image();
        let text = transcript.lines[start..start + g].join("\n");
        crops.push((crop, text));
        start += g;
    }
    Ok(crops)
}

/// Assemble one stage's manifest. Stage 1 = crops; stage 2 adds full pages;
/// stage 3 adds generated pages. Entry kinds must match their role.
pub fn build_stage_manifest(
    stage: u8,
    crops: &[ManifestEntry],
    full_pages: &[ManifestEntry],
    generated: &[ManifestEntry],
) -> Result<CurriculumManifest> {
    if !(1..=3).contains(&stage) {
        return Err(Error::InvalidInput(format!("stage must be 1, 2, or 3, got {stage}")));
    }
    for (name, list, kind) in [
        ("crops", crops, SampleKind::MultilineCrop),
        ("full_pages", full_pages, SampleKind::FullPage),
        ("generated", generated, SampleKind::Generated),
    ] {
        if let Some(bad) = list.iter().find(|e| e.kind != kind) {
            return Err(Error::InvalidInput(format!(
                "{name} entry {:?} has kind {}, expected {}",
                bad.sample_id,
                bad.kind.as_str(),
                kind.as_str()
            )));
        }
    }
    let mut entries: Vec<ManifestEntry> = crops.to_vec();
    if stage >= 2 {
        entries.extend(full_pages.iter().cloned());
    }
    if stage >= 3 {
        entries.extend(generated.iter().cloned());
    }
    Ok(CurriculumManifest { stage, entries })
}

fn entry_record(e: &ManifestEntry, stage: Option<u8>) -> String {
    let mut row = String::new();
    if let Some(s) = stage {
        row.push_str(&s.to_string());
        row.push('\t');
    }
    row.push_str(&format!(
        "{}\t{}\t{}\t{}",
        textio::escape_field(&e.sample_id),
        e.kind.as_str(),
        textio::escape_field(&e.image_path),
        textio::escape_field(&e.transcript)
    ));
    row
}

fn parse_entry(
    pathstr: &str,
    line_no: usize,
    fields: &[&str],
) -> Result<ManifestEntry> {
    let unescape = |s: &str| {
        textio::unescape_field(s).map_err(|e| Error::parse(pathstr, line_no, e.to_string()))
    };
    let kind = SampleKind::parse(fields[1]).ok_or_else(|| {
        Error::parse(pathstr, line_no, format!("unknown sample kind {:?}", fields[1]))
    })?;
    Ok(ManifestEntry {
        sample_id: unescape(fields[0])?,
        kind,
        image_path: unescape(fields[2])?,
        transcript: unescape(fields[3])?,
    })
}

/// Persist a stage manifest: `stage TAB sample_id TAB kind TAB path TAB transcript`.
pub fn save_manifest(path: &Path, manifest: &CurriculumManifest, meta: &[String]) -> Result<()> {
    let records: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| entry_record(e, Some(manifest.stage)))
        .collect();
    textio::write_records(path, MANIFEST_HEADER, meta, &records)
}

pub fn load_manifest(path: &Path) -> Result<CurriculumManifest> {
    let pathstr = path.display().to_string();
    let records = textio::read_records(path, MANIFEST_HEADER)?;
    if records.is_empty() {
        return Err(Error::Corrupt { path: pathstr, msg: "manifest has no entries".into() });
    }
    let mut stage: Option<u8> = None;
    let mut entries = Vec::with_capacity(records.len());
    for (line_no, record) in records {
        let fields: Vec<&str> = record.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                &pathstr,
                line_no,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let s: u8 = fields[0].parse().map_err(|_| {
            Error::parse(&pathstr, line_no, format!("bad stage {:?}", fields[0]))
        })?;
        match stage {
            None => stage = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::parse(
                    &pathstr,
                    line_no,
                    format!("mixed stages {prev} and {s} in one manifest"),
                ));
            }
            _ => {}
        }
        entries.push(parse_entry(&pathstr, line_no, &fields[1..])?);
    }
    Ok(CurriculumManifest { stage: stage.unwrap(), entries })
}

/// Persist a stage-less sample list (crop/page/generated fragments that the
/// staging step later combines): `sample_id TAB kind TAB path TAB transcript`.
pub fn save_samples(path: &Path, entries: &[ManifestEntry], meta: &[String]) -> Result<()> {
    let records: Vec<String> = entries.iter().map(|e| entry_record(e, None)).collect();
    textio::write_records(path, SAMPLES_HEADER, meta, &records)
}

pub fn load_samples(path: &Path) -> Result<Vec<ManifestEntry>> {
    let pathstr = path.display().to_string();
    let records = textio::read_records(path, SAMPLES_HEADER)?;
    let mut entries = Vec::with_capacity(records.len());
    for (line_no, record) in records {
        let fields: Vec<&str> = record.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                &pathstr,
                line_no,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        entries.push(parse_entry(&pathstr, line_no, &fields)?);
    }
    Ok(entries)
}

/// What the schedule needs from a trainer. Implementations keep their own
/// parameters; the schedule only snapshots/restores around stage
/// boundaries and epoch selection.
pub trait CurriculumTrainer {
    type Checkpoint: Clone;

    /// Enter a stage: adopt its manifest and reset optimizer state.
    /// Model parameters carry over (warm start).
    fn begin_stage(&mut self, manifest: &CurriculumManifest) -> Result<()>;

    /// Run one training epoch; returns the mean loss. A non-finite loss
    /// surfaces as [`Error::Diverged`].
    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;

    /// Validation recognition rate (percent) of the current parameters.
    fn validation_score(&mut self) -> Result<f64>;

    fn snapshot(&self) -> Self::Checkpoint;

    fn restore(&mut self, checkpoint: &Self::Checkpoint);
}

/// Result of one stage: the best checkpoint and how it was reached.
#[derive(Debug, Clone)]
pub struct StageOutcome<C> {
    pub stage: u8,
    pub best_score: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub diverged: bool,
    pub checkpoint: C,
}

/// Run the staged schedule. For each manifest in order: train epochs,
/// track the best validation score (strict improvement; ties keep the
/// earlier epoch), stop after `patience` epochs without improvement, and
/// warm-start the next stage from the best checkpoint. Divergence aborts
/// the stage and reports the last finite checkpoint.
pub fn run_schedule<T: CurriculumTrainer>(
    trainer: &mut T,
    manifests: &[CurriculumManifest],
    stop: StopRule,
) -> Result<Vec<StageOutcome<T::Checkpoint>>> {
    stop.validate()?;
    if manifests.is_empty() {
        return Err(Error::InvalidInput("no stage manifests".into()));
    }
    let mut outcomes = Vec::with_capacity(manifests.len());
    for manifest in manifests {
        trainer.begin_stage(manifest)?;
        let mut best: Option<(f64, usize, T::Checkpoint)> = None;
        let mut since_improve = 0usize;
        let mut epochs_run = 0usize;
        let mut diverged = false;

        for epoch in 1..=stop.max_epochs_per_stage {
            match trainer.train_epoch(epoch) {
                Ok(_) => {}
                Err(Error::Diverged { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
            epochs_run = epoch;
            let score = trainer.validation_score()?;
            match &best {
                Some((best_score, _, _)) if score <= *best_score => {
                    since_improve += 1;
                    if since_improve >= stop.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((score, epoch, trainer.snapshot()));
                    since_improve = 0;
                }
            }
        }

        let (best_score, best_epoch, checkpoint) = match best {
            Some(b) => b,
            // Divergence before any scored epoch: fall back to the
            // stage-entry parameters.
            None => (f64::NEG_INFINITY, 0, trainer.snapshot()),
        };
        trainer.restore(&checkpoint);
        outcomes.push(StageOutcome {
            stage: manifest.stage,
            best_score,
            best_epoch,
            epochs_run,
            diverged,
            checkpoint,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lines::{assemble_lines, DEFAULT_OVERLAP_THRESHOLD};
    use crate::synth::{self, CorpusParams};

    fn entry(id: &str, kind: SampleKind) -> ManifestEntry {
        ManifestEntry {
            sample_id: id.to_string(),
            kind,
            image_path: format!("images/{id}.png"),
            transcript: "ab\ncd".to_string(),
        }
    }

    fn entries(prefix: &str, n: usize, kind: SampleKind) -> Vec<ManifestEntry> {
        (0..n).map(|i| entry(&format!("{prefix}{i}"), kind)).collect()
    }

    #[test]
    fn one_line_page_yields_one_crop() {
        let params = CorpusParams { lines_per_page: (1, 1), ..CorpusParams::default() };
        let page = synth::gen_page(&params, "one", 3).unwrap();
        let map = synth::corpus_map(params.alphabet_size).unwrap();
        let line_set = assemble_lines(&page.annotation, DEFAULT_OVERLAP_THRESHOLD);
        let crops = make_multiline_crops(
            &page.image,
            &page.annotation,
            &line_set,
            &map,
            1,
            5,
            DEFAULT_CROP_MARGIN,
            7,
        )
        .unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].1, page.flat_transcript());
    }

    #[test]
    fn fixed_group_size_partitions_exactly() {
        let params = CorpusParams {
            lines_per_page: (6, 6),
            page_width: 300,
            ..CorpusParams::default()
        };
        let page = synth::gen_page(&params, "six", 4).unwrap();
        let map = synth::corpus_map(params.alphabet_size).unwrap();
        let line_set = assemble_lines(&page.annotation, DEFAULT_OVERLAP_THRESHOLD);
        assert_eq!(line_set.len(), 6);
        let crops = make_multiline_crops(
            &page.image,
            &page.annotation,
            &line_set,
            &map,
            2,
            2,
            DEFAULT_CROP_MARGIN,
            7,
        )
        .unwrap();
        assert_eq!(crops.len(), 3);
        for (_, text) in &crops {
            assert_eq!(text.matches('\n').count(), 1, "{text:?}");
        }
        let joined: Vec<String> = crops.iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(joined.join("\n"), page.flat_transcript());
    }

    #[test]
    fn crop_transcripts_concatenate_to_page_transcript() {
        let params = CorpusParams::default();
        for i in 0..20u64 {
            let page = synth::gen_page(&params, &format!("p{i}"), 500 + i).unwrap();
            let map = synth::corpus_map(params.alphabet_size).unwrap();
            let line_set = assemble_lines(&page.annotation, DEFAULT_OVERLAP_THRESHOLD);
            let crops = make_multiline_crops(
                &page.image,
                &page.annotation,
                &line_set,
                &map,
                1,
                3,
                DEFAULT_CROP_MARGIN,
                i,
            )
            .unwrap();
            let joined: Vec<String> = crops.iter().map(|(_, t)| t.clone()).collect();
            assert_eq!(joined.join("\n"), page.flat_transcript());
            for (img, _) in &crops {
                assert!(img.width() <= page.annotation.width);
                assert!(img.height() <= page.annotation.height);
            }
        }
    }

    #[test]
    fn empty_line_set_yields_no_crops() {
        let img = RgbImage::new(32, 32);
        let page = PageAnnotation { image_id: "e".into(), width: 32, height: 32, boxes: vec![] };
        let map = CodepointMap::new();
        let crops =
            make_multiline_crops(&img, &page, &[], &map, 1, 5, DEFAULT_CROP_MARGIN, 1).unwrap();
        assert!(crops.is_empty());
    }

    #[test]
    fn default_grouping_hits_target_magnitude() {
        // 3,493 pages at realistic line counts with the default group-size
        // rule land near the expected ~9,500 crops.
        use rand::Rng;
        let mut rng = crate::seed::rng(404);
        let mut total = 0usize;
        for _ in 0..3493 {
            let n_lines = rng.gen_range(6..=10);
            total +=
                partition_group_sizes(n_lines, DEFAULT_GROUP_MIN, DEFAULT_GROUP_MAX, &mut rng)
                    .unwrap()
                    .len();
        }
        assert!((8000..=11000).contains(&total), "{total} crops");
    }

    #[test]
    fn stage_sizes_match_table_arithmetic() {
        let crops = entries("crop", 9499, SampleKind::MultilineCrop);
        let full = entries("page", 3493, SampleKind::FullPage);
        let generated = entries("gen", 3493, SampleKind::Generated);
        let s1 = build_stage_manifest(1, &crops, &full, &generated).unwrap();
        let s2 = build_stage_manifest(2, &crops, &full, &generated).unwrap();
        let s3 = build_stage_manifest(3, &crops, &full, &generated).unwrap();
        assert_eq!(s1.entries.len(), 9499);
        assert_eq!(s2.entries.len(), 12992);
        assert_eq!(s3.entries.len(), 16485);

        // Containment by sample-id multiset.
        let ids = |m: &CurriculumManifest| {
            let mut v: Vec<String> = m.entries.iter().map(|e| e.sample_id.clone()).collect();
            v.sort();
            v
        };
        let (i1, i2, i3) = (ids(&s1), ids(&s2), ids(&s3));
        assert!(i1.iter().all(|id| i2.binary_search(id).is_ok()));
        assert!(i2.iter().all(|id| i3.binary_search(id).is_ok()));
    }

    #[test]
    fn empty_generated_makes_stage3_equal_stage2() {
        let crops = entries("crop", 4, SampleKind::MultilineCrop);
        let full = entries("page", 2, SampleKind::FullPage);
        let s2 = build_stage_manifest(2, &crops, &full, &[]).unwrap();
        let s3 = build_stage_manifest(3, &crops, &full, &[]).unwrap();
        assert_eq!(s2.entries, s3.entries);
    }

    #[test]
    fn bad_stage_and_bad_kinds_rejected() {
        assert!(build_stage_manifest(0, &[], &[], &[]).is_err());
        assert!(build_stage_manifest(4, &[], &[], &[]).is_err());
        let wrong = entries("x", 1, SampleKind::FullPage);
        assert!(build_stage_manifest(1, &wrong, &[], &[]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = build_stage_manifest(
            2,
            &entries("crop", 3, SampleKind::MultilineCrop),
            &entries("page", 2, SampleKind::FullPage),
            &[],
        )
        .unwrap();
        m.entries[0].transcript = "line1\nline2\twith tab".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage2.tsv");
        save_manifest(&path, &m, &["meta seed=1".into()]).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn manifest_rejects_mixed_stages() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(
            &path,
            "#kforge-manifest v1\n1\ta\tmultiline_crop\tp.png\tab\n2\tb\tfull_page\tq.png\tcd\n",
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("mixed"), "{err}");
    }

    #[test]
    fn samples_round_trip() {
        let list = entries("gen", 3, SampleKind::Generated);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.tsv");
        save_samples(&path, &list, &[]).unwrap();
        assert_eq!(load_samples(&path).unwrap(), list);
    }

    /// Scripted trainer: validation scores are read off a per-stage script;
    /// "parameters" are the (stage, epoch) tag of the last training step,
    /// so checkpoint identity is observable.
    struct ScriptedTrainer {
        scripts: Vec<Vec<f64>>,
        stage_idx: usize,
        epoch: usize,
        params: (usize, usize),
        restores: Vec<(usize, usize)>,
        diverge_at: Option<(usize, usize)>,
    }

    impl ScriptedTrainer {
        fn new(scripts: Vec<Vec<f64>>) -> Self {
            ScriptedTrainer {
                scripts,
                stage_idx: 0,
                epoch: 0,
                params: (0, 0),
                restores: Vec::new(),
                diverge_at: None,
            }
        }
    }

    impl CurriculumTrainer for ScriptedTrainer {
        type Checkpoint = (usize, usize);

        fn begin_stage(&mut self, manifest: &CurriculumManifest) -> Result<()> {
            self.stage_idx = manifest.stage as usize;
            self.epoch = 0;
            Ok(())
        }

        fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
            if self.diverge_at == Some((self.stage_idx, epoch)) {
                return Err(Error::Diverged {
                    stage: self.stage_idx,
                    epoch,
                    batch: 0,
                    max_grad: f64::INFINITY,
                });
            }
            self.epoch = epoch;
            self.params = (self.stage_idx, epoch);
            Ok(1.0)
        }

        fn validation_score(&mut self) -> Result<f64> {
            Ok(self.scripts[self.stage_idx - 1][self.epoch - 1])
        }

        fn snapshot(&self) -> Self::Checkpoint {
            self.params
        }

        fn restore(&mut self, checkpoint: &Self::Checkpoint) {
            self.params = *checkpoint;
            self.restores.push(*checkpoint);
        }
    }

    fn manifest(stage: u8) -> CurriculumManifest {
        CurriculumManifest {
            stage,
            entries: entries("crop", 1, SampleKind::MultilineCrop),
        }
    }

    #[test]
    fn patience_one_stops_after_first_non_improvement() {
        let mut t = ScriptedTrainer::new(vec![vec![10.0, 9.0, 99.0]]);
        let rule = StopRule { patience: 1, max_epochs_per_stage: 100 };
        let outcomes = run_schedule(&mut t, &[manifest(1)], rule).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].epochs_run, 2);
        assert_eq!(outcomes[0].best_epoch, 1);
        assert_eq!(outcomes[0].best_score, 10.0);
        assert_eq!(outcomes[0].checkpoint, (1, 1));
    }

    #[test]
    fn improvement_then_plateau_stops_after_patience() {
        let scores = vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0, 99.0];
        let mut t = ScriptedTrainer::new(vec![scores]);
        let rule = StopRule { patience: 3, max_epochs_per_stage: 100 };
        let outcomes = run_schedule(&mut t, &[manifest(1)], rule).unwrap();
        assert_eq!(outcomes[0].epochs_run, 8);
        assert_eq!(outcomes[0].best_epoch, 5);
        assert_eq!(outcomes[0].best_score, 5.0);
    }

    #[test]
    fn ties_keep_the_earliest_epoch() {
        let mut t = ScriptedTrainer::new(vec![vec![5.0, 5.0, 5.0, 5.0]]);
        let rule = StopRule { patience: 2, max_epochs_per_stage: 100 };
        let outcomes = run_schedule(&mut t, &[manifest(1)], rule).unwrap();
        assert_eq!(outcomes[0].best_epoch, 1);
        assert_eq!(outcomes[0].epochs_run, 3);
    }

    #[test]
    fn epoch_cap_bounds_a_stage() {
        let mut t = ScriptedTrainer::new(vec![(1..=50).map(f64::from).collect()]);
        let rule = StopRule { patience: 10, max_epochs_per_stage: 4 };
        let outcomes = run_schedule(&mut t, &[manifest(1)], rule).unwrap();
        assert_eq!(outcomes[0].epochs_run, 4);
        assert_eq!(outcomes[0].best_epoch, 4);
    }

    #[test]
    fn stages_warm_start_from_previous_best() {
        let mut t = ScriptedTrainer::new(vec![
            vec![1.0, 7.0, 3.0, 3.0],
            vec![8.0, 9.0, 9.0, 9.0],
        ]);
        let rule = StopRule { patience: 2, max_epochs_per_stage: 100 };
        let outcomes = run_schedule(&mut t, &[manifest(1), manifest(2)], rule).unwrap();
        assert_eq!(outcomes[0].checkpoint, (1, 2));
        assert_eq!(outcomes[1].checkpoint, (2, 2));
        // The stage-1 best was restored before stage 2 began, and stage 2's
        // best restored at the end.
        assert_eq!(t.restores, vec![(1, 2), (2, 2)]);
    }

    #[test]
    fn divergence_aborts_stage_with_last_finite_checkpoint() {
        let mut t = ScriptedTrainer::new(vec![
            vec![1.0, 2.0, 3.0],
            vec![4.0, 99.0, 99.0],
            vec![5.0, 5.0, 5.0],
        ]);
        t.diverge_at = Some((2, 2));
        let rule = StopRule { patience: 2, max_epochs_per_stage: 3 };
        let outcomes =
            run_schedule(&mut t, &[manifest(1), manifest(2), manifest(3)], rule).unwrap();
        assert!(!outcomes[0].diverged);
        assert!(outcomes[1].diverged);
        assert_eq!(outcomes[1].best_epoch, 1);
        assert_eq!(outcomes[1].checkpoint, (2, 1));
        // Stage 3 still ran, warm-started from stage 2's best.
        assert!(!outcomes[2].diverged);
        assert_eq!(outcomes[2].epochs_run, 3);
    }

    #[test]
    fn schedule_is_deterministic() {
        let scripts = vec![vec![1.0, 3.0, 2.0, 2.0], vec![4.0, 4.0, 4.0]];
        let rule = StopRule { patience: 2, max_epochs_per_stage: 10 };
        let run = |scripts: Vec<Vec<f64>>| {
            let mut t = ScriptedTrainer::new(scripts);
            run_schedule(&mut t, &[manifest(1), manifest(2)], rule)
                .unwrap()
                .iter()
                .map(|o| (o.stage, o.best_epoch, o.epochs_run, o.checkpoint))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(scripts.clone()), run(scripts));
    }

    #[test]
    fn stop_rule_validation() {
        assert!(StopRule { patience: 0, max_epochs_per_stage: 5 }.validate().is_err());
        assert!(StopRule { patience: 1, max_epochs_per_stage: 0 }.validate().is_err());
        assert!(StopRule::default().validate().is_ok());
    }
}
