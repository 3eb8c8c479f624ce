//! Scoring: character recognition rate over transcript pairs and detection
//! precision/recall/F1 over point predictions.
//!
//! CRR is reported as a percentage: `100 × (1 − ΣED/Z)` where `ED` is the
//! Levenshtein distance per pair and `Z` the total reference length. The
//! un-scaled variant `100 − ΣED/Z` is selectable for comparison, as is
//! excluding the line separator from scoring.
//!
//! Detections are matched one-to-one by the competition's rule: a predicted
//! point matches a ground-truth box only if the point lies inside the box
//! (edges inclusive) and the codepoints are equal. Matching is greedy and
//! deterministic: predictions in input order, each taking the first
//! unmatched qualifying box in input order.

use crate::annotation::{self, CharBox};
use crate::error::{Error, Result};
use crate::lines::LINE_SEPARATOR;
use crate::textio;
use std::fmt::Write as _;
use std::path::Path;

pub const REPORT_HEADER: &str = "#kforge-report v1";

/// One reference/hypothesis transcript pair (flat form, separators included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub target: String,
    pub hypothesis: String,
}

impl EvalPair {
    pub fn new(target: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        EvalPair { target: target.into(), hypothesis: hypothesis.into() }
    }
}

/// A predicted character: class plus center-point location in page pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub codepoint: u32,
    pub x: f64,
    pub y: f64,
}

/// How the recognition-rate percentage is formed from ΣED and Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrrMode {
    /// `100 × (1 − ΣED/Z)`: the percentage interpretation.
    #[default]
    Normalized,
    /// `100 − ΣED/Z`: the un-scaled difference, for comparison.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrrOptions {
    pub mode: CrrMode,
    /// Score the line separator as an ordinary character (default) or strip
    /// it from both sides first.
    pub score_separator: bool,
}

impl Default for CrrOptions {
    fn default() -> Self {
        CrrOptions { mode: CrrMode::Normalized, score_separator: true }
    }
}

/// Levenshtein distance over characters, unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn strip_separator(s: &str) -> String {
    s.chars().filter(|&c| c != LINE_SEPARATOR).collect()
}

/// Total edit distance and total reference length over a pair set.
pub fn crr_totals(pairs: &[EvalPair], options: CrrOptions) -> (usize, usize) {
    let mut total_ed = 0usize;
    let mut z = 0usize;
    for pair in pairs {
        let (t, h) = if options.score_separator {
            (pair.target.clone(), pair.hypothesis.clone())
        } else {
            (strip_separator(&pair.target), strip_separator(&pair.hypothesis))
        };
        total_ed += edit_distance(&t, &h);
        z += t.chars().count();
    }
    (total_ed, z)
}

/// Character recognition rate with explicit options.
pub fn crr_with(pairs: &[EvalPair], options: CrrOptions) -> Result<f64> {
    let (total_ed, z) = crr_totals(pairs, options);
    if z == 0 {
        return Err(Error::InvalidInput(
            "recognition rate undefined: total reference length is zero".into(),
        ));
    }
    let ratio = total_ed as f64 / z as f64;
    Ok(match options.mode {
        CrrMode::Normalized => 100.0 * (1.0 - ratio),
        CrrMode::Literal => 100.0 - ratio,
    })
}

/// Character recognition rate with default options (normalized percentage,
/// separator scored).
pub fn crr(pairs: &[EvalPair]) -> Result<f64> {
    crr_with(pairs, CrrOptions::default())
}

fn point_in_box(p: &PointPrediction, b: &CharBox) -> bool {
    p.x >= b.x as f64
        && p.x <= b.right() as f64
        && p.y >= b.y as f64
        && p.y <= b.bottom() as f64
}

/// Greedy one-to-one matching: predictions in input order, each taking the
/// first unmatched box (input order) that contains its point and shares its
/// codepoint. Returns (prediction index, box index) pairs.
pub fn match_predictions(preds: &[PointPrediction], gt: &[CharBox]) -> Vec<(usize, usize)> {
    let mut taken = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (gi, b) in gt.iter().enumerate() {
            if !taken[gi] && b.codepoint == p.codepoint && point_in_box(p, b) {
                taken[gi] = true;
                matches.push((pi, gi));
                break;
            }
        }
    }
    matches
}

/// Precision, recall, and F1 from the greedy matching. Degenerate cases
/// score zero rather than erroring.
pub fn detection_scores(preds: &[PointPrediction], gt: &[CharBox]) -> (f64, f64, f64) {
    let m = match_predictions(preds, gt).len() as f64;
    let precision = if preds.is_empty() { 0.0 } else { m / preds.len() as f64 };
    let recall = if gt.is_empty() { 0.0 } else { m / gt.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Per-page scoring row. Transcript fields are zero for detection-only
/// evaluations and vice versa.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReportRow {
    pub image_id: String,
    pub edit_distance: usize,
    pub target_len: usize,
    pub matched: usize,
    pub predicted: usize,
    pub gt: usize,
}

/// Aggregated evaluation results plus the per-page rows they sum over.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// None when no transcripts were scored (detection-only report).
    pub crr: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Score transcript pairs; detection counts stay zero.
    pub fn from_pairs(ids: &[String], pairs: &[EvalPair], options: CrrOptions) -> Result<Self> {
        if ids.len() != pairs.len() {
            return Err(Error::InvalidInput(format!(
                "{} ids for {} pairs",
                ids.len(),
                pairs.len()
            )));
        }
        let value = crr_with(pairs, options)?;
        let rows = ids
            .iter()
            .zip(pairs)
            .map(|(id, pair)| {
                let one = std::slice::from_ref(pair);
                let (ed, z) = crr_totals(one, options);
                ReportRow {
                    image_id: id.clone(),
                    edit_distance: ed,
                    target_len: z,
                    ..ReportRow::default()
                }
            })
            .collect();
        Ok(EvalReport { crr: Some(value), precision: 0.0, recall: 0.0, f1: 0.0, rows })
    }

    /// Score per-page detections; transcript fields stay zero.
    pub fn from_detections(
        pages: &[(String, Vec<PointPrediction>, Vec<CharBox>)],
    ) -> Self {
        let mut rows = Vec::with_capacity(pages.len());
        let (mut matched, mut predicted, mut gt_total) = (0usize, 0usize, 0usize);
        for (id, preds, gt) in pages {
            let m = match_predictions(preds, gt).len();
            matched += m;
            predicted += preds.len();
            gt_total += gt.len();
            rows.push(ReportRow {
                image_id: id.clone(),
                matched: m,
                predicted: preds.len(),
                gt: gt.len(),
                ..ReportRow::default()
            });
        }
        let precision = if predicted == 0 { 0.0 } else { matched as f64 / predicted as f64 };
        let recall = if gt_total == 0 { 0.0 } else { matched as f64 / gt_total as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport { crr: None, precision, recall, f1, rows }
    }

    /// Human-readable table.
    pub fn human_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>6} {:>6} {:>8} {:>10} {:>6}", "image_id", "ed", "len", "matched", "predicted", "gt");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>6} {:>8} {:>10} {:>6}",
                row.image_id, row.edit_distance, row.target_len, row.matched, row.predicted, row.gt
            );
        }
        match self.crr {
            Some(v) => {
                let _ = writeln!(out, "crr: {v:.6}");
            }
            None => {
                let _ = writeln!(out, "crr: n/a");
            }
        }
        let _ = writeln!(
            out,
            "precision: {:.6}  recall: {:.6}  f1: {:.6}",
            self.precision, self.recall, self.f1
        );
        out
    }
}

/// Persist a report: aggregates as meta lines, one row per page.
pub fn save_report(path: &Path, report: &EvalReport, meta: &[String]) -> Result<()> {
    let mut all_meta: Vec<String> = meta.to_vec();
    all_meta.push(match report.crr {
        Some(v) => format!("crr={v:.6}"),
        None => "crr=NA".to_string(),
    });
    all_meta.push(format!(
        "precision={:.6} recall={:.6} f1={:.6}",
        report.precision, report.recall, report.f1
    ));
    let records: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                textio::escape_field(&r.image_id),
                r.edit_distance,
                r.target_len,
                r.matched,
                r.predicted,
                r.gt
            )
        })
        .collect();
    textio::write_records(path, REPORT_HEADER, &all_meta, &records)
}

/// Write predictions in the submission shape: `image_id,labels` with
/// space-separated `codepoint x y` triples, coordinates rounded to pixels.
pub fn save_submission(path: &Path, pages: &[(String, Vec<PointPrediction>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        Error::InvalidInput(format!("cannot write {}: {e}", path.display()))
    })?;
    w.write_record(["image_id", "labels"])
        .and_then(|_| {
            for (id, preds) in pages {
                let mut labels = String::new();
                for (i, p) in preds.iter().enumerate() {
                    if i > 0 {
                        labels.push(' ');
                    }
                    let _ = write!(
                        labels,
                        "{} {} {}",
                        annotation::format_codepoint(p.codepoint),
                        p.x.round() as i64,
                        p.y.round() as i64
                    );
                }
                w.write_record([id.as_str(), labels.as_str()])?;
            }
            w.flush()?;
            Ok(())
        })
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

/// Read a submission file back into per-page point predictions.
pub fn load_submission(path: &Path) -> Result<Vec<(String, Vec<PointPrediction>)>> {
    let pathstr = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(&pathstr, 0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::parse(&pathstr, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != ["image_id", "labels"] {
        return Err(Error::parse(
            &pathstr,
            1,
            format!("expected header `image_id,labels`, found {got:?}"),
        ));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(&pathstr, line, e.to_string()))?;
        if record.len() != 2 {
            return Err(Error::parse(
                &pathstr,
                line,
                format!("expected 2 columns, found {}", record.len()),
            ));
        }
        let image_id = record[0].to_string();
        let labels = record[1].trim();
        let mut preds = Vec::new();
        if !labels.is_empty() {
            let tokens: Vec<&str> = labels.split_whitespace().collect();
            if tokens.len() % 3 != 0 {
                return Err(Error::parse(
                    &pathstr,
                    line,
                    format!(
                        "row for {image_id:?}: labels must be `codepoint x y` triples, found {} tokens",
                        tokens.len()
                    ),
                ));
            }
            for triple in tokens.chunks(3) {
                let codepoint = annotation::parse_codepoint(triple[0])
                    .map_err(|msg| Error::parse(&pathstr, line, format!("row for {image_id:?}: {msg}")))?;
                let parse_coord = |t: &str| -> Result<f64> {
                    let v: f64 = t.parse().map_err(|_| {
                        Error::parse(
                            &pathstr,
                            line,
                            format!("row for {image_id:?}: bad coordinate {t:?}"),
                        )
                    })?;
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::parse(
                            &pathstr,
                            line,
                            format!("row for {image_id:?}: coordinate {t:?} out of range"),
                        ));
                    }
                    Ok(v)
                };
                preds.push(PointPrediction {
                    codepoint,
                    x: parse_coord(triple[1])?,
                    y: parse_coord(triple[2])?,
                });
            }
        }
        out.push((image_id, preds));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashMap;

    /// Independent oracle: plain recursive Levenshtein with memoization.
    fn ed_oracle(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let key = (a.len(), b.len());
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let mut best = ed_oracle(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        best = best.min(ed_oracle(&a[1..], b, memo) + 1);
        best = best.min(ed_oracle(a, &b[1..], memo) + 1);
        memo.insert(key, best);
        best
    }

    fn oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        ed_oracle(&a, &b, &mut HashMap::new())
    }

    /// Independent oracle: maximum bipartite matching via augmenting paths.
    fn max_matching(adjacency: &[Vec<usize>], n_right: usize) -> usize {
        fn augment(
            left: usize,
            adjacency: &[Vec<usize>],
            seen: &mut [bool],
            match_right: &mut [usize],
        ) -> bool {
            for &r in &adjacency[left] {
                if !seen[r] {
                    seen[r] = true;
                    if match_right[r] == usize::MAX
                        || augment(match_right[r], adjacency, seen, match_right)
                    {
                        match_right[r] = left;
                        return true;
                    }
                }
            }
            false
        }
        let mut match_right = vec![usize::MAX; n_right];
        let mut count = 0;
        for l in 0..adjacency.len() {
            let mut seen = vec![false; n_right];
            if augment(l, adjacency, &mut seen, &mut match_right) {
                count += 1;
            }
        }
        count
    }

    fn random_string(rng: &mut rand_chacha::ChaCha8Rng, max_len: usize) -> String {
        let len = rng.gen_range(0..=max_len);
        (0..len).map(|_| (b'a' + rng.gen_range(0..5u8)) as char).collect()
    }

    #[test]
    fn edit_distance_trivial_cases() {
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("abc", ""), 3);
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(edit_distance("", ""), 0);
        assert_eq!(edit_distance("abcd", "abcx"), 1);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
    }

    #[test]
    fn edit_distance_matches_recursive_oracle() {
        let mut rng = crate::seed::rng(17);
        for _ in 0..1000 {
            let a = random_string(&mut rng, 12);
            let b = random_string(&mut rng, 12);
            assert_eq!(edit_distance(&a, &b), oracle(&a, &b), "a={a:?} b={b:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn edit_distance_is_a_metric(
            a in "[a-e\\n]{0,10}",
            b in "[a-e\\n]{0,10}",
            c in "[a-e\\n]{0,10}",
        ) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            if ab == 0 {
                prop_assert_eq!(&a, &b);
            }
            let bc = edit_distance(&b, &c);
            let ac = edit_distance(&a, &c);
            prop_assert!(ac <= ab + bc);
            let (la, lb) = (a.chars().count(), b.chars().count());
            prop_assert!(ab <= la.max(lb));
            prop_assert!(ab >= la.abs_diff(lb));
        }

        #[test]
        fn crr_of_identical_pairs_is_exactly_100(
            texts in proptest::collection::vec("[a-e\\n]{1,12}", 1..6),
        ) {
            let pairs: Vec<EvalPair> =
                texts.iter().map(|t| EvalPair::new(t.clone(), t.clone())).collect();
            prop_assert_eq!(crr(&pairs).unwrap(), 100.0);
        }

        #[test]
        fn perfect_pair_never_decreases_crr(
            target in "[a-e]{1,12}",
            hyp in "[a-e]{0,12}",
            extra in "[a-e]{1,12}",
        ) {
            let base = vec![EvalPair::new(target, hyp)];
            let before = crr(&base).unwrap();
            let mut extended = base;
            extended.push(EvalPair::new(extra.clone(), extra));
            let after = crr(&extended).unwrap();
            prop_assert!(after >= before - 1e-12, "before {before}, after {after}");
        }
    }

    #[test]
    fn crr_spec_examples() {
        assert_eq!(crr(&[EvalPair::new("あい", "あい")]).unwrap(), 100.0);
        assert_eq!(crr(&[EvalPair::new("abcd", "abcx")]).unwrap(), 75.0);
        assert_eq!(
            crr(&[EvalPair::new("ab", "ab"), EvalPair::new("cd", "ce")]).unwrap(),
            75.0
        );
    }

    #[test]
    fn crr_empty_reference_is_an_error() {
        assert!(crr(&[]).is_err());
        assert!(crr(&[EvalPair::new("", "xyz")]).is_err());
    }

    #[test]
    fn crr_can_go_negative() {
        let v = crr(&[EvalPair::new("a", "xyzw")]).unwrap();
        assert!(v < 0.0, "{v}");
    }

    #[test]
    fn literal_mode_skips_percentage_scaling() {
        let pairs = [EvalPair::new("abcd", "abcx")];
        let options = CrrOptions { mode: CrrMode::Literal, ..CrrOptions::default() };
        assert_eq!(crr_with(&pairs, options).unwrap(), 99.75);
    }

    #[test]
    fn separator_can_be_excluded() {
        let pairs = [EvalPair::new("ab\ncd", "abcd")];
        assert_eq!(crr(&pairs).unwrap(), 80.0);
        let options = CrrOptions { score_separator: false, ..CrrOptions::default() };
        assert_eq!(crr_with(&pairs, options).unwrap(), 100.0);
    }

    fn boxed(cp: u32, x: u32, y: u32, w: u32, h: u32) -> CharBox {
        CharBox { codepoint: cp, x, y, w, h }
    }

    fn pred(cp: u32, x: f64, y: f64) -> PointPrediction {
        PointPrediction { codepoint: cp, x, y }
    }

    #[test]
    fn center_point_matches_same_class_box() {
        let gt = [boxed(1, 10, 10, 20, 20)];
        let preds = [pred(1, 20.0, 20.0)];
        assert_eq!(match_predictions(&preds, &gt), vec![(0, 0)]);
    }

    #[test]
    fn matching_is_one_to_one() {
        let gt = [boxed(1, 10, 10, 20, 20)];
        let preds = [pred(1, 15.0, 15.0), pred(1, 25.0, 25.0)];
        assert_eq!(match_predictions(&preds, &gt).len(), 1);
    }

    #[test]
    fn box_edges_are_inclusive() {
        let gt = [boxed(1, 10, 10, 20, 20)];
        for (x, y) in [(10.0, 10.0), (30.0, 30.0), (10.0, 30.0), (30.0, 10.0)] {
            assert_eq!(match_predictions(&[pred(1, x, y)], &gt).len(), 1, "({x},{y})");
        }
        assert!(match_predictions(&[pred(1, 30.001, 20.0)], &gt).is_empty());
    }

    #[test]
    fn class_mismatch_never_matches() {
        let gt = [boxed(1, 10, 10, 20, 20)];
        assert!(match_predictions(&[pred(2, 20.0, 20.0)], &gt).is_empty());
    }

    #[test]
    fn greedy_is_bounded_by_and_usually_equals_optimal() {
        let mut rng = crate::seed::rng(23);
        let mut equal = 0usize;
        let total = 500;
        for _ in 0..total {
            let n_preds = rng.gen_range(0..=8);
            let n_gt = rng.gen_range(0..=8);
            let gt: Vec<CharBox> = (0..n_gt)
                .map(|_| {
                    boxed(
                        rng.gen_range(1..4),
                        rng.gen_range(0..40),
                        rng.gen_range(0..40),
                        rng.gen_range(5..25),
                        rng.gen_range(5..25),
                    )
                })
                .collect();
            let preds: Vec<PointPrediction> = (0..n_preds)
                .map(|_| {
                    pred(
                        rng.gen_range(1..4),
                        rng.gen_range(0.0..60.0),
                        rng.gen_range(0.0..60.0),
                    )
                })
                .collect();
            let adjacency: Vec<Vec<usize>> = preds
                .iter()
                .map(|p| {
                    gt.iter()
                        .enumerate()
                        .filter(|(_, b)| b.codepoint == p.codepoint && point_in_box(p, b))
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect();
            let optimal = max_matching(&adjacency, gt.len());
            let greedy = match_predictions(&preds, &gt).len();
            assert!(greedy <= optimal, "greedy {greedy} exceeds optimal {optimal}");
            if greedy == optimal {
                equal += 1;
            }
            // The oracle is invariant under ground-truth permutation.
            let mut perm: Vec<usize> = (0..gt.len()).collect();
            crate::seed::shuffle(&mut perm, &mut rng);
            let remap: Vec<Vec<usize>> = adjacency
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&g| perm.iter().position(|&p| p == g).unwrap())
                        .collect()
                })
                .collect();
            assert_eq!(max_matching(&remap, gt.len()), optimal);
        }
        assert!(
            equal * 100 >= total * 95,
            "greedy equalled optimal on only {equal}/{total} instances"
        );
    }

    #[test]
    fn detection_score_formulas() {
        // Construct 12 gt boxes and 10 predictions with exactly 8 matchable.
        let gt: Vec<CharBox> = (0..12)
            .map(|i| boxed(1, (i as u32) * 50, 0, 20, 20))
            .collect();
        let mut preds: Vec<PointPrediction> = (0..8)
            .map(|i| pred(1, (i as f64) * 50.0 + 10.0, 10.0))
            .collect();
        preds.push(pred(1, 1000.0, 1000.0));
        preds.push(pred(2, 410.0, 10.0));
        let (p, r, f1) = detection_scores(&preds, &gt);
        assert!((p - 0.8).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 8.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_detection_scores_one() {
        let gt: Vec<CharBox> = (0..5).map(|i| boxed(i + 1, (i as u32) * 30, 0, 20, 20)).collect();
        let preds: Vec<PointPrediction> = gt
            .iter()
            .map(|b| pred(b.codepoint, b.x_center(), b.y_center()))
            .collect();
        assert_eq!(detection_scores(&preds, &gt), (1.0, 1.0, 1.0));
    }

    #[test]
    fn degenerate_detection_cases_score_zero() {
        let gt = [boxed(1, 0, 0, 10, 10)];
        assert_eq!(detection_scores(&[], &gt), (0.0, 0.0, 0.0));
        assert_eq!(detection_scores(&[pred(1, 5.0, 5.0)], &[]), (0.0, 0.0, 0.0));
        assert_eq!(detection_scores(&[], &[]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn matched_bounded_and_f1_in_unit_interval() {
        let mut rng = crate::seed::rng(31);
        for _ in 0..200 {
            let gt: Vec<CharBox> = (0..rng.gen_range(0..6))
                .map(|_| {
                    boxed(rng.gen_range(1..3), rng.gen_range(0..30), rng.gen_range(0..30), 10, 10)
                })
                .collect();
            let preds: Vec<PointPrediction> = (0..rng.gen_range(0..6))
                .map(|_| pred(rng.gen_range(1..3), rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)))
                .collect();
            let m = match_predictions(&preds, &gt).len();
            assert!(m <= preds.len().min(gt.len()));
            let (_, _, f1) = detection_scores(&preds, &gt);
            assert!((0.0..=1.0).contains(&f1));
        }
    }

    #[test]
    fn report_rows_sum_to_aggregates() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let pairs = vec![EvalPair::new("ab", "ab"), EvalPair::new("cd", "ce")];
        let report = EvalReport::from_pairs(&ids, &pairs, CrrOptions::default()).unwrap();
        assert_eq!(report.crr, Some(75.0));
        let ed: usize = report.rows.iter().map(|r| r.edit_distance).sum();
        let z: usize = report.rows.iter().map(|r| r.target_len).sum();
        assert_eq!((ed, z), (1, 4));

        let pages = vec![
            ("a".to_string(), vec![pred(1, 5.0, 5.0)], vec![boxed(1, 0, 0, 10, 10)]),
            ("b".to_string(), vec![pred(1, 50.0, 50.0)], vec![boxed(1, 0, 0, 10, 10)]),
        ];
        let report = EvalReport::from_detections(&pages);
        assert_eq!(report.crr, None);
        let matched: usize = report.rows.iter().map(|r| r.matched).sum();
        assert_eq!(matched, 1);
        assert_eq!(report.precision, 0.5);
        assert_eq!(report.recall, 0.5);
        assert_eq!(report.f1, 0.5);
    }

    #[test]
    fn report_file_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.tsv");
        let report = EvalReport::from_pairs(
            &["p1".to_string()],
            &[EvalPair::new("abcd", "abcx")],
            CrrOptions::default(),
        )
        .unwrap();
        save_report(&path, &report, &["meta config=0 seed=1".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("#crr=75.000000"), "{text}");
        assert!(text.contains("p1\t1\t4\t0\t0\t0"), "{text}");
    }

    #[test]
    fn submission_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("submission.csv");
        let pages = vec![
            ("p1".to_string(), vec![pred(0x3042, 10.0, 20.0), pred(0x3044, 30.0, 40.0)]),
            ("p2".to_string(), vec![]),
        ];
        save_submission(&path, &pages).unwrap();
        let loaded = load_submission(&path).unwrap();
        assert_eq!(loaded, pages);
    }

    #[test]
    fn submission_rejects_ragged_triples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("submission.csv");
        std::fs::write(&path, "image_id,labels\np1,U+3042 10\n").unwrap();
        let err = load_submission(&path).unwrap_err();
        assert!(err.to_string().contains("p1"), "{err}");
    }
}
