//! Line assembly: group a page's character boxes into vertical text lines and
//! impose right-to-left, top-to-bottom reading order.
//!
//! Clustering is greedy agglomeration over horizontal overlap: boxes are
//! visited by descending x-center, and a box joins the line whose running
//! bounding box it overlaps by at least `overlap_threshold` of the narrower
//! of the two; otherwise it opens a new line. The default threshold of 0.4
//! keeps adjacent columns separate whenever the column gap is at least half
//! a column width.

use crate::annotation::{CharBox, CodepointMap, PageAnnotation};
use crate::error::{Error, Result};
use crate::textio;
use std::fmt::Write as _;
use std::path::Path;

pub const LINES_HEADER: &str = "#kforge-lines v1";

pub const TRANSCRIPTS_HEADER: &str = "#kforge-transcripts v1";

/// The line separator used in flat transcripts. A reserved symbol outside
/// the codepoint alphabet; the recognizer emits it to reconstruct layout.
pub const LINE_SEPARATOR: char = '\n';

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.4;

/// One vertical text line: member box indices in top-to-bottom order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextLine {
    /// Indices into `PageAnnotation.boxes`, ordered top to bottom.
    pub box_indices: Vec<usize>,
    /// Tight bounds over member boxes: (x, y, w, h).
    pub line_bbox: (u32, u32, u32, u32),
    /// Mean of member box x-centers, in pixels.
    pub x_center: f64,
}

impl TextLine {
    pub fn bbox_right(&self) -> u32 {
        self.line_bbox.0 + self.line_bbox.2
    }

    pub fn bbox_bottom(&self) -> u32 {
        self.line_bbox.1 + self.line_bbox.3
    }
}

/// Per-line transcript strings in reading order plus the flat joined form.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PageTranscript {
    pub lines: Vec<String>,
    pub flat: String,
}

impl PageTranscript {
    pub fn from_lines(lines: Vec<String>) -> Self {
        let flat = lines.join(&LINE_SEPARATOR.to_string());
        PageTranscript { lines, flat }
    }
}

struct LineBuilder {
    indices: Vec<usize>,
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    x_center_sum: f64,
}

impl LineBuilder {
    fn new(idx: usize, b: &CharBox) -> Self {
        LineBuilder {
            indices: vec![idx],
            x0: b.x,
            y0: b.y,
            x1: b.right(),
            y1: b.bottom(),
            x_center_sum: b.x_center(),
        }
    }

    fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    fn add(&mut self, idx: usize, b: &CharBox) {
        self.indices.push(idx);
        self.x0 = self.x0.min(b.x);
        self.y0 = self.y0.min(b.y);
        self.x1 = self.x1.max(b.right());
        self.y1 = self.y1.max(b.bottom());
        self.x_center_sum += b.x_center();
    }

    fn x_center(&self) -> f64 {
        self.x_center_sum / self.indices.len() as f64
    }
}

/// Group boxes into vertical lines and order them right to left.
///
/// Every box lands in exactly one line. Lines are ordered by decreasing
/// x-center (ties: smaller top y first); within a line boxes are ordered by
/// increasing y-center (ties: decreasing x-center). Deterministic; an empty
/// page yields an empty list.
pub fn assemble_lines(page: &PageAnnotation, overlap_threshold: f64) -> Vec<TextLine> {
    let mut order: Vec<usize> = (0..page.boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ba, bb) = (&page.boxes[a], &page.boxes[b]);
        bb.x_center()
            .partial_cmp(&ba.x_center())
            .unwrap()
            .then(ba.y_center().partial_cmp(&bb.y_center()).unwrap())
            .then(a.cmp(&b))
    });

    let mut builders: Vec<LineBuilder> = Vec::new();
    for idx in order {
        let b = &page.boxes[idx];
        let mut best: Option<(usize, f64)> = None;
        for (li, lb) in builders.iter().enumerate() {
            let overlap = b.x_overlap(lb.x0, lb.x1);
            let denom = b.w.min(lb.width()) as f64;
            if denom <= 0.0 {
                continue;
            }
            let ratio = overlap / denom;
            if ratio >= overlap_threshold {
                let better = match best {
                    None => true,
                    Some((bi, br)) => {
                        ratio > br
                            || (ratio == br
                                && builders[li].x_center() > builders[bi].x_center())
                    }
                };
                if better {
                    best = Some((li, ratio));
                }
            }
        }
        match best {
            Some((li, _)) => builders[li].add(idx, b),
            None => builders.push(LineBuilder::new(idx, b)),
        }
    }

    let mut lines: Vec<TextLine> = builders
        .into_iter()
        .map(|mut lb| {
            lb.indices.sort_by(|&a, &b| {
                let (ba, bb) = (&page.boxes[a], &page.boxes[b]);
                ba.y_center()
                    .partial_cmp(&bb.y_center())
                    .unwrap()
                    .then(bb.x_center().partial_cmp(&ba.x_center()).unwrap())
                    .then(a.cmp(&b))
            });
            TextLine {
                x_center: lb.x_center(),
                line_bbox: (lb.x0, lb.y0, lb.x1 - lb.x0, lb.y1 - lb.y0),
                box_indices: lb.indices,
            }
        })
        .collect();

    lines.sort_by(|a, b| {
        b.x_center
            .partial_cmp(&a.x_center)
            .unwrap()
            .then(a.line_bbox.1.cmp(&b.line_bbox.1))
    });
    lines
}

/// Map each line's boxes (which must cover the page's boxes exactly once)
/// through the codepoint map into per-line strings plus the flat transcript.
pub fn transcript_of(
    page: &PageAnnotation,
    lines: &[TextLine],
    map: &CodepointMap,
) -> Result<PageTranscript> {
    let mut seen = vec![false; page.boxes.len()];
    let mut count = 0usize;
    for line in lines {
        for &i in &line.box_indices {
            if i >= seen.len() || seen[i] {
                return Err(Error::InvalidInput(format!(
                    "lines do not cover page {:?} boxes exactly once",
                    page.image_id
                )));
            }
            seen[i] = true;
            count += 1;
        }
    }
    if count != page.boxes.len() {
        return Err(Error::InvalidInput(format!(
            "lines cover {count} of {} boxes on page {:?}",
            page.boxes.len(),
            page.image_id
        )));
    }
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let mut s = String::new();
        for &i in &line.box_indices {
            s.push_str(map.require(page.boxes[i].codepoint, &page.image_id)?);
        }
        out.push(s);
    }
    Ok(PageTranscript::from_lines(out))
}

/// Dump assembled lines for one or more pages: `image_id TAB rank TAB idx,idx,...`.
pub fn save_lines(
    path: &Path,
    pages: &[(String, Vec<TextLine>)],
    meta: &[String],
) -> Result<()> {
    let mut records = Vec::new();
    for (image_id, lines) in pages {
        for (rank, line) in lines.iter().enumerate() {
            let mut idxs = String::new();
            for (i, &idx) in line.box_indices.iter().enumerate() {
                if i > 0 {
                    idxs.push(',');
                }
                let _ = write!(idxs, "{idx}");
            }
            records.push(format!("{}\t{}\t{}", textio::escape_field(image_id), rank, idxs));
        }
    }
    textio::write_records(path, LINES_HEADER, meta, &records)
}

/// Dump flat transcripts keyed by image id: `image_id TAB transcript`, with
/// separators escaped. The interchange format between recognition runs and
/// CRR scoring.
pub fn save_transcripts(
    path: &Path,
    entries: &[(String, String)],
    meta: &[String],
) -> Result<()> {
    let records: Vec<String> = entries
        .iter()
        .map(|(id, text)| {
            format!("{}\t{}", textio::escape_field(id), textio::escape_field(text))
        })
        .collect();
    textio::write_records(path, TRANSCRIPTS_HEADER, meta, &records)
}

/// Inverse of [`save_transcripts`]; order and duplicates are preserved.
pub fn load_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let pathstr = path.display().to_string();
    let mut out = Vec::new();
    for (line_no, record) in textio::read_records(path, TRANSCRIPTS_HEADER)? {
        let fields: Vec<&str> = record.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                pathstr.clone(),
                line_no,
                format!("expected 2 fields, got {}", fields.len()),
            ));
        }
        out.push((
            textio::unescape_field(fields[0])?,
            textio::unescape_field(fields[1])?,
        ));
    }
    Ok(out)
}
