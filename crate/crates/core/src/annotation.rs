//! Annotation store: parse, validate, persist, and split character-box
//! annotations plus the codepoint-to-character map.
//!
//! The external table format is one row per page, `image_id,labels`, where
//! the labels cell is a space-separated sequence of `U+XXXX x y w h`
//! 5-tuples. The canonical on-disk form is the `#kforge-pages v1` record
//! file, which round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::par;
use crate::seed;
use crate::textio;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

pub const PAGES_HEADER: &str = "#kforge-pages v1";

/// One character: class (Unicode scalar value) plus its pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CharBox {
    pub codepoint: u32,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CharBox {
    pub fn x_center(&self) -> f64 {
        self.x as f64 + self.w as f64 / 2.0
    }

    pub fn y_center(&self) -> f64 {
        self.y as f64 + self.h as f64 / 2.0
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    /// Horizontal interval overlap with another x-range, in pixels.
    pub fn x_overlap(&self, x0: u32, x1: u32) -> f64 {
        let lo = self.x.max(x0) as f64;
        let hi = self.right().min(x1) as f64;
        (hi - lo).max(0.0)
    }
}

/// One document image plus its character boxes, in source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<CharBox>,
}

/// Codepoint -> display string. Total over every codepoint the pipeline
/// touches; lookups of unknown codepoints fail loudly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodepointMap {
    entries: BTreeMap<u32, String>,
}

impl CodepointMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, codepoint: u32, display: String) -> Option<String> {
        self.entries.insert(codepoint, display)
    }

    pub fn get(&self, codepoint: u32) -> Option<&str> {
        self.entries.get(&codepoint).map(|s| s.as_str())
    }

    pub fn require(&self, codepoint: u32, page: &str) -> Result<&str> {
        self.get(codepoint).ok_or(Error::UnknownCodepoint {
            codepoint,
            page: page.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.entries.iter().map(|(cp, s)| (*cp, s.as_str()))
    }

    /// Reverse lookup: display character -> codepoint. Used to tokenize
    /// transcripts; assumes displays are single chars and unique, which the
    /// pipeline's maps satisfy.
    pub fn reverse(&self) -> BTreeMap<char, u32> {
        self.entries
            .iter()
            .filter_map(|(cp, s)| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some((c, *cp)),
                    _ => None,
                }
            })
            .collect()
    }
}

/// A deterministic 9:1 train/validation partition of page ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub seed: u64,
}

/// Parse result: pages plus non-fatal warnings (clipped or dropped boxes).
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub pages: Vec<PageAnnotation>,
    pub warnings: Vec<String>,
}

pub fn format_codepoint(cp: u32) -> String {
    format!("U+{cp:04X}")
}

pub fn parse_codepoint(token: &str) -> std::result::Result<u32, String> {
    let hex = token
        .strip_prefix("U+")
        .ok_or_else(|| format!("codepoint {token:?} is not of the form U+hex"))?;
    if hex.is_empty() {
        return Err(format!("codepoint {token:?} is not of the form U+hex"));
    }
    u32::from_str_radix(hex, 16).map_err(|_| format!("codepoint {token:?} is not of the form U+hex"))
}

/// A parsed but not yet bounds-validated page row.
#[derive(Debug, Clone)]
pub struct RawPage {
    pub image_id: String,
    pub boxes: Vec<(u32, i64, i64, i64, i64)>,
}

/// Parse the `image_id,labels` table without touching any images.
pub fn parse_rows(path: &Path) -> Result<Vec<RawPage>> {
    let pathstr = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::parse(&pathstr, 0, e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(&pathstr, 1, e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != ["image_id", "labels"] {
            return Err(Error::parse(
                &pathstr,
                1,
                format!("expected header `image_id,labels`, found {got:?}"),
            ));
        }
    }
    let mut pages = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::parse(&pathstr, line, e.to_string()))?;
        if record.len() != 2 {
            return Err(Error::parse(
                &pathstr,
                line,
                format!("expected 2 fields, found {}", record.len()),
            ));
        }
        let image_id = record[0].to_string();
        let labels = record[1].trim();
        let mut boxes = Vec::new();
        if !labels.is_empty() {
            let tokens: Vec<&str> = labels.split_whitespace().collect();
            if tokens.len() % 5 != 0 {
                return Err(Error::parse(
                    &pathstr,
                    line,
                    format!(
                        "row for {image_id:?}: token count {} is not a multiple of 5",
                        tokens.len()
                    ),
                ));
            }
            for chunk in tokens.chunks_exact(5) {
                let cp = parse_codepoint(chunk[0])
                    .map_err(|msg| Error::parse(&pathstr, line, format!("row for {image_id:?}: {msg}")))?;
                let mut coords = [0i64; 4];
                for (slot, tok) in coords.iter_mut().zip(&chunk[1..]) {
                    *slot = tok.parse::<i64>().map_err(|_| {
                        Error::parse(
                            &pathstr,
                            line,
                            format!("row for {image_id:?}: non-integer coordinate {tok:?}"),
                        )
                    })?;
                }
                boxes.push((cp, coords[0], coords[1], coords[2], coords[3]));
            }
        }
        pages.push(RawPage { image_id, boxes });
    }
    Ok(pages)
}

/// Clip a raw page's boxes to the image bounds. Boxes that overflow are
/// clipped with a warning; boxes with no area inside the image (or with
/// degenerate declared size) are dropped with a warning, never clipped to
/// zero area.
pub fn validate_page(raw: &RawPage, width: u32, height: u32) -> (PageAnnotation, Vec<String>) {
    let mut warnings = Vec::new();
    let mut boxes = Vec::with_capacity(raw.boxes.len());
    for (i, &(cp, x, y, w, h)) in raw.boxes.iter().enumerate() {
        if w < 1 || h < 1 {
            warnings.push(format!(
                "page {}: box {} ({}) has degenerate size {}x{}; dropped",
                raw.image_id,
                i,
                format_codepoint(cp),
                w,
                h
            ));
            continue;
        }
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w).min(width as i64);
        let y1 = (y + h).min(height as i64);
        if x1 <= x0 || y1 <= y0 {
            warnings.push(format!(
                "page {}: box {} ({}) lies outside the {}x{} image; dropped",
                raw.image_id,
                i,
                format_codepoint(cp),
                width,
                height
            ));
            continue;
        }
        if x0 != x || y0 != y || x1 != x + w || y1 != y + h {
            warnings.push(format!(
                "page {}: box {} ({}) overflows the {}x{} image; clipped",
                raw.image_id,
                i,
                format_codepoint(cp),
                width,
                height
            ));
        }
        boxes.push(CharBox {
            codepoint: cp,
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0) as u32,
            h: (y1 - y0) as u32,
        });
    }
    (
        PageAnnotation {
            image_id: raw.image_id.clone(),
            width,
            height,
            boxes,
        },
        warnings,
    )
}

fn find_image(image_dir: &Path, image_id: &str) -> Option<std::path::PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = image_dir.join(format!("{image_id}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

/// Parse an annotation table and validate every page against its image's
/// dimensions (the image files are only opened for dimension lookup).
pub fn parse_dataset(annotation_file: &Path, image_dir: &Path) -> Result<ParsedDataset> {
    let raws = parse_rows(annotation_file)?;
    let validated = par::try_map_ordered(&raws, |raw| {
        let img_path = find_image(image_dir, &raw.image_id).ok_or_else(|| {
            Error::io(
                image_dir.join(format!("{}.png", raw.image_id)).display().to_string(),
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing image file for page {}", raw.image_id),
                ),
            )
        })?;
        let (w, h) = image::image_dimensions(&img_path).map_err(|e| Error::Image {
            path: img_path.display().to_string(),
            source: e,
        })?;
        Ok(validate_page(raw, w, h))
    })?;
    let mut pages = Vec::with_capacity(validated.len());
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (page, warns) in validated {
        if !seen.insert(page.image_id.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate image_id {:?} in {}",
                page.image_id,
                annotation_file.display()
            )));
        }
        pages.push(page);
        warnings.extend(warns);
    }
    Ok(ParsedDataset { pages, warnings })
}

/// Load the `Unicode,char` table. Duplicate codepoints: last wins, with a
/// warning.
pub fn load_codepoint_map(path: &Path) -> Result<(CodepointMap, Vec<String>)> {
    let pathstr = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(pathstr.clone(), e))?;
    let mut map = CodepointMap::new();
    let mut warnings = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::parse(&pathstr, line, e.to_string()))?;
        if record.len() < 2 {
            return Err(Error::parse(
                &pathstr,
                line,
                format!("expected 2 fields, found {}", record.len()),
            ));
        }
        let cp = parse_codepoint(&record[0]).map_err(|msg| Error::parse(&pathstr, line, msg))?;
        if let Some(old) = map.insert(cp, record[1].to_string()) {
            warnings.push(format!(
                "{}: duplicate codepoint {} (replacing {:?})",
                pathstr,
                format_codepoint(cp),
                old
            ));
        }
    }
    Ok((map, warnings))
}

/// Deterministic seeded 9:1 split: shuffle by seed, last floor(N/10) of the
/// shuffled order become the validation set.
pub fn split_train_valid(ids: &[String], split_seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty id list".into()));
    }
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidInput(format!("duplicate id {id:?} in split input")));
        }
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    seed::shuffle(&mut shuffled, &mut seed::rng(split_seed));
    let n_valid = shuffled.len() / 10;
    let valid = shuffled.split_off(shuffled.len() - n_valid);
    Ok(DatasetSplit {
        train: shuffled,
        valid,
        seed: split_seed,
    })
}

fn page_record(page: &PageAnnotation) -> String {
    let mut boxes = String::new();
    for (i, b) in page.boxes.iter().enumerate() {
        if i > 0 {
            boxes.push(',');
        }
        let _ = write!(
            boxes,
            "{}:{}:{}:{}:{}",
            format_codepoint(b.codepoint),
            b.x,
            b.y,
            b.w,
            b.h
        );
    }
    format!(
        "{}\t{}\t{}\t{}",
        textio::escape_field(&page.image_id),
        page.width,
        page.height,
        boxes
    )
}

/// Write pages in the canonical `#kforge-pages v1` form.
pub fn save_pages(path: &Path, pages: &[PageAnnotation], meta: &[String]) -> Result<()> {
    let records: Vec<String> = pages.iter().map(page_record).collect();
    textio::write_records(path, PAGES_HEADER, meta, &records)
}

/// Load a canonical pages file. Any malformed record aborts the load; no
/// partial result is returned.
pub fn load_pages(path: &Path) -> Result<Vec<PageAnnotation>> {
    let pathstr = path.display().to_string();
    let mut pages = Vec::new();
    for (line, rec) in textio::read_records(path, PAGES_HEADER)? {
        let fields: Vec<&str> = rec.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Corrupt {
                path: pathstr,
                msg: format!("line {line}: expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let image_id = textio::unescape_field(fields[0]).map_err(|e| Error::Corrupt {
            path: pathstr.clone(),
            msg: format!("line {line}: {e}"),
        })?;
        let width: u32 = fields[1].parse().map_err(|_| Error::Corrupt {
            path: pathstr.clone(),
            msg: format!("line {line}: bad width {:?}", fields[1]),
        })?;
        let height: u32 = fields[2].parse().map_err(|_| Error::Corrupt {
            path: pathstr.clone(),
            msg: format!("line {line}: bad height {:?}", fields[2]),
        })?;
        let mut boxes = Vec::new();
        if !fields[3].is_empty() {
            for tok in fields[3].split(',') {
                let parts: Vec<&str> = tok.split(':').collect();
                if parts.len() != 5 {
                    return Err(Error::Corrupt {
                        path: pathstr.clone(),
                        msg: format!("line {line}: bad box {tok:?}"),
                    });
                }
                let cp = parse_codepoint(parts[0]).map_err(|msg| Error::Corrupt {
                    path: pathstr.clone(),
                    msg: format!("line {line}: {msg}"),
                })?;
                let mut vals = [0u32; 4];
                for (slot, p) in vals.iter_mut().zip(&parts[1..]) {
                    *slot = p.parse().map_err(|_| Error::Corrupt {
                        path: pathstr.clone(),
                        msg: format!("line {line}: bad box field {p:?}"),
                    })?;
                }
                boxes.push(CharBox {
                    codepoint: cp,
                    x: vals[0],
                    y: vals[1],
                    w: vals[2],
                    h: vals[3],
                });
            }
        }
        pages.push(PageAnnotation {
            image_id,
            width,
            height,
            boxes,
        });
    }
    Ok(pages)
}
