//! Synthetic vertical-text corpus generator.
//!
//! Produces fully-labeled pages of procedural glyphs on a parchment-like
//! background so every pipeline stage — line assembly, augmentation,
//! curriculum staging, training, and scoring — can be exercised end to end
//! with known ground truth. Glyphs are stroke programs (line/arc primitives
//! in a unit cell) mapped to private-use-area codepoints starting at U+E000,
//! so the codepoint-map machinery runs unmodified.
//!
//! Every page records its reference reading order, per-character ink masks,
//! and background constant; these are the oracles the rest of the test suite
//! compares against.

use crate::annotation::{
    self, CharBox, CodepointMap, DatasetSplit, PageAnnotation,
};
use crate::error::{Error, Result};
use crate::par;
use crate::seed;
use crate::textio;
use image::RgbImage;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

pub const SPLIT_HEADER: &str = "#kforge-split v1";
pub const ORACLE_HEADER: &str = "#kforge-oracle v1";

/// First private-use-area codepoint; glyph `i` is `GLYPH_BASE + i`.
pub const GLYPH_BASE: u32 = 0xE000;

/// Maximum alphabet size (number of distinct stroke programs defined).
pub const MAX_ALPHABET: usize = 32;

/// Stroke half-width in unit-cell coordinates.
const STROKE_HALF_WIDTH: f64 = 0.07;

/// One drawing primitive in the glyph's unit cell ((0,0) top-left, y down).
#[derive(Debug, Clone, PartialEq)]
pub enum Stroke {
    Line { from: (f64, f64), to: (f64, f64) },
    /// Circular arc; angles in degrees, 0° pointing right, 90° pointing
    /// down (screen coordinates). A span of 360° or more is a full circle.
    Arc { center: (f64, f64), radius: f64, start_deg: f64, end_deg: f64 },
}

/// A procedural glyph: stroke program plus the codepoint it stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub codepoint: u32,
    pub strokes: Vec<Stroke>,
}

/// Everything that determines a corpus. Two corpora with equal params are
/// byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    pub alphabet_size: usize,
    /// Page canvas in pixels.
    pub page_width: u32,
    pub page_height: u32,
    /// Nominal glyph size in pixels (the unit cell is `glyph_size` square).
    pub glyph_size: u32,
    /// Vertical lines (columns) per page, inclusive.
    pub lines_per_page: (u32, u32),
    /// Characters per line, inclusive.
    pub chars_per_line: (u32, u32),
    /// Horizontal gap between adjacent columns in pixels, inclusive.
    /// Must stay at least half the column width so assembled lines can
    /// never bridge columns.
    pub column_gap: (u32, u32),
    /// Per-character placement jitter as a fraction of glyph size.
    pub jitter_frac: f64,
    /// Background color and uniform per-pixel noise amplitude (per channel).
    pub background: [u8; 3],
    pub noise_level: u8,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            alphabet_size: 10,
            page_width: 256,
            page_height: 256,
            glyph_size: 22,
            lines_per_page: (3, 5),
            chars_per_line: (4, 7),
            column_gap: (12, 16),
            jitter_frac: 0.05,
            background: [222, 210, 184],
            noise_level: 6,
            seed: 7,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size == 0 || self.alphabet_size > MAX_ALPHABET {
            return Err(Error::InvalidInput(format!(
                "alphabet_size must be in 1..={MAX_ALPHABET}, got {}",
                self.alphabet_size
            )));
        }
        if self.glyph_size < 8 {
            return Err(Error::InvalidInput(format!(
                "glyph_size must be at least 8 px, got {}",
                self.glyph_size
            )));
        }
        for (name, (lo, hi)) in [
            ("lines_per_page", self.lines_per_page),
            ("chars_per_line", self.chars_per_line),
            ("column_gap", self.column_gap),
        ] {
            if lo > hi || hi == 0 {
                return Err(Error::InvalidInput(format!(
                    "{name} range {lo}..={hi} is empty"
                )));
            }
        }
        if self.lines_per_page.0 == 0 || self.chars_per_line.0 == 0 {
            return Err(Error::InvalidInput(
                "lines_per_page and chars_per_line must start at 1".into(),
            ));
        }
        let min_gap = self.glyph_size.div_ceil(2);
        if self.column_gap.0 < min_gap {
            return Err(Error::InvalidInput(format!(
                "column_gap must be at least half the column width ({min_gap} px), got {}",
                self.column_gap.0
            )));
        }
        if !(0.0..=0.2).contains(&self.jitter_frac) {
            return Err(Error::InvalidInput(format!(
                "jitter_frac must be in 0.0..=0.2, got {}",
                self.jitter_frac
            )));
        }
        Ok(())
    }
}

/// Binary ink mask of one rendered character, in page coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct InkMask {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    /// Row-major `w * h` bits.
    pub bits: Vec<bool>,
}

impl InkMask {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.w || py >= self.y + self.h {
            return false;
        }
        self.bits[((py - self.y) * self.w + (px - self.x)) as usize]
    }

    /// Mean of ink pixel centers.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for dy in 0..self.h {
            for dx in 0..self.w {
                if self.bits[(dy * self.w + dx) as usize] {
                    sx += (self.x + dx) as f64 + 0.5;
                    sy += (self.y + dy) as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (sx / n as f64, sy / n as f64)
    }
}

/// One generated page with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthPage {
    pub image_id: String,
    pub image: RgbImage,
    pub annotation: PageAnnotation,
    /// `reading_order[r]` is the index into `annotation.boxes` of the r-th
    /// character in reading order (rightmost column first, top to bottom).
    /// Box storage order is shuffled so it never coincides with reading
    /// order by accident.
    pub reading_order: Vec<usize>,
    /// Ink masks aligned with `annotation.boxes`.
    pub masks: Vec<InkMask>,
    pub background: [u8; 3],
    /// Reference transcript, one string per line in reading order.
    pub transcript_lines: Vec<String>,
}

impl SynthPage {
    pub fn flat_transcript(&self) -> String {
        self.transcript_lines.join("\n")
    }
}

/// A generated corpus: pages, codepoint map, and a 9:1 split.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub pages: Vec<SynthPage>,
    pub map: CodepointMap,
    pub split: DatasetSplit,
}

fn dist_to_point(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (dx, dy) = (p.0 - q.0, p.1 - q.1);
    (dx * dx + dy * dy).sqrt()
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn arc_point(center: (f64, f64), radius: f64, deg: f64) -> (f64, f64) {
    let rad = deg.to_radians();
    (center.0 + radius * rad.cos(), center.1 + radius * rad.sin())
}

fn dist_to_stroke(p: (f64, f64), stroke: &Stroke) -> f64 {
    match *stroke {
        Stroke::Line { from, to } => dist_to_segment(p, from, to),
        Stroke::Arc { center, radius, start_deg, end_deg } => {
            let (vx, vy) = (p.0 - center.0, p.1 - center.1);
            let rp = (vx * vx + vy * vy).sqrt();
            if end_deg - start_deg >= 360.0 {
                return (rp - radius).abs();
            }
            let mut phi = vy.atan2(vx).to_degrees();
            while phi < start_deg {
                phi += 360.0;
            }
            if phi <= end_deg {
                (rp - radius).abs()
            } else {
                dist_to_point(p, arc_point(center, radius, start_deg))
                    .min(dist_to_point(p, arc_point(center, radius, end_deg)))
            }
        }
    }
}

/// Render a glyph at `size` px: row-major coverage in [0, 1] per pixel.
pub fn render_glyph(spec: &GlyphSpec, size: u32) -> Vec<f64> {
    let s = size as f64;
    let mut out = vec![0.0; (size * size) as usize];
    for py in 0..size {
        for px in 0..size {
            let p = ((px as f64 + 0.5) / s, (py as f64 + 0.5) / s);
            let d = spec
                .strokes
                .iter()
                .map(|st| dist_to_stroke(p, st))
                .fold(f64::INFINITY, f64::min);
            out[(py * size + px) as usize] =
                ((STROKE_HALF_WIDTH - d) * s + 0.5).clamp(0.0, 1.0);
        }
    }
    out
}

/// The full glyph inventory: `n` visually distinct stroke programs.
pub fn glyph_alphabet(n: usize) -> Result<Vec<GlyphSpec>> {
    if n == 0 || n > MAX_ALPHABET {
        return Err(Error::InvalidInput(format!(
            "alphabet size must be in 1..={MAX_ALPHABET}, got {n}"
        )));
    }
    let line = |x0: f64, y0: f64, x1: f64, y1: f64| Stroke::Line { from: (x0, y0), to: (x1, y1) };
    let arc = |cx: f64, cy: f64, r: f64, s: f64, e: f64| Stroke::Arc {
        center: (cx, cy),
        radius: r,
        start_deg: s,
        end_deg: e,
    };
    let programs: Vec<Vec<Stroke>> = vec![
        // 0: horizontal bar
        vec![line(0.15, 0.5, 0.85, 0.5)],
        // 1: vertical bar
        vec![line(0.5, 0.15, 0.5, 0.85)],
        // 2: rising diagonal
        vec![line(0.15, 0.85, 0.85, 0.15)],
        // 3: falling diagonal
        vec![line(0.15, 0.15, 0.85, 0.85)],
        // 4: plus
        vec![line(0.15, 0.5, 0.85, 0.5), line(0.5, 0.15, 0.5, 0.85)],
        // 5: saltire
        vec![line(0.15, 0.85, 0.85, 0.15), line(0.15, 0.15, 0.85, 0.85)],
        // 6: circle
        vec![arc(0.5, 0.5, 0.35, 0.0, 360.0)],
        // 7: arch (open bottom)
        vec![arc(0.5, 0.60, 0.38, 180.0, 360.0)],
        // 8: cup (open top)
        vec![arc(0.5, 0.40, 0.38, 0.0, 180.0)],
        // 9: left hook (open right)
        vec![arc(0.5, 0.5, 0.35, 90.0, 270.0)],
        // 10: right hook (open left)
        vec![arc(0.5, 0.5, 0.35, 270.0, 450.0)],
        // 11: tee
        vec![line(0.15, 0.2, 0.85, 0.2), line(0.5, 0.2, 0.5, 0.65)],
        // 12: inverted tee
        vec![line(0.15, 0.8, 0.85, 0.8), line(0.5, 0.35, 0.5, 0.8)],
        // 13: corner bottom-left
        vec![line(0.2, 0.15, 0.2, 0.85), line(0.2, 0.85, 0.85, 0.85)],
        // 14: corner top-left
        vec![line(0.2, 0.2, 0.2, 0.85), line(0.2, 0.2, 0.85, 0.2)],
        // 15: corner top-right
        vec![line(0.15, 0.2, 0.8, 0.2), line(0.8, 0.2, 0.8, 0.85)],
        // 16: corner bottom-right
        vec![line(0.8, 0.15, 0.8, 0.85), line(0.15, 0.85, 0.8, 0.85)],
        // 17: zigzag
        vec![
            line(0.15, 0.2, 0.85, 0.2),
            line(0.85, 0.2, 0.15, 0.8),
            line(0.15, 0.8, 0.85, 0.8),
        ],
        // 18: en
        vec![
            line(0.2, 0.85, 0.2, 0.15),
            line(0.2, 0.15, 0.8, 0.85),
            line(0.8, 0.85, 0.8, 0.15),
        ],
        // 19: vee
        vec![line(0.15, 0.2, 0.5, 0.85), line(0.5, 0.85, 0.85, 0.2)],
        // 20: wedge
        vec![line(0.15, 0.85, 0.5, 0.15), line(0.5, 0.15, 0.85, 0.85)],
        // 21: left chevron
        vec![line(0.8, 0.15, 0.2, 0.5), line(0.2, 0.5, 0.8, 0.85)],
        // 22: right chevron
        vec![line(0.2, 0.15, 0.8, 0.5), line(0.8, 0.5, 0.2, 0.85)],
        // 23: box
        vec![
            line(0.2, 0.2, 0.8, 0.2),
            line(0.8, 0.2, 0.8, 0.8),
            line(0.8, 0.8, 0.2, 0.8),
            line(0.2, 0.8, 0.2, 0.2),
        ],
        // 24: lozenge
        vec![
            line(0.5, 0.12, 0.88, 0.5),
            line(0.88, 0.5, 0.5, 0.88),
            line(0.5, 0.88, 0.12, 0.5),
            line(0.12, 0.5, 0.5, 0.12),
        ],
        // 25: triple bar
        vec![
            line(0.15, 0.25, 0.85, 0.25),
            line(0.15, 0.5, 0.85, 0.5),
            line(0.15, 0.75, 0.85, 0.75),
        ],
        // 26: double post
        vec![line(0.25, 0.15, 0.25, 0.85), line(0.75, 0.15, 0.75, 0.85)],
        // 27: double bar
        vec![line(0.15, 0.35, 0.85, 0.35), line(0.15, 0.65, 0.85, 0.65)],
        // 28: wave
        vec![arc(0.32, 0.5, 0.17, 180.0, 360.0), arc(0.68, 0.5, 0.17, 0.0, 180.0)],
        // 29: double ring
        vec![arc(0.5, 0.32, 0.17, 0.0, 360.0), arc(0.5, 0.68, 0.17, 0.0, 360.0)],
        // 30: dot
        vec![arc(0.5, 0.5, 0.10, 0.0, 360.0)],
        // 31: basin
        vec![
            line(0.2, 0.15, 0.2, 0.6),
            arc(0.5, 0.6, 0.3, 0.0, 180.0),
            line(0.8, 0.6, 0.8, 0.15),
        ],
    ];
    Ok(programs
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, strokes)| GlyphSpec { codepoint: GLYPH_BASE + i as u32, strokes })
        .collect())
}

/// Codepoint map for an alphabet of `n` glyphs: each PUA codepoint displays
/// as its own character.
pub fn corpus_map(n: usize) -> Result<CodepointMap> {
    if n == 0 || n > MAX_ALPHABET {
        return Err(Error::InvalidInput(format!(
            "alphabet size must be in 1..={MAX_ALPHABET}, got {n}"
        )));
    }
    let mut map = CodepointMap::new();
    for i in 0..n as u32 {
        let cp = GLYPH_BASE + i;
        map.insert(cp, char::from_u32(cp).unwrap().to_string());
    }
    Ok(map)
}

fn inclusive(rng: &mut rand_chacha::ChaCha8Rng, range: (u32, u32)) -> u32 {
    rng.gen_range(range.0..=range.1)
}

/// Generate one page. `page_seed` fully determines layout, glyph choice,
/// jitter, box shuffle, and background noise.
pub fn gen_page(params: &CorpusParams, image_id: &str, page_seed: u64) -> Result<SynthPage> {
    params.validate()?;
    let alphabet = glyph_alphabet(params.alphabet_size)?;
    let rendered: Vec<Vec<f64>> =
        alphabet.iter().map(|g| render_glyph(g, params.glyph_size)).collect();

    let (pw, ph) = (params.page_width, params.page_height);
    let s = params.glyph_size;
    let margin: u32 = 10;
    let cell_h = (s as f64 * 1.3).round() as u32;
    let jitter = (params.jitter_frac * s as f64).round() as i64;

    let mut layout_rng = seed::rng(seed::derive_seed(page_seed, "layout"));
    let n_lines = inclusive(&mut layout_rng, params.lines_per_page);

    // Background with uniform noise, from its own stream so layout and
    // texture stay independent.
    let mut noise_rng = seed::rng(seed::derive_seed(page_seed, "noise"));
    let mut image = RgbImage::new(pw, ph);
    let noise = params.noise_level as i32;
    for px in image.pixels_mut() {
        for c in 0..3 {
            let n: i32 = noise_rng.gen_range(-noise..=noise);
            px.0[c] = (params.background[c] as i32 + n).clamp(0, 255) as u8;
        }
    }

    let ink = [38u8, 30, 24];
    // Characters in reading order: (box, mask, line index, glyph index).
    let mut ordered: Vec<(CharBox, InkMask, usize, usize)> = Vec::new();
    let mut line_glyphs: Vec<Vec<usize>> = Vec::new();

    let mut x_right = pw as i64 - margin as i64;
    for li in 0..n_lines {
        if li > 0 {
            x_right -= inclusive(&mut layout_rng, params.column_gap) as i64;
        }
        let col_x = x_right - s as i64;
        if col_x < margin as i64 {
            return Err(Error::InvalidInput(format!(
                "page {image_id}: {n_lines} columns do not fit a {pw}x{ph} canvas"
            )));
        }
        let n_chars = inclusive(&mut layout_rng, params.chars_per_line);
        let mut glyphs_here = Vec::with_capacity(n_chars as usize);
        let mut y = margin as i64;
        for _ in 0..n_chars {
            if y + cell_h as i64 > (ph - margin) as i64 {
                return Err(Error::InvalidInput(format!(
                    "page {image_id}: {n_chars} characters per column do not fit a {pw}x{ph} canvas"
                )));
            }
            let gi = layout_rng.gen_range(0..alphabet.len());
            let (jx, jy) = if jitter > 0 {
                (
                    layout_rng.gen_range(-jitter..=jitter),
                    layout_rng.gen_range(-jitter..=jitter),
                )
            } else {
                (0, 0)
            };
            let gx = (col_x + jx).clamp(1, (pw - s - 1) as i64) as u32;
            let gy = (y + jy).clamp(1, (ph - s - 1) as i64) as u32;

            // Paste and collect the binary ink mask.
            let alpha = &rendered[gi];
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
            for dy in 0..s {
                for dx in 0..s {
                    let a = alpha[(dy * s + dx) as usize];
                    if a <= 0.0 {
                        continue;
                    }
                    let (px, py) = (gx + dx, gy + dy);
                    let p = image.get_pixel_mut(px, py);
                    for c in 0..3 {
                        p.0[c] = (p.0[c] as f64 * (1.0 - a) + ink[c] as f64 * a)
                            .round()
                            .clamp(0.0, 255.0) as u8;
                    }
                    if a >= 0.5 {
                        x0 = x0.min(px);
                        y0 = y0.min(py);
                        x1 = x1.max(px);
                        y1 = y1.max(py);
                    }
                }
            }
            if x0 == u32::MAX {
                return Err(Error::InvalidInput(format!(
                    "glyph {gi} rendered no ink at size {s}"
                )));
            }
            let (mw, mh) = (x1 - x0 + 1, y1 - y0 + 1);
            let mut bits = vec![false; (mw * mh) as usize];
            for dy in 0..s {
                for dx in 0..s {
                    if alpha[(dy * s + dx) as usize] >= 0.5 {
                        let (px, py) = (gx + dx, gy + dy);
                        bits[((py - y0) * mw + (px - x0)) as usize] = true;
                    }
                }
            }
            let bx = x0.saturating_sub(2);
            let by = y0.saturating_sub(2);
            let cbox = CharBox {
                codepoint: alphabet[gi].codepoint,
                x: bx,
                y: by,
                w: (x1 + 2).min(pw - 1) - bx + 1,
                h: (y1 + 2).min(ph - 1) - by + 1,
            };
            let mask = InkMask { x: x0, y: y0, w: mw, h: mh, bits };
            ordered.push((cbox, mask, li as usize, gi));
            glyphs_here.push(gi);
            y += cell_h as i64;
        }
        line_glyphs.push(glyphs_here);
        x_right = col_x;
    }

    let map = corpus_map(params.alphabet_size)?;
    let transcript_lines: Vec<String> = line_glyphs
        .iter()
        .map(|gs| {
            gs.iter()
                .map(|&gi| map.get(GLYPH_BASE + gi as u32).unwrap())
                .collect()
        })
        .collect();

    // Shuffle storage order so annotation order is not reading order.
    let n = ordered.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seed::rng(seed::derive_seed(page_seed, "shuffle"));
    seed::shuffle(&mut perm, &mut shuffle_rng);
    let mut boxes = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut reading_order = vec![0usize; n];
    for (slot, &rank) in perm.iter().enumerate() {
        reading_order[rank] = slot;
    }
    for &rank in &perm {
        boxes.push(ordered[rank].0.clone());
        masks.push(ordered[rank].1.clone());
    }

    Ok(SynthPage {
        image_id: image_id.to_string(),
        image,
        annotation: PageAnnotation {
            image_id: image_id.to_string(),
            width: pw,
            height: ph,
            boxes,
        },
        reading_order,
        masks,
        background: params.background,
        transcript_lines,
    })
}

/// Generate `n_pages` independent pages plus a 9:1 split. Page seeds are
/// derived from the master seed, so pages can be built in parallel without
/// changing the result.
pub fn gen_corpus(params: &CorpusParams, n_pages: usize) -> Result<SynthCorpus> {
    if n_pages == 0 {
        return Err(Error::InvalidInput("n_pages must be at least 1".into()));
    }
    params.validate()?;
    let ids: Vec<String> = (0..n_pages).map(|i| format!("synth-{i:04}")).collect();
    let pages = par::try_map_ordered(&ids, |id| {
        let i: u64 = id["synth-".len()..].parse().unwrap();
        gen_page(params, id, seed::derive_seed_indexed(params.seed, "page", i))
    })?;
    let split = annotation::split_train_valid(&ids, seed::derive_seed(params.seed, "split"))?;
    Ok(SynthCorpus { pages, map: corpus_map(params.alphabet_size)?, split })
}

/// Write a corpus to disk in the same shapes the ingest path reads:
/// `images/*.png`, `train.csv`, `unicode_map.csv`, plus `split.tsv` and the
/// ground-truth sidecar `oracle.tsv`.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus, meta: &[String]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;

    let csv_path = dir.join("train.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| {
        Error::InvalidInput(format!("cannot write {}: {e}", csv_path.display()))
    })?;
    w.write_record(["image_id", "labels"])
        .and_then(|_| {
            for page in &corpus.pages {
                let mut labels = String::new();
                for (i, b) in page.annotation.boxes.iter().enumerate() {
                    if i > 0 {
                        labels.push(' ');
                    }
                    let _ = write!(
                        labels,
                        "{} {} {} {} {}",
                        annotation::format_codepoint(b.codepoint),
                        b.x,
                        b.y,
                        b.w,
                        b.h
                    );
                }
                w.write_record([page.image_id.as_str(), labels.as_str()])?;
            }
            w.flush()?;
            Ok(())
        })
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", csv_path.display())))?;

    let map_path = dir.join("unicode_map.csv");
    let mut w = csv::Writer::from_path(&map_path).map_err(|e| {
        Error::InvalidInput(format!("cannot write {}: {e}", map_path.display()))
    })?;
    w.write_record(["Unicode", "char"])
        .and_then(|_| {
            for (cp, display) in corpus.map.iter() {
                w.write_record([annotation::format_codepoint(cp).as_str(), display])?;
            }
            w.flush()?;
            Ok(())
        })
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", map_path.display())))?;

    for page in &corpus.pages {
        let path = images.join(format!("{}.png", page.image_id));
        page.image
            .save(&path)
            .map_err(|e| Error::Image { path: path.display().to_string(), source: e })?;
    }

    let split_records: Vec<String> = corpus
        .split
        .train
        .iter()
        .map(|id| (id, "train"))
        .chain(corpus.split.valid.iter().map(|id| (id, "valid")))
        .map(|(id, side)| format!("{}\t{side}", textio::escape_field(id)))
        .collect();
    textio::write_records(&dir.join("split.tsv"), SPLIT_HEADER, meta, &split_records)?;

    let oracle_records: Vec<String> = corpus
        .pages
        .iter()
        .map(|page| {
            let order = page
                .reading_order
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let ink = page
                .masks
                .iter()
                .map(|m| format!("{}:{}:{}:{}", m.x, m.y, m.w, m.h))
                .collect::<Vec<_>>()
                .join(";");
            format!(
                "{}\tbg={},{},{}\torder={}\tink={}",
                textio::escape_field(&page.image_id),
                page.background[0],
                page.background[1],
                page.background[2],
                order,
                ink
            )
        })
        .collect();
    textio::write_records(&dir.join("oracle.tsv"), ORACLE_HEADER, meta, &oracle_records)
}

/// Ground truth loaded back from an `oracle.tsv` sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub image_id: String,
    pub background: [u8; 3],
    pub reading_order: Vec<usize>,
    /// Ink bounding boxes (x, y, w, h), aligned with the page's boxes.
    pub ink_bounds: Vec<(u32, u32, u32, u32)>,
}

pub fn load_split(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let pathstr = path.display().to_string();
    let records = textio::read_records(path, SPLIT_HEADER)?;
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (line_no, record) in records {
        let mut parts = record.split('\t');
        let (id, side) = match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(side), None) => (
                textio::unescape_field(id)
                    .map_err(|e| Error::parse(&pathstr, line_no, e.to_string()))?,
                side,
            ),
            _ => {
                return Err(Error::parse(&pathstr, line_no, "expected `image_id<TAB>side`"))
            }
        };
        match side {
            "train" => train.push(id),
            "valid" => valid.push(id),
            other => {
                return Err(Error::parse(&pathstr, line_no, format!("unknown side {other:?}")))
            }
        }
    }
    Ok((train, valid))
}

pub fn load_oracle(path: &Path) -> Result<Vec<OracleRecord>> {
    let pathstr = path.display().to_string();
    let records = textio::read_records(path, ORACLE_HEADER)?;
    let mut out = Vec::with_capacity(records.len());
    for (line_no, record) in records {
        let fields: Vec<&str> = record.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                &pathstr,
                line_no,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let bad = |msg: String| Error::parse(&pathstr, line_no, msg);
        let image_id = textio::unescape_field(fields[0])
            .map_err(|e| Error::parse(&pathstr, line_no, e.to_string()))?;
        let bg_str = fields[1]
            .strip_prefix("bg=")
            .ok_or_else(|| bad(format!("expected bg=..., found {:?}", fields[1])))?;
        let bg: Vec<u8> = bg_str
            .split(',')
            .map(|t| t.parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("bad background {bg_str:?}: {e}")))?;
        if bg.len() != 3 {
            return Err(bad(format!("background needs 3 channels, found {}", bg.len())));
        }
        let order_str = fields[2]
            .strip_prefix("order=")
            .ok_or_else(|| bad(format!("expected order=..., found {:?}", fields[2])))?;
        let reading_order: Vec<usize> = if order_str.is_empty() {
            Vec::new()
        } else {
            order_str
                .split(',')
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("bad order {order_str:?}: {e}")))?
        };
        let ink_str = fields[3]
            .strip_prefix("ink=")
            .ok_or_else(|| bad(format!("expected ink=..., found {:?}", fields[3])))?;
        let mut ink_bounds = Vec::new();
        if !ink_str.is_empty() {
            for part in ink_str.split(';') {
                let nums: Vec<u32> = part
                    .split(':')
                    .map(|t| t.parse::<u32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("bad ink bounds {part:?}: {e}")))?;
                if nums.len() != 4 {
                    return Err(bad(format!("ink bounds need 4 numbers, found {}", nums.len())));
                }
                ink_bounds.push((nums[0], nums[1], nums[2], nums[3]));
            }
        }
        out.push(OracleRecord { image_id, background: bg.try_into().unwrap(), reading_order, ink_bounds });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lines::{assemble_lines, transcript_of, DEFAULT_OVERLAP_THRESHOLD};

    fn mask_of(spec: &GlyphSpec, size: u32) -> Vec<bool> {
        render_glyph(spec, size).iter().map(|&a| a >= 0.5).collect()
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let alphabet = glyph_alphabet(MAX_ALPHABET).unwrap();
        let size = 22;
        let masks: Vec<Vec<bool>> = alphabet.iter().map(|g| mask_of(g, size)).collect();
        for (i, mi) in masks.iter().enumerate() {
            assert!(mi.iter().any(|&b| b), "glyph {i} renders no ink");
            for (j, mj) in masks.iter().enumerate().skip(i + 1) {
                let inter = mi.iter().zip(mj).filter(|(a, b)| **a && **b).count();
                let union = mi.iter().zip(mj).filter(|(a, b)| **a || **b).count();
                let iou = inter as f64 / union as f64;
                assert!(iou < 0.6, "glyphs {i} and {j} overlap too much: IoU {iou:.3}");
            }
        }
    }

    #[test]
    fn strokes_stay_inside_unit_cell() {
        for glyph in glyph_alphabet(MAX_ALPHABET).unwrap() {
            for stroke in &glyph.strokes {
                let within = |p: (f64, f64)| p.0 >= 0.0 && p.0 <= 1.0 && p.1 >= 0.0 && p.1 <= 1.0;
                match *stroke {
                    Stroke::Line { from, to } => {
                        assert!(within(from) && within(to), "{glyph:?}");
                    }
                    Stroke::Arc { center, radius, .. } => {
                        assert!(
                            center.0 - radius >= 0.0
                                && center.0 + radius <= 1.0
                                && center.1 - radius >= 0.0
                                && center.1 + radius <= 1.0,
                            "{glyph:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn one_char_page() {
        let params = CorpusParams {
            lines_per_page: (1, 1),
            chars_per_line: (1, 1),
            ..CorpusParams::default()
        };
        let page = gen_page(&params, "p", 1).unwrap();
        assert_eq!(page.annotation.boxes.len(), 1);
        assert_eq!(page.transcript_lines.len(), 1);
        assert_eq!(page.transcript_lines[0].chars().count(), 1);
        assert_eq!(page.reading_order, vec![0]);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let params = CorpusParams::default();
        let a = gen_page(&params, "p", 42).unwrap();
        let b = gen_page(&params, "p", 42).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.annotation, b.annotation);
        assert_eq!(a.reading_order, b.reading_order);
        assert_eq!(a.transcript_lines, b.transcript_lines);
    }

    #[test]
    fn ink_masks_inside_boxes_and_background_clean() {
        let params = CorpusParams::default();
        let page = gen_page(&params, "p", 5).unwrap();
        for (b, m) in page.annotation.boxes.iter().zip(&page.masks) {
            assert!(m.x >= b.x && m.y >= b.y);
            assert!(m.x + m.w <= b.right() && m.y + m.h <= b.bottom());
        }
        let noise = params.noise_level as i32;
        for py in 0..page.annotation.height {
            for px in 0..page.annotation.width {
                let inside = page
                    .annotation
                    .boxes
                    .iter()
                    .any(|b| px >= b.x && px < b.right() && py >= b.y && py < b.bottom());
                if !inside {
                    let p = page.image.get_pixel(px, py);
                    for c in 0..3 {
                        let dev = (p.0[c] as i32 - params.background[c] as i32).abs();
                        assert!(dev <= noise, "pixel ({px},{py}) channel {c} deviates by {dev}");
                    }
                }
            }
        }
    }

    #[test]
    fn line_assembly_recovers_reading_order() {
        for jitter in [0.05, 0.08] {
            let params = CorpusParams { jitter_frac: jitter, ..CorpusParams::default() };
            let mut ok = 0;
            for i in 0..100u64 {
                let page = gen_page(&params, &format!("p{i}"), 1000 + i).unwrap();
                let lines = assemble_lines(&page.annotation, DEFAULT_OVERLAP_THRESHOLD);
                let recovered: Vec<usize> =
                    lines.iter().flat_map(|l| l.box_indices.iter().copied()).collect();
                if recovered == page.reading_order {
                    ok += 1;
                }
            }
            assert_eq!(ok, 100, "jitter {jitter}: order recovered on {ok}/100 pages");
        }
    }

    #[test]
    fn assembled_transcript_matches_reference() {
        let params = CorpusParams::default();
        let map = corpus_map(params.alphabet_size).unwrap();
        for i in 0..20u64 {
            let page = gen_page(&params, &format!("p{i}"), 300 + i).unwrap();
            let lines = assemble_lines(&page.annotation, DEFAULT_OVERLAP_THRESHOLD);
            let t = transcript_of(&page.annotation, &lines, &map).unwrap();
            assert_eq!(t.lines, page.transcript_lines);
            assert_eq!(t.flat, page.flat_transcript());
        }
    }

    #[test]
    fn corpus_split_is_nine_to_one() {
        let params = CorpusParams {
            lines_per_page: (1, 2),
            chars_per_line: (1, 2),
            ..CorpusParams::default()
        };
        let corpus = gen_corpus(&params, 240).unwrap();
        assert_eq!(corpus.pages.len(), 240);
        assert_eq!(corpus.split.train.len(), 216);
        assert_eq!(corpus.split.valid.len(), 24);
    }

    #[test]
    fn different_master_seeds_differ() {
        let a = gen_corpus(&CorpusParams { seed: 1, ..CorpusParams::default() }, 10).unwrap();
        let b = gen_corpus(&CorpusParams { seed: 2, ..CorpusParams::default() }, 10).unwrap();
        let ta: Vec<String> = a.pages.iter().map(|p| p.flat_transcript()).collect();
        let tb: Vec<String> = b.pages.iter().map(|p| p.flat_transcript()).collect();
        assert_ne!(ta, tb);
    }

    #[test]
    fn written_corpus_parses_back_clean() {
        let dir = tempfile::tempdir().unwrap();
        let params = CorpusParams::default();
        let corpus = gen_corpus(&params, 6).unwrap();
        write_corpus(dir.path(), &corpus, &["meta test".into()]).unwrap();

        let parsed =
            annotation::parse_dataset(&dir.path().join("train.csv"), &dir.path().join("images"))
                .unwrap();
        assert!(parsed.warnings.is_empty(), "{:?}", parsed.warnings);
        assert_eq!(parsed.pages.len(), corpus.pages.len());
        for (got, want) in parsed.pages.iter().zip(&corpus.pages) {
            assert_eq!(got, &want.annotation);
        }

        let (map, warnings) =
            annotation::load_codepoint_map(&dir.path().join("unicode_map.csv")).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(map.len(), corpus.map.len());

        let (train, valid) = load_split(&dir.path().join("split.tsv")).unwrap();
        assert_eq!(train, corpus.split.train);
        assert_eq!(valid, corpus.split.valid);

        let oracle = load_oracle(&dir.path().join("oracle.tsv")).unwrap();
        assert_eq!(oracle.len(), corpus.pages.len());
        for (rec, page) in oracle.iter().zip(&corpus.pages) {
            assert_eq!(rec.image_id, page.image_id);
            assert_eq!(rec.background, page.background);
            assert_eq!(rec.reading_order, page.reading_order);
            assert_eq!(rec.ink_bounds.len(), page.masks.len());
            for (b, m) in rec.ink_bounds.iter().zip(&page.masks) {
                assert_eq!(*b, (m.x, m.y, m.w, m.h));
            }
        }
    }

    #[test]
    fn page_too_small_is_an_error() {
        let params = CorpusParams {
            page_width: 64,
            page_height: 64,
            lines_per_page: (4, 4),
            chars_per_line: (4, 4),
            ..CorpusParams::default()
        };
        let err = gen_page(&params, "tiny", 1).unwrap_err();
        assert!(err.to_string().contains("tiny"), "{err}");
    }

    #[test]
    fn bad_params_rejected() {
        let mut p = CorpusParams::default();
        p.alphabet_size = 0;
        assert!(p.validate().is_err());
        let mut p = CorpusParams::default();
        p.column_gap = (3, 5);
        assert!(p.validate().is_err());
        let mut p = CorpusParams::default();
        p.chars_per_line = (5, 2);
        assert!(p.validate().is_err());
    }
}
