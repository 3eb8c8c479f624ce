//! Augmentation: random text-line erasure with background fill, left-right
//! perspective skew, and elastic distortion — image and transcript kept
//! consistent throughout.
//!
//! Each operation reads its randomness from its own salted stream of the
//! spec seed, so operations never perturb each other and a generated record
//! can be reproduced bit-exactly from its provenance. Box geometry under
//! warps is corner-mapped and replaced by the tight axis-aligned bounding
//! rectangle, keeping boxes axis-aligned for downstream scoring.

use crate::annotation::{CharBox, CodepointMap, PageAnnotation};
use crate::error::{Error, Result};
use crate::lines::{self, PageTranscript, TextLine};
use crate::par;
use crate::seed;
use crate::textio;
use image::RgbImage;
use rand::Rng;
use std::path::Path;

pub const PROV_HEADER: &str = "#kforge-prov v1";

/// Suffix appended to a source image id to name its generated record.
pub const GENERATED_SUFFIX: &str = "-gen";

/// All augmentation knobs plus the seed that drives them.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    /// Bounds (inclusive) on the number of erased lines per page.
    pub k_min: usize,
    pub k_max: usize,
    /// Dilation in pixels around an erased line's bounding box.
    pub erase_margin: u32,
    /// Skew angle is drawn uniformly from [-skew_max_deg, +skew_max_deg].
    pub skew_max_deg: f64,
    /// Pre-blur displacement bound in pixels; 0 disables the distortion.
    pub elastic_alpha: f64,
    /// Gaussian smoothing std-dev of the displacement field, in pixels.
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            k_min: 1,
            k_max: 3,
            erase_margin: 4,
            skew_max_deg: 8.0,
            elastic_alpha: 4.0,
            elastic_sigma: 8.0,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_min > self.k_max {
            return Err(Error::InvalidInput(format!(
                "k_min {} exceeds k_max {}",
                self.k_min, self.k_max
            )));
        }
        if !(0.0..=30.0).contains(&self.skew_max_deg) {
            return Err(Error::InvalidInput(format!(
                "skew_max_deg must be in 0..=30, got {}",
                self.skew_max_deg
            )));
        }
        if self.elastic_sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "elastic_sigma must be positive, got {}",
                self.elastic_sigma
            )));
        }
        if self.elastic_alpha < 0.0 || !self.elastic_alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "elastic_alpha must be finite and nonnegative, got {}",
                self.elastic_alpha
            )));
        }
        Ok(())
    }
}

/// Where a generated record came from: enough to rebuild it bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source_id: String,
    /// Operation names in application order.
    pub ops: Vec<String>,
    /// The seed the operations drew from.
    pub seed: u64,
    /// Reading-order ranks of erased lines, ascending.
    pub erased_ranks: Vec<usize>,
}

/// One generated sample: image, transformed annotation, consistent
/// transcript, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AugRecord {
    pub image: RgbImage,
    pub annotation: PageAnnotation,
    pub transcript: PageTranscript,
    pub provenance: Provenance,
}

/// Per-channel median color over grid samples outside all character boxes
/// (at most 10^5 sample points). Falls back to the whole-image median when
/// boxes cover every sample.
pub fn estimate_background(image: &RgbImage, page: &PageAnnotation) -> [u8; 3] {
    let (w, h) = image.dimensions();
    let step = (((w as u64 * h as u64) as f64 / 1e5).sqrt().ceil() as u32).max(1);

    let mut covered = vec![false; (w * h) as usize];
    for b in &page.boxes {
        for y in b.y..b.bottom().min(h) {
            let row = (y * w) as usize;
            for x in b.x..b.right().min(w) {
                covered[row + x as usize] = true;
            }
        }
    }

    let mut outside: [Vec<u32>; 3] = [vec![0; 256], vec![0; 256], vec![0; 256]];
    let mut all: [Vec<u32>; 3] = [vec![0; 256], vec![0; 256], vec![0; 256]];
    let (mut n_outside, mut n_all) = (0u32, 0u32);
    let mut y = 0;
    while y < h {
        let mut x = 0;
        while x < w {
            let p = image.get_pixel(x, y);
            for c in 0..3 {
                all[c][p.0[c] as usize] += 1;
            }
            n_all += 1;
            if !covered[(y * w + x) as usize] {
                for c in 0..3 {
                    outside[c][p.0[c] as usize] += 1;
                }
                n_outside += 1;
            }
            x += step;
        }
        y += step;
    }

    let (hist, n) = if n_outside > 0 { (&outside, n_outside) } else { (&all, n_all) };
    let mut color = [0u8; 3];
    for c in 0..3 {
        let target = (n - 1) / 2;
        let mut acc = 0u32;
        for v in 0..256usize {
            acc += hist[c][v];
            if acc > target {
                color[c] = v as u8;
                break;
            }
        }
    }
    color
}

fn input_transcript(
    page: &PageAnnotation,
    line_set: &[TextLine],
    map: &CodepointMap,
) -> Result<PageTranscript> {
    lines::transcript_of(page, line_set, map)
}

/// Erase the lines at the given reading-order ranks: fill each line's
/// bounding box, dilated by `erase_margin`, with the estimated background;
/// drop the erased boxes and transcript lines, preserving order.
pub fn erase_lines_at(
    image: &RgbImage,
    page: &PageAnnotation,
    line_set: &[TextLine],
    map: &CodepointMap,
    ranks: &[usize],
    erase_margin: u32,
) -> Result<AugRecord> {
    let transcript = input_transcript(page, line_set, map)?;
    let background = estimate_background(image, page);
    let (image, annotation, transcript) = erase_step(
        image,
        page,
        line_set,
        &transcript,
        ranks,
        erase_margin,
        background,
    )?;
    Ok(AugRecord {
        image,
        annotation,
        transcript,
        provenance: Provenance {
            source_id: page.image_id.clone(),
            ops: vec!["erase".into()],
            seed: 0,
            erased_ranks: ranks.to_vec(),
        },
    })
}

fn erase_step(
    image: &RgbImage,
    page: &PageAnnotation,
    line_set: &[TextLine],
    transcript: &PageTranscript,
    ranks: &[usize],
    erase_margin: u32,
    background: [u8; 3],
) -> Result<(RgbImage, PageAnnotation, PageTranscript)> {
    let mut seen = vec![false; line_set.len()];
    for &r in ranks {
        if r >= line_set.len() || seen[r] {
            return Err(Error::InvalidInput(format!(
                "erase rank {r} invalid for a {}-line page",
                line_set.len()
            )));
        }
        seen[r] = true;
    }

    let (w, h) = image.dimensions();
    let mut out = image.clone();
    let mut erased_box_indices = vec![false; page.boxes.len()];
    for &r in ranks {
        let line = &line_set[r];
        let (bx, by, bw, bh) = line.line_bbox;
        let x0 = bx.saturating_sub(erase_margin);
        let y0 = by.saturating_sub(erase_margin);
        let x1 = (bx + bw + erase_margin).min(w);
        let y1 = (by + bh + erase_margin).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                out.put_pixel(x, y, image::Rgb(background));
            }
        }
        for &i in &line.box_indices {
            erased_box_indices[i] = true;
        }
    }

    let surviving: Vec<CharBox> = page
        .boxes
        .iter()
        .enumerate()
        .filter(|(i, _)| !erased_box_indices[*i])
        .map(|(_, b)| b.clone())
        .collect();
    let surviving_lines: Vec<String> = transcript
        .lines
        .iter()
        .enumerate()
        .filter(|(r, _)| !ranks.contains(r))
        .map(|(_, s)| s.clone())
        .collect();

    Ok((
        out,
        PageAnnotation {
            image_id: page.image_id.clone(),
            width: page.width,
            height: page.height,
            boxes: surviving,
        },
        PageTranscript::from_lines(surviving_lines),
    ))
}

/// Randomized erasure: k ~ uniform{k_min..k_max}, then a uniform random
/// k-subset of lines. The line set must come from `assemble_lines` on the
/// same page.
pub fn erase_lines(
    image: &RgbImage,
    page: &PageAnnotation,
    line_set: &[TextLine],
    map: &CodepointMap,
    spec: &AugmentationSpec,
) -> Result<AugRecord> {
    spec.validate()?;
    if line_set.is_empty() {
        return Err(Error::InvalidInput(format!(
            "page {:?} has no lines to erase",
            page.image_id
        )));
    }
    if spec.k_max > line_set.len() {
        return Err(Error::InvalidInput(format!(
            "k_max {} exceeds the page's {} lines",
            spec.k_max,
            line_set.len()
        )));
    }
    let mut rng = seed::rng(seed::derive_seed(spec.seed, "erase"));
    let ranks = sample_ranks(&mut rng, spec.k_min, spec.k_max, line_set.len());
    let mut record = erase_lines_at(image, page, line_set, map, &ranks, spec.erase_margin)?;
    record.provenance.seed = spec.seed;
    Ok(record)
}

fn sample_ranks(
    rng: &mut rand_chacha::ChaCha8Rng,
    k_min: usize,
    k_max: usize,
    n_lines: usize,
) -> Vec<usize> {
    let k = rng.gen_range(k_min..=k_max);
    let mut all: Vec<usize> = (0..n_lines).collect();
    seed::shuffle(&mut all, rng);
    let mut ranks: Vec<usize> = all.into_iter().take(k).collect();
    ranks.sort_unstable();
    ranks
}

/// Solve the 3x3 homography mapping four source points onto four
/// destination points (h33 fixed at 1), by Gaussian elimination.
fn solve_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> [f64; 9] {
    let mut m = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for k in col..9 {
            m[col][k] /= p;
        }
        for row in 0..8 {
            if row != col {
                let f = m[row][col];
                for k in col..9 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    [m[0][8], m[1][8], m[2][8], m[3][8], m[4][8], m[5][8], m[6][8], m[7][8], 1.0]
}

fn apply_homography(h: &[f64; 9], p: (f64, f64)) -> (f64, f64) {
    let w = h[6] * p.0 + h[7] * p.1 + h[8];
    ((h[0] * p.0 + h[1] * p.1 + h[2]) / w, (h[3] * p.0 + h[4] * p.1 + h[5]) / w)
}

/// The destination quadrilateral of the left-right skew: edges displaced
/// vertically by `±(W/2)·tan θ`, then uniformly scaled about the canvas
/// center so the whole quad fits inside the original canvas.
pub fn skew_destination_quad(width: u32, height: u32, theta_deg: f64) -> [(f64, f64); 4] {
    let (w, h) = (width as f64, height as f64);
    let d = w / 2.0 * theta_deg.to_radians().tan();
    let quad = [(0.0, d), (w, -d), (w, h + d), (0.0, h - d)];
    let s = h / (h + 2.0 * d.abs());
    let (cx, cy) = (w / 2.0, h / 2.0);
    quad.map(|(x, y)| (cx + (x - cx) * s, cy + (y - cy) * s))
}

fn sample_bilinear(image: &RgbImage, x: f64, y: f64, background: [u8; 3]) -> [u8; 3] {
    let (w, h) = image.dimensions();
    if x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64 {
        return background;
    }
    let gx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let gy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = gx.floor() as u32;
    let y0 = gy.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = gx - x0 as f64;
    let ty = gy - y0 as f64;
    let p00 = image.get_pixel(x0, y0).0;
    let p10 = image.get_pixel(x1, y0).0;
    let p01 = image.get_pixel(x0, y1).0;
    let p11 = image.get_pixel(x1, y1).0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
        let bottom = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
        out[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Tight integer box over mapped float corners: round-to-nearest on the
/// axis-aligned hull, clamped to the canvas, at least 1x1.
fn aabb_box(codepoint: u32, corners: &[(f64, f64)], width: u32, height: u32) -> CharBox {
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let x0 = min_x.round().clamp(0.0, (width - 1) as f64) as u32;
    let y0 = min_y.round().clamp(0.0, (height - 1) as f64) as u32;
    let x1 = (max_x.round() as i64).clamp(x0 as i64 + 1, width as i64) as u32;
    let y1 = (max_y.round() as i64).clamp(y0 as i64 + 1, height as i64) as u32;
    CharBox { codepoint, x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

fn box_corners(b: &CharBox) -> [(f64, f64); 4] {
    let (x0, y0) = (b.x as f64, b.y as f64);
    let (x1, y1) = (b.right() as f64, b.bottom() as f64);
    [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
}

fn skew_step(
    image: &RgbImage,
    page: &PageAnnotation,
    theta_deg: f64,
    background: [u8; 3],
) -> (RgbImage, PageAnnotation) {
    if theta_deg == 0.0 {
        return (image.clone(), page.clone());
    }
    let (w, h) = image.dimensions();
    let rect = [(0.0, 0.0), (w as f64, 0.0), (w as f64, h as f64), (0.0, h as f64)];
    let quad = skew_destination_quad(w, h, theta_deg);
    let forward = solve_homography(&rect, &quad);
    let inverse = solve_homography(&quad, &rect);

    let mut out = RgbImage::new(w, h);
    for py in 0..h {
        for px in 0..w {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let q = apply_homography(&inverse, p);
            out.put_pixel(px, py, image::Rgb(sample_bilinear(image, q.0, q.1, background)));
        }
    }

    let boxes = page
        .boxes
        .iter()
        .map(|b| {
            let mapped: Vec<(f64, f64)> =
                box_corners(b).iter().map(|&c| apply_homography(&forward, c)).collect();
            aabb_box(b.codepoint, &mapped, w, h)
        })
        .collect();
    (
        out,
        PageAnnotation {
            image_id: page.image_id.clone(),
            width: page.width,
            height: page.height,
            boxes,
        },
    )
}

/// Left-right perspective skew with θ drawn from the spec seed. The
/// destination quad is scaled to fit inside the canvas, so no content is
/// lost; outside the quad the image is background-filled.
pub fn skew_lr(
    image: &RgbImage,
    page: &PageAnnotation,
    map: &CodepointMap,
    spec: &AugmentationSpec,
) -> Result<AugRecord> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive_seed(spec.seed, "skew"));
    let theta = sample_theta(&mut rng, spec.skew_max_deg);
    let mut record = skew_lr_at(image, page, map, theta)?;
    record.provenance.seed = spec.seed;
    Ok(record)
}

/// [`skew_lr`] at an explicit angle, for callers that manage their own
/// sampling (and for checking the geometry against known angles).
pub fn skew_lr_at(
    image: &RgbImage,
    page: &PageAnnotation,
    map: &CodepointMap,
    theta_deg: f64,
) -> Result<AugRecord> {
    if !(-30.0..=30.0).contains(&theta_deg) {
        return Err(Error::InvalidInput(format!(
            "skew angle must be in -30..=30 degrees, got {theta_deg}"
        )));
    }
    let line_set = lines::assemble_lines(page, lines::DEFAULT_OVERLAP_THRESHOLD);
    let transcript = input_transcript(page, &line_set, map)?;
    let background = estimate_background(image, page);
    let (image, annotation) = skew_step(image, page, theta_deg, background);
    Ok(AugRecord {
        image,
        annotation,
        transcript,
        provenance: Provenance {
            source_id: page.image_id.clone(),
            ops: vec!["skew".into()],
            seed: 0,
            erased_ranks: Vec::new(),
        },
    })
}

fn sample_theta(rng: &mut rand_chacha::ChaCha8Rng, max_deg: f64) -> f64 {
    if max_deg == 0.0 {
        0.0
    } else {
        rng.gen_range(-max_deg..=max_deg)
    }
}

/// Smoothed displacement field: per-pixel offsets uniform in ±alpha, then
/// Gaussian-blurred (std-dev sigma, replicate borders). Returned row-major,
/// x-offsets then y-offsets.
fn elastic_field(
    width: u32,
    height: u32,
    alpha: f64,
    sigma: f64,
    field_seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let n = (width * height) as usize;
    let mut rng = seed::rng(field_seed);
    let mut dx = vec![0.0f64; n];
    let mut dy = vec![0.0f64; n];
    for v in dx.iter_mut() {
        *v = rng.gen_range(-alpha..=alpha);
    }
    for v in dy.iter_mut() {
        *v = rng.gen_range(-alpha..=alpha);
    }
    gaussian_blur(&mut dx, width, height, sigma);
    gaussian_blur(&mut dy, width, height, sigma);
    (dx, dy)
}

fn gaussian_blur(field: &mut [f64], width: u32, height: u32, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for i in -radius..=radius {
        let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        total += w;
    }
    for w in kernel.iter_mut() {
        *w /= total;
    }

    let (w, h) = (width as i64, height as i64);
    let mut tmp = vec![0.0f64; field.len()];
    // horizontal pass
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let sx = (x + ki as i64 - radius).clamp(0, w - 1);
                acc += kw * field[(y * w + sx) as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    // vertical pass
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let sy = (y + ki as i64 - radius).clamp(0, h - 1);
                acc += kw * tmp[(sy * w + x) as usize];
            }
            field[(y * w + x) as usize] = acc;
        }
    }
}

fn elastic_step(
    image: &RgbImage,
    page: &PageAnnotation,
    alpha: f64,
    sigma: f64,
    field_seed: u64,
    background: [u8; 3],
) -> (RgbImage, PageAnnotation) {
    if alpha == 0.0 {
        return (image.clone(), page.clone());
    }
    let (w, h) = image.dimensions();
    let (dx, dy) = elastic_field(w, h, alpha, sigma, field_seed);

    let mut out = RgbImage::new(w, h);
    for py in 0..h {
        for px in 0..w {
            let i = (py * w + px) as usize;
            let sx = px as f64 + 0.5 + dx[i];
            let sy = py as f64 + 0.5 + dy[i];
            out.put_pixel(px, py, image::Rgb(sample_bilinear(image, sx, sy, background)));
        }
    }

    let field_at = |x: u32, y: u32| -> (f64, f64) {
        let i = (y.min(h - 1) * w + x.min(w - 1)) as usize;
        (dx[i], dy[i])
    };
    let boxes = page
        .boxes
        .iter()
        .map(|b| {
            let mapped: Vec<(f64, f64)> = [
                (b.x, b.y),
                (b.right(), b.y),
                (b.right(), b.bottom()),
                (b.x, b.bottom()),
            ]
            .iter()
            .map(|&(cx, cy)| {
                let (ox, oy) = field_at(cx, cy);
                (cx as f64 - ox, cy as f64 - oy)
            })
            .collect();
            aabb_box(b.codepoint, &mapped, w, h)
        })
        .collect();
    (
        out,
        PageAnnotation {
            image_id: page.image_id.clone(),
            width: page.width,
            height: page.height,
            boxes,
        },
    )
}

/// Elastic distortion: the image is warped by inverse mapping through the
/// smoothed field; box corners are displaced against the field and replaced
/// by their bounding rectangle.
pub fn elastic_distort(
    image: &RgbImage,
    page: &PageAnnotation,
    map: &CodepointMap,
    spec: &AugmentationSpec,
) -> Result<AugRecord> {
    spec.validate()?;
    let line_set = lines::assemble_lines(page, lines::DEFAULT_OVERLAP_THRESHOLD);
    let transcript = input_transcript(page, &line_set, map)?;
    let background = estimate_background(image, page);
    let (image, annotation) = elastic_step(
        image,
        page,
        spec.elastic_alpha,
        spec.elastic_sigma,
        seed::derive_seed(spec.seed, "elastic"),
        background,
    );
    Ok(AugRecord {
        image,
        annotation,
        transcript,
        provenance: Provenance {
            source_id: page.image_id.clone(),
            ops: vec!["elastic".into()],
            seed: spec.seed,
            erased_ranks: Vec::new(),
        },
    })
}

/// One generated record per input page: erasure, then skew, then elastic
/// distortion, with a per-page seed derived from the page id so parallel
/// order never affects output. Pages whose line count cannot honor the
/// requested k range get the range clamped (never erasing every line) and
/// a warning.
pub fn generate_erasure_set(
    pages: &[(RgbImage, PageAnnotation)],
    map: &CodepointMap,
    spec: &AugmentationSpec,
) -> Result<(Vec<AugRecord>, Vec<String>)> {
    spec.validate()?;
    if pages.is_empty() {
        return Err(Error::InvalidInput("no pages to augment".into()));
    }
    let results = par::try_map_ordered(pages, |(image, page)| -> Result<(AugRecord, Option<String>)> {
        let page_seed = seed::derive_seed(spec.seed, &page.image_id);
        let line_set = lines::assemble_lines(page, lines::DEFAULT_OVERLAP_THRESHOLD);
        let transcript = input_transcript(page, &line_set, map)?;

        let n = line_set.len();
        let max_erasable = n.saturating_sub(1);
        let k_max_eff = spec.k_max.min(max_erasable);
        let k_min_eff = spec.k_min.min(k_max_eff);
        let warning = if (k_min_eff, k_max_eff) != (spec.k_min, spec.k_max) {
            Some(format!(
                "page {:?}: {} lines cannot honor k range {}..={}; clamped to {}..={}",
                page.image_id, n, spec.k_min, spec.k_max, k_min_eff, k_max_eff
            ))
        } else {
            None
        };

        let background = estimate_background(image, page);
        let mut erase_rng = seed::rng(seed::derive_seed(page_seed, "erase"));
        let ranks = sample_ranks(&mut erase_rng, k_min_eff, k_max_eff, n);
        let (erased_img, erased_ann, surviving_transcript) = erase_step(
            image,
            page,
            &line_set,
            &transcript,
            &ranks,
            spec.erase_margin,
            background,
        )?;

        let mut skew_rng = seed::rng(seed::derive_seed(page_seed, "skew"));
        let theta = sample_theta(&mut skew_rng, spec.skew_max_deg);
        let background = estimate_background(&erased_img, &erased_ann);
        let (skewed_img, skewed_ann) = skew_step(&erased_img, &erased_ann, theta, background);

        let (final_img, final_ann) = elastic_step(
            &skewed_img,
            &skewed_ann,
            spec.elastic_alpha,
            spec.elastic_sigma,
            seed::derive_seed(page_seed, "elastic"),
            background,
        );

        let generated_id = format!("{}{}", page.image_id, GENERATED_SUFFIX);
        Ok((
            AugRecord {
                image: final_img,
                annotation: PageAnnotation { image_id: generated_id, ..final_ann },
                transcript: surviving_transcript,
                provenance: Provenance {
                    source_id: page.image_id.clone(),
                    ops: vec!["erase".into(), "skew".into(), "elastic".into()],
                    seed: page_seed,
                    erased_ranks: ranks,
                },
            },
            warning,
        ))
    })?;

    let mut records = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (record, warning) in results {
        records.push(record);
        warnings.extend(warning);
    }
    Ok((records, warnings))
}

/// Persist provenance, one record per line:
/// `generated_id TAB source_id TAB ops TAB seed TAB erased_ranks`.
pub fn save_provenance(path: &Path, records: &[AugRecord], meta: &[String]) -> Result<()> {
    let rows: Vec<String> = records
        .iter()
        .map(|r| {
            let ranks = r
                .provenance
                .erased_ranks
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            format!(
                "{}\t{}\t{}\t{}\t{}",
                textio::escape_field(&r.annotation.image_id),
                textio::escape_field(&r.provenance.source_id),
                r.provenance.ops.join(","),
                r.provenance.seed,
                ranks
            )
        })
        .collect();
    textio::write_records(path, PROV_HEADER, meta, &rows)
}

/// Parsed provenance rows: (generated_id, Provenance).
pub fn load_provenance(path: &Path) -> Result<Vec<(String, Provenance)>> {
    let pathstr = path.display().to_string();
    let records = textio::read_records(path, PROV_HEADER)?;
    let mut out = Vec::with_capacity(records.len());
    for (line_no, record) in records {
        let fields: Vec<&str> = record.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                &pathstr,
                line_no,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let generated_id = textio::unescape_field(fields[0])
            .map_err(|e| Error::parse(&pathstr, line_no, e.to_string()))?;
        let source_id = textio::unescape_field(fields[1])
            .map_err(|e| Error::parse(&pathstr, line_no, e.to_string()))?;
        let ops: Vec<String> = if fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2].split(',').map(|s| s.to_string()).collect()
        };
        let seed: u64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(&pathstr, line_no, format!("bad seed {:?}", fields[3])))?;
        let erased_ranks: Vec<usize> = if fields[4].is_empty() {
            Vec::new()
        } else {
            fields[4]
                .split(',')
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(&pathstr, line_no, format!("bad ranks {:?}: {e}", fields[4])))?
        };
        out.push((generated_id, Provenance { source_id, ops, seed, erased_ranks }));
    }
    Ok(out)
}
