//! Effective configuration: one flat key–value file with a section per
//! pipeline stage, defaults for every tunable, and a stable hash.
//!
//! Unknown sections and keys are rejected rather than ignored — a typo'd
//! tunable silently falling back to its default is the kind of bug that
//! costs a training run. The canonical listing (every key in declaration
//! order, defaults filled in) is hashed with FNV-1a; that hash plus the
//! master seed is stamped into every artifact the tool writes, so any
//! output can be traced to the exact settings that produced it.
//!
//! All randomness flows from the single master seed through documented
//! per-task derivations (`crops`, `augment`, `synth`, `train`, `init`,
//! `gradcheck`); two subcommands never share a stream.

use kforge::augment::AugmentationSpec;
use kforge::curriculum::StopRule;
use kforge::error::{Error, Result};
use kforge::metrics::{CrrMode, CrrOptions};
use kforge::recognizer::{Hyperparams, ModelConfig, Vocabulary};
use kforge::seed;
use kforge::synth::CorpusParams;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct LinesCfg {
    pub overlap_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropsCfg {
    pub group_min: usize,
    pub group_max: usize,
    pub margin: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentCfg {
    pub k_min: usize,
    pub k_max: usize,
    pub erase_margin: u32,
    pub skew_max_deg: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumCfg {
    pub patience: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsCfg {
    pub crr_mode: CrrMode,
    pub score_separator: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerCfg {
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub attend_coords: bool,
    pub max_image: u32,
    pub rho: f64,
    pub epsilon: f64,
    pub scale: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_decode_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCfg {
    pub alphabet_size: usize,
    pub page_width: u32,
    pub page_height: u32,
    pub glyph_size: u32,
    pub lines_min: u32,
    pub lines_max: u32,
    pub chars_min: u32,
    pub chars_max: u32,
    pub gap_min: u32,
    pub gap_max: u32,
    pub jitter_frac: f64,
    pub noise_level: u8,
    pub background: [u8; 3],
}

/// Every tunable of every stage, plus the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub lines: LinesCfg,
    pub crops: CropsCfg,
    pub augment: AugmentCfg,
    pub curriculum: CurriculumCfg,
    pub metrics: MetricsCfg,
    pub recognizer: RecognizerCfg,
    pub synth: SynthCfg,
}

impl Default for Config {
    fn default() -> Self {
        let aug = AugmentationSpec::default();
        let stop = StopRule::default();
        let hp = Hyperparams::default();
        let syn = CorpusParams::default();
        Config {
            seed: 7,
            lines: LinesCfg {
                overlap_threshold: kforge::lines::DEFAULT_OVERLAP_THRESHOLD,
            },
            crops: CropsCfg {
                group_min: kforge::curriculum::DEFAULT_GROUP_MIN,
                group_max: kforge::curriculum::DEFAULT_GROUP_MAX,
                margin: kforge::curriculum::DEFAULT_CROP_MARGIN,
            },
            augment: AugmentCfg {
                k_min: aug.k_min,
                k_max: aug.k_max,
                erase_margin: aug.erase_margin,
                skew_max_deg: aug.skew_max_deg,
                elastic_alpha: aug.elastic_alpha,
                elastic_sigma: aug.elastic_sigma,
            },
            curriculum: CurriculumCfg {
                patience: stop.patience,
                max_epochs: stop.max_epochs_per_stage,
            },
            metrics: MetricsCfg {
                crr_mode: CrrMode::Normalized,
                score_separator: true,
            },
            recognizer: RecognizerCfg {
                channels: vec![16, 32, 64],
                embed_dim: 48,
                hidden_dim: 64,
                attn_dim: 48,
                attend_coords: true,
                max_image: 512,
                rho: hp.rho,
                epsilon: hp.epsilon,
                scale: hp.scale,
                clip_norm: hp.clip_norm,
                batch_size: hp.batch_size,
                max_decode_len: hp.max_decode_len,
            },
            synth: SynthCfg {
                alphabet_size: syn.alphabet_size,
                page_width: syn.page_width,
                page_height: syn.page_height,
                glyph_size: syn.glyph_size,
                lines_min: syn.lines_per_page.0,
                lines_max: syn.lines_per_page.1,
                chars_min: syn.chars_per_line.0,
                chars_max: syn.chars_per_line.1,
                gap_min: syn.column_gap.0,
                gap_max: syn.column_gap.1,
                jitter_frac: syn.jitter_frac,
                noise_level: syn.noise_level,
                background: syn.background,
            },
        }
    }
}

impl Config {
    /// Load from an explicit path, else from `$KFORGE_CONFIG`, else the
    /// built-in defaults. A path that is set but unreadable is an error;
    /// silently proceeding on defaults would hide it.
    pub fn resolve(explicit: Option<&Path>) -> Result<Config> {
        if let Some(path) = explicit {
            return Config::load(path);
        }
        match std::env::var_os("KFORGE_CONFIG") {
            Some(p) if !p.is_empty() => Config::load(Path::new(&p)),
            _ => Ok(Config::default()),
        }
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Config::parse(&text, &path.display().to_string())
    }

    /// Parse the flat `key = value` format. `origin` names the source in
    /// error messages. Later assignments override earlier ones.
    pub fn parse(text: &str, origin: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::parse(origin, line_no, "unterminated section header")
                })?;
                if !SECTIONS.contains(&name) {
                    return Err(Error::parse(
                        origin,
                        line_no,
                        format!("unknown section [{name}]"),
                    ));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(origin, line_no, format!("expected `key = value`, got {line:?}"))
            })?;
            cfg.set(&section, key.trim(), value.trim(), origin, line_no)?;
        }
        cfg.validate_at(origin)?;
        Ok(cfg)
    }

    fn set(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        origin: &str,
        line_no: usize,
    ) -> Result<()> {
        let c = Ctx { origin, line_no };
        match (section, key) {
            ("main", "seed") => self.seed = c.num(value)?,
            ("lines", "overlap_threshold") => self.lines.overlap_threshold = c.num(value)?,
            ("crops", "group_min") => self.crops.group_min = c.num(value)?,
            ("crops", "group_max") => self.crops.group_max = c.num(value)?,
            ("crops", "margin") => self.crops.margin = c.num(value)?,
            ("augment", "k_min") => self.augment.k_min = c.num(value)?,
            ("augment", "k_max") => self.augment.k_max = c.num(value)?,
            ("augment", "erase_margin") => self.augment.erase_margin = c.num(value)?,
            ("augment", "skew_max_deg") => self.augment.skew_max_deg = c.num(value)?,
            ("augment", "elastic_alpha") => self.augment.elastic_alpha = c.num(value)?,
            ("augment", "elastic_sigma") => self.augment.elastic_sigma = c.num(value)?,
            ("curriculum", "patience") => self.curriculum.patience = c.num(value)?,
            ("curriculum", "max_epochs") => self.curriculum.max_epochs = c.num(value)?,
            ("metrics", "crr_mode") => {
                self.metrics.crr_mode = match value {
                    "normalized" => CrrMode::Normalized,
                    "literal" => CrrMode::Literal,
                    other => {
                        return Err(c.err(format!(
                            "crr_mode must be `normalized` or `literal`, got {other:?}"
                        )))
                    }
                }
            }
            ("metrics", "score_separator") => self.metrics.score_separator = c.boolean(value)?,
            ("recognizer", "channels") => self.recognizer.channels = c.list(value)?,
            ("recognizer", "embed_dim") => self.recognizer.embed_dim = c.num(value)?,
            ("recognizer", "hidden_dim") => self.recognizer.hidden_dim = c.num(value)?,
            ("recognizer", "attn_dim") => self.recognizer.attn_dim = c.num(value)?,
            ("recognizer", "attend_coords") => self.recognizer.attend_coords = c.boolean(value)?,
            ("recognizer", "max_image") => self.recognizer.max_image = c.num(value)?,
            ("recognizer", "rho") => self.recognizer.rho = c.num(value)?,
            ("recognizer", "epsilon") => self.recognizer.epsilon = c.num(value)?,
            ("recognizer", "scale") => self.recognizer.scale = c.num(value)?,
            ("recognizer", "clip_norm") => self.recognizer.clip_norm = c.num(value)?,
            ("recognizer", "batch_size") => self.recognizer.batch_size = c.num(value)?,
            ("recognizer", "max_decode_len") => self.recognizer.max_decode_len = c.num(value)?,
            ("synth", "alphabet_size") => self.synth.alphabet_size = c.num(value)?,
            ("synth", "page_width") => self.synth.page_width = c.num(value)?,
            ("synth", "page_height") => self.synth.page_height = c.num(value)?,
            ("synth", "glyph_size") => self.synth.glyph_size = c.num(value)?,
            ("synth", "lines_min") => self.synth.lines_min = c.num(value)?,
            ("synth", "lines_max") => self.synth.lines_max = c.num(value)?,
            ("synth", "chars_min") => self.synth.chars_min = c.num(value)?,
            ("synth", "chars_max") => self.synth.chars_max = c.num(value)?,
            ("synth", "gap_min") => self.synth.gap_min = c.num(value)?,
            ("synth", "gap_max") => self.synth.gap_max = c.num(value)?,
            ("synth", "jitter_frac") => self.synth.jitter_frac = c.num(value)?,
            ("synth", "noise_level") => self.synth.noise_level = c.num(value)?,
            ("synth", "background") => {
                let parts: Vec<u8> = c.list(value)?;
                let [r, g, b] = parts[..] else {
                    return Err(c.err(format!(
                        "background needs 3 comma-separated channels, got {}",
                        parts.len()
                    )));
                };
                self.synth.background = [r, g, b];
            }
            ("", _) => {
                return Err(c.err(format!("key {key:?} appears before any [section]")));
            }
            _ => {
                return Err(c.err(format!("unknown key {key:?} in section [{section}]")));
            }
        }
        Ok(())
    }

    /// Range checks that don't need a vocabulary or file inputs. Deeper
    /// validation happens when the core structs are built.
    pub fn validate(&self) -> Result<()> {
        self.validate_at("<config>")
    }

    fn validate_at(&self, origin: &str) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{origin}: {msg}")));
        if !(self.lines.overlap_threshold > 0.0 && self.lines.overlap_threshold <= 1.0) {
            return fail(format!(
                "lines.overlap_threshold must be in (0, 1], got {}",
                self.lines.overlap_threshold
            ));
        }
        if self.crops.group_min < 1 || self.crops.group_min > self.crops.group_max {
            return fail(format!(
                "crops group range {}..={} is invalid",
                self.crops.group_min, self.crops.group_max
            ));
        }
        if self.recognizer.channels.is_empty() || self.recognizer.channels.contains(&0) {
            return fail("recognizer.channels must be a nonempty list of positive widths".into());
        }
        for (name, v) in [
            ("embed_dim", self.recognizer.embed_dim),
            ("hidden_dim", self.recognizer.hidden_dim),
            ("attn_dim", self.recognizer.attn_dim),
        ] {
            if v == 0 {
                return fail(format!("recognizer.{name} must be positive"));
            }
        }
        self.stop_rule().validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        self.hyperparams().validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        self.augmentation_spec()
            .validate()
            .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        self.corpus_params()
            .validate()
            .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(())
    }

    /// The full effective configuration, one `section.key=value` per line,
    /// in declaration order. This is what gets hashed.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "main.seed={}", self.seed);
        let _ = writeln!(s, "lines.overlap_threshold={}", self.lines.overlap_threshold);
        let _ = writeln!(s, "crops.group_min={}", self.crops.group_min);
        let _ = writeln!(s, "crops.group_max={}", self.crops.group_max);
        let _ = writeln!(s, "crops.margin={}", self.crops.margin);
        let _ = writeln!(s, "augment.k_min={}", self.augment.k_min);
        let _ = writeln!(s, "augment.k_max={}", self.augment.k_max);
        let _ = writeln!(s, "augment.erase_margin={}", self.augment.erase_margin);
        let _ = writeln!(s, "augment.skew_max_deg={}", self.augment.skew_max_deg);
        let _ = writeln!(s, "augment.elastic_alpha={}", self.augment.elastic_alpha);
        let _ = writeln!(s, "augment.elastic_sigma={}", self.augment.elastic_sigma);
        let _ = writeln!(s, "curriculum.patience={}", self.curriculum.patience);
        let _ = writeln!(s, "curriculum.max_epochs={}", self.curriculum.max_epochs);
        let mode = match self.metrics.crr_mode {
            CrrMode::Normalized => "normalized",
            CrrMode::Literal => "literal",
        };
        let _ = writeln!(s, "metrics.crr_mode={mode}");
        let _ = writeln!(s, "metrics.score_separator={}", self.metrics.score_separator);
        let channels: Vec<String> =
            self.recognizer.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "recognizer.channels={}", channels.join(","));
        let _ = writeln!(s, "recognizer.embed_dim={}", self.recognizer.embed_dim);
        let _ = writeln!(s, "recognizer.hidden_dim={}", self.recognizer.hidden_dim);
        let _ = writeln!(s, "recognizer.attn_dim={}", self.recognizer.attn_dim);
        let _ = writeln!(s, "recognizer.attend_coords={}", self.recognizer.attend_coords);
        let _ = writeln!(s, "recognizer.max_image={}", self.recognizer.max_image);
        let _ = writeln!(s, "recognizer.rho={}", self.recognizer.rho);
        let _ = writeln!(s, "recognizer.epsilon={}", self.recognizer.epsilon);
        let _ = writeln!(s, "recognizer.scale={}", self.recognizer.scale);
        let _ = writeln!(s, "recognizer.clip_norm={}", self.recognizer.clip_norm);
        let _ = writeln!(s, "recognizer.batch_size={}", self.recognizer.batch_size);
        let _ = writeln!(s, "recognizer.max_decode_len={}", self.recognizer.max_decode_len);
        let _ = writeln!(s, "synth.alphabet_size={}", self.synth.alphabet_size);
        let _ = writeln!(s, "synth.page_width={}", self.synth.page_width);
        let _ = writeln!(s, "synth.page_height={}", self.synth.page_height);
        let _ = writeln!(s, "synth.glyph_size={}", self.synth.glyph_size);
        let _ = writeln!(s, "synth.lines_min={}", self.synth.lines_min);
        let _ = writeln!(s, "synth.lines_max={}", self.synth.lines_max);
        let _ = writeln!(s, "synth.chars_min={}", self.synth.chars_min);
        let _ = writeln!(s, "synth.chars_max={}", self.synth.chars_max);
        let _ = writeln!(s, "synth.gap_min={}", self.synth.gap_min);
        let _ = writeln!(s, "synth.gap_max={}", self.synth.gap_max);
        let _ = writeln!(s, "synth.jitter_frac={}", self.synth.jitter_frac);
        let _ = writeln!(s, "synth.noise_level={}", self.synth.noise_level);
        let _ = writeln!(
            s,
            "synth.background={},{},{}",
            self.synth.background[0], self.synth.background[1], self.synth.background[2]
        );
        s
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", seed::fnv1a64(self.canonical().as_bytes()))
    }

    /// Provenance lines stamped into every artifact.
    pub fn meta(&self) -> Vec<String> {
        vec![format!("config={}", self.hash_hex()), format!("seed={}", self.seed)]
    }

    pub fn augmentation_spec(&self) -> AugmentationSpec {
        AugmentationSpec {
            k_min: self.augment.k_min,
            k_max: self.augment.k_max,
            erase_margin: self.augment.erase_margin,
            skew_max_deg: self.augment.skew_max_deg,
            elastic_alpha: self.augment.elastic_alpha,
            elastic_sigma: self.augment.elastic_sigma,
            seed: seed::derive_seed(self.seed, "augment"),
        }
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            alphabet_size: self.synth.alphabet_size,
            page_width: self.synth.page_width,
            page_height: self.synth.page_height,
            glyph_size: self.synth.glyph_size,
            lines_per_page: (self.synth.lines_min, self.synth.lines_max),
            chars_per_line: (self.synth.chars_min, self.synth.chars_max),
            column_gap: (self.synth.gap_min, self.synth.gap_max),
            jitter_frac: self.synth.jitter_frac,
            background: self.synth.background,
            noise_level: self.synth.noise_level,
            seed: seed::derive_seed(self.seed, "synth"),
        }
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            patience: self.curriculum.patience,
            max_epochs_per_stage: self.curriculum.max_epochs,
        }
    }

    pub fn crr_options(&self) -> CrrOptions {
        CrrOptions {
            mode: self.metrics.crr_mode,
            score_separator: self.metrics.score_separator,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            rho: self.recognizer.rho,
            epsilon: self.recognizer.epsilon,
            scale: self.recognizer.scale,
            clip_norm: self.recognizer.clip_norm,
            batch_size: self.recognizer.batch_size,
            max_decode_len: self.recognizer.max_decode_len,
            seed: seed::derive_seed(self.seed, "train"),
        }
    }

    pub fn model_config(&self, vocab: Vocabulary) -> ModelConfig {
        let mut mc = ModelConfig::new(vocab);
        mc.channels = self.recognizer.channels.clone();
        mc.embed_dim = self.recognizer.embed_dim;
        mc.hidden_dim = self.recognizer.hidden_dim;
        mc.attn_dim = self.recognizer.attn_dim;
        mc.attend_coords = self.recognizer.attend_coords;
        mc.max_image = self.recognizer.max_image;
        mc
    }
}

const SECTIONS: [&str; 8] = [
    "main",
    "lines",
    "crops",
    "augment",
    "curriculum",
    "metrics",
    "recognizer",
    "synth",
];

/// Error context for one assignment: file name and line number.
struct Ctx<'a> {
    origin: &'a str,
    line_no: usize,
}

impl Ctx<'_> {
    fn err(&self, msg: String) -> Error {
        Error::parse(self.origin, self.line_no, msg)
    }

    fn num<T: std::str::FromStr>(&self, value: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        value.parse().map_err(|e| self.err(format!("bad value {value:?}: {e}")))
    }

    fn boolean(&self, value: &str) -> Result<bool> {
        match value {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.err(format!("expected `true` or `false`, got {other:?}"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, value: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        value.split(',').map(|t| self.num(t.trim())).collect()
    }
}
