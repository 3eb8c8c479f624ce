//! kforge — turns character-box annotations of vertical-text documents into
//! line-level transcription datasets, generates augmented training data by
//! random line erasure and geometric distortion, stages curriculum datasets,
//! and trains/scores a desk-scale attention encoder-decoder on them.
//!
//! Pipeline modules, roughly in data-flow order:
//!
//! - [`annotation`] — parse, validate, persist and split box annotations
//! - [`lines`] — group boxes into vertical lines with right-to-left reading order
//! - [`synth`] — fully-labeled synthetic page generator (procedural glyphs)
//! - [`augment`] — line erasure, left-right skew, elastic distortion
//! - [`curriculum`] — multiline crops, stage manifests, the training schedule
//! - [`recognizer`] — attention encoder-decoder with hand-derived gradients
//! - [`metrics`] — character recognition rate and detection precision/recall/F1
//!
//! Everything derived from a seed is reproducible byte-for-byte; see
//! [`seed`] for how per-task seeds are derived from the master seed.

pub mod annotation;
pub mod augment;
pub mod curriculum;
pub mod error;
pub mod lines;
pub mod metrics;
pub mod par;
pub mod recognizer;
pub mod seed;
pub mod synth;
pub mod textio;

pub use error::{Error, Result};
