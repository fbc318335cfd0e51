//! Melody modeling pipeline for Chinese pentatonic-mode music: quantized
//! MIDI scores, a mode-aware event codec, rule-based mode detection, a
//! hybrid state-space/attention sequence model with reverse-mode autodiff,
//! training, constrained sampling, and objective evaluation metrics.

pub mod codec;
pub mod modes;
pub mod score;

pub use codec::{AnnotatedScore, CodecConfig, NoteType, RemiMEvent, Vocabulary};
pub use modes::{ModeClass, ModeSpan};
pub use score::{NoteEvent, QuantizedScore, TempoChange};
