//! Event alphabet and token-id vocabulary for mode-annotated melodies.
//!
//! The base alphabet follows REMI (bar/position/tempo/note events on a
//! metrical grid); two extensions carry modal structure: a per-note type
//! event (mode note vs transition note) and mode region markers
//! (start/end/type). The ablated configuration without the extensions is
//! kept for controlled comparisons.

mod stream;

pub use stream::{decode, encode, mode_mask, Decoded, Repair};

use crate::modes::{ModeClass, ModeSpan, MODE_CLASSES};
use crate::score::{QuantizedScore, ScoreError, TempoChange};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("score does not match codec grid: {0}")]
    Grid(String),
    #[error("cannot encode note {index} ({reason})")]
    Note { index: usize, reason: String },
    #[error("token id {id} at position {pos} outside vocabulary of size {size}")]
    BadToken { id: u32, pos: usize, size: u32 },
    #[error("stream does not begin with BOS")]
    MissingBos,
    #[error("vocabulary file: {0}")]
    VocabFile(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Mode note (inside a span, in scale) vs transition note (everything else).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoteType {
    Mode,
    Transition,
}

impl NoteType {
    pub fn name(self) -> &'static str {
        match self {
            NoteType::Mode => "Mode",
            NoteType::Transition => "Transition",
        }
    }
}

/// One event in the stream alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RemiMEvent {
    Bar,
    /// 1-based grid position within the bar.
    Position(u32),
    /// Log-spaced tempo bin index.
    Tempo(u32),
    Pitch(u8),
    /// Duration in grid steps, 1-based.
    Duration(u32),
    /// Linear velocity bin index.
    Velocity(u32),
    NoteType(NoteType),
    ModeStart,
    ModeEnd,
    ModeType(ModeClass),
}

impl RemiMEvent {
    pub fn name(&self) -> String {
        match self {
            RemiMEvent::Bar => "Bar".into(),
            RemiMEvent::Position(p) => format!("Position_{p}"),
            RemiMEvent::Tempo(b) => format!("Tempo_{b}"),
            RemiMEvent::Pitch(p) => format!("Pitch_{p}"),
            RemiMEvent::Duration(d) => format!("Duration_{d}"),
            RemiMEvent::Velocity(v) => format!("Velocity_{v}"),
            RemiMEvent::NoteType(t) => format!("NoteType_{}", t.name()),
            RemiMEvent::ModeStart => "ModeStart".into(),
            RemiMEvent::ModeEnd => "ModeEnd".into(),
            RemiMEvent::ModeType(m) => format!("ModeType_{}", m.name()),
        }
    }

    pub fn from_name(name: &str) -> Option<RemiMEvent> {
        if let Some(rest) = name.strip_prefix("Position_") {
            return rest.parse().ok().map(RemiMEvent::Position);
        }
        if let Some(rest) = name.strip_prefix("Tempo_") {
            return rest.parse().ok().map(RemiMEvent::Tempo);
        }
        if let Some(rest) = name.strip_prefix("Pitch_") {
            return rest.parse().ok().map(RemiMEvent::Pitch);
        }
        if let Some(rest) = name.strip_prefix("Duration_") {
            return rest.parse().ok().map(RemiMEvent::Duration);
        }
        if let Some(rest) = name.strip_prefix("Velocity_") {
            return rest.parse().ok().map(RemiMEvent::Velocity);
        }
        if let Some(rest) = name.strip_prefix("ModeType_") {
            return ModeClass::from_name(rest).map(RemiMEvent::ModeType);
        }
        match name {
            "Bar" => Some(RemiMEvent::Bar),
            "NoteType_Mode" => Some(RemiMEvent::NoteType(NoteType::Mode)),
            "NoteType_Transition" => Some(RemiMEvent::NoteType(NoteType::Transition)),
            "ModeStart" => Some(RemiMEvent::ModeStart),
            "ModeEnd" => Some(RemiMEvent::ModeEnd),
            _ => None,
        }
    }
}

/// Grid and bin settings the vocabulary is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub positions_per_bar: u32,
    pub ppq: u32,
    pub time_signature: (u8, u8),
    pub tempo_bins: u32,
    pub duration_bins: u32,
    pub velocity_bins: u32,
    /// When false, note-type and mode events are omitted (plain REMI).
    pub mode_events: bool,
}

pub const TEMPO_MIN_BPM: f64 = 40.0;
pub const TEMPO_MAX_BPM: f64 = 240.0;

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            positions_per_bar: 16,
            ppq: 480,
            time_signature: (4, 4),
            tempo_bins: 32,
            duration_bins: 64, // up to 4 bars of grid steps
            velocity_bins: 32,
            mode_events: true,
        }
    }
}

impl CodecConfig {
    /// Plain-REMI ablation of this configuration.
    pub fn without_mode_events(mut self) -> Self {
        self.mode_events = false;
        self
    }

    pub fn bar_ticks(&self) -> u64 {
        self.ppq as u64 * 4 * self.time_signature.0 as u64 / self.time_signature.1 as u64
    }

    pub fn grid_step(&self) -> u64 {
        self.bar_ticks() / self.positions_per_bar as u64
    }

    /// Log-spaced tempo bin of a BPM value, clamped to the bin range.
    pub fn tempo_bin(&self, bpm: f64) -> u32 {
        let span = (TEMPO_MAX_BPM / TEMPO_MIN_BPM).ln();
        let x = (bpm.max(1e-6) / TEMPO_MIN_BPM).ln() / span;
        ((x * self.tempo_bins as f64).floor() as i64).clamp(0, self.tempo_bins as i64 - 1) as u32
    }

    /// Representative BPM of a tempo bin (log-space center).
    pub fn tempo_rep(&self, bin: u32) -> f64 {
        let span = TEMPO_MAX_BPM / TEMPO_MIN_BPM;
        TEMPO_MIN_BPM * span.powf((bin as f64 + 0.5) / self.tempo_bins as f64)
    }

    /// Linear velocity bin over [1, 127].
    pub fn velocity_bin(&self, velocity: u8) -> u32 {
        let v = velocity.clamp(1, 127) as u32;
        ((v - 1) * self.velocity_bins / 127).min(self.velocity_bins - 1)
    }

    /// Representative velocity of a bin (center, rounded).
    pub fn velocity_rep(&self, bin: u32) -> u8 {
        let v = 1.0 + (bin as f64 + 0.5) * 127.0 / self.velocity_bins as f64;
        (v.round() as u8).clamp(1, 127)
    }

    /// Snap a score onto every grid this codec quantizes over: tick grid,
    /// duration-bin clamp, tempo bin centers, velocity bin centers.
    /// Idempotent; `encode(normalize(s))` always succeeds and
    /// `decode(encode(normalize(s)))` reproduces `normalize(s)` exactly.
    pub fn normalize(&self, score: &QuantizedScore) -> Result<QuantizedScore, CodecError> {
        let mut s = score.rescale_ppq(self.ppq);
        s.time_signature = self.time_signature;
        let mut s = s.quantize(self.positions_per_bar)?;
        let step = self.grid_step();
        let max_dur = step * self.duration_bins as u64;
        for n in &mut s.notes {
            n.duration = n.duration.clamp(step, max_dur);
            n.velocity = self.velocity_rep(self.velocity_bin(n.velocity));
        }
        for tc in &mut s.tempo_changes {
            *tc = TempoChange::from_bpm(tc.tick, self.tempo_rep(self.tempo_bin(tc.bpm())));
        }
        s.sort_notes();
        Ok(s)
    }
}

/// A score plus its modal annotation: spans and per-note type labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedScore {
    pub score: QuantizedScore,
    pub mode_spans: Vec<ModeSpan>,
    pub note_types: Vec<NoteType>,
}

impl AnnotatedScore {
    /// Label every note: inside a span and in its scale -> mode note,
    /// everything else a transition note. Spans must be sorted and
    /// non-overlapping.
    pub fn annotate(
        score: QuantizedScore,
        mode_spans: Vec<ModeSpan>,
    ) -> Result<AnnotatedScore, crate::modes::ModeError> {
        crate::modes::validate_spans(&mode_spans)?;
        let note_types = score
            .notes
            .iter()
            .map(|n| {
                let in_scale_span = mode_spans
                    .iter()
                    .any(|s| s.contains_onset(n.onset) && s.scale()[n.pitch_class() as usize]);
                if in_scale_span {
                    NoteType::Mode
                } else {
                    NoteType::Transition
                }
            })
            .collect();
        Ok(AnnotatedScore {
            score,
            mode_spans,
            note_types,
        })
    }

    /// Annotation with no spans: every note is a transition note.
    pub fn unannotated(score: QuantizedScore) -> AnnotatedScore {
        let note_types = vec![NoteType::Transition; score.notes.len()];
        AnnotatedScore {
            score,
            mode_spans: Vec::new(),
            note_types,
        }
    }
}

/// Bijective event <-> token-id map with reserved PAD/BOS/EOS ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    config: CodecConfig,
    events: Vec<RemiMEvent>, // id - 3 -> event
    ids: HashMap<RemiMEvent, u32>,
}

impl Vocabulary {
    /// Enumerate the alphabet in canonical order; deterministic.
    pub fn build(config: CodecConfig) -> Vocabulary {
        assert!(config.positions_per_bar > 0, "positions_per_bar must be > 0");
        assert!(config.tempo_bins > 0, "tempo_bins must be > 0");
        assert!(config.duration_bins > 0, "duration_bins must be > 0");
        assert!(config.velocity_bins > 0, "velocity_bins must be > 0");
        let mut events = vec![RemiMEvent::Bar];
        for p in 1..=config.positions_per_bar {
            events.push(RemiMEvent::Position(p));
        }
        for b in 0..config.tempo_bins {
            events.push(RemiMEvent::Tempo(b));
        }
        for p in 0..=127u8 {
            events.push(RemiMEvent::Pitch(p));
        }
        for d in 1..=config.duration_bins {
            events.push(RemiMEvent::Duration(d));
        }
        for v in 0..config.velocity_bins {
            events.push(RemiMEvent::Velocity(v));
        }
        if config.mode_events {
            events.push(RemiMEvent::NoteType(NoteType::Mode));
            events.push(RemiMEvent::NoteType(NoteType::Transition));
            events.push(RemiMEvent::ModeStart);
            events.push(RemiMEvent::ModeEnd);
            for m in MODE_CLASSES {
                events.push(RemiMEvent::ModeType(m));
            }
        }
        let ids = events
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i as u32 + 3))
            .collect();
        Vocabulary {
            config,
            events,
            ids,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn size(&self) -> u32 {
        self.events.len() as u32 + 3
    }

    pub fn id_of(&self, event: RemiMEvent) -> Option<u32> {
        self.ids.get(&event).copied()
    }

    /// Event for an id; `None` for PAD/BOS/EOS or out-of-range ids.
    pub fn event_of(&self, id: u32) -> Option<RemiMEvent> {
        if id < 3 {
            return None;
        }
        self.events.get(id as usize - 3).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < 3
    }

    pub fn token_name(&self, id: u32) -> String {
        match id {
            PAD => "PAD".into(),
            BOS => "BOS".into(),
            EOS => "EOS".into(),
            _ => self
                .event_of(id)
                .map(|e| e.name())
                .unwrap_or_else(|| format!("<invalid:{id}>")),
        }
    }

    /// Serialize as `event-name<TAB>id` lines preceded by `#`-prefixed
    /// config headers. The text round-trips through [`Vocabulary::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        out.push_str(&format!("# positions_per_bar={}\n", c.positions_per_bar));
        out.push_str(&format!("# ppq={}\n", c.ppq));
        out.push_str(&format!(
            "# time_signature={}/{}\n",
            c.time_signature.0, c.time_signature.1
        ));
        out.push_str(&format!("# tempo_bins={}\n", c.tempo_bins));
        out.push_str(&format!("# duration_bins={}\n", c.duration_bins));
        out.push_str(&format!("# velocity_bins={}\n", c.velocity_bins));
        out.push_str(&format!("# mode_events={}\n", c.mode_events));
        for id in 0..self.size() {
            out.push_str(&format!("{}\t{}\n", self.token_name(id), id));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Vocabulary, CodecError> {
        let mut config = CodecConfig::default();
        let mut entries: Vec<(String, u32)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some((key, value)) = rest.split_once('=') {
                    parse_config_field(&mut config, key.trim(), value.trim())
                        .map_err(CodecError::VocabFile)?;
                }
                continue;
            }
            let (name, id) = line.split_once('\t').ok_or_else(|| {
                CodecError::VocabFile(format!("line {}: missing tab separator", lineno + 1))
            })?;
            let id: u32 = id.trim().parse().map_err(|_| {
                CodecError::VocabFile(format!("line {}: bad id {id:?}", lineno + 1))
            })?;
            entries.push((name.to_string(), id));
        }
        let vocab = Vocabulary::build(config);
        if entries.len() as u32 != vocab.size() {
            return Err(CodecError::VocabFile(format!(
                "expected {} entries for declared config, found {}",
                vocab.size(),
                entries.len()
            )));
        }
        for (name, id) in &entries {
            if &vocab.token_name(*id) != name {
                return Err(CodecError::VocabFile(format!(
                    "entry {name:?} -> {id} disagrees with canonical assignment"
                )));
            }
        }
        Ok(vocab)
    }
}

fn parse_config_field(config: &mut CodecConfig, key: &str, value: &str) -> Result<(), String> {
    let bad = |v: &str| format!("bad value {v:?} for {key}");
    match key {
        "positions_per_bar" => config.positions_per_bar = value.parse().map_err(|_| bad(value))?,
        "ppq" => config.ppq = value.parse().map_err(|_| bad(value))?,
        "time_signature" => {
            let (n, d) = value.split_once('/').ok_or_else(|| bad(value))?;
            config.time_signature = (
                n.parse().map_err(|_| bad(value))?,
                d.parse().map_err(|_| bad(value))?,
            );
        }
        "tempo_bins" => config.tempo_bins = value.parse().map_err(|_| bad(value))?,
        "duration_bins" => config.duration_bins = value.parse().map_err(|_| bad(value))?,
        "velocity_bins" => config.velocity_bins = value.parse().map_err(|_| bad(value))?,
        "mode_events" => config.mode_events = value.parse().map_err(|_| bad(value))?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_size_is_sum_of_category_cardinalities() {
        let v = Vocabulary::build(CodecConfig::default());
        // 3 special + 1 bar + 16 positions + 32 tempo + 128 pitch
        // + 64 duration + 32 velocity + 2 note types + 2 markers + 5 modes
        let expected = 3 + 1 + 16 + 32 + 128 + 64 + 32 + 2 + 2 + 5;
        assert_eq!(v.size(), expected);
        assert_eq!(v.size(), 285);
        let ablated = Vocabulary::build(CodecConfig::default().without_mode_events());
        assert_eq!(ablated.size(), 276);
    }

    #[test]
    fn vocabulary_is_deterministic() {
        let a = Vocabulary::build(CodecConfig::default());
        let b = Vocabulary::build(CodecConfig::default());
        for id in 0..a.size() {
            assert_eq!(a.token_name(id), b.token_name(id));
        }
    }

    #[test]
    fn vocabulary_is_bijective() {
        let v = Vocabulary::build(CodecConfig::default());
        let mut seen = std::collections::HashSet::new();
        for id in 0..v.size() {
            if let Some(e) = v.event_of(id) {
                assert_eq!(v.id_of(e), Some(id));
                assert!(seen.insert(e), "duplicate event for id {id}");
            } else {
                assert!(id < 3);
            }
        }
        assert_eq!(seen.len() as u32, v.size() - 3);
    }

    #[test]
    fn vocabulary_text_round_trips() {
        let v = Vocabulary::build(CodecConfig {
            positions_per_bar: 8,
            tempo_bins: 4,
            duration_bins: 32,
            velocity_bins: 8,
            ..CodecConfig::default()
        });
        let text = v.to_text();
        let parsed = Vocabulary::parse(&text).unwrap();
        assert_eq!(parsed.size(), v.size());
        assert_eq!(parsed.config(), v.config());
        for id in 0..v.size() {
            assert_eq!(parsed.token_name(id), v.token_name(id));
        }
    }

    #[test]
    fn event_names_parse_back() {
        let v = Vocabulary::build(CodecConfig::default());
        for id in 3..v.size() {
            let e = v.event_of(id).unwrap();
            assert_eq!(RemiMEvent::from_name(&e.name()), Some(e));
        }
    }

    #[test]
    fn velocity_bins_round_trip() {
        for bins in [8u32, 16, 32, 64] {
            let c = CodecConfig {
                velocity_bins: bins,
                ..CodecConfig::default()
            };
            for b in 0..bins {
                assert_eq!(c.velocity_bin(c.velocity_rep(b)), b, "bins={bins} b={b}");
            }
        }
    }

    #[test]
    fn tempo_bins_round_trip_through_midi_usec() {
        let c = CodecConfig::default();
        for b in 0..c.tempo_bins {
            let rep = c.tempo_rep(b);
            assert_eq!(c.tempo_bin(rep), b);
            // And survive the microsecond rounding a MIDI file applies.
            let tc = TempoChange::from_bpm(0, rep);
            assert_eq!(c.tempo_bin(tc.bpm()), b);
        }
        assert_eq!(c.tempo_bin(10.0), 0);
        assert_eq!(c.tempo_bin(1000.0), c.tempo_bins - 1);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut s = QuantizedScore::new(960);
        s.notes.push(crate::score::NoteEvent::new(61, 7, 9999, 3));
        s.tempo_changes.push(TempoChange::from_bpm(0, 77.7));
        let c = CodecConfig::default();
        let n1 = c.normalize(&s).unwrap();
        let n2 = c.normalize(&n1).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(n1.ppq, 480);
    }

    #[test]
    fn annotate_labels_in_scale_notes() {
        use crate::modes::{ModeClass, ModeSpan};
        use crate::score::NoteEvent;
        let mut s = QuantizedScore::new(480);
        s.notes = vec![
            NoteEvent::new(60, 0, 480, 64),    // C: in C-Gong
            NoteEvent::new(66, 480, 480, 64),  // F#: out of scale
            NoteEvent::new(64, 960, 480, 64),  // E: in scale
            NoteEvent::new(62, 4000, 480, 64), // D: outside span
        ];
        let span = ModeSpan {
            tonic_pc: 0,
            mode_class: ModeClass::Gong,
            start_tick: 0,
            end_tick: 1440,
            coverage: 1.0,
        };
        let a = AnnotatedScore::annotate(s, vec![span]).unwrap();
        assert_eq!(
            a.note_types,
            vec![
                NoteType::Mode,
                NoteType::Transition,
                NoteType::Mode,
                NoteType::Transition
            ]
        );
    }
}
