//! Quantized score container and Standard MIDI File I/O.
//!
//! [`QuantizedScore`] is the ground truth both codec directions agree on:
//! a tick-based note list plus tempo map on a fixed pulses-per-quarter grid.

mod smf;

pub use smf::{parse_midi, write_midi, ParseWarning, ParsedMidi};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default grid resolution: sixteenth-note positions in 4/4.
pub const DEFAULT_POSITIONS_PER_BAR: u32 = 16;
/// Default pulses per quarter note scores are normalized to.
pub const DEFAULT_PPQ: u32 = 480;
/// Default tempo when a file carries no tempo meta event (120 BPM).
pub const DEFAULT_USEC_PER_QUARTER: u32 = 500_000;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported MIDI: {0}")]
    Unsupported(String),
    #[error("grid of {positions_per_bar} positions does not divide bar length {bar_ticks} ticks")]
    GridMismatch {
        positions_per_bar: u32,
        bar_ticks: u64,
    },
    #[error("invalid score: {0}")]
    Invalid(String),
}

/// One note: pitch in semitones, onset/duration in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: u64, duration: u64, velocity: u8) -> Self {
        Self {
            pitch,
            onset,
            duration: duration.max(1),
            velocity,
        }
    }

    pub fn pitch_class(&self) -> u8 {
        self.pitch % 12
    }

    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }
}

/// A tempo change: tick position and tempo stored as microseconds per
/// quarter note (the exact unit SMF uses, so round-trips are lossless).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoChange {
    pub tick: u64,
    pub usec_per_quarter: u32,
}

impl TempoChange {
    pub fn bpm(&self) -> f64 {
        60_000_000.0 / self.usec_per_quarter as f64
    }

    pub fn from_bpm(tick: u64, bpm: f64) -> Self {
        Self {
            tick,
            usec_per_quarter: (60_000_000.0 / bpm).round() as u32,
        }
    }
}

/// Tick-based note/tempo container; notes sorted by (onset, pitch).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedScore {
    pub ppq: u32,
    /// Time signature as (numerator, denominator).
    pub time_signature: (u8, u8),
    pub tempo_changes: Vec<TempoChange>,
    pub notes: Vec<NoteEvent>,
    pub positions_per_bar: u32,
}

impl Default for QuantizedScore {
    fn default() -> Self {
        Self {
            ppq: DEFAULT_PPQ,
            time_signature: (4, 4),
            tempo_changes: Vec::new(),
            notes: Vec::new(),
            positions_per_bar: DEFAULT_POSITIONS_PER_BAR,
        }
    }
}

impl QuantizedScore {
    pub fn new(ppq: u32) -> Self {
        Self {
            ppq,
            ..Self::default()
        }
    }

    /// Bar length in ticks; errors if ppq*4*num/den is not an integer.
    pub fn bar_ticks(&self) -> Result<u64, ScoreError> {
        let (num, den) = self.time_signature;
        if num == 0 || den == 0 {
            return Err(ScoreError::Invalid(format!(
                "time signature {num}/{den}"
            )));
        }
        let raw = self.ppq as u64 * 4 * num as u64;
        if raw % den as u64 != 0 {
            return Err(ScoreError::Invalid(format!(
                "bar length {raw}/{den} ticks is not an integer"
            )));
        }
        Ok(raw / den as u64)
    }

    /// Grid step in ticks for this score's `positions_per_bar`.
    pub fn grid_step(&self) -> Result<u64, ScoreError> {
        let bar = self.bar_ticks()?;
        if self.positions_per_bar == 0 || bar % self.positions_per_bar as u64 != 0 {
            return Err(ScoreError::GridMismatch {
                positions_per_bar: self.positions_per_bar,
                bar_ticks: bar,
            });
        }
        Ok(bar / self.positions_per_bar as u64)
    }

    /// Restore the (onset, pitch, duration, velocity) sort invariant.
    pub fn sort_notes(&mut self) {
        self.notes
            .sort_by_key(|n| (n.onset, n.pitch, n.duration, n.velocity));
    }

    /// Bar index of a tick.
    pub fn bar_of(&self, tick: u64) -> Result<u64, ScoreError> {
        Ok(tick / self.bar_ticks()?)
    }

    /// Index of the last bar containing a note onset, if any.
    pub fn last_note_bar(&self) -> Result<Option<u64>, ScoreError> {
        let bar = self.bar_ticks()?;
        Ok(self.notes.last().map(|n| n.onset / bar))
    }

    /// Snap onsets to the nearest grid tick (ties round down) and durations
    /// to the nearest positive multiple of the grid step. Idempotent.
    pub fn quantize(&self, positions_per_bar: u32) -> Result<QuantizedScore, ScoreError> {
        let mut out = self.clone();
        out.positions_per_bar = positions_per_bar;
        let step = out.grid_step()?;
        for note in &mut out.notes {
            note.onset = snap(note.onset, step);
            note.duration = snap(note.duration, step).max(step);
        }
        for tc in &mut out.tempo_changes {
            tc.tick = snap(tc.tick, step);
        }
        // Snapping may collapse distinct tempo ticks; keep the last change.
        out.tempo_changes.dedup_by(|later, earlier| {
            if later.tick == earlier.tick {
                earlier.usec_per_quarter = later.usec_per_quarter;
                true
            } else {
                false
            }
        });
        out.sort_notes();
        Ok(out)
    }

    /// Rescale all tick values to a new PPQ (rounding to nearest tick).
    pub fn rescale_ppq(&self, ppq: u32) -> QuantizedScore {
        if ppq == self.ppq {
            return self.clone();
        }
        let scale = ppq as f64 / self.ppq as f64;
        let map = |t: u64| (t as f64 * scale).round() as u64;
        let mut out = self.clone();
        out.ppq = ppq;
        for n in &mut out.notes {
            let end = map(n.end());
            n.onset = map(n.onset);
            n.duration = (end - n.onset).max(1);
        }
        for tc in &mut out.tempo_changes {
            tc.tick = map(tc.tick);
        }
        out.sort_notes();
        out
    }

    /// Field-for-field content equality ignoring the grid-resolution field
    /// (which is not representable in a MIDI file).
    pub fn same_content(&self, other: &QuantizedScore) -> bool {
        self.ppq == other.ppq
            && self.time_signature == other.time_signature
            && self.tempo_changes == other.tempo_changes
            && self.notes == other.notes
    }

    /// Check the container invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), ScoreError> {
        for n in &self.notes {
            if n.pitch > 127 {
                return Err(ScoreError::Invalid(format!("pitch {} out of range", n.pitch)));
            }
            if n.velocity == 0 || n.velocity > 127 {
                return Err(ScoreError::Invalid(format!(
                    "velocity {} out of range",
                    n.velocity
                )));
            }
            if n.duration == 0 {
                return Err(ScoreError::Invalid("zero duration".into()));
            }
        }
        if self
            .notes
            .windows(2)
            .any(|w| (w[0].onset, w[0].pitch) > (w[1].onset, w[1].pitch))
        {
            return Err(ScoreError::Invalid("notes not sorted by (onset, pitch)".into()));
        }
        if self.tempo_changes.windows(2).any(|w| w[0].tick >= w[1].tick) {
            return Err(ScoreError::Invalid(
                "tempo ticks not strictly increasing".into(),
            ));
        }
        self.bar_ticks()?;
        Ok(())
    }
}

/// Nearest multiple of `step`; exact halves round toward the earlier point.
fn snap(tick: u64, step: u64) -> u64 {
    let rem = tick % step;
    let down = tick - rem;
    if rem * 2 > step {
        down + step
    } else {
        down
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score_with(notes: &[(u8, u64, u64, u8)]) -> QuantizedScore {
        let mut s = QuantizedScore::new(480);
        s.notes = notes
            .iter()
            .map(|&(p, o, d, v)| NoteEvent::new(p, o, d, v))
            .collect();
        s.sort_notes();
        s
    }

    #[test]
    fn snap_rounds_to_nearest_with_ties_down() {
        assert_eq!(snap(130, 120), 120);
        assert_eq!(snap(190, 120), 240);
        assert_eq!(snap(180, 120), 120); // exact half rounds down
        assert_eq!(snap(120, 120), 120);
        assert_eq!(snap(0, 120), 0);
    }

    #[test]
    fn quantize_snaps_onset_and_clamps_duration() {
        // ppq=480, 16 positions/bar in 4/4 -> step 120
        let s = score_with(&[(60, 130, 50, 64)]);
        let q = s.quantize(16).unwrap();
        assert_eq!(q.notes[0].onset, 120);
        assert_eq!(q.notes[0].duration, 120); // minimum one step
    }

    #[test]
    fn quantize_is_idempotent_and_fixed_on_grid() {
        let s = score_with(&[(60, 0, 480, 64), (64, 480, 240, 80)]);
        let q1 = s.quantize(16).unwrap();
        let q2 = q1.quantize(16).unwrap();
        assert_eq!(q1, q2);
        assert!(q1.same_content(&s)); // already on grid
    }

    #[test]
    fn quantize_preserves_note_count() {
        let s = score_with(&[(60, 1, 7, 64), (61, 125, 119, 64), (62, 2000, 3, 64)]);
        assert_eq!(s.quantize(16).unwrap().notes.len(), 3);
    }

    #[test]
    fn grid_must_divide_bar() {
        let mut s = QuantizedScore::new(480);
        s.time_signature = (4, 4); // bar = 1920 ticks
        s.positions_per_bar = 7;
        assert!(matches!(s.grid_step(), Err(ScoreError::GridMismatch { .. })));
    }

    #[test]
    fn tempo_bpm_round_trip_via_usec() {
        let tc = TempoChange::from_bpm(0, 120.0);
        assert_eq!(tc.usec_per_quarter, 500_000);
        assert!((tc.bpm() - 120.0).abs() < 1e-9);
    }

    #[test]
    fn validate_rejects_unsorted_and_bad_velocity() {
        let mut s = score_with(&[(64, 0, 10, 64), (60, 0, 10, 64)]);
        s.notes.swap(0, 1);
        assert!(s.validate().is_err());
        let s = score_with(&[(64, 0, 10, 0)]);
        assert!(s.validate().is_err());
    }
}
