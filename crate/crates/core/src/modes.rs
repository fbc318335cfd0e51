//! Pentatonic mode detection on quantized melodies.
//!
//! A melody skeleton (downbeats plus agogic accents) anchors a sliding
//! window search over all 60 (tonic, mode) candidates. Windows asserting
//! the same candidate merge into [`ModeSpan`]s whose extents are clipped
//! to actual note boundaries, so spans survive codec round-trips exactly.

use crate::score::{NoteEvent, QuantizedScore, ScoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five anhemitonic pentatonic rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModeClass {
    Gong,
    Shang,
    Jue,
    Zhi,
    Yu,
}

/// Canonical ordering used everywhere ties must break deterministically.
pub const MODE_CLASSES: [ModeClass; 5] = [
    ModeClass::Gong,
    ModeClass::Shang,
    ModeClass::Jue,
    ModeClass::Zhi,
    ModeClass::Yu,
];

impl ModeClass {
    /// Semitone offsets from the tonic.
    pub fn interval_set(self) -> [u8; 5] {
        match self {
            ModeClass::Gong => [0, 2, 4, 7, 9],
            ModeClass::Shang => [0, 2, 5, 7, 10],
            ModeClass::Jue => [0, 3, 5, 8, 10],
            ModeClass::Zhi => [0, 2, 5, 7, 9],
            ModeClass::Yu => [0, 3, 5, 7, 10],
        }
    }

    /// Scale pitch classes for a given tonic, as a 12-entry membership table.
    pub fn scale(self, tonic_pc: u8) -> [bool; 12] {
        let mut out = [false; 12];
        for off in self.interval_set() {
            out[((tonic_pc + off) % 12) as usize] = true;
        }
        out
    }

    pub fn index(self) -> usize {
        MODE_CLASSES.iter().position(|&m| m == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<ModeClass> {
        MODE_CLASSES.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeClass::Gong => "Gong",
            ModeClass::Shang => "Shang",
            ModeClass::Jue => "Jue",
            ModeClass::Zhi => "Zhi",
            ModeClass::Yu => "Yu",
        }
    }

    pub fn from_name(name: &str) -> Option<ModeClass> {
        MODE_CLASSES.iter().copied().find(|m| m.name() == name)
    }
}

impl std::fmt::Display for ModeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A detected mode region: tonic pitch class, mode class, tick extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpan {
    pub tonic_pc: u8,
    pub mode_class: ModeClass,
    pub start_tick: u64,
    pub end_tick: u64,
    /// Duration-weighted fraction of in-scale notes within the span.
    pub coverage: f64,
}

impl ModeSpan {
    pub fn scale(&self) -> [bool; 12] {
        self.mode_class.scale(self.tonic_pc)
    }

    pub fn contains_onset(&self, tick: u64) -> bool {
        tick >= self.start_tick && tick < self.end_tick
    }
}

#[derive(Debug, Error)]
pub enum ModeError {
    #[error("spans overlap: [{0}, {1}) and [{2}, {3})")]
    Overlap(u64, u64, u64, u64),
    #[error("spans not sorted by start tick")]
    Unsorted,
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Detection settings; the defaults are overridable from the CLI.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectConfig {
    pub window_bars: u32,
    pub threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            window_bars: 4,
            threshold: 0.8,
        }
    }
}

/// Indices of structurally salient notes: downbeats (position 1 of each
/// bar) plus agogic accents (duration strictly greater than the bar's
/// median duration). Ordered and duplicate-free.
pub fn extract_skeleton(score: &QuantizedScore) -> Result<Vec<usize>, ScoreError> {
    if score.notes.is_empty() {
        return Ok(Vec::new());
    }
    let bar_ticks = score.bar_ticks()?;
    let mut out = Vec::new();
    let mut bar_start = 0;
    while bar_start < score.notes.len() {
        let bar = score.notes[bar_start].onset / bar_ticks;
        let bar_end = score.notes[bar_start..]
            .iter()
            .position(|n| n.onset / bar_ticks != bar)
            .map(|i| bar_start + i)
            .unwrap_or(score.notes.len());
        let notes = &score.notes[bar_start..bar_end];

        let mut durs: Vec<u64> = notes.iter().map(|n| n.duration).collect();
        durs.sort_unstable();
        let median = if durs.len() % 2 == 1 {
            durs[durs.len() / 2] as f64
        } else {
            (durs[durs.len() / 2 - 1] + durs[durs.len() / 2]) as f64 / 2.0
        };

        for (i, n) in notes.iter().enumerate() {
            let on_downbeat = n.onset == bar * bar_ticks;
            let agogic = (n.duration as f64) > median;
            if on_downbeat || agogic {
                out.push(bar_start + i);
            }
        }
        bar_start = bar_end;
    }
    Ok(out)
}

/// Duration-weighted in-scale fraction of `notes` for one candidate.
pub fn duration_weighted_scale_fraction(notes: &[&NoteEvent], scale: &[bool; 12]) -> f64 {
    let total: u64 = notes.iter().map(|n| n.duration).sum();
    if total == 0 {
        return 0.0;
    }
    let hit: u64 = notes
        .iter()
        .filter(|n| scale[n.pitch_class() as usize])
        .map(|n| n.duration)
        .sum();
    hit as f64 / total as f64
}

/// Detect mode regions with sliding windows over the melody skeleton.
///
/// Each `window_bars`-wide window (1-bar step) scores all 60 (tonic, mode)
/// candidates by duration-weighted in-scale fraction over its skeleton
/// notes and asserts the best candidate if the fraction reaches
/// `threshold`. Ties break by higher fraction, then tonic matching the
/// window's final skeleton note, then canonical mode order, then tonic.
/// Runs of windows asserting the same candidate merge into one span.
pub fn detect_modes(
    score: &QuantizedScore,
    window_bars: u32,
    threshold: f64,
) -> Result<Vec<ModeSpan>, ScoreError> {
    assert!(window_bars >= 1, "window_bars must be >= 1");
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold in (0, 1]");

    let skeleton = extract_skeleton(score)?;
    if skeleton.is_empty() {
        return Ok(Vec::new());
    }
    let bar_ticks = score.bar_ticks()?;
    let n_bars = score
        .notes
        .last()
        .map(|n| n.onset / bar_ticks + 1)
        .unwrap_or(0);
    if n_bars == 0 {
        return Ok(Vec::new());
    }

    let window_bars = window_bars as u64;
    let n_windows = n_bars.saturating_sub(window_bars) + 1;
    let mut assertions: Vec<Option<(u8, ModeClass)>> = Vec::with_capacity(n_windows as usize);

    for w in 0..n_windows {
        let lo = w * bar_ticks;
        let hi = (w + window_bars) * bar_ticks;
        let notes: Vec<&NoteEvent> = skeleton
            .iter()
            .map(|&i| &score.notes[i])
            .filter(|n| n.onset >= lo && n.onset < hi)
            .collect();
        if notes.is_empty() {
            assertions.push(None);
            continue;
        }
        let final_pc = notes.last().unwrap().pitch_class();

        let mut best: Option<(f64, bool, usize, u8)> = None;
        let mut best_pair = None;
        for tonic in 0..12u8 {
            for mode in MODE_CLASSES {
                let frac = duration_weighted_scale_fraction(&notes, &mode.scale(tonic));
                // Rank key: fraction desc, tonic==final desc, mode order
                // asc, tonic asc. Encoded so larger tuple wins.
                let key = (frac, tonic == final_pc, usize::MAX - mode.index(), 255 - tonic);
                if best.map_or(true, |b| key > b) {
                    best = Some(key);
                    best_pair = Some((tonic, mode));
                }
            }
        }
        let (frac, ..) = best.unwrap();
        assertions.push(if frac >= threshold { best_pair } else { None });
    }

    // Merge consecutive windows asserting the same pair.
    let mut regions: Vec<(u8, ModeClass, u64, u64)> = Vec::new();
    for (w, a) in assertions.iter().enumerate() {
        let &Some((tonic, mode)) = a else { continue };
        let (lo_bar, hi_bar) = (w as u64, w as u64 + window_bars);
        match regions.last_mut() {
            Some((t, m, _, hi)) if *t == tonic && *m == mode && *hi >= lo_bar => {
                *hi = hi_bar;
            }
            _ => regions.push((tonic, mode, lo_bar, hi_bar)),
        }
    }

    // Anchor each region to note boundaries and recheck coverage.
    let mut spans: Vec<ModeSpan> = Vec::new();
    let mut prev_end = 0u64;
    for (tonic, mode, lo_bar, hi_bar) in regions {
        let lo = (lo_bar * bar_ticks).max(prev_end); // earliest-start-wins
        let hi = hi_bar * bar_ticks;
        let covered: Vec<&NoteEvent> = score
            .notes
            .iter()
            .filter(|n| n.onset >= lo && n.onset < hi)
            .collect();
        if covered.is_empty() {
            continue;
        }
        let start_tick = covered.iter().map(|n| n.onset).min().unwrap();
        let end_tick = covered.iter().map(|n| n.end()).max().unwrap();
        let coverage = duration_weighted_scale_fraction(&covered, &mode.scale(tonic));
        if coverage < threshold {
            continue;
        }
        spans.push(ModeSpan {
            tonic_pc: tonic,
            mode_class: mode,
            start_tick,
            end_tick,
            coverage,
        });
        prev_end = end_tick;
    }
    Ok(spans)
}

pub fn detect_modes_default(score: &QuantizedScore) -> Result<Vec<ModeSpan>, ScoreError> {
    let cfg = DetectConfig::default();
    detect_modes(score, cfg.window_bars, cfg.threshold)
}

/// Check that spans are sorted by start tick and non-overlapping.
pub fn validate_spans(spans: &[ModeSpan]) -> Result<(), ModeError> {
    for w in spans.windows(2) {
        if w[0].start_tick > w[1].start_tick {
            return Err(ModeError::Unsorted);
        }
        if w[0].end_tick > w[1].start_tick {
            return Err(ModeError::Overlap(
                w[0].start_tick,
                w[0].end_tick,
                w[1].start_tick,
                w[1].end_tick,
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::NoteEvent;

    fn score_of(notes: &[(u8, u64, u64)]) -> QuantizedScore {
        let mut s = QuantizedScore::new(480);
        s.notes = notes
            .iter()
            .map(|&(p, o, d)| NoteEvent::new(p, o, d, 64))
            .collect();
        s.sort_notes();
        s
    }

    #[test]
    fn interval_sets_are_rotations_of_gong() {
        // Rotating Gong's set to start at each degree yields the others.
        let gong = ModeClass::Gong.interval_set();
        for (k, mode) in MODE_CLASSES.iter().enumerate() {
            let root = gong[k];
            let mut rotated: Vec<u8> = gong.iter().map(|&i| (i + 12 - root) % 12).collect();
            rotated.sort_unstable();
            assert_eq!(rotated, mode.interval_set().to_vec(), "{mode:?}");
            assert_eq!(mode.interval_set()[0], 0);
            assert_eq!(mode.interval_set().len(), 5);
        }
    }

    #[test]
    fn skeleton_of_empty_score_is_empty() {
        assert!(extract_skeleton(&score_of(&[])).unwrap().is_empty());
    }

    #[test]
    fn skeleton_all_whole_notes_on_downbeats() {
        // Every note a whole note starting a bar: all qualify.
        let s = score_of(&[(60, 0, 1920), (62, 1920, 1920), (64, 3840, 1920)]);
        assert_eq!(extract_skeleton(&s).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn skeleton_equal_sixteenths_keeps_downbeat_only() {
        // One bar of 16 equal sixteenths: no duration exceeds the median,
        // so only the position-1 note survives.
        let notes: Vec<(u8, u64, u64)> = (0..16).map(|i| (60, i * 120, 120)).collect();
        let s = score_of(&notes);
        assert_eq!(extract_skeleton(&s).unwrap(), vec![0]);
    }

    #[test]
    fn skeleton_agogic_accent_included() {
        // Bar durations 240/240/960/480: median 360, so the half note and
        // the quarter both exceed it; the second eighth does not.
        let s = score_of(&[(60, 0, 240), (62, 240, 240), (64, 480, 960), (65, 1440, 480)]);
        assert_eq!(extract_skeleton(&s).unwrap(), vec![0, 2, 3]);
    }

    #[test]
    fn gong_melody_detected_with_full_coverage() {
        // Four bars of C-Gong material; every bar ends with a long tonic,
        // so every window's final skeleton note is C.
        let mut notes = Vec::new();
        for bar in 0..4u64 {
            let t = bar * 1920;
            notes.push((64, t, 480)); // E
            notes.push((62, t + 480, 240)); // D
            notes.push((67, t + 720, 240)); // G
            notes.push((69, t + 960, 240)); // A
            notes.push((60, t + 1200, 720)); // C, agogic + bar-final
        }
        let s = score_of(&notes);
        let spans = detect_modes(&s, 4, 0.8).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].tonic_pc, 0);
        assert_eq!(spans[0].mode_class, ModeClass::Gong);
        assert!((spans[0].coverage - 1.0).abs() < 1e-12);
        assert_eq!(spans[0].start_tick, 0);
        assert_eq!(spans[0].end_tick, 3 * 1920 + 1920);
    }

    #[test]
    fn chromatic_melody_yields_nothing_at_high_threshold() {
        let notes: Vec<(u8, u64, u64)> = (0..48)
            .map(|i| (48 + (i % 12) as u8, i * 240, 240))
            .collect();
        let s = score_of(&notes);
        // Any pentatonic scale covers 5/12 of a uniform chromatic window.
        assert!(detect_modes(&s, 4, 0.9).unwrap().is_empty());
    }

    #[test]
    fn empty_score_detects_nothing() {
        assert!(detect_modes(&score_of(&[]), 4, 0.8).unwrap().is_empty());
    }

    #[test]
    fn validate_spans_catches_overlap() {
        let mk = |a, b| ModeSpan {
            tonic_pc: 0,
            mode_class: ModeClass::Gong,
            start_tick: a,
            end_tick: b,
            coverage: 1.0,
        };
        assert!(validate_spans(&[mk(0, 10), mk(10, 20)]).is_ok());
        assert!(validate_spans(&[mk(0, 11), mk(10, 20)]).is_err());
    }
}
