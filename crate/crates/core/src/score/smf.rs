//! Standard MIDI File (format 0/1) reader and writer.
//!
//! Only the events the melody pipeline needs are kept: note on/off, tempo,
//! and time signature. Everything else (control changes, pitch bend, sysex,
//! lyrics, ...) is parsed for length and discarded.

use super::{
    NoteEvent, QuantizedScore, ScoreError, TempoChange, DEFAULT_POSITIONS_PER_BAR,
};
use std::collections::VecDeque;

/// Non-fatal oddities found while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// A note-on had no matching note-off; the note was closed at track end.
    UnmatchedNoteOn { track: usize, pitch: u8, onset: u64 },
    /// A note-off arrived with no open note of that pitch.
    OrphanNoteOff { track: usize, pitch: u8, tick: u64 },
    /// Note-on and note-off landed on the same tick; duration clamped to 1.
    ZeroDuration { track: usize, pitch: u8, tick: u64 },
}

/// Parse result: the score plus any warnings.
#[derive(Debug)]
pub struct ParsedMidi {
    pub score: QuantizedScore,
    pub warnings: Vec<ParseWarning>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn err(&self, reason: impl Into<String>) -> ScoreError {
        ScoreError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ScoreError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("unexpected end of file (need {n} bytes)")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ScoreError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ScoreError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ScoreError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most 4 bytes per the SMF spec.
    fn vlq(&mut self) -> Result<u32, ScoreError> {
        let mut value: u32 = 0;
        for i in 0..4 {
            let byte = self.u8()?;
            value = (value << 7) | (byte & 0x7f) as u32;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                break;
            }
        }
        Err(self.err("variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Default)]
struct TrackEvents {
    notes: Vec<NoteEvent>,
    tempos: Vec<TempoChange>,
    time_signature: Option<(u8, u8)>,
    end_tick: u64,
}

/// Parse an SMF format 0 or 1 file into a [`QuantizedScore`].
///
/// Notes are taken from the track with the most notes (`track_hint`
/// overrides); tempo and time-signature metas are merged from all tracks.
/// Notes are NOT yet quantized.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi, ScoreError> {
    parse_midi_track(bytes, None)
}

/// Like [`parse_midi`] but selecting an explicit note track.
pub fn parse_midi_track(
    bytes: &[u8],
    track_hint: Option<usize>,
) -> Result<ParsedMidi, ScoreError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != b"MThd" {
        r.pos -= 4;
        return Err(r.err("missing MThd header chunk"));
    }
    let header_len = r.u32()?;
    if header_len < 6 {
        return Err(r.err(format!("header chunk length {header_len} < 6")));
    }
    let format = r.u16()?;
    if format > 1 {
        return Err(ScoreError::Unsupported(format!(
            "SMF format {format} (only 0 and 1 supported)"
        )));
    }
    let ntracks = r.u16()? as usize;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return Err(ScoreError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(r.err("zero ticks-per-quarter division"));
    }
    // Skip any extra header bytes a nonstandard writer may have added.
    r.take(header_len as usize - 6)?;

    let mut warnings = Vec::new();
    let mut tracks = Vec::with_capacity(ntracks);
    for track_idx in 0..ntracks {
        tracks.push(parse_track(&mut r, track_idx, &mut warnings)?);
    }

    let note_track = match track_hint {
        Some(i) => {
            if i >= tracks.len() {
                return Err(ScoreError::Invalid(format!(
                    "track index {i} out of range ({} tracks)",
                    tracks.len()
                )));
            }
            i
        }
        // Most notes wins; ties go to the lowest index.
        None => tracks
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.notes.len().cmp(&b.notes.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(0),
    };

    let mut score = QuantizedScore {
        ppq: division as u32,
        time_signature: (4, 4),
        tempo_changes: Vec::new(),
        notes: Vec::new(),
        positions_per_bar: DEFAULT_POSITIONS_PER_BAR,
    };
    let mut tempos: Vec<TempoChange> = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        tempos.extend(t.tempos.iter().copied());
        if let Some(ts) = t.time_signature {
            if i == 0 || score.time_signature == (4, 4) {
                score.time_signature = ts;
            }
        }
    }
    tempos.sort_by_key(|tc| tc.tick);
    // Later event at an equal tick wins.
    tempos.dedup_by(|later, earlier| {
        if later.tick == earlier.tick {
            earlier.usec_per_quarter = later.usec_per_quarter;
            true
        } else {
            false
        }
    });
    score.tempo_changes = tempos;
    score.notes = std::mem::take(&mut tracks[note_track].notes.clone());
    score.sort_notes();

    Ok(ParsedMidi { score, warnings })
}

fn parse_track(
    r: &mut Reader<'_>,
    track_idx: usize,
    warnings: &mut Vec<ParseWarning>,
) -> Result<TrackEvents, ScoreError> {
    if r.take(4)? != b"MTrk" {
        r.pos -= 4;
        return Err(r.err(format!("missing MTrk chunk for track {track_idx}")));
    }
    let len = r.u32()? as usize;
    let track_end_pos = r.pos + len;
    if track_end_pos > r.bytes.len() {
        return Err(r.err(format!("track {track_idx} length {len} overruns file")));
    }

    let mut out = TrackEvents::default();
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;
    // FIFO per pitch: the first note-off ends the first open note.
    let mut open: Vec<VecDeque<(u64, u8)>> = vec![VecDeque::new(); 128];

    while r.pos < track_end_pos {
        tick += r.vlq()? as u64;
        let mut status = r.u8()?;
        if status < 0x80 {
            // Running status: reuse the previous status byte.
            status = running_status.ok_or_else(|| r.err("data byte with no running status"))?;
            r.pos -= 1;
        } else if status < 0xf0 {
            running_status = Some(status);
        }

        match status & 0xf0 {
            0x80 | 0x90 => {
                let pitch = r.u8()? & 0x7f;
                let velocity = r.u8()? & 0x7f;
                let is_on = status & 0xf0 == 0x90 && velocity > 0;
                if is_on {
                    open[pitch as usize].push_back((tick, velocity));
                } else {
                    match open[pitch as usize].pop_front() {
                        Some((onset, vel)) => {
                            let duration = if tick > onset {
                                tick - onset
                            } else {
                                warnings.push(ParseWarning::ZeroDuration {
                                    track: track_idx,
                                    pitch,
                                    tick,
                                });
                                1
                            };
                            out.notes.push(NoteEvent::new(pitch, onset, duration, vel));
                        }
                        None => warnings.push(ParseWarning::OrphanNoteOff {
                            track: track_idx,
                            pitch,
                            tick,
                        }),
                    }
                }
            }
            // Two data bytes, ignored.
            0xa0 | 0xb0 | 0xe0 => {
                r.take(2)?;
            }
            // One data byte, ignored.
            0xc0 | 0xd0 => {
                r.take(1)?;
            }
            0xf0 => match status {
                0xf0 | 0xf7 => {
                    let len = r.vlq()? as usize;
                    r.take(len)?;
                }
                0xff => {
                    let meta = r.u8()?;
                    let len = r.vlq()? as usize;
                    let data = r.take(len)?;
                    match meta {
                        0x51 if len >= 3 => {
                            let usec = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                            out.tempos.push(TempoChange {
                                tick,
                                usec_per_quarter: usec,
                            });
                        }
                        0x58 if len >= 2 => {
                            let num = data[0];
                            let den = 1u8 << data[1].min(6);
                            out.time_signature = Some((num, den));
                        }
                        0x2f => {
                            out.end_tick = tick;
                            r.pos = track_end_pos;
                        }
                        _ => {}
                    }
                }
                other => return Err(r.err(format!("unexpected status byte {other:#04x}"))),
            },
            _ => unreachable!(),
        }
    }
    out.end_tick = out.end_tick.max(tick);

    for (pitch, queue) in open.iter_mut().enumerate() {
        while let Some((onset, vel)) = queue.pop_front() {
            let duration = (out.end_tick.saturating_sub(onset)).max(1);
            out.notes
                .push(NoteEvent::new(pitch as u8, onset, duration, vel));
            warnings.push(ParseWarning::UnmatchedNoteOn {
                track: track_idx,
                pitch: pitch as u8,
                onset,
            });
        }
    }
    out.notes.sort_by_key(|n| (n.onset, n.pitch));
    Ok(out)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut byte = stack[i];
        if i > 0 {
            byte |= 0x80;
        }
        out.push(byte);
    }
}

/// Serialize a score as a single-track (format 0) SMF.
///
/// `parse_midi(write_midi(s))` reproduces `s` field-for-field (ppq, time
/// signature, tempo map, note list).
pub fn write_midi(score: &QuantizedScore) -> Result<Vec<u8>, ScoreError> {
    score.validate()?;
    if score.ppq > 0x7fff {
        return Err(ScoreError::Invalid(format!("ppq {} too large for SMF", score.ppq)));
    }

    // (tick, class, pitch, velocity); class orders meta < note-off < note-on
    // at equal ticks so same-pitch overlaps pair up first-off-ends-first.
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::new();
    for tc in &score.tempo_changes {
        events.push((tc.tick, 0, 0, 0));
    }
    for n in &score.notes {
        events.push((n.onset, 2, n.pitch, n.velocity));
        events.push((n.end(), 1, n.pitch, 0));
    }
    events.sort();

    let mut track = Vec::new();
    let mut last_tick = 0u64;
    let mut tempo_iter = score.tempo_changes.iter();
    let mut delta = move |tick: u64, out: &mut Vec<u8>| {
        push_vlq(out, (tick - last_tick) as u32);
        last_tick = tick;
    };
    let final_tick = events.last().map(|e| e.0).unwrap_or(0);

    // Time signature at tick 0. denominator must be a power of two.
    let (num, den) = score.time_signature;
    if !den.is_power_of_two() {
        return Err(ScoreError::Invalid(format!(
            "time signature denominator {den} is not a power of two"
        )));
    }
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x58, 0x04, num, den.trailing_zeros() as u8, 24, 8]);

    for (tick, class, pitch, velocity) in events {
        delta(tick, &mut track);
        match class {
            0 => {
                let tc = tempo_iter.next().expect("tempo event count mismatch");
                let b = tc.usec_per_quarter.to_be_bytes();
                track.extend_from_slice(&[0xff, 0x51, 0x03, b[1], b[2], b[3]]);
            }
            1 => track.extend_from_slice(&[0x80, pitch, 0x40]),
            2 => track.extend_from_slice(&[0x90, pitch, velocity]),
            _ => unreachable!(),
        }
    }
    delta(final_tick, &mut track);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(score.ppq as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_note_smf() -> Vec<u8> {
        // ppq 480, one C4 quarter note at tick 0, velocity 64.
        let mut s = QuantizedScore::new(480);
        s.notes.push(NoteEvent::new(60, 0, 480, 64));
        write_midi(&s).unwrap()
    }

    #[test]
    fn single_note_identity() {
        let parsed = parse_midi(&one_note_smf()).unwrap();
        assert!(parsed.warnings.is_empty());
        assert_eq!(parsed.score.notes, vec![NoteEvent::new(60, 0, 480, 64)]);
        assert_eq!(parsed.score.ppq, 480);
    }

    #[test]
    fn simultaneous_notes_sorted_by_pitch() {
        let mut s = QuantizedScore::new(480);
        s.notes.push(NoteEvent::new(64, 0, 480, 64));
        s.notes.push(NoteEvent::new(60, 0, 480, 64));
        s.sort_notes();
        let parsed = parse_midi(&write_midi(&s).unwrap()).unwrap();
        let pitches: Vec<u8> = parsed.score.notes.iter().map(|n| n.pitch).collect();
        assert_eq!(pitches, vec![60, 64]);
    }

    #[test]
    fn empty_score_round_trips() {
        let s = QuantizedScore::new(480);
        let bytes = write_midi(&s).unwrap();
        let parsed = parse_midi(&bytes).unwrap();
        assert!(parsed.score.same_content(&s));
    }

    #[test]
    fn tempo_change_round_trips() {
        let mut s = QuantizedScore::new(480);
        s.tempo_changes.push(TempoChange::from_bpm(0, 96.0));
        s.tempo_changes.push(TempoChange::from_bpm(1920, 132.0));
        s.notes.push(NoteEvent::new(60, 0, 480, 64));
        s.notes.push(NoteEvent::new(62, 1920, 480, 64));
        let parsed = parse_midi(&write_midi(&s).unwrap()).unwrap();
        assert!(parsed.score.same_content(&s));
    }

    #[test]
    fn overlapping_same_pitch_first_off_ends_first() {
        let mut s = QuantizedScore::new(480);
        s.notes.push(NoteEvent::new(60, 0, 480, 64));
        s.notes.push(NoteEvent::new(60, 240, 480, 64));
        s.sort_notes();
        let parsed = parse_midi(&write_midi(&s).unwrap()).unwrap();
        assert_eq!(
            parsed.score.notes,
            vec![
                NoteEvent::new(60, 0, 480, 64),
                NoteEvent::new(60, 240, 480, 64)
            ]
        );
    }

    #[test]
    fn malformed_header_reports_offset() {
        let err = parse_midi(b"XXhd\x00\x00\x00\x06").unwrap_err();
        match err {
            ScoreError::Malformed { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn format_2_rejected() {
        let mut bytes = one_note_smf();
        bytes[9] = 2; // format field
        assert!(matches!(
            parse_midi(&bytes),
            Err(ScoreError::Unsupported(_))
        ));
    }

    #[test]
    fn unmatched_note_on_closes_at_track_end_with_warning() {
        // Hand-built track: note-on at 0, then EoT at tick 960 with no off.
        let mut track = Vec::new();
        track.extend_from_slice(&[0x00, 0x90, 60, 64]);
        push_vlq(&mut track, 960);
        track.extend_from_slice(&[0xff, 0x2f, 0x00]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0");
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);

        let parsed = parse_midi(&bytes).unwrap();
        assert_eq!(parsed.score.notes, vec![NoteEvent::new(60, 0, 960, 64)]);
        assert!(matches!(
            parsed.warnings[0],
            ParseWarning::UnmatchedNoteOn { pitch: 60, .. }
        ));
    }

    #[test]
    fn multi_track_takes_track_with_most_notes() {
        // Format-1 file: track 0 has tempo only, track 1 has the melody.
        let mut s0 = QuantizedScore::new(480);
        s0.tempo_changes.push(TempoChange::from_bpm(0, 100.0));
        let smf0 = write_midi(&s0).unwrap();
        let mut s1 = QuantizedScore::new(480);
        s1.notes.push(NoteEvent::new(62, 0, 480, 64));
        s1.notes.push(NoteEvent::new(64, 480, 480, 64));
        let smf1 = write_midi(&s1).unwrap();

        // Splice the two single-track files into one format-1 file.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x01\x00\x02\x01\xe0");
        bytes.extend_from_slice(&smf0[14..]);
        bytes.extend_from_slice(&smf1[14..]);

        let parsed = parse_midi(&bytes).unwrap();
        assert_eq!(parsed.score.notes.len(), 2);
        assert_eq!(parsed.score.tempo_changes.len(), 1);
    }

    #[test]
    fn running_status_supported() {
        // Two notes sharing one 0x90 status byte.
        let mut track = Vec::new();
        track.extend_from_slice(&[0x00, 0x90, 60, 64]); // on C4
        track.extend_from_slice(&[0x60, 60, 0]); // running-status off (vel 0)
        track.extend_from_slice(&[0x00, 62, 64]); // running-status on D4
        track.extend_from_slice(&[0x60, 62, 0]); // running-status off
        track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0");
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);

        let parsed = parse_midi(&bytes).unwrap();
        assert_eq!(parsed.score.notes.len(), 2);
        assert_eq!(parsed.score.notes[0].duration, 0x60);
    }
}
