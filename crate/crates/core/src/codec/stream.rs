//! Token stream emission and forgiving decoding.
//!
//! Encoding walks bars and grid positions: `Bar`, then per occupied
//! position `Position`, an optional `Tempo`, and per note
//! `NoteType Pitch Duration Velocity`. A mode span contributes
//! `ModeStart ModeType` immediately before the position of its first
//! note and `ModeEnd` immediately after its last note. Decoding accepts
//! arbitrary streams, repairing structural damage and reporting every
//! repair with the token index it happened at.
//!
//! The stream does not carry span tonics explicitly (ModeType names only
//! the mode class); decode recovers the tonic from the span's mode-note
//! pitch classes. The recovery is unique whenever a span's mode notes
//! realize the full five-degree scale, which detection and synthesis
//! both guarantee for their spans.

use super::{AnnotatedScore, CodecError, NoteType, RemiMEvent, Vocabulary, BOS, EOS};
use crate::modes::{duration_weighted_scale_fraction, ModeClass, ModeSpan};
use crate::score::{NoteEvent, QuantizedScore, TempoChange};

/// Structural repairs applied while decoding a damaged stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repair {
    /// ModeStart never closed; span closed at end of stream.
    DanglingModeStart,
    /// ModeEnd with no open span; dropped.
    OrphanModeEnd,
    /// ModeType outside a span (or repeated inside one); dropped.
    StrayModeType,
    /// Span closed without ever naming its mode; span dropped.
    MissingModeType,
    /// Span closed without covering any note; span dropped.
    EmptySpan,
    /// Pitch arrived with no preceding NoteType; defaulted to Transition.
    MissingNoteType,
    /// Note tokens interrupted before Velocity; partial note dropped.
    IncompleteNote,
    /// Position before any Bar; assumed bar 0.
    PositionBeforeBar,
    /// Decoded spans overlapped; later span truncated or dropped.
    OverlappingSpans,
    /// Token structurally illegal in its slot; skipped.
    UnexpectedToken,
}

/// Decode result: the reconstructed annotation plus repair log.
#[derive(Debug)]
pub struct Decoded {
    pub annotated: AnnotatedScore,
    pub repairs: Vec<(usize, Repair)>,
}

impl Decoded {
    pub fn is_clean(&self) -> bool {
        self.repairs.is_empty()
    }
}

/// Encode an annotated score as a BOS..EOS token-id sequence.
///
/// The score must already sit on the vocabulary's grid (see
/// [`super::CodecConfig::normalize`]). Span extents are anchored to the
/// notes they cover: a span's effective range is \[first covered onset,
/// max covered note end); spans covering no notes are dropped.
pub fn encode(a: &AnnotatedScore, vocab: &Vocabulary) -> Result<Vec<u32>, CodecError> {
    let cfg = *vocab.config();
    let s = &a.score;
    s.validate()?;
    if s.ppq != cfg.ppq
        || s.time_signature != cfg.time_signature
        || s.positions_per_bar != cfg.positions_per_bar
    {
        return Err(CodecError::Grid(format!(
            "score grid (ppq {}, ts {}/{}, {} positions) != codec grid (ppq {}, ts {}/{}, {} positions)",
            s.ppq,
            s.time_signature.0,
            s.time_signature.1,
            s.positions_per_bar,
            cfg.ppq,
            cfg.time_signature.0,
            cfg.time_signature.1,
            cfg.positions_per_bar,
        )));
    }
    if a.note_types.len() != s.notes.len() {
        return Err(CodecError::Grid(format!(
            "{} note types for {} notes",
            a.note_types.len(),
            s.notes.len()
        )));
    }
    crate::modes::validate_spans(&a.mode_spans).map_err(|e| CodecError::Grid(e.to_string()))?;
    let step = cfg.grid_step();
    let bar_ticks = cfg.bar_ticks();

    for (i, n) in s.notes.iter().enumerate() {
        if n.onset % step != 0 {
            return Err(CodecError::Note {
                index: i,
                reason: format!("onset {} not on the {}-tick grid", n.onset, step),
            });
        }
        if n.duration % step != 0 {
            return Err(CodecError::Note {
                index: i,
                reason: format!("duration {} not a multiple of step {}", n.duration, step),
            });
        }
        let steps = n.duration / step;
        if steps == 0 || steps > cfg.duration_bins as u64 {
            return Err(CodecError::Note {
                index: i,
                reason: format!(
                    "duration of {steps} steps outside bin range 1..={}",
                    cfg.duration_bins
                ),
            });
        }
    }
    for tc in &s.tempo_changes {
        if tc.tick % step != 0 {
            return Err(CodecError::Grid(format!(
                "tempo change at tick {} not on the {step}-tick grid",
                tc.tick
            )));
        }
    }

    // Anchor spans to covered notes: span index recorded at its first and
    // last covered note.
    let mut span_start_at: Vec<Option<usize>> = vec![None; s.notes.len()];
    let mut span_end_at: Vec<Option<usize>> = vec![None; s.notes.len()];
    if cfg.mode_events {
        for (si, span) in a.mode_spans.iter().enumerate() {
            let mut covered = (0..s.notes.len()).filter(|&i| span.contains_onset(s.notes[i].onset));
            if let Some(first) = covered.next() {
                span_start_at[first] = Some(si);
                span_end_at[covered.last().unwrap_or(first)] = Some(si);
            }
        }
    }

    let mut tokens = vec![BOS];
    let push = |tokens: &mut Vec<u32>, e: RemiMEvent| {
        tokens.push(vocab.id_of(e).expect("event in vocabulary"));
    };

    let last_tick = s
        .notes
        .iter()
        .map(|n| n.onset)
        .chain(s.tempo_changes.iter().map(|t| t.tick))
        .max();
    if let Some(last_tick) = last_tick {
        let last_bar = last_tick / bar_ticks;
        let mut note_i = 0usize;
        let mut tempo_i = 0usize;
        for bar in 0..=last_bar {
            push(&mut tokens, RemiMEvent::Bar);
            let bar_lo = bar * bar_ticks;
            let bar_hi = bar_lo + bar_ticks;
            loop {
                let next_note = s.notes.get(note_i).map(|n| n.onset).filter(|&t| t < bar_hi);
                let next_tempo = s
                    .tempo_changes
                    .get(tempo_i)
                    .map(|t| t.tick)
                    .filter(|&t| t < bar_hi);
                let Some(tick) = [next_note, next_tempo].into_iter().flatten().min() else {
                    break;
                };
                debug_assert!(tick >= bar_lo);
                let position = (tick - bar_lo) / step + 1;

                if next_note == Some(tick) {
                    if let Some(si) = span_start_at[note_i] {
                        push(&mut tokens, RemiMEvent::ModeStart);
                        push(&mut tokens, RemiMEvent::ModeType(a.mode_spans[si].mode_class));
                    }
                }
                push(&mut tokens, RemiMEvent::Position(position as u32));
                if next_tempo == Some(tick) {
                    let bpm = s.tempo_changes[tempo_i].bpm();
                    push(&mut tokens, RemiMEvent::Tempo(cfg.tempo_bin(bpm)));
                    tempo_i += 1;
                }
                while note_i < s.notes.len() && s.notes[note_i].onset == tick {
                    let n = &s.notes[note_i];
                    if cfg.mode_events {
                        push(&mut tokens, RemiMEvent::NoteType(a.note_types[note_i]));
                    }
                    push(&mut tokens, RemiMEvent::Pitch(n.pitch));
                    push(&mut tokens, RemiMEvent::Duration((n.duration / step) as u32));
                    push(
                        &mut tokens,
                        RemiMEvent::Velocity(cfg.velocity_bin(n.velocity)),
                    );
                    if span_end_at[note_i].is_some() {
                        push(&mut tokens, RemiMEvent::ModeEnd);
                    }
                    note_i += 1;
                }
            }
        }
    }
    tokens.push(EOS);
    Ok(tokens)
}

struct PendingNote {
    note_type: Option<NoteType>,
    pitch: Option<u8>,
    duration_steps: Option<u32>,
}

impl PendingNote {
    fn empty(&self) -> bool {
        self.note_type.is_none() && self.pitch.is_none()
    }
}

struct PendingSpan {
    mode: Option<ModeClass>,
    note_indices: Vec<usize>,
}

/// Recover a span's tonic from its mode-note pitch classes: the tonic
/// maximizing the duration-weighted in-scale fraction, ties broken by
/// preferring the last mode note's pitch class, then the lowest tonic.
fn recover_tonic(notes: &[NoteEvent], mode: ModeClass) -> u8 {
    debug_assert!(!notes.is_empty());
    let last_pc = notes.last().unwrap().pitch_class();
    let mut best = (f64::NEG_INFINITY, false, 0u8);
    let mut best_tonic = 0u8;
    for tonic in 0..12u8 {
        let refs: Vec<&NoteEvent> = notes.iter().collect();
        let frac = duration_weighted_scale_fraction(&refs, &mode.scale(tonic));
        let key = (frac, tonic == last_pc, 255 - tonic);
        if key > best {
            best = key;
            best_tonic = tonic;
        }
    }
    best_tonic
}

/// Decode a token stream back into an annotated score.
///
/// Never panics on BOS-prefixed input: malformed structure is repaired
/// per [`Repair`] and reported. Hard errors are reserved for a missing
/// BOS and out-of-range token ids.
pub fn decode(tokens: &[u32], vocab: &Vocabulary) -> Result<Decoded, CodecError> {
    if tokens.first() != Some(&BOS) {
        return Err(CodecError::MissingBos);
    }
    let cfg = *vocab.config();
    let step = cfg.grid_step();
    let bar_ticks = cfg.bar_ticks();

    let mut repairs: Vec<(usize, Repair)> = Vec::new();
    let mut notes: Vec<NoteEvent> = Vec::new();
    let mut note_types: Vec<NoteType> = Vec::new();
    let mut tempos: Vec<TempoChange> = Vec::new();
    let mut spans: Vec<ModeSpan> = Vec::new();

    let mut bar: Option<u64> = None;
    let mut pos_tick: Option<u64> = None;
    let mut pending = PendingNote {
        note_type: None,
        pitch: None,
        duration_steps: None,
    };
    let mut open_span: Option<PendingSpan> = None;

    fn close_span(
        span: PendingSpan,
        at: usize,
        notes: &[NoteEvent],
        note_types: &[NoteType],
        spans: &mut Vec<ModeSpan>,
        repairs: &mut Vec<(usize, Repair)>,
    ) {
        let Some(mode) = span.mode else {
            repairs.push((at, Repair::MissingModeType));
            return;
        };
        if span.note_indices.is_empty() {
            repairs.push((at, Repair::EmptySpan));
            return;
        }
        let covered: Vec<NoteEvent> = span.note_indices.iter().map(|&i| notes[i]).collect();
        let mode_notes: Vec<NoteEvent> = span
            .note_indices
            .iter()
            .filter(|&&i| note_types[i] == NoteType::Mode)
            .map(|&i| notes[i])
            .collect();
        let tonic = recover_tonic(
            if mode_notes.is_empty() { &covered } else { &mode_notes },
            mode,
        );
        let start_tick = covered.iter().map(|n| n.onset).min().unwrap();
        let end_tick = covered.iter().map(|n| n.end()).max().unwrap();
        let refs: Vec<&NoteEvent> = covered.iter().collect();
        let coverage = duration_weighted_scale_fraction(&refs, &mode.scale(tonic));
        spans.push(ModeSpan {
            tonic_pc: tonic,
            mode_class: mode,
            start_tick,
            end_tick,
            coverage,
        });
    }

    let mut i = 0usize;
    while i < tokens.len() {
        let id = tokens[i];
        if id >= vocab.size() {
            return Err(CodecError::BadToken {
                id,
                pos: i,
                size: vocab.size(),
            });
        }
        if id == BOS {
            if i != 0 {
                repairs.push((i, Repair::UnexpectedToken));
            }
            i += 1;
            continue;
        }
        if id == EOS {
            break;
        }
        let Some(event) = vocab.event_of(id) else {
            // PAD mid-stream.
            repairs.push((i, Repair::UnexpectedToken));
            i += 1;
            continue;
        };

        // Any structural token interrupts a half-built note.
        let interrupts = !matches!(
            event,
            RemiMEvent::Pitch(_) | RemiMEvent::Duration(_) | RemiMEvent::Velocity(_)
        );
        if interrupts && !pending.empty() {
            repairs.push((i, Repair::IncompleteNote));
            pending = PendingNote {
                note_type: None,
                pitch: None,
                duration_steps: None,
            };
        }

        match event {
            RemiMEvent::Bar => {
                bar = Some(bar.map_or(0, |b| b + 1));
                pos_tick = None;
            }
            RemiMEvent::Position(p) => {
                let b = match bar {
                    Some(b) => b,
                    None => {
                        repairs.push((i, Repair::PositionBeforeBar));
                        bar = Some(0);
                        0
                    }
                };
                pos_tick = Some(b * bar_ticks + (p as u64 - 1) * step);
            }
            RemiMEvent::Tempo(bin) => match pos_tick {
                Some(tick) => {
                    tempos.push(TempoChange::from_bpm(tick, cfg.tempo_rep(bin)));
                }
                None => repairs.push((i, Repair::UnexpectedToken)),
            },
            RemiMEvent::NoteType(t) => {
                if pos_tick.is_none() {
                    repairs.push((i, Repair::UnexpectedToken));
                } else {
                    pending.note_type = Some(t);
                }
            }
            RemiMEvent::Pitch(p) => {
                if pos_tick.is_none() {
                    repairs.push((i, Repair::UnexpectedToken));
                } else {
                    if pending.pitch.is_some() {
                        repairs.push((i, Repair::IncompleteNote));
                        pending.duration_steps = None;
                    } else if pending.note_type.is_none() && cfg.mode_events {
                        repairs.push((i, Repair::MissingNoteType));
                    }
                    pending.pitch = Some(p);
                }
            }
            RemiMEvent::Duration(d) => {
                if pending.pitch.is_none() {
                    repairs.push((i, Repair::UnexpectedToken));
                } else {
                    pending.duration_steps = Some(d);
                }
            }
            RemiMEvent::Velocity(v) => {
                match (pending.pitch, pending.duration_steps, pos_tick) {
                    (Some(pitch), Some(dur), Some(tick)) => {
                        let note = NoteEvent::new(
                            pitch,
                            tick,
                            dur as u64 * step,
                            cfg.velocity_rep(v),
                        );
                        notes.push(note);
                        note_types
                            .push(pending.note_type.unwrap_or(NoteType::Transition));
                        if let Some(span) = open_span.as_mut() {
                            span.note_indices.push(notes.len() - 1);
                        }
                    }
                    _ => repairs.push((i, Repair::UnexpectedToken)),
                }
                pending = PendingNote {
                    note_type: None,
                    pitch: None,
                    duration_steps: None,
                };
            }
            RemiMEvent::ModeStart => {
                if open_span.is_some() {
                    repairs.push((i, Repair::UnexpectedToken));
                } else {
                    open_span = Some(PendingSpan {
                        mode: None,
                        note_indices: Vec::new(),
                    });
                }
            }
            RemiMEvent::ModeType(m) => match open_span.as_mut() {
                Some(span) if span.mode.is_none() => span.mode = Some(m),
                _ => repairs.push((i, Repair::StrayModeType)),
            },
            RemiMEvent::ModeEnd => match open_span.take() {
                Some(span) => {
                    close_span(span, i, &notes, &note_types, &mut spans, &mut repairs)
                }
                None => repairs.push((i, Repair::OrphanModeEnd)),
            },
        }
        i += 1;
    }

    let end = tokens.len().saturating_sub(1);
    if !pending.empty() {
        repairs.push((end, Repair::IncompleteNote));
    }
    if let Some(span) = open_span.take() {
        repairs.push((end, Repair::DanglingModeStart));
        close_span(span, end, &notes, &note_types, &mut spans, &mut repairs);
    }

    // Restore container invariants.
    let mut paired: Vec<(NoteEvent, NoteType)> =
        notes.into_iter().zip(note_types).collect();
    paired.sort_by_key(|(n, _)| (n.onset, n.pitch, n.duration, n.velocity));
    let (notes, note_types): (Vec<_>, Vec<_>) = paired.into_iter().unzip();

    tempos.sort_by_key(|t| t.tick);
    tempos.dedup_by(|later, earlier| {
        if later.tick == earlier.tick {
            earlier.usec_per_quarter = later.usec_per_quarter;
            true
        } else {
            false
        }
    });

    spans.sort_by_key(|s| s.start_tick);
    let mut prev_end = 0u64;
    let mut clipped = Vec::with_capacity(spans.len());
    for mut span in spans {
        if span.start_tick < prev_end {
            repairs.push((end, Repair::OverlappingSpans));
            span.start_tick = prev_end;
            if span.start_tick >= span.end_tick {
                continue;
            }
        }
        prev_end = span.end_tick;
        clipped.push(span);
    }

    let score = QuantizedScore {
        ppq: cfg.ppq,
        time_signature: cfg.time_signature,
        tempo_changes: tempos,
        notes,
        positions_per_bar: cfg.positions_per_bar,
    };
    Ok(Decoded {
        annotated: AnnotatedScore {
            score,
            mode_spans: clipped,
            note_types,
        },
        repairs,
    })
}

/// Binary mask over a token stream: 1 for every token inside a
/// ModeStart..ModeEnd region (inclusive) or that is itself a
/// mode-related event, else 0.
pub fn mode_mask(tokens: &[u32], vocab: &Vocabulary) -> Vec<u8> {
    let mut mask = vec![0u8; tokens.len()];
    let mut inside = false;
    for (i, &id) in tokens.iter().enumerate() {
        match vocab.event_of(id) {
            Some(RemiMEvent::ModeStart) => {
                inside = true;
                mask[i] = 1;
            }
            Some(RemiMEvent::ModeEnd) => {
                mask[i] = 1;
                inside = false;
            }
            Some(RemiMEvent::ModeType(_)) => mask[i] = 1,
            _ => {
                if inside {
                    mask[i] = 1;
                }
            }
        }
    }
    mask
}
