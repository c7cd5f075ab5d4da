//! Standard MIDI file reading and writing, and score preprocessing before
//! rendering: pedal removal, same-pitch gaps and minimum note length.

use std::collections::BTreeMap;
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Note;

pub const MIN_NOTE_S: f64 = 0.03;
pub const GAP_FACTOR: f64 = 0.7;
pub const GAP_RANGE: (f64, f64) = (0.02, 0.3);
const WRITE_TPB: u16 = 480;
const WRITE_TEMPO: u32 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidiNote {
    pub pitch: u8,
    pub onset: f64,
    pub offset: f64,
    pub channel: u8,
    /// General MIDI program, 0-based.
    pub program: u8,
    pub velocity: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedalEvent {
    pub channel: u8,
    pub time: f64,
    pub down: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MidiScore {
    pub notes: Vec<MidiNote>,
    pub pedals: Vec<PedalEvent>,
}

/// Annotation delays of one instrument, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentDelay {
    pub onset: f64,
    pub offset: f64,
    pub sustained: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayTable {
    pub name: BTreeMap<u8, String>,
    pub delays: BTreeMap<u8, InstrumentDelay>,
}

impl DelayTable {
    pub fn get(&self, program: u8) -> Result<&InstrumentDelay> {
        self.delays.get(&program).ok_or_else(|| Error::UnknownInstrument(format!("GM program {program}")))
    }

    /// Fails with every program of the score that has no entry.
    pub fn check(&self, score: &MidiScore) -> Result<()> {
        let mut missing: Vec<u8> = score
            .notes
            .iter()
            .map(|n| n.program)
            .filter(|p| !self.delays.contains_key(p))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            Ok(())
        } else {
            let list: Vec<String> = missing.iter().map(|p| p.to_string()).collect();
            Err(Error::UnknownInstrument(format!("GM programs {}", list.join(", "))))
        }
    }
}

impl MidiScore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }

    /// Reads notes, sustain-pedal events and programs; tempo changes in any
    /// track apply to all tracks.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let smf = Smf::parse(bytes).map_err(|e| Error::Midi(e.to_string()))?;
        let mut events: Vec<(u64, usize, TrackEventKind)> = Vec::new();
        for (ti, track) in smf.tracks.iter().enumerate() {
            let mut tick = 0u64;
            for ev in track {
                tick += ev.delta.as_int() as u64;
                events.push((tick, ti, ev.kind));
            }
        }
        events.sort_by_key(|e| (e.0, e.1));

        let seconds_per_tick_fixed = match smf.header.timing {
            Timing::Metrical(_) => None,
            Timing::Timecode(fps, sub) => Some(1.0 / (fps.as_f32() as f64 * sub as f64)),
        };
        let tpb = match smf.header.timing {
            Timing::Metrical(t) => t.as_int() as f64,
            Timing::Timecode(..) => 1.0,
        };
        let mut tempo = WRITE_TEMPO as f64;
        let (mut last_tick, mut now) = (0u64, 0.0f64);
        let mut program = [0u8; 16];
        let mut open: BTreeMap<(u8, u8), (f64, u8, u8)> = BTreeMap::new();
        let mut score = MidiScore::default();
        for (tick, _, kind) in events {
            let dt = (tick - last_tick) as f64;
            now += match seconds_per_tick_fixed {
                Some(s) => dt * s,
                None => dt * tempo / 1e6 / tpb,
            };
            last_tick = tick;
            match kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => tempo = t.as_int() as f64,
                TrackEventKind::Midi { channel, message } => {
                    let ch = channel.as_int();
                    match message {
                        MidiMessage::ProgramChange { program: p } => program[ch as usize] = p.as_int(),
                        MidiMessage::Controller { controller, value } if controller.as_int() == 64 => {
                            let down = value.as_int() >= 64;
                            score.pedals.push(PedalEvent { channel: ch, time: now, down });
                        }
                        MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                            let k = key.as_int();
                            if let Some((on, prog, v)) = open.remove(&(ch, k)) {
                                push_note(&mut score, k, on, now, ch, prog, v);
                            }
                            open.insert((ch, k), (now, program[ch as usize], vel.as_int()));
                        }
                        MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                            if let Some((on, prog, v)) = open.remove(&(ch, key.as_int())) {
                                push_note(&mut score, key.as_int(), on, now, ch, prog, v);
                            }
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        for ((ch, k), (on, prog, v)) in open {
            push_note(&mut score, k, on, now.max(on), ch, prog, v);
        }
        score.sort();
        Ok(score)
    }

    pub fn sort(&mut self) {
        self.notes.sort_by(|a, b| {
            a.onset
                .total_cmp(&b.onset)
                .then(a.channel.cmp(&b.channel))
                .then(a.pitch.cmp(&b.pitch))
        });
        self.pedals.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.channel.cmp(&b.channel)));
    }

    /// Format-1 file at 120 bpm, one track per channel with its program.
    pub fn to_smf_bytes(&self) -> Result<Vec<u8>> {
        let ticks = |t: f64| (t.max(0.0) * 1e6 / WRITE_TEMPO as f64 * WRITE_TPB as f64).round() as u64;
        let mut tracks = vec![vec![
            TrackEvent {
                delta: u28::new(0),
                kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(WRITE_TEMPO))),
            },
            TrackEvent {
                delta: u28::new(0),
                kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
            },
        ]];
        let mut channels: Vec<u8> = self.notes.iter().map(|n| n.channel).collect();
        channels.extend(self.pedals.iter().map(|p| p.channel));
        channels.sort_unstable();
        channels.dedup();
        for ch in channels {
            // (tick, order, message); offs sort before ons at equal ticks
            let mut ev: Vec<(u64, u8, MidiMessage)> = Vec::new();
            if let Some(first) = self.notes.iter().find(|n| n.channel == ch) {
                ev.push((0, 0, MidiMessage::ProgramChange { program: u7::new(first.program) }));
            }
            for n in self.notes.iter().filter(|n| n.channel == ch) {
                ev.push((ticks(n.onset), 3, MidiMessage::NoteOn { key: u7::new(n.pitch), vel: u7::new(n.velocity.max(1)) }));
                ev.push((ticks(n.offset), 1, MidiMessage::NoteOff { key: u7::new(n.pitch), vel: u7::new(0) }));
            }
            for p in self.pedals.iter().filter(|p| p.channel == ch) {
                let value = if p.down { 127 } else { 0 };
                ev.push((ticks(p.time), 2, MidiMessage::Controller { controller: u7::new(64), value: u7::new(value) }));
            }
            ev.sort_by_key(|e| (e.0, e.1));
            let mut now = 0;
            let mut track: Vec<TrackEvent> = ev
                .into_iter()
                .map(|(t, _, message)| {
                    let delta = u28::new((t - now) as u32);
                    now = t;
                    TrackEvent {
                        delta,
                        kind: TrackEventKind::Midi { channel: u4::new(ch), message },
                    }
                })
                .collect();
            track.push(TrackEvent {
                delta: u28::new(0),
                kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
            });
            tracks.push(track);
        }
        let smf = Smf {
            header: Header::new(Format::Parallel, Timing::Metrical(u15::new(WRITE_TPB))),
            tracks,
        };
        let mut buf = Vec::new();
        smf.write_std(&mut buf).map_err(|e| Error::Midi(e.to_string()))?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_smf_bytes()?)?;
        Ok(())
    }
}

fn push_note(score: &mut MidiScore, pitch: u8, onset: f64, offset: f64, channel: u8, program: u8, velocity: u8) {
    score.notes.push(MidiNote {
        pitch,
        onset,
        offset,
        channel,
        program,
        velocity,
    });
}

/// Gap inserted between same-pitch notes of a sustained instrument.
pub fn gap_seconds(offset_delay: f64) -> f64 {
    (GAP_FACTOR * offset_delay).clamp(GAP_RANGE.0, GAP_RANGE.1)
}

/// Indices of the notes sharing channel and pitch, in onset order.
fn same_pitch_groups(notes: &[MidiNote]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for (i, n) in notes.iter().enumerate() {
        groups.entry((n.channel, n.pitch)).or_default().push(i);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by(|&a, &b| notes[a].onset.total_cmp(&notes[b].onset));
            g
        })
        .collect()
}

/// Sustain-pedal intervals `[down, up)` per channel. A pedal still down at
/// the end is released at `end`.
pub fn pedal_intervals(pedals: &[PedalEvent], end: f64) -> BTreeMap<u8, Vec<(f64, f64)>> {
    let mut out: BTreeMap<u8, Vec<(f64, f64)>> = BTreeMap::new();
    let mut down_at: BTreeMap<u8, f64> = BTreeMap::new();
    let mut sorted = pedals.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    for p in sorted {
        match (p.down, down_at.get(&p.channel).copied()) {
            (true, None) => {
                down_at.insert(p.channel, p.time);
            }
            (false, Some(t0)) => {
                down_at.remove(&p.channel);
                out.entry(p.channel).or_default().push((t0, p.time));
            }
            _ => {}
        }
    }
    for (ch, t0) in down_at {
        out.entry(ch).or_default().push((t0, end.max(t0)));
    }
    out
}

/// Pedal removal, same-pitch gaps for sustained instruments and the 30 ms
/// minimum length (on delay-adjusted times). Idempotent.
pub fn preprocess_midi(score: &MidiScore, delays: &DelayTable) -> Result<MidiScore> {
    delays.check(score)?;
    let mut notes = score.notes.clone();
    let end = notes.iter().map(|n| n.offset).fold(0.0, f64::max);

    let pedals = pedal_intervals(&score.pedals, end);
    for n in notes.iter_mut() {
        if let Some(iv) = pedals.get(&n.channel) {
            if let Some(&(_, up)) = iv.iter().find(|&&(d, u)| n.offset >= d && n.offset < u) {
                n.offset = n.offset.max(up);
            }
        }
    }
    for g in same_pitch_groups(&notes) {
        for w in g.windows(2) {
            let next_on = notes[w[1]].onset;
            let n = &mut notes[w[0]];
            n.offset = n.offset.min(next_on).max(n.onset);
        }
    }

    for g in same_pitch_groups(&notes) {
        for w in g.windows(2) {
            let d = delays.get(notes[w[0]].program)?;
            if !d.sustained {
                continue;
            }
            let x = gap_seconds(d.offset);
            let next_on = notes[w[1]].onset;
            let n = &mut notes[w[0]];
            if next_on - n.offset < x {
                n.offset = (next_on - x).max(n.onset);
            }
        }
    }

    let mut remove = vec![false; notes.len()];
    for g in same_pitch_groups(&notes) {
        for (pos, &i) in g.iter().enumerate() {
            let d = *delays.get(notes[i].program)?;
            let n = &mut notes[i];
            let annotated = (n.offset + d.offset) - (n.onset + d.onset);
            if annotated < MIN_NOTE_S - 1e-12 || n.offset - n.onset < MIN_NOTE_S - 1e-12 {
                n.offset = (n.onset + MIN_NOTE_S)
                    .max(n.onset + d.onset - d.offset + MIN_NOTE_S)
                    .max(n.offset);
            }
            if let Some(&j) = g.get(pos + 1) {
                let next = &notes[j];
                let dj = delays.get(next.program)?;
                let n = &notes[i];
                let limit = if d.sustained {
                    next.onset - gap_seconds(d.offset) + 1e-12
                } else {
                    next.onset + dj.onset - d.offset + 1e-12
                };
                if n.offset > limit {
                    remove[i] = true;
                }
            }
        }
    }
    let mut out = MidiScore {
        notes: notes
            .into_iter()
            .zip(remove)
            .filter(|(_, r)| !r)
            .map(|(n, _)| n)
            .collect(),
        pedals: Vec::new(),
    };
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset_s: f64,
    pub offset_s: f64,
    pub pitch: f64,
    pub instrument: String,
}

impl Annotation {
    pub fn note(&self) -> Note {
        Note::new(self.onset_s, self.offset_s, self.pitch)
    }
}

/// Shifts every note by its instrument's onset and offset delays.
pub fn adjust_annotations(score: &MidiScore, delays: &DelayTable) -> Result<Vec<Annotation>> {
    delays.check(score)?;
    score
        .notes
        .iter()
        .map(|n| {
            let d = delays.get(n.program)?;
            Ok(Annotation {
                onset_s: n.onset + d.onset,
                offset_s: n.offset + d.offset,
                pitch: n.pitch as f64,
                instrument: delays.name.get(&n.program).cloned().unwrap_or_else(|| format!("program {}", n.program)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};
    use proptest::collection::vec as pvec;

    fn table() -> DelayTable {
        let mut t = DelayTable::default();
        t.delays.insert(0, InstrumentDelay { onset: 0.005, offset: 0.1, sustained: false });
        t.delays.insert(40, InstrumentDelay { onset: 0.024, offset: 0.2, sustained: true });
        t.delays.insert(19, InstrumentDelay { onset: 0.0, offset: 0.01, sustained: true });
        t
    }

    fn note(pitch: u8, onset: f64, offset: f64, program: u8) -> MidiNote {
        MidiNote {
            pitch,
            onset,
            offset,
            channel: 0,
            program,
            velocity: 90,
        }
    }

    #[test]
    fn gap_values() {
        assert!((gap_seconds(0.2) - 0.14).abs() < 1e-12);
        assert_eq!(gap_seconds(0.01), 0.02);
        assert_eq!(gap_seconds(5.0), 0.3);
    }

    #[test]
    fn sustained_repeat_gets_gap() {
        let s = MidiScore { notes: vec![note(60, 0.0, 1.0, 40), note(60, 1.0, 2.0, 40)], pedals: vec![] };
        let p = preprocess_midi(&s, &table()).unwrap();
        assert!((p.notes[0].offset - (1.0 - 0.14)).abs() < 1e-12);
        let s = MidiScore { notes: vec![note(60, 0.0, 1.0, 19), note(60, 1.0, 2.0, 19)], pedals: vec![] };
        let p = preprocess_midi(&s, &table()).unwrap();
        assert!((p.notes[0].offset - 0.98).abs() < 1e-12);
    }

    #[test]
    fn pedal_extends_to_release() {
        let notes = vec![note(60, 0.0, 0.5, 0), note(64, 0.6, 0.9, 0), note(67, 1.0, 1.2, 0), note(72, 3.0, 3.5, 0)];
        let pedals = vec![
            PedalEvent { channel: 0, time: 0.2, down: true },
            PedalEvent { channel: 0, time: 2.0, down: false },
        ];
        let s = MidiScore { notes, pedals };
        let p = preprocess_midi(&s, &table()).unwrap();
        // replay oracle: a note whose key-up falls while the pedal is down sounds until the release
        let iv = pedal_intervals(&s.pedals, 10.0);
        for (a, b) in s.notes.iter().zip(&p.notes) {
            let held = iv[&0].iter().find(|&&(d, u)| a.offset >= d && a.offset < u);
            let expect = held.map_or(a.offset, |&(_, u)| u);
            assert!((b.offset - expect).abs() < 1e-12);
        }
        assert!(p.pedals.is_empty());
    }

    #[test]
    fn short_notes_are_extended_or_removed() {
        let s = MidiScore { notes: vec![note(60, 0.0, 0.01, 0)], pedals: vec![] };
        let p = preprocess_midi(&s, &table()).unwrap();
        assert!(p.notes[0].offset - p.notes[0].onset >= MIN_NOTE_S - 1e-12);
        // extension would run into the next same-pitch onset
        let s = MidiScore { notes: vec![note(60, 0.0, 0.01, 0), note(60, 0.02, 0.5, 0)], pedals: vec![] };
        let p = preprocess_midi(&s, &table()).unwrap();
        assert_eq!(p.notes.len(), 1);
        assert_eq!(p.notes[0].onset, 0.02);
    }

    #[test]
    fn unknown_instrument_is_listed() {
        let s = MidiScore { notes: vec![note(60, 0.0, 1.0, 99), note(62, 0.0, 1.0, 98)], pedals: vec![] };
        match preprocess_midi(&s, &table()) {
            Err(Error::UnknownInstrument(m)) => assert!(m.contains("98") && m.contains("99")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn annotation_delays() {
        let s = MidiScore { notes: vec![note(60, 1.0, 2.0, 40), note(48, 1.5, 2.0, 0)], pedals: vec![] };
        let a = adjust_annotations(&s, &table()).unwrap();
        assert!((a[0].onset_s - 1.024).abs() < 1e-12);
        assert!((a[0].offset_s - 2.2).abs() < 1e-12);
        assert!((a[1].onset_s - 1.505).abs() < 1e-12);
        let mut zero = table();
        zero.delays.insert(40, InstrumentDelay { onset: 0.0, offset: 0.0, sustained: true });
        let a = adjust_annotations(&MidiScore { notes: vec![s.notes[0]], pedals: vec![] }, &zero).unwrap();
        assert_eq!((a[0].onset_s, a[0].offset_s), (1.0, 2.0));
    }

    #[test]
    fn smf_round_trip() {
        let s = MidiScore {
            notes: vec![
                MidiNote { pitch: 60, onset: 0.0, offset: 0.5, channel: 0, program: 40, velocity: 90 },
                MidiNote { pitch: 64, onset: 0.25, offset: 1.0, channel: 1, program: 19, velocity: 70 },
            ],
            pedals: vec![PedalEvent { channel: 0, time: 0.1, down: true }, PedalEvent { channel: 0, time: 0.75, down: false }],
        };
        let back = MidiScore::parse(&s.to_smf_bytes().unwrap()).unwrap();
        assert_eq!(back.notes.len(), 2);
        for (a, b) in s.notes.iter().zip(&back.notes) {
            assert_eq!((a.pitch, a.channel, a.program, a.velocity), (b.pitch, b.channel, b.program, b.velocity));
            assert!((a.onset - b.onset).abs() < 2e-3 && (a.offset - b.offset).abs() < 2e-3);
        }
        assert_eq!(back.pedals.len(), 2);
    }

    proptest! {
        #[test]
        fn preprocessing_is_idempotent(raw in pvec((55u8..60, 0.0f64..4.0, 0.005f64..0.8, 0usize..3, 0u8..2), 1..20)) {
            let programs = [0u8, 40, 19];
            let notes: Vec<MidiNote> = raw
                .iter()
                .map(|&(p, on, len, prog, ch)| MidiNote { pitch: p, onset: on, offset: on + len, channel: ch, program: programs[prog], velocity: 80 })
                .collect();
            let s = MidiScore { notes, pedals: vec![PedalEvent { channel: 0, time: 1.0, down: true }, PedalEvent { channel: 0, time: 2.0, down: false }] };
            let once = preprocess_midi(&s, &table()).unwrap();
            let twice = preprocess_midi(&once, &table()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
