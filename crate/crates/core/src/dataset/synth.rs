//! Additive synthesizer used to render training scores.
//!
//! Each note is a sum of up to ten harmonics with an instrument-specific
//! amplitude profile, a linear attack, an exponential decay for struck and
//! plucked instruments, an exponential release and optional vibrato. Every
//! note draws its phases from its own RNG stream, so rendering is linear in
//! the score: the render of a union of notes is the sum of their renders.

use std::f64::consts::{LN_10, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::midi::{DelayTable, InstrumentDelay, MidiNote, MidiScore};
use crate::frontend::{bin_frequency, midi_to_hz, N_BINS};

pub const N_HARMONICS: usize = 10;
const MASTER_GAIN: f64 = 0.05;
/// Release tail rendered after the offset, in release time constants.
const RELEASE_SPAN: f64 = 7.0;
const TAIL_S: f64 = 0.25;

/// Instrument group of a preset, used for corpus composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Organ,
    Violin,
    Brass,
    Reed,
    Pipe,
    Piano,
    ChromaticPercussion,
    AcousticGuitar,
    ElectricGuitar,
    Test,
}

impl Group {
    pub const SUSTAINED: [Group; 5] = [Group::Organ, Group::Violin, Group::Brass, Group::Reed, Group::Pipe];
    /// Attacked groups with their selection weights (percent).
    pub const ATTACKED: [(Group, f64); 4] = [
        (Group::Piano, 9.5),
        (Group::ChromaticPercussion, 2.3),
        (Group::AcousticGuitar, 3.5),
        (Group::ElectricGuitar, 3.3),
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: &'static str,
    /// General MIDI program, 0-based.
    pub program: u8,
    pub group: Group,
    pub harmonics: [f64; N_HARMONICS],
    pub attack_s: f64,
    /// Time constant of the decay after the attack; `None` holds the level.
    pub decay_tau: Option<f64>,
    /// Extra decay speed of harmonic `h` relative to the fundamental: `tau / (1 + k (h - 1))`.
    pub harmonic_damping: f64,
    pub release_tau: f64,
    pub vibrato_cents: f64,
    pub vibrato_hz: f64,
}

impl Preset {
    pub fn sustained(&self) -> bool {
        self.decay_tau.is_none()
    }

    /// Onset delay: half the linear attack. Offset delay: time for the
    /// release to fall by 20 dB.
    pub fn delay(&self) -> InstrumentDelay {
        InstrumentDelay {
            onset: 0.5 * self.attack_s,
            offset: self.release_tau * LN_10,
            sustained: self.sustained(),
        }
    }
}

pub fn presets() -> Vec<Preset> {
    let p = |name, program, group, harmonics, attack_s, decay_tau, harmonic_damping, release_tau, vibrato_cents, vibrato_hz| Preset {
        name,
        program,
        group,
        harmonics,
        attack_s,
        decay_tau,
        harmonic_damping,
        release_tau,
        vibrato_cents,
        vibrato_hz,
    };
    vec![
        p("organ", 16, Group::Organ, [1.0, 0.6, 0.45, 0.3, 0.25, 0.2, 0.12, 0.1, 0.08, 0.06], 0.02, None, 0.0, 0.05, 0.0, 0.0),
        p("violin", 40, Group::Violin, [1.0, 0.7, 0.55, 0.5, 0.4, 0.35, 0.3, 0.25, 0.2, 0.15], 0.06, None, 0.0, 0.08, 20.0, 5.5),
        p("trumpet", 56, Group::Brass, [0.6, 1.0, 0.8, 0.6, 0.45, 0.35, 0.25, 0.18, 0.12, 0.08], 0.04, None, 0.0, 0.06, 0.0, 0.0),
        p("clarinet", 71, Group::Reed, [1.0, 0.08, 0.6, 0.06, 0.4, 0.05, 0.25, 0.04, 0.15, 0.03], 0.04, None, 0.0, 0.05, 0.0, 0.0),
        p("recorder", 74, Group::Pipe, [1.0, 0.35, 0.15, 0.08, 0.05, 0.03, 0.02, 0.01, 0.01, 0.005], 0.05, None, 0.0, 0.06, 8.0, 5.0),
        p("piano", 0, Group::Piano, [1.0, 0.5, 0.35, 0.25, 0.18, 0.12, 0.09, 0.06, 0.04, 0.03], 0.004, Some(1.2), 0.25, 0.08, 0.0, 0.0),
        p("vibraphone", 11, Group::ChromaticPercussion, [1.0, 0.1, 0.05, 0.3, 0.02, 0.02, 0.08, 0.01, 0.01, 0.02], 0.002, Some(0.8), 0.4, 0.12, 0.0, 0.0),
        p("nylon guitar", 24, Group::AcousticGuitar, [1.0, 0.8, 0.5, 0.35, 0.25, 0.18, 0.1, 0.07, 0.05, 0.03], 0.003, Some(0.9), 0.35, 0.1, 0.0, 0.0),
        p("clean guitar", 26, Group::ElectricGuitar, [1.0, 0.6, 0.45, 0.3, 0.2, 0.15, 0.1, 0.08, 0.05, 0.04], 0.003, Some(1.4), 0.3, 0.07, 0.0, 0.0),
        p("sine", 80, Group::Test, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.01, None, 0.0, 0.02, 0.0, 0.0),
    ]
}

pub fn preset_for_program(program: u8) -> Option<Preset> {
    presets().into_iter().find(|p| p.program == program)
}

/// Anything that turns a score into audio and knows its own annotation delays.
pub trait Synth {
    fn render(&self, score: &MidiScore, sample_rate: u32) -> Vec<f64>;
    fn delay_table(&self) -> DelayTable;
}

#[derive(Debug, Clone)]
pub struct AdditiveSynth {
    pub seed: u64,
    presets: Vec<Preset>,
}

impl AdditiveSynth {
    pub fn new(seed: u64) -> Self {
        AdditiveSynth {
            seed,
            presets: presets(),
        }
    }

    fn preset(&self, program: u8) -> &Preset {
        self.presets
            .iter()
            .find(|p| p.program == program)
            .unwrap_or(&self.presets[0])
    }

    fn note_rng(&self, n: &MidiNote) -> ChaCha8Rng {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [n.pitch as u64, n.channel as u64, n.onset.to_bits(), n.offset.to_bits()] {
            h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            h ^= h >> 31;
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    fn note_len(&self, n: &MidiNote, sr: f64) -> usize {
        let p = self.preset(n.program);
        ((n.offset - n.onset + RELEASE_SPAN * p.release_tau) * sr).ceil() as usize
    }

    /// Adds one note into `out`, starting at its onset sample.
    pub fn render_note(&self, n: &MidiNote, sample_rate: u32, out: &mut [f64]) {
        let sr = sample_rate as f64;
        let p = self.preset(n.program);
        let mut rng = self.note_rng(n);
        let f0 = midi_to_hz(n.pitch as f64);
        let top = (0.45 * sr).min(1.05 * bin_frequency(N_BINS - 1));
        let gain = MASTER_GAIN * (n.velocity.max(1) as f64 / 127.0).powf(1.5);
        let decay_scale = 2f64.powf(-(n.pitch as f64 - 60.0) / 36.0);
        let partials: Vec<(f64, f64, f64, Option<f64>)> = p
            .harmonics
            .iter()
            .enumerate()
            .filter(|&(h, &a)| a > 0.0 && (h + 1) as f64 * f0 < top)
            .map(|(h, &a)| {
                let jitter = 10f64.powf(rng.random_range(-1.5..1.5) / 20.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let tau = p
                    .decay_tau
                    .map(|t| t * decay_scale / (1.0 + p.harmonic_damping * h as f64));
                ((h + 1) as f64, a * jitter, phase, tau)
            })
            .collect();
        let vib_phase = rng.random_range(0.0..2.0 * PI);

        let start = (n.onset * sr).round().max(0.0) as usize;
        let held = ((n.offset - n.onset) * sr).max(0.0);
        let len = self.note_len(n, sr).min(out.len().saturating_sub(start));
        let attack = (p.attack_s * sr).max(1.0);
        let mut phi = 0.0f64;
        for i in 0..len {
            let t = i as f64 / sr;
            let rise = (i as f64 / attack).min(1.0);
            let release = if (i as f64) < held {
                1.0
            } else {
                (-(i as f64 - held) / sr / p.release_tau).exp()
            };
            let mut s = 0.0;
            for &(h, a, ph, tau) in &partials {
                let decay = match tau {
                    Some(tau) => (-(t - p.attack_s).max(0.0) / tau).exp(),
                    None => 1.0,
                };
                s += a * decay * (h * phi + ph).sin();
            }
            out[start + i] += gain * rise * release * s;
            let vib = p.vibrato_cents * (2.0 * PI * p.vibrato_hz * t + vib_phase).sin();
            phi += 2.0 * PI * f0 * 2f64.powf(vib / 1200.0) / sr;
        }
    }

    /// Samples needed to hold every note and its release tail.
    pub fn render_len(&self, score: &MidiScore, sample_rate: u32) -> usize {
        let sr = sample_rate as f64;
        let end = score
            .notes
            .iter()
            .map(|n| (n.onset * sr).round().max(0.0) as usize + self.note_len(n, sr))
            .max()
            .unwrap_or(0);
        end + (TAIL_S * sr) as usize
    }
}

impl Synth for AdditiveSynth {
    fn render(&self, score: &MidiScore, sample_rate: u32) -> Vec<f64> {
        let mut out = vec![0.0; self.render_len(score, sample_rate)];
        for n in &score.notes {
            self.render_note(n, sample_rate, &mut out);
        }
        out
    }

    fn delay_table(&self) -> DelayTable {
        let mut t = DelayTable::default();
        for p in &self.presets {
            t.delays.insert(p.program, p.delay());
            t.name.insert(p.program, p.name.to_string());
        }
        t
    }
}
