//! True and false (pitch, frame) examples for the Tentogram network.

use crate::eval::FramePitches;
use crate::kernel::{midi_to_pitch_bin, PITCH_BINS};
use crate::pitchogram::TentativeF0;

/// Semitone distances of the false examples placed around each annotated f0.
pub const NEGATIVE_OFFSETS: [f64; 10] = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 12.0, 19.0, 24.0];
pub const COLLISION_CENTS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct N1Example {
    pub frame: usize,
    /// Pitch in MIDI units, exact (annotated or snapped).
    pub midi: f64,
    pub target: f64,
}

impl N1Example {
    pub fn pitch_bin(&self) -> usize {
        midi_to_pitch_bin(self.midi).round().clamp(0.0, (PITCH_BINS - 1) as f64) as usize
    }
}

fn in_range(midi: f64) -> bool {
    let b = midi_to_pitch_bin(midi);
    b >= -0.5 && b < PITCH_BINS as f64 - 0.5
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() * 100.0 <= COLLISION_CENTS
}

/// Detected pitch (MIDI) closest to `midi` within the collision distance.
fn snap(midi: f64, detected: &[TentativeF0]) -> Option<f64> {
    detected
        .iter()
        .map(|t| t.midi())
        .filter(|&d| near(d, midi))
        .min_by(|a, b| (a - midi).abs().total_cmp(&(b - midi).abs()))
}

/// Examples of every frame. Without `detected`, positives sit on the
/// annotations and negatives at fixed intervals around them. With the t0s of
/// a previous Tentogram, both are snapped to the nearest detection within
/// 50 cents and detections far from every annotation become extra negatives.
pub fn select_n1_examples(refs: &FramePitches, detected: Option<&[Vec<TentativeF0>]>) -> Vec<N1Example> {
    let mut out = Vec::new();
    for (frame, pitches) in refs.iter().enumerate() {
        let det = detected.and_then(|d| d.get(frame)).map(|v| &v[..]);
        let snapped = |m: f64| det.and_then(|d| snap(m, d)).unwrap_or(m);
        let positives: Vec<f64> = pitches.iter().filter(|&&m| in_range(m)).map(|&m| snapped(m)).collect();
        let mut negatives: Vec<f64> = Vec::new();
        let push_negative = |m: f64, negatives: &mut Vec<f64>| {
            let clash = pitches.iter().chain(&positives).any(|&p| near(p, m));
            if in_range(m) && !clash && !negatives.iter().any(|&n| (n - m).abs() < 1e-9) {
                negatives.push(m);
            }
        };
        for &p in pitches {
            for s in NEGATIVE_OFFSETS {
                for m in [p - s, p + s] {
                    if !pitches.iter().any(|&q| near(q, m)) {
                        push_negative(snapped(m), &mut negatives);
                    }
                }
            }
        }
        if let Some(d) = det {
            for t in d {
                push_negative(t.midi(), &mut negatives);
            }
        }
        out.extend(positives.into_iter().map(|midi| N1Example { frame, midi, target: 1.0 }));
        out.extend(negatives.into_iter().map(|midi| N1Example { frame, midi, target: 0.0 }));
    }
    out
}
