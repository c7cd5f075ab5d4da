//! Tentative f0 picking, the pitch-network input, and the 1-cent Pitchogram.

use ndarray::Array2;

use crate::dsp;
use crate::error::{Error, Result};
use crate::eval::{self, Counts, FramePitches, MatchSpec};
use crate::kernel::{self, ShiftedStack, Tentogram, PITCH_BINS, PITCH_MIN_MIDI};
use crate::nn::Model;

pub const PITCHOGRAM_BINS: usize = 7810;
/// Absolute cents (MIDI x 100) of Pitchogram bin 0.
pub const PITCHOGRAM_MIN_CENTS: f64 = PITCH_MIN_MIDI * 100.0;
/// Added to the pitch network's pre-sigmoid output before deposit.
pub const ACTIVATION_OFFSET: f64 = 3.6;
pub const SMOOTH_LEN: usize = 41;
pub const POOL_RADIUS: usize = 6;
pub const SLOT_RANGE: i32 = 36;
pub const SLOT_HALF_WIDTH_CENTS: f64 = 50.0;
pub const N2_INPUT: usize = 176;
pub const N2_LAYOUT: &str = "n2-176-v1";
/// Hidden layer of the pitch network whose activations feed later stages.
pub const N2_TAP_LAYER: usize = 2;

/// A strict framewise maximum of the Tentogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TentativeF0 {
    pub frame: usize,
    /// Tentogram pitch bin of the maximum.
    pub bin: usize,
    /// Parabolic vertex offset in bins, within +-0.5.
    pub offset: f64,
    /// Interpolated pitch in absolute cents (MIDI x 100).
    pub cents: f64,
    pub value: f64,
}

impl TentativeF0 {
    pub fn midi(&self) -> f64 {
        self.cents / 100.0
    }
}

pub fn cents_to_pitch_bin(cents: f64) -> usize {
    kernel::midi_to_pitch_bin(cents / 100.0).round().clamp(0.0, (PITCH_BINS - 1) as f64) as usize
}

/// Strict local maxima of every frame, pitch refined by parabolic interpolation.
pub fn pick_tentative_f0s(t: &Tentogram) -> Vec<Vec<TentativeF0>> {
    t.data
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut out = Vec::new();
            for j in 1..row.len().saturating_sub(1) {
                let (a, b, c) = (row[j - 1], row[j], row[j + 1]);
                if b > a && b > c {
                    let offset = dsp::parabolic_offset(a, b, c).clamp(-0.5, 0.5);
                    out.push(TentativeF0 {
                        frame: i,
                        bin: j,
                        offset,
                        cents: 100.0 * kernel::pitch_bin_to_midi(j as f64 + offset),
                        value: b,
                    });
                }
            }
            out
        })
        .collect()
}

/// Appends the 176 pitch-network features of a pitch (absolute cents) in a frame:
/// kernel levels, pooled levels, 73 semitone slots of co-occurring t0s, the
/// two out-of-range sums and the pitch in MIDI.
pub fn n2_features(stack: &ShiftedStack, frame: usize, cents: f64, frame_t0s: &[TentativeF0], out: &mut Vec<f64>) {
    let p = cents_to_pitch_bin(cents);
    out.extend(stack.cross_section(p, frame));
    out.extend(stack.pooled_cross_section(p, frame, POOL_RADIUS));
    let mut slots = [0.0f64; (2 * SLOT_RANGE + 1) as usize];
    let (mut above, mut below) = (0.0, 0.0);
    let edge = 100.0 * SLOT_RANGE as f64 + SLOT_HALF_WIDTH_CENTS;
    for u in frame_t0s {
        let d = u.cents - cents;
        if d > edge {
            above += u.value;
        } else if d < -edge {
            below += u.value;
        }
        let lo = ((d - SLOT_HALF_WIDTH_CENTS) / 100.0).ceil().max(-SLOT_RANGE as f64) as i32;
        let hi = ((d + SLOT_HALF_WIDTH_CENTS) / 100.0).floor().min(SLOT_RANGE as f64) as i32;
        for s in lo..=hi {
            let slot = &mut slots[(s + SLOT_RANGE) as usize];
            *slot = slot.max(u.value);
        }
    }
    out.extend_from_slice(&slots);
    out.push(above);
    out.push(below);
    out.push(cents / 100.0);
}

pub fn assemble_n2_input(stack: &ShiftedStack, t0: &TentativeF0, frame_t0s: &[TentativeF0]) -> Vec<f64> {
    let mut v = Vec::with_capacity(N2_INPUT);
    n2_features(stack, t0.frame, t0.cents, frame_t0s, &mut v);
    v
}

/// Pre-sigmoid output and tap-layer activations of the pitch network for a batch of inputs.
pub fn run_n2(model: &Model, rows: Vec<f64>, n: usize) -> Result<(Vec<f64>, Array2<f64>)> {
    let x = Array2::from_shape_vec((n, N2_INPUT), rows).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let out = model.forward_batch(x)?;
    let hidden = out
        .hidden
        .into_iter()
        .nth(N2_TAP_LAYER - 1)
        .ok_or_else(|| Error::InvalidArgument("pitch network needs two hidden layers".into()))?;
    Ok((out.prelogits.to_vec(), hidden))
}

/// Pre-sigmoid pitch-network outputs for every t0, frame by frame.
pub fn classify_t0s(model: &Model, stack: &ShiftedStack, t0s: &[Vec<TentativeF0>]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 4096;
    let flat: Vec<(usize, usize)> = t0s
        .iter()
        .enumerate()
        .flat_map(|(i, f)| (0..f.len()).map(move |k| (i, k)))
        .collect();
    let mut out: Vec<Vec<f64>> = t0s.iter().map(|f| vec![0.0; f.len()]).collect();
    for chunk in flat.chunks(CHUNK) {
        let mut rows = Vec::with_capacity(chunk.len() * N2_INPUT);
        for &(i, k) in chunk {
            n2_features(stack, i, t0s[i][k].cents, &t0s[i], &mut rows);
        }
        let (z, _) = run_n2(model, rows, chunk.len())?;
        for (&(i, k), z) in chunk.iter().zip(z) {
            out[i][k] = z;
        }
    }
    Ok(out)
}

/// Pitch activations at 1-cent resolution, `frames x PITCHOGRAM_BINS`.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchogramGrid {
    pub data: Array2<f64>,
}

pub fn cents_to_grid_bin(cents: f64) -> usize {
    (cents - PITCHOGRAM_MIN_CENTS)
        .round()
        .clamp(0.0, (PITCHOGRAM_BINS - 1) as f64) as usize
}

pub fn grid_bin_to_cents(bin: f64) -> f64 {
    PITCHOGRAM_MIN_CENTS + bin
}

impl PitchogramGrid {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }
}

/// Deposits `prelogit + 3.6` of every t0 with a positive activation at its
/// nearest cent bin and smooths each frame with a unit-peak 41-bin Hann window.
/// `frames[i]` holds `(cents, prelogit)` pairs.
pub fn render_pitchogram(n_frames: usize, frames: &[Vec<(f64, f64)>]) -> PitchogramGrid {
    let w = dsp::hann(SMOOTH_LEN);
    let half = (SMOOTH_LEN / 2) as isize;
    let mut data = Array2::<f64>::zeros((n_frames, PITCHOGRAM_BINS));
    for (i, deposits) in frames.iter().enumerate().take(n_frames) {
        let mut row = data.row_mut(i);
        for &(cents, z) in deposits {
            let a = z + ACTIVATION_OFFSET;
            if a <= 0.0 {
                continue;
            }
            let c = cents_to_grid_bin(cents) as isize;
            for (k, &wk) in w.iter().enumerate() {
                let b = c + k as isize - half;
                if b >= 0 && (b as usize) < PITCHOGRAM_BINS {
                    row[b as usize] += a * wk;
                }
            }
        }
    }
    PitchogramGrid { data }
}

/// Peaks of one Pitchogram frame (`(cents, value)`) with value above zero.
pub fn frame_peaks(row: ndarray::ArrayView1<f64>) -> Vec<(f64, f64)> {
    let n = row.len();
    (0..n)
        .filter(|&c| {
            let v = row[c];
            v > 0.0 && (c == 0 || v > row[c - 1]) && (c + 1 == n || v >= row[c + 1])
        })
        .map(|c| (grid_bin_to_cents(c as f64), row[c]))
        .collect()
}

/// Framewise f0s (MIDI) at Pitchogram peaks above `tau`.
pub fn threshold_framewise(p: &PitchogramGrid, tau: f64) -> FramePitches {
    p.data
        .rows()
        .into_iter()
        .map(|row| {
            frame_peaks(row)
                .into_iter()
                .filter(|&(_, v)| v > tau)
                .map(|(c, _)| c / 100.0)
                .collect()
        })
        .collect()
}

/// Threshold on a 0.01 grid maximizing framewise F over the given tracks.
/// Returns the threshold and its F (0..100).
pub fn tune_threshold(tracks: &[(&PitchogramGrid, &FramePitches)], spec: &MatchSpec) -> (f64, f64) {
    struct FrameTable {
        values: Vec<f64>,
        counts: Vec<Counts>,
    }
    let mut tables = Vec::new();
    let mut max_value: f64 = 0.0;
    for (grid, refs) in tracks {
        for (i, row) in grid.data.rows().into_iter().enumerate() {
            let mut peaks = frame_peaks(row);
            peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
            let r = refs.get(i).cloned().unwrap_or_default();
            let counts = (0..=peaks.len())
                .map(|k| {
                    let est: Vec<f64> = peaks[..k].iter().map(|p| p.0 / 100.0).collect();
                    Counts::new(eval::match_frame(&est, &r, spec.frame_cents).len(), k, r.len())
                })
                .collect();
            max_value = peaks.first().map_or(max_value, |p| max_value.max(p.1));
            tables.push(FrameTable {
                values: peaks.iter().map(|p| p.1).collect(),
                counts,
            });
        }
    }
    let steps = (max_value / 0.01).ceil() as usize + 1;
    let mut best = (0.0, -1.0);
    for s in 0..=steps {
        let tau = s as f64 * 0.01;
        let mut total = Counts::default();
        for t in &tables {
            let k = t.values.partition_point(|&v| v > tau);
            total.add(t.counts[k]);
        }
        let f = total.report().f;
        if f > best.1 {
            best = (tau, f);
        }
    }
    (best.0, best.1.max(0.0))
}

/// Training labels of a frame's t0s against reference pitches (MIDI): matched
/// t0s are positive, unmatched ones within `tol_cents` of a reference are
/// dropped (`None`), the rest negative.
pub fn label_t0s(frame_t0s: &[TentativeF0], refs: &[f64], tol_cents: f64) -> Vec<Option<f64>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (k, t) in frame_t0s.iter().enumerate() {
        for (j, &r) in refs.iter().enumerate() {
            let d = (t.cents - 100.0 * r).abs();
            if d <= tol_cents {
                pairs.push((d, k, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut labels: Vec<Option<f64>> = vec![Some(0.0); frame_t0s.len()];
    let mut used_t = vec![false; frame_t0s.len()];
    let mut used_r = vec![false; refs.len()];
    for &(_, k, j) in &pairs {
        if !used_t[k] && !used_r[j] {
            used_t[k] = true;
            used_r[j] = true;
            labels[k] = Some(1.0);
        }
    }
    for &(_, k, _) in &pairs {
        if !used_t[k] {
            labels[k] = None;
        }
    }
    labels
}

/// Tentogram, t0s, pitch-network outputs and Pitchogram of one track.
#[derive(Debug, Clone)]
pub struct PitchAnalysis {
    pub tentogram: Tentogram,
    pub t0s: Vec<Vec<TentativeF0>>,
    pub prelogits: Vec<Vec<f64>>,
    pub grid: PitchogramGrid,
}

pub fn analyze(stack: &ShiftedStack, tentogram: Tentogram, n2: &Model) -> Result<PitchAnalysis> {
    let t0s = pick_tentative_f0s(&tentogram);
    let prelogits = classify_t0s(n2, stack, &t0s)?;
    let deposits: Vec<Vec<(f64, f64)>> = t0s
        .iter()
        .zip(&prelogits)
        .map(|(f, z)| f.iter().zip(z).map(|(t, &z)| (t.cents, z)).collect())
        .collect();
    let grid = render_pitchogram(tentogram.n_frames(), &deposits);
    Ok(PitchAnalysis {
        tentogram,
        t0s,
        prelogits,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::L4_BINS;
    use crate::kernel::PitchKernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tento(rows: Vec<Vec<f64>>) -> Tentogram {
        let nf = rows.len();
        let mut data = Array2::zeros((nf, PITCH_BINS));
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                data[[i, j]] = v;
            }
        }
        Tentogram { data }
    }

    fn t0(cents: f64, value: f64) -> TentativeF0 {
        TentativeF0 {
            frame: 0,
            bin: cents_to_pitch_bin(cents),
            offset: 0.0,
            cents,
            value,
        }
    }

    #[test]
    fn symmetric_peak_sits_on_bin_center() {
        let t = tento(vec![vec![0.0, 0.0, 1.0, 3.0, 1.0]]);
        let f = pick_tentative_f0s(&t);
        assert_eq!(f[0].len(), 1);
        assert_eq!(f[0][0].bin, 3);
        assert_eq!(f[0][0].offset, 0.0);
        assert!((f[0][0].cents - 100.0 * kernel::pitch_bin_to_midi(3.0)).abs() < 1e-9);
    }

    #[test]
    fn asymmetric_peak_moves_a_sixth_of_a_bin() {
        let t = tento(vec![vec![0.0, 1.0, 3.0, 2.0]]);
        let f = &pick_tentative_f0s(&t)[0][0];
        assert!((f.offset - 1.0 / 6.0).abs() < 1e-12);
        assert!((f.cents - 100.0 * kernel::pitch_bin_to_midi(2.0) - 5.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn t0s_match_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array2::from_shape_fn((4, PITCH_BINS), |_| {
            if rng.random_bool(0.3) {
                rng.random_range(0..4) as f64
            } else {
                0.0
            }
        });
        let t = Tentogram { data: data.clone() };
        let f = pick_tentative_f0s(&t);
        for i in 0..4 {
            let expect: Vec<usize> = (1..PITCH_BINS - 1)
                .filter(|&j| data[[i, j]] > data[[i, j - 1]] && data[[i, j]] > data[[i, j + 1]])
                .collect();
            let got: Vec<usize> = f[i].iter().map(|t| t.bin).collect();
            assert_eq!(got, expect);
            assert!(f[i].iter().all(|t| t.offset.abs() <= 0.5));
        }
    }

    #[test]
    fn lone_t0_fills_only_its_own_slot() {
        let l4 = Array2::from_elem((1, L4_BINS), 1.0);
        let k = PitchKernel::reference();
        let stack = ShiftedStack::new(l4.view(), &k.indices).unwrap();
        let me = t0(6000.0, 2.5);
        let v = assemble_n2_input(&stack, &me, &[me]);
        assert_eq!(v.len(), N2_INPUT);
        let slots = &v[100..173];
        for (s, &x) in slots.iter().enumerate() {
            assert_eq!(x, if s == 36 { 2.5 } else { 0.0 });
        }
        assert_eq!(&v[173..175], &[0.0, 0.0]);
        assert_eq!(v[175], 60.0);
    }

    #[test]
    fn slot_filling_matches_scan_oracle() {
        let l4 = Array2::from_elem((1, L4_BINS), 1.0);
        let k = PitchKernel::reference();
        let stack = ShiftedStack::new(l4.view(), &k.indices).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let me = t0(rng.random_range(4000.0..8000.0), 1.0);
            let mut frame = vec![me, t0(me.cents + 1200.0, 4.0)];
            for _ in 0..10 {
                frame.push(t0(rng.random_range(2600.0..10300.0), rng.random_range(0.1..5.0)));
            }
            let v = assemble_n2_input(&stack, &me, &frame);
            for s in -36..=36i32 {
                let center = me.cents + 100.0 * s as f64;
                let expect = frame
                    .iter()
                    .filter(|u| (u.cents - center).abs() <= 50.0)
                    .map(|u| u.value)
                    .fold(0.0, f64::max);
                assert_eq!(v[100 + (s + 36) as usize], expect);
            }
            assert!(v[100 + 48] >= 4.0);
            let above: f64 = frame.iter().filter(|u| u.cents - me.cents > 3650.0).map(|u| u.value).sum();
            assert!((v[173] - above).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_activation_is_discarded() {
        let g = render_pitchogram(1, &[vec![(6000.0, -3.6)]]);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_deposit_is_a_hann_bump() {
        let g = render_pitchogram(1, &[vec![(6000.0, -1.6)]]);
        let c = cents_to_grid_bin(6000.0);
        assert!((g.data[[0, c]] - 2.0).abs() < 1e-12);
        let w = dsp::hann(41);
        for d in -20..=20isize {
            let b = (c as isize + d) as usize;
            assert!((g.data[[0, b]] - 2.0 * w[(d + 20) as usize]).abs() < 1e-12);
        }
        assert_eq!(g.data.row(0).iter().filter(|&&v| v > 0.0).count(), 39);
    }

    #[test]
    fn deposits_superpose() {
        let a = render_pitchogram(1, &[vec![(6000.0, 0.0)]]);
        let b = render_pitchogram(1, &[vec![(6010.0, 1.0)]]);
        let ab = render_pitchogram(1, &[vec![(6000.0, 0.0), (6010.0, 1.0)]]);
        assert!(ab.data.iter().zip(a.data.iter().zip(b.data.iter())).all(|(x, (p, q))| (x - p - q).abs() < 1e-12));
    }

    #[test]
    fn thresholding_extremes() {
        let g = render_pitchogram(2, &[vec![(6000.0, 0.0)], vec![(6400.0, 1.0), (7000.0, -1.0)]]);
        assert!(threshold_framewise(&g, 100.0).iter().all(Vec::is_empty));
        let all = threshold_framewise(&g, 0.0);
        assert_eq!(all[0], vec![60.0]);
        assert_eq!(all[1], vec![64.0, 70.0]);
    }

    #[test]
    fn tuner_matches_exhaustive_scan() {
        let g = render_pitchogram(
            3,
            &[vec![(6000.0, 0.0), (6700.0, -2.0)], vec![(6000.0, -1.0)], vec![(6400.0, -3.0)]],
        );
        let refs: FramePitches = vec![vec![60.0], vec![], vec![64.0]];
        let spec = MatchSpec::default();
        let (tau, f) = tune_threshold(&[(&g, &refs)], &spec);
        let mut best = (0.0, -1.0);
        for s in 0..=400 {
            let t = s as f64 * 0.01;
            let est = threshold_framewise(&g, t);
            let fm = eval::framewise_metrics(&est, &refs, &spec).f;
            if fm > best.1 {
                best = (t, fm);
            }
        }
        assert!((tau - best.0).abs() < 1e-12);
        assert!((f - best.1).abs() < 1e-12);
    }

    #[test]
    fn labels_discard_near_misses() {
        let frame = [t0(6000.0, 1.0), t0(6030.0, 1.0), t0(6700.0, 1.0)];
        let l = label_t0s(&frame, &[60.0], 50.0);
        assert_eq!(l, vec![Some(1.0), None, Some(0.0)]);
    }
}
