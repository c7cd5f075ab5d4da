//! Onset and offset detection along contours.
//!
//! The onset network (N3) and the offset-curve network (N4) share one input
//! layout of 1487 features per contour frame. The offset decision network
//! (N5) sees 153 features accumulated from a detected onset.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contours::{Contour, N2_HIDDEN};
use crate::dsp;
use crate::error::{Error, Result};
use crate::eval::{self, MatchSpec, Matcher, Note, Task};
use crate::frontend::{self, SpectrogramFamily, N_BINS};
use crate::kernel::{ShiftedStack, KERNEL_SIZE};
use crate::nn::{sigmoid, Model};
use crate::pitchogram::cents_to_pitch_bin;

pub const T1: [i64; 9] = [-13, -8, -4, -2, 0, 2, 4, 8, 13];
pub const T4: [i64; 6] = [-12, -8, -4, 0, 4, 8];
pub const T4_STAR: [i64; 6] = [-10, -6, -2, 2, 6, 10];
/// Frame pairs of the spectral flux: every other element of `T4`.
pub const FLUX_PAIRS: [(i64, i64); 4] = [(-12, -4), (-8, 0), (-4, 4), (0, 8)];
pub const T2_LEN: usize = 41;
pub const F1_LEN: usize = 247;
pub const FREQ_SMOOTH: [f64; 3] = [0.25, 0.5, 0.25];

pub const NEURAL_FLUX_LEN: usize = (T1.len() - 1) * N2_HIDDEN + N2_HIDDEN;
pub const SPECTRAL_FLUX_LEN: usize = (FLUX_PAIRS.len() + 1) * F1_LEN;
pub const N3_INPUT: usize = T2_LEN + NEURAL_FLUX_LEN + SPECTRAL_FLUX_LEN + 2 * T2_LEN + 3;
pub const N3_LAYOUT: &str = "n3-1487-v1";
pub const N4_LAYOUT: &str = "n4-1487-v1";
pub const N3_HIDDEN: [usize; 2] = [50, 30];
pub const N5_INPUT: usize = 2 * N2_HIDDEN + T1.len() + 1 + T1.len() + 3 + 2 * KERNEL_SIZE + 3;
pub const N5_LAYOUT: &str = "n5-153-v1";
pub const N5_HIDDEN: [usize; 1] = [100];

pub const ONSET_TARGET_CENTS: f64 = 55.0;
pub const ONSET_EXCLUSION: i64 = 7;
pub const OFFSET_BUMP_LEN: usize = 13;
pub const SAME_PITCH_CENTS: f64 = 50.0;
pub const NEXT_ONSET_GUARD: i64 = 4;

/// `-40..=40` in steps of 2.
pub fn t2() -> impl Iterator<Item = i64> {
    (-40..=40).step_by(2)
}

/// `-186..=306` in steps of 2, in spectrogram bins.
pub fn f1() -> impl Iterator<Item = i64> {
    (-186..=306).step_by(2)
}

/// Spectrogram-side inputs shared by all contours of a track.
pub struct FeatureContext<'a> {
    pub stack: ShiftedStack<'a>,
    /// `L15` smoothed across frequency with `{0.25, 0.5, 0.25}`.
    pub l15s: Array2<f64>,
    pub l25: ArrayView2<'a, f64>,
    /// `V^l` in dB.
    pub level: &'a [f64],
}

impl<'a> FeatureContext<'a> {
    pub fn new(family: &'a SpectrogramFamily, kernel_indices: &[i32]) -> Result<Self> {
        Self::from_parts(family.l4.view(), &family.l15, family.l25.view(), &family.floor.level, kernel_indices)
    }

    pub fn from_parts(
        l4: ArrayView2<'a, f64>,
        l15: &Array2<f64>,
        l25: ArrayView2<'a, f64>,
        level: &'a [f64],
        kernel_indices: &[i32],
    ) -> Result<Self> {
        let nf = l4.nrows();
        if l15.nrows() != nf || l25.nrows() != nf || level.len() != nf {
            return Err(Error::DimensionMismatch {
                expected: nf,
                got: l15.nrows().min(l25.nrows()).min(level.len()),
            });
        }
        Ok(FeatureContext {
            stack: ShiftedStack::new(l4, kernel_indices)?,
            l15s: dsp::smooth_2d_zero_padded(l15, &[1.0], &FREQ_SMOOTH),
            l25,
            level,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.level.len()
    }

    fn clamp_frame(&self, t: i64) -> usize {
        t.clamp(0, self.n_frames() as i64 - 1) as usize
    }
}

/// Spectrogram bin (518-bin grid, fractional) of an absolute pitch in cents.
pub fn cents_to_l_bin(cents: f64) -> f64 {
    frontend::midi_to_bin(cents / 100.0)
}

/// Linear interpolation along frequency, zero outside the spectrogram.
pub fn sample_bin(m: ArrayView2<f64>, frame: usize, pos: f64) -> f64 {
    let lo = pos.floor();
    let t = pos - lo;
    let at = |b: f64| {
        if b >= 0.0 && (b as usize) < N_BINS.min(m.ncols()) {
            m[[frame, b as usize]]
        } else {
            0.0
        }
    };
    if t == 0.0 {
        at(lo)
    } else {
        at(lo) * (1.0 - t) + at(lo + 1.0) * t
    }
}

/// Differences of the 14 tap activations between consecutive `T1` taps, then
/// the raw activations at the evaluated frame.
pub fn neural_flux(contour: &Contour, k: usize, out: &mut Vec<f64>) {
    let t = (contour.start() + k) as i64;
    for w in T1.windows(2) {
        let (a, b) = (&contour.at(t + w[0]).n2_hidden, &contour.at(t + w[1]).n2_hidden);
        out.extend(a.iter().zip(b).map(|(x, y)| y - x));
    }
    out.extend_from_slice(&contour.at(t).n2_hidden);
}

/// Spectral flux relative to a spectrogram bin: four `T4` differences over `F1`
/// followed by the levels at the evaluated frame.
pub fn spectral_flux(l15s: ArrayView2<f64>, frame: usize, bin: f64, out: &mut Vec<f64>) {
    let nf = l15s.nrows() as i64;
    let clamp = |d: i64| (frame as i64 + d).clamp(0, nf - 1) as usize;
    for &(a, b) in &FLUX_PAIRS {
        let (fa, fb) = (clamp(a), clamp(b));
        out.extend(f1().map(|f| sample_bin(l15s, fb, bin + f as f64) - sample_bin(l15s, fa, bin + f as f64)));
    }
    out.extend(f1().map(|f| sample_bin(l15s, frame, bin + f as f64)));
}

/// `|P(i+1) - P(i)|` in semitones at the `T2` taps.
pub fn pitch_flux(contour: &Contour, k: usize, out: &mut Vec<f64>) {
    let t = (contour.start() + k) as i64;
    out.extend(t2().map(|d| ((contour.at(t + d + 1).cents - contour.at(t + d).cents) / 100.0).abs()));
}

/// Signed first difference of the level estimate at the `T2` taps.
pub fn level_flux(level: &[f64], frame: usize, out: &mut Vec<f64>) {
    let n = level.len() as i64;
    let at = |t: i64| level[t.clamp(0, n - 1) as usize];
    out.extend(t2().map(|d| {
        let t = frame as i64 + d;
        at(t + 1) - at(t)
    }));
}

/// The 1487 onset/offset-curve features of contour frame `k`.
pub fn onset_features(ctx: &FeatureContext, contour: &Contour, k: usize, out: &mut Vec<f64>) {
    let t = (contour.start() + k) as i64;
    let frame = ctx.clamp_frame(t);
    out.extend(t2().map(|d| contour.at(t + d).n2_out));
    neural_flux(contour, k, out);
    spectral_flux(ctx.l15s.view(), frame, cents_to_l_bin(contour.frames[k].cents), out);
    pitch_flux(contour, k, out);
    level_flux(ctx.level, frame, out);
    out.push(k as f64);
    out.push((contour.len() - 1 - k) as f64);
    out.push(contour.mean_cents() / 100.0);
}

pub fn onset_input_matrix(ctx: &FeatureContext, contour: &Contour, frames: &[usize]) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(frames.len() * N3_INPUT);
    for &k in frames {
        onset_features(ctx, contour, k, &mut rows);
    }
    Array2::from_shape_vec((frames.len(), N3_INPUT), rows).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Network activations along one contour.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourActivations {
    /// Pre-sigmoid onset network output (OC).
    pub oc: Vec<f64>,
    /// Offset curve after the sigmoid (OFC).
    pub ofc: Vec<f64>,
    /// Last hidden layer of the onset network, `len x 30`.
    pub n3_hidden: Array2<f64>,
}

pub fn contour_activations(ctx: &FeatureContext, contour: &Contour, n3: &Model, n4: &Model) -> Result<ContourActivations> {
    let frames: Vec<usize> = (0..contour.len()).collect();
    let x = onset_input_matrix(ctx, contour, &frames)?;
    let out3 = n3.forward_batch(x.clone())?;
    let out4 = n4.forward_batch(x)?;
    let n3_hidden = out3
        .hidden
        .into_iter()
        .last()
        .ok_or_else(|| Error::InvalidArgument("onset network has no hidden layer".into()))?;
    Ok(ContourActivations {
        oc: out3.prelogits.to_vec(),
        ofc: out4.prelogits.iter().map(|&z| sigmoid(z)).collect(),
        n3_hidden,
    })
}

/// Parameters of the onset-curve filter and peak picker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetParams {
    pub z: f64,
    pub r: f64,
    pub sigma: f64,
    pub threshold: f64,
}

impl Default for OnsetParams {
    fn default() -> Self {
        OnsetParams {
            z: -4.8,
            r: 1.0,
            sigma: 2.8,
            threshold: 1.2,
        }
    }
}

/// Soft floor: exponential below `z + r`, identity above, shifted so the
/// output is always positive.
pub fn smooth_threshold(x: f64, z: f64, r: f64) -> f64 {
    let y = x - z - r;
    // r(e^(y/r) - 1) + r, written without the cancelling terms
    if y < 0.0 {
        r * (y / r).exp()
    } else {
        y + r
    }
}

/// OCS: the soft-thresholded onset curve smoothed with a Gaussian.
pub fn smoothed_onset_curve(oc: &[f64], p: &OnsetParams) -> Vec<f64> {
    let x: Vec<f64> = oc.iter().map(|&v| smooth_threshold(v, p.z, p.r)).collect();
    dsp::smooth_clamped(&x, &dsp::gaussian_kernel_3sigma(p.sigma))
}

/// Strict local maxima above `threshold`, refined by parabolic interpolation.
/// An end point counts when it exceeds its only neighbour.
pub fn curve_peaks(y: &[f64], threshold: f64) -> Vec<f64> {
    let n = y.len();
    let mut out = Vec::new();
    for k in 0..n {
        if y[k] <= threshold {
            continue;
        }
        let left = (k > 0).then(|| y[k - 1]);
        let right = (k + 1 < n).then(|| y[k + 1]);
        if left.is_some_and(|l| l >= y[k]) || right.is_some_and(|r| r >= y[k]) || n == 1 {
            continue;
        }
        let off = match (left, right) {
            (Some(l), Some(r)) => dsp::parabolic_offset(l, y[k], r).clamp(-0.5, 0.5),
            _ => 0.0,
        };
        out.push(k as f64 + off);
    }
    out
}

/// Fractional contour-local onset positions.
pub fn pick_onsets(oc: &[f64], p: &OnsetParams) -> Vec<f64> {
    curve_peaks(&smoothed_onset_curve(oc, p), p.threshold)
}

pub fn onset_param_score(recall: f64, precision: f64) -> f64 {
    100.0 * recall + 3.5 * (2.0 * precision - 1.0).tan()
}

/// Onset curve of one contour for parameter tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetCurve {
    pub start: usize,
    pub oc: Vec<f64>,
    pub cents: Vec<f64>,
}

impl OnsetCurve {
    pub fn from_contour(contour: &Contour, oc: Vec<f64>) -> Self {
        OnsetCurve {
            start: contour.start(),
            oc,
            cents: contour.frames.iter().map(|f| f.cents).collect(),
        }
    }

    /// Picked onsets as notes (offset equal to onset).
    pub fn onset_notes(&self, p: &OnsetParams) -> Vec<Note> {
        pick_onsets(&self.oc, p)
            .into_iter()
            .map(|k| {
                let t = frontend::frame_time(self.start as f64 + k);
                let c = self.cents[(k.round() as usize).min(self.cents.len() - 1)];
                Note::new(t, t, c / 100.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnsetTuneTrack {
    pub curves: Vec<OnsetCurve>,
    pub refs: Vec<Note>,
}

/// Pooled onset recall and precision in `[0, 1]`.
pub fn onset_recall_precision(tracks: &[OnsetTuneTrack], p: &OnsetParams, spec: &MatchSpec) -> (f64, f64) {
    let mut c = eval::Counts::default();
    for tr in tracks {
        let est: Vec<Note> = tr.curves.iter().flat_map(|cv| cv.onset_notes(p)).collect();
        c.add(eval::note_counts(&est, &tr.refs, Task::Onset, spec, Matcher::Greedy));
    }
    let rep = c.report();
    (rep.recall / 100.0, rep.precision / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetGrid {
    pub z: Vec<f64>,
    pub sigma: Vec<f64>,
    pub threshold: Vec<f64>,
    pub r: Vec<f64>,
}

impl Default for OnsetGrid {
    fn default() -> Self {
        OnsetGrid {
            z: vec![-5.8, -4.8, -3.8],
            sigma: vec![2.0, 2.8, 3.6],
            threshold: vec![0.8, 1.2, 1.6],
            r: vec![0.5, 1.0, 2.0],
        }
    }
}

impl OnsetGrid {
    pub fn points(&self) -> Vec<OnsetParams> {
        let mut v = Vec::new();
        for &z in &self.z {
            for &sigma in &self.sigma {
                for &threshold in &self.threshold {
                    for &r in &self.r {
                        v.push(OnsetParams { z, r, sigma, threshold });
                    }
                }
            }
        }
        v
    }
}

/// Grid point maximizing the onset score; the first one wins ties.
pub fn tune_onset_params(tracks: &[OnsetTuneTrack], grid: &OnsetGrid, spec: &MatchSpec) -> (OnsetParams, f64) {
    let mut best = (OnsetParams::default(), f64::NEG_INFINITY);
    for p in grid.points() {
        let (r, pr) = onset_recall_precision(tracks, &p, spec);
        let s = onset_param_score(r, pr);
        if s > best.1 {
            best = (p, s);
        }
    }
    best
}

/// The 153 offset-decision features from `onset` to `last` (contour-local,
/// inclusive). Cumulative quantities restart at the onset.
pub fn offset_inputs(
    ctx: &FeatureContext,
    contour: &Contour,
    ofc: &[f64],
    onset: usize,
    last: usize,
) -> Result<Array2<f64>> {
    if onset > last || last >= contour.len() || ofc.len() != contour.len() {
        return Err(Error::InvalidArgument(format!(
            "offset frames {onset}..={last} outside contour of {} frames",
            contour.len()
        )));
    }
    let n = last - onset + 1;
    let mut rows = Vec::with_capacity(n * N5_INPUT);
    let mut hidden_sum = [0.0; N2_HIDDEN];
    let mut kl_sum = vec![0.0; KERNEL_SIZE];
    let (mut out_sum, mut ofc_sum, mut ofc_sum1, mut ofc_sum2) = (0.0, 0.0, 0.0, 0.0);
    let start = contour.start() as i64;
    let ofc_at = |t: i64| ofc[(t - start).clamp(0, ofc.len() as i64 - 1) as usize];
    for (j, k) in (onset..=last).enumerate() {
        let fr = &contour.frames[k];
        let t = start + k as i64;
        let cnt = (j + 1) as f64;
        for (s, h) in hidden_sum.iter_mut().zip(&fr.n2_hidden) {
            *s += h;
        }
        out_sum += fr.n2_out;
        ofc_sum += ofc[k];
        ofc_sum1 += (ofc[k] - 0.1).max(0.0);
        ofc_sum2 += (ofc[k] - 0.2).max(0.0);
        let kl = ctx.stack.cross_section(cents_to_pitch_bin(fr.cents), ctx.clamp_frame(t));
        for (s, v) in kl_sum.iter_mut().zip(&kl) {
            *s += v;
        }
        rows.extend_from_slice(&fr.n2_hidden);
        rows.extend(hidden_sum.iter().map(|s| s / cnt));
        rows.extend(T1.iter().map(|&d| contour.at(t + d).n2_out));
        rows.push(out_sum / cnt);
        rows.extend(T1.iter().map(|&d| ofc_at(t + d)));
        rows.extend([ofc_sum, ofc_sum1, ofc_sum2]);
        rows.extend_from_slice(&kl);
        rows.extend(kl_sum.iter().map(|s| s / cnt));
        rows.extend([fr.cents / 100.0, cnt, (k + 1) as f64]);
    }
    Array2::from_shape_vec((n, N5_INPUT), rows).map_err(|e| Error::InvalidArgument(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetParams {
    pub sigma: f64,
    pub threshold: f64,
}

impl Default for OffsetParams {
    fn default() -> Self {
        OffsetParams {
            sigma: 4.3,
            threshold: 0.47,
        }
    }
}

/// Index of the first smoothed output above the threshold, or the last index
/// when none crosses.
pub fn decide_offset(outputs: &[f64], p: &OffsetParams) -> usize {
    if outputs.is_empty() {
        return 0;
    }
    let s = dsp::smooth_clamped(outputs, &dsp::gaussian_kernel_3sigma(p.sigma));
    s.iter().position(|&v| v > p.threshold).unwrap_or(outputs.len() - 1)
}

/// Offset-decision outputs (after the sigmoid) from `onset` to the contour end.
pub fn offset_decision_curve(
    ctx: &FeatureContext,
    contour: &Contour,
    ofc: &[f64],
    onset: usize,
    n5: &Model,
) -> Result<Vec<f64>> {
    let x = offset_inputs(ctx, contour, ofc, onset, contour.len() - 1)?;
    Ok(n5.forward_batch(x)?.prelogits.iter().map(|&z| sigmoid(z)).collect())
}

/// Pair grid minimizing the mean absolute distance between decided and
/// annotated offsets. `seqs` holds `(outputs, annotated index)`.
pub fn tune_offset_params(seqs: &[(Vec<f64>, usize)], sigmas: &[f64], thresholds: &[f64]) -> (OffsetParams, f64) {
    let mut best = (OffsetParams::default(), f64::INFINITY);
    for &sigma in sigmas {
        for &threshold in thresholds {
            let p = OffsetParams { sigma, threshold };
            let err = seqs
                .iter()
                .map(|(o, t)| (decide_offset(o, &p) as f64 - *t as f64).abs())
                .sum::<f64>()
                / seqs.len().max(1) as f64;
            if err < best.1 {
                best = (p, err);
            }
        }
    }
    best
}

fn onset_frame(n: &Note) -> i64 {
    frontend::time_to_frame(n.onset).round() as i64
}

fn offset_frame(n: &Note) -> i64 {
    frontend::time_to_frame(n.offset).round() as i64
}

/// Onset-network targets `(local frame, target)`. Frames at an annotated onset
/// within 55 cents are positive, their +-7 neighbours are skipped and the
/// remaining negatives kept with probability `keep_negative`.
pub fn onset_targets(contour: &Contour, refs: &[Note], keep_negative: f64, rng: &mut impl Rng) -> Vec<(usize, f64)> {
    let start = contour.start() as i64;
    let len = contour.len() as i64;
    let mut positive = vec![false; contour.len()];
    for r in refs {
        let k = onset_frame(r) - start;
        if (0..len).contains(&k) && (contour.frames[k as usize].cents - 100.0 * r.pitch).abs() <= ONSET_TARGET_CENTS {
            positive[k as usize] = true;
        }
    }
    let mut excluded = vec![false; contour.len()];
    for (k, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        let lo = (k as i64 - ONSET_EXCLUSION).max(0) as usize;
        let hi = (k as i64 + ONSET_EXCLUSION).min(len - 1) as usize;
        excluded[lo..=hi].iter_mut().for_each(|e| *e = true);
    }
    let mut out = Vec::new();
    for k in 0..contour.len() {
        if positive[k] {
            out.push((k, 1.0));
        } else if !excluded[k] && rng.random_bool(keep_negative.clamp(0.0, 1.0)) {
            out.push((k, 0.0));
        }
    }
    out
}

/// Offset-curve targets: a unit-peak 13-frame Hann bump at every annotated
/// offset whose pitch lies within 50 cents of the contour there.
pub fn offset_curve_targets(contour: &Contour, refs: &[Note]) -> Vec<f64> {
    let w = dsp::hann(OFFSET_BUMP_LEN);
    let half = (OFFSET_BUMP_LEN / 2) as i64;
    let start = contour.start() as i64;
    let mut out = vec![0.0f64; contour.len()];
    for r in refs {
        let f = offset_frame(r);
        if (contour.at(f).cents - 100.0 * r.pitch).abs() > SAME_PITCH_CENTS {
            continue;
        }
        for (j, &wj) in w.iter().enumerate() {
            let k = f - start + j as i64 - half;
            if (0..out.len() as i64).contains(&k) {
                out[k as usize] = out[k as usize].max(wj);
            }
        }
    }
    out
}

/// Offset-decision target at frame `t` for an annotated offset at `f`: 0
/// before, 1 after, rising linearly over the 5 frames centred on `f`.
pub fn offset_ramp(t: i64, f: i64) -> f64 {
    ((t - f + 3) as f64 / 6.0).clamp(0.0, 1.0)
}

/// Training frames for the offset-decision network from one detected onset.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetExample {
    pub onset: usize,
    /// `(local frame, target)`, consecutive from the onset.
    pub frames: Vec<(usize, f64)>,
}

/// Offset-decision targets for the detected onsets (contour-local) of a
/// contour. An onset is used when an annotation starts within the onset
/// tolerance and 50 cents; the note is dropped when another same-pitch note
/// ends in between, frames from the next same-pitch onset on are dropped,
/// and when that onset follows within four frames of the offset the last
/// four frames before the offset go as well.
pub fn offset_examples(contour: &Contour, onsets: &[usize], refs: &[Note], spec: &MatchSpec) -> Vec<OffsetExample> {
    let start = contour.start() as i64;
    let mut out = Vec::new();
    for &o in onsets {
        let t_on = frontend::frame_time((start + o as i64) as f64);
        let cents = contour.frames[o].cents;
        let matched = refs
            .iter()
            .filter(|r| (r.onset - t_on).abs() <= spec.onset_s + 1e-9 && (100.0 * r.pitch - cents).abs() <= SAME_PITCH_CENTS)
            .min_by(|a, b| (a.onset - t_on).abs().total_cmp(&(b.onset - t_on).abs()));
        let Some(r) = matched else { continue };
        let same: Vec<&Note> = refs
            .iter()
            .filter(|x| !std::ptr::eq(*x, r) && (x.pitch - r.pitch).abs() * 100.0 <= SAME_PITCH_CENTS)
            .collect();
        if same.iter().any(|x| x.offset > t_on && x.offset < r.offset) {
            continue;
        }
        let f = offset_frame(r) - start;
        let next_onset = same
            .iter()
            .map(|x| onset_frame(x) - start)
            .filter(|&k| k > o as i64 && k >= f - NEXT_ONSET_GUARD)
            .min();
        let end = next_onset.map_or(contour.len() as i64, |k| k.min(contour.len() as i64));
        let guard = next_onset.is_some_and(|k| k - f <= NEXT_ONSET_GUARD);
        let frames: Vec<(usize, f64)> = (o as i64..end)
            .filter(|&k| !(guard && (f - NEXT_ONSET_GUARD..f).contains(&k)))
            .map(|k| (k as usize, offset_ramp(k, f)))
            .collect();
        if !frames.is_empty() {
            out.push(OffsetExample { onset: o, frames });
        }
    }
    out
}
