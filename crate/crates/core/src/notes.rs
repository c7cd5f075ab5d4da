//! Tentative notes, the note network input, iterative note removal and the
//! final transcription.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contours::{Contour, N2_HIDDEN};
use crate::dsp;
use crate::error::{Error, Result};
use crate::eval::{self, MatchSpec, Matcher, Note, Task};
use crate::events::{
    self, cents_to_l_bin, f1, sample_bin, t2, ContourActivations, FeatureContext, OffsetParams, OnsetParams, F1_LEN,
    N3_HIDDEN, T4, T4_STAR,
};
use crate::frontend;
use crate::kernel::KERNEL_SIZE;
use crate::nn::Model;
use crate::pitchogram::{self, cents_to_pitch_bin, TentativeF0, N2_INPUT};

pub const N6_LAYOUT: &str = "n6-3249-v1";
pub const N6_HIDDEN: [usize; 1] = [150];
pub const STOP_PROBABILITY: f64 = 0.55;
pub const ONSET_SHIFT_S: f64 = 0.01;
pub const FRAMEWISE_MIN_CENTS: f64 = 60.0;

pub const LEVEL_TAPS: [i64; 11] = [-15, -12, -9, -6, -3, 0, 3, 6, 9, 12, 15];
pub const QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];
/// PF, |PF|, OC, OCS, pitch output, 14 tap activations, 50 kernel levels.
pub const QUANTILE_SERIES: usize = 5 + N2_HIDDEN + KERNEL_SIZE;
pub const CONTEXT_NEIGHBOURS: i64 = 2;
pub const NEIGHBOUR_SEMITONES: i64 = 25;
pub const NEIGHBOUR_RANGES: [(i64, i64); 5] = [(-18, -11), (-10, -4), (-3, 3), (4, 10), (11, 18)];
/// Duration, IOI and IPI used when a context neighbour does not exist.
pub const MISSING_NEIGHBOUR: [f64; 3] = [2.0, 3.0, 0.0];

const N3_LAST: usize = N3_HIDDEN[1];
pub const N6_INPUT: usize = events::T2_LEN
    + N3_LAST * T4_STAR.len()
    + N2_INPUT * T4_STAR.len()
    + F1_LEN * T4.len()
    + LEVEL_TAPS.len()
    + QUANTILES.len() * QUANTILE_SERIES
    + 3 * (2 * CONTEXT_NEIGHBOURS as usize + 1)
    + 2
    + (2 * NEIGHBOUR_SEMITONES as usize + 1) * NEIGHBOUR_RANGES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct TentativeNote {
    pub contour: usize,
    /// Fractional contour-local onset frame.
    pub onset: f64,
    pub onset_k: usize,
    /// Exclusive contour-local end chosen by the offset decision.
    pub decided_end: usize,
    /// Exclusive contour-local end after capping at the next kept onset.
    pub offset_k: usize,
    pub cents: f64,
    /// OCS at the onset frame.
    pub onset_activation: f64,
    pub probability: f64,
    pub features: Vec<f64>,
    pub kept: bool,
}

/// Everything note features are computed from, for one track.
pub struct NoteContext<'a> {
    pub features: &'a FeatureContext<'a>,
    pub t0s: &'a [Vec<TentativeF0>],
    pub contours: &'a [Contour],
    pub acts: &'a [ContourActivations],
    /// OCS per contour.
    pub ocs: Vec<Vec<f64>>,
}

impl<'a> NoteContext<'a> {
    pub fn new(
        features: &'a FeatureContext<'a>,
        t0s: &'a [Vec<TentativeF0>],
        contours: &'a [Contour],
        acts: &'a [ContourActivations],
        onset: &OnsetParams,
    ) -> Self {
        let ocs = acts.iter().map(|a| events::smoothed_onset_curve(&a.oc, onset)).collect();
        NoteContext {
            features,
            t0s,
            contours,
            acts,
            ocs,
        }
    }

    pub fn onset_abs(&self, n: &TentativeNote) -> f64 {
        self.contours[n.contour].start() as f64 + n.onset
    }

    pub fn onset_seconds(&self, n: &TentativeNote) -> f64 {
        frontend::frame_time(self.onset_abs(n))
    }

    pub fn offset_seconds(&self, n: &TentativeNote) -> f64 {
        frontend::frame_time((self.contours[n.contour].start() + n.offset_k) as f64)
    }

    /// Note as evaluated and written out: onset moved 10 ms earlier.
    pub fn output_note(&self, n: &TentativeNote) -> Note {
        Note::new(self.onset_seconds(n) - ONSET_SHIFT_S, self.offset_seconds(n), n.cents / 100.0)
    }

    fn median_cents(&self, c: usize, from: usize, to: usize) -> f64 {
        let v: Vec<f64> = self.contours[c].frames[from..to.max(from + 1)].iter().map(|f| f.cents).collect();
        dsp::quantile(&v, 0.5)
    }

    fn clamp_local(&self, c: usize, k: i64) -> usize {
        k.clamp(0, self.contours[c].len() as i64 - 1) as usize
    }
}

/// Picks onsets on every contour and decides their offsets with the offset
/// decision network. Probabilities and features are left empty.
pub fn tentative_notes(
    nc: &NoteContext,
    n5: &Model,
    onset: &OnsetParams,
    offset: &OffsetParams,
) -> Result<Vec<TentativeNote>> {
    let mut notes = Vec::new();
    for (c, contour) in nc.contours.iter().enumerate() {
        let mut last_k = None;
        for on in events::curve_peaks(&nc.ocs[c], onset.threshold) {
            let k = nc.clamp_local(c, on.round() as i64);
            if last_k == Some(k) {
                continue;
            }
            last_k = Some(k);
            let curve = events::offset_decision_curve(nc.features, contour, &nc.acts[c].ofc, k, n5)?;
            let j = events::decide_offset(&curve, offset);
            let end = if j + 1 == curve.len() { contour.len() } else { (k + j.max(1)).min(contour.len()) };
            notes.push(TentativeNote {
                contour: c,
                onset: on,
                onset_k: k,
                decided_end: end,
                offset_k: end,
                cents: nc.median_cents(c, k, end),
                onset_activation: nc.ocs[c][k],
                probability: 1.0,
                features: Vec::new(),
                kept: true,
            });
        }
    }
    let kept = vec![true; notes.len()];
    for i in 0..notes.len() {
        cap_offset(nc, &mut notes, &kept, i);
    }
    Ok(notes)
}

/// Kept notes of a contour in onset order.
fn region_notes(notes: &[TentativeNote], kept: &[bool], contour: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..notes.len()).filter(|&i| kept[i] && notes[i].contour == contour).collect();
    v.sort_by(|&a, &b| notes[a].onset.total_cmp(&notes[b].onset).then(a.cmp(&b)));
    v
}

/// Re-caps the end of note `i` at the next kept onset of its contour and
/// refreshes its pitch. Returns whether anything changed.
fn cap_offset(nc: &NoteContext, notes: &mut [TentativeNote], kept: &[bool], i: usize) -> bool {
    let n = &notes[i];
    let next = region_notes(notes, kept, n.contour)
        .into_iter()
        .filter(|&j| j != i && notes[j].onset_k > n.onset_k)
        .map(|j| notes[j].onset_k)
        .min();
    let end = next.map_or(n.decided_end, |k| k.min(n.decided_end)).max(n.onset_k + 1);
    let end = end.min(nc.contours[n.contour].len()).max(n.onset_k + 1);
    if end == notes[i].offset_k {
        return false;
    }
    let cents = nc.median_cents(n.contour, n.onset_k, end);
    notes[i].offset_k = end;
    notes[i].cents = cents;
    true
}

fn duration_s(n: &TentativeNote) -> f64 {
    frontend::frame_time(n.offset_k as f64 - n.onset)
}

/// Appends the 3249 note-network features of note `i` given the kept set.
pub fn note_features(nc: &NoteContext, notes: &[TentativeNote], kept: &[bool], i: usize, out: &mut Vec<f64>) {
    let n = &notes[i];
    let c = n.contour;
    let contour = &nc.contours[c];
    let act = &nc.acts[c];
    let ctx = nc.features;
    let start = contour.start() as i64;
    let k0 = n.onset_k as i64;
    let t_on = start + k0;
    let abs_frame = |t: i64| t.clamp(0, ctx.n_frames() as i64 - 1) as usize;

    out.extend(t2().map(|d| act.oc[nc.clamp_local(c, k0 + d)]));
    for &d in &T4_STAR {
        out.extend(act.n3_hidden.row(nc.clamp_local(c, k0 + d)).iter());
    }
    for &d in &T4_STAR {
        let k = nc.clamp_local(c, k0 + d);
        let f = abs_frame(start + k as i64);
        pitchogram::n2_features(&ctx.stack, f, contour.frames[k].cents, &nc.t0s[f], out);
    }
    for &d in &T4 {
        let k = nc.clamp_local(c, k0 + d);
        let f = abs_frame(start + k as i64);
        let bin = cents_to_l_bin(contour.frames[k].cents);
        out.extend(f1().map(|b| sample_bin(ctx.l25, f, bin + b as f64)));
    }
    let lv = |t: i64| ctx.level[abs_frame(t)];
    out.extend(LEVEL_TAPS.iter().map(|&d| lv(t_on + d + 1) - lv(t_on + d)));

    // order statistics across the note
    let frames: Vec<usize> = (n.onset_k..n.offset_k.max(n.onset_k + 1)).collect();
    let mut series: Vec<Vec<f64>> = vec![Vec::with_capacity(frames.len()); QUANTILE_SERIES];
    for &k in &frames {
        let fr = &contour.frames[k];
        let pf = (contour.frames[nc.clamp_local(c, k as i64 + 1)].cents - fr.cents) / 100.0;
        series[0].push(pf);
        series[1].push(pf.abs());
        series[2].push(act.oc[k]);
        series[3].push(nc.ocs[c][k]);
        series[4].push(fr.n2_out);
        for (h, v) in fr.n2_hidden.iter().enumerate() {
            series[5 + h].push(*v);
        }
        let kl = ctx.stack.cross_section(cents_to_pitch_bin(fr.cents), abs_frame(start + k as i64));
        for (j, v) in kl.into_iter().enumerate() {
            series[5 + N2_HIDDEN + j].push(v);
        }
    }
    for s in &series {
        out.extend(QUANTILES.iter().map(|&q| dsp::quantile(s, q)));
    }

    // neighbours in the same region
    let region = region_notes(notes, kept, c);
    let pos = region.iter().position(|&j| j == i);
    for d in -CONTEXT_NEIGHBOURS..=CONTEXT_NEIGHBOURS {
        let slot = pos.and_then(|p| {
            let q = p as i64 + d;
            (0..region.len() as i64).contains(&q).then(|| q as usize)
        });
        match slot {
            None => out.extend_from_slice(&MISSING_NEIGHBOUR),
            Some(q) => {
                let m = &notes[region[q]];
                let dur = duration_s(m);
                match region.get(q + 1) {
                    Some(&nx) => {
                        let next = &notes[nx];
                        out.push(dur);
                        out.push(frontend::frame_time(next.onset - m.onset));
                        out.push((next.cents - m.cents) / 100.0);
                    }
                    None => out.extend([dur, dur + 1.0, 0.0]),
                }
            }
        }
    }
    out.push(pos.map_or(0.0, |p| (p + 1) as f64));
    out.push(region.len() as f64);

    // onset activations of nearby kept notes
    let width = 2 * NEIGHBOUR_SEMITONES as usize + 1;
    let mut sums = vec![0.0; width * NEIGHBOUR_RANGES.len()];
    let on_i = nc.onset_abs(n).round() as i64;
    for (j, m) in notes.iter().enumerate() {
        if !kept[j] && j != i {
            continue;
        }
        let s = ((m.cents - n.cents) / 100.0).round() as i64;
        if s.abs() > NEIGHBOUR_SEMITONES {
            continue;
        }
        let dt = nc.onset_abs(m).round() as i64 - on_i;
        if let Some(r) = NEIGHBOUR_RANGES.iter().position(|&(lo, hi)| (lo..=hi).contains(&dt)) {
            sums[r * width + (s + NEIGHBOUR_SEMITONES) as usize] += m.onset_activation;
        }
    }
    out.extend(sums);
}

/// Which notes a removal can affect and how they are re-scored.
pub trait NoteScorer {
    fn len(&self) -> usize;
    /// Sort key for breaking probability ties (earliest first).
    fn onset_time(&self, i: usize) -> f64;
    fn score(&mut self, i: usize, kept: &[bool]) -> f64;
    /// Updates state after `removed` left the kept set and returns the notes
    /// to re-score.
    fn on_removed(&mut self, removed: usize, kept: &[bool]) -> Vec<usize>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalTrace {
    /// Removed notes in removal order.
    pub order: Vec<usize>,
    /// Last probability of every note (at removal for removed ones).
    pub probabilities: Vec<f64>,
    pub kept: Vec<bool>,
}

/// Repeatedly removes the least probable note while it is below `stop`,
/// re-scoring the notes each removal affects. Ties go to the earliest onset.
pub fn iterative_removal(s: &mut impl NoteScorer, stop: f64) -> RemovalTrace {
    let n = s.len();
    let mut kept = vec![true; n];
    let mut prob: Vec<f64> = (0..n).map(|i| s.score(i, &kept)).collect();
    let mut order = Vec::new();
    loop {
        let worst = (0..n).filter(|&i| kept[i]).min_by(|&a, &b| {
            prob[a]
                .total_cmp(&prob[b])
                .then(s.onset_time(a).total_cmp(&s.onset_time(b)))
                .then(a.cmp(&b))
        });
        let Some(w) = worst else { break };
        if prob[w] >= stop {
            break;
        }
        kept[w] = false;
        order.push(w);
        for j in s.on_removed(w, &kept) {
            if kept[j] {
                prob[j] = s.score(j, &kept);
            }
        }
    }
    RemovalTrace {
        order,
        probabilities: prob,
        kept,
    }
}

/// Scores notes with the note network on live features.
pub struct NetworkScorer<'a, 'b> {
    pub nc: &'b NoteContext<'a>,
    pub notes: Vec<TentativeNote>,
    pub model: &'b Model,
    pub error: Option<Error>,
}

impl<'a, 'b> NetworkScorer<'a, 'b> {
    pub fn new(nc: &'b NoteContext<'a>, notes: Vec<TentativeNote>, model: &'b Model) -> Self {
        NetworkScorer {
            nc,
            notes,
            model,
            error: None,
        }
    }
}

impl NoteScorer for NetworkScorer<'_, '_> {
    fn len(&self) -> usize {
        self.notes.len()
    }

    fn onset_time(&self, i: usize) -> f64 {
        self.nc.onset_abs(&self.notes[i])
    }

    fn score(&mut self, i: usize, kept: &[bool]) -> f64 {
        let mut f = Vec::with_capacity(N6_INPUT);
        note_features(self.nc, &self.notes, kept, i, &mut f);
        let p = match self.model.probability(&f) {
            Ok(p) => p,
            Err(e) => {
                self.error.get_or_insert(e);
                0.0
            }
        };
        self.notes[i].features = f;
        self.notes[i].probability = p;
        p
    }

    fn on_removed(&mut self, removed: usize, kept: &[bool]) -> Vec<usize> {
        let nc = self.nc;
        self.notes[removed].kept = false;
        let r = &self.notes[removed];
        let (c, on_r, cents_r) = (r.contour, nc.onset_abs(r), r.cents);
        let mut with_removed = kept.to_vec();
        with_removed[removed] = true;
        let region = region_notes(&self.notes, &with_removed, c);
        let p = region.iter().position(|&j| j == removed).unwrap_or(0) as i64;
        let mut affected: Vec<usize> = region
            .iter()
            .enumerate()
            .filter(|&(q, &j)| j != removed && (q as i64 - p).abs() <= CONTEXT_NEIGHBOURS)
            .map(|(_, &j)| j)
            .collect();
        if p > 0 {
            let prev = region[p as usize - 1];
            cap_offset(nc, &mut self.notes, kept, prev);
        }
        let reach = NEIGHBOUR_RANGES[NEIGHBOUR_RANGES.len() - 1].1 as f64 + 1.0;
        for (j, m) in self.notes.iter().enumerate() {
            if kept[j]
                && (nc.onset_abs(m) - on_r).abs() <= reach
                && (m.cents - cents_r).abs() <= 100.0 * (NEIGHBOUR_SEMITONES as f64 + 0.5)
            {
                affected.push(j);
            }
        }
        affected.sort_unstable();
        affected.dedup();
        affected
    }
}

/// Scores and prunes the tentative notes of one track.
pub fn classify_notes(
    nc: &NoteContext,
    notes: Vec<TentativeNote>,
    n6: &Model,
    stop: f64,
) -> Result<(Vec<TentativeNote>, RemovalTrace)> {
    let mut scorer = NetworkScorer::new(nc, notes, n6);
    let trace = iterative_removal(&mut scorer, stop);
    if let Some(e) = scorer.error {
        return Err(e);
    }
    Ok((scorer.notes, trace))
}

/// Features and probabilities of every note with all notes kept.
pub fn score_all(nc: &NoteContext, notes: &mut [TentativeNote], n6: Option<&Model>) -> Result<()> {
    let kept = vec![true; notes.len()];
    for i in 0..notes.len() {
        let mut f = Vec::with_capacity(N6_INPUT);
        note_features(nc, notes, &kept, i, &mut f);
        notes[i].probability = match n6 {
            Some(m) => m.probability(&f)?,
            None => 1.0,
        };
        notes[i].features = f;
    }
    Ok(())
}

/// Correct/incorrect labels of estimated notes under onset matching.
pub fn label_notes(est: &[Note], refs: &[Note], spec: &MatchSpec, matcher: Matcher) -> Vec<bool> {
    let mut y = vec![false; est.len()];
    for (e, _) in eval::match_notes(est, refs, Task::Onset, spec, matcher) {
        y[e] = true;
    }
    y
}

fn close(a: &Note, b: &Note) -> bool {
    (a.pitch - b.pitch).abs() * 100.0 <= 50.0 && a.onset <= b.offset && b.onset <= a.offset
}

/// Training-set order and labels of the second note-network step. Removed
/// notes are moved out in removal order with their current label; removing
/// a correct note re-evaluates the notes close to it in pitch and time.
/// Kept notes follow in index order.
pub fn replay_labels(
    est: &[Note],
    removal_order: &[usize],
    refs: &[Note],
    spec: &MatchSpec,
    matcher: Matcher,
) -> Vec<(usize, bool)> {
    let mut active = vec![true; est.len()];
    let evaluate = |active: &[bool]| {
        let idx: Vec<usize> = (0..est.len()).filter(|&i| active[i]).collect();
        let sub: Vec<Note> = idx.iter().map(|&i| est[i]).collect();
        let mut y = vec![false; est.len()];
        for (k, v) in label_notes(&sub, refs, spec, matcher).into_iter().enumerate() {
            y[idx[k]] = v;
        }
        y
    };
    let mut labels = evaluate(&active);
    let mut out = Vec::with_capacity(est.len());
    for &r in removal_order {
        out.push((r, labels[r]));
        active[r] = false;
        if labels[r] {
            let fresh = evaluate(&active);
            for j in 0..est.len() {
                if active[j] && close(&est[r], &est[j]) {
                    labels[j] = fresh[j];
                }
            }
        }
    }
    out.extend((0..est.len()).filter(|&j| active[j]).map(|j| (j, labels[j])));
    out
}

/// Per-frame `(cents, activation)`; within a frame predictions closer than
/// 60 cents are resolved in descending activation order.
pub type Framewise = Vec<Vec<(f64, f64)>>;

pub fn dedup_frame(mut preds: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    preds.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    let mut keep: Vec<(f64, f64)> = Vec::new();
    for p in preds {
        if keep.iter().all(|q| (q.0 - p.0).abs() >= FRAMEWISE_MIN_CENTS) {
            keep.push(p);
        }
    }
    keep.sort_by(|a, b| a.0.total_cmp(&b.0));
    keep
}

pub fn framewise_from_notes(nc: &NoteContext, notes: &[TentativeNote], n_frames: usize) -> Framewise {
    let mut frames: Framewise = vec![Vec::new(); n_frames];
    for n in notes.iter().filter(|n| n.kept) {
        let contour = &nc.contours[n.contour];
        for k in n.onset_k..n.offset_k {
            let fr = &contour.frames[k];
            if fr.frame < n_frames {
                frames[fr.frame].push((fr.cents, fr.n2_out));
            }
        }
    }
    frames.into_iter().map(dedup_frame).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputNote {
    pub onset_s: f64,
    pub offset_s: f64,
    pub pitch_midi: f64,
    pub probability: f64,
}

impl OutputNote {
    pub fn note(&self) -> Note {
        Note::new(self.onset_s, self.offset_s, self.pitch_midi)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcription {
    pub notes: Vec<OutputNote>,
    pub framewise: Framewise,
}

impl Transcription {
    pub fn from_notes(nc: &NoteContext, notes: &[TentativeNote], n_frames: usize) -> Self {
        let mut out: Vec<OutputNote> = notes
            .iter()
            .filter(|n| n.kept)
            .map(|n| {
                let e = nc.output_note(n);
                OutputNote {
                    onset_s: e.onset,
                    offset_s: e.offset,
                    pitch_midi: e.pitch,
                    probability: n.probability,
                }
            })
            .collect();
        out.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.pitch_midi.total_cmp(&b.pitch_midi)));
        Transcription {
            notes: out,
            framewise: framewise_from_notes(nc, notes, n_frames),
        }
    }

    pub fn eval_notes(&self) -> Vec<Note> {
        self.notes.iter().map(OutputNote::note).collect()
    }

    /// MIDI pitches per frame, for framewise evaluation.
    pub fn frame_pitches(&self) -> eval::FramePitches {
        self.framewise.iter().map(|f| f.iter().map(|p| p.0 / 100.0).collect()).collect()
    }

    pub fn notes_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.notes)?)
    }

    pub fn framewise_csv(&self) -> String {
        let mut s = String::from("time_s,pitch_cents,activation\n");
        for (i, f) in self.framewise.iter().enumerate() {
            for &(c, a) in f {
                s.push_str(&format!("{:.6},{:.3},{:.6}\n", frontend::frame_time(i as f64), c, a));
            }
        }
        s
    }

    /// Single-track MIDI file at 120 bpm, 480 ticks per beat.
    pub fn midi_bytes(&self) -> Result<Vec<u8>> {
        use midly::num::{u15, u24, u28, u4, u7};
        use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};
        const TICKS_PER_S: f64 = 960.0;
        let mut ev: Vec<(u64, bool, u8)> = Vec::new();
        for n in &self.notes {
            let key = n.pitch_midi.round().clamp(0.0, 127.0) as u8;
            let on = (n.onset_s.max(0.0) * TICKS_PER_S).round() as u64;
            let off = ((n.offset_s.max(0.0) * TICKS_PER_S).round() as u64).max(on + 1);
            ev.push((on, true, key));
            ev.push((off, false, key));
        }
        // note-offs first at equal times so repeated pitches retrigger
        ev.sort_by_key(|&(t, on, k)| (t, on, k));
        let mut track = vec![TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(500_000))),
        }];
        let mut now = 0;
        for (t, on, key) in ev {
            let message = if on {
                MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(80) }
            } else {
                MidiMessage::NoteOff { key: u7::new(key), vel: u7::new(0) }
            };
            track.push(TrackEvent {
                delta: u28::new((t - now) as u32),
                kind: TrackEventKind::Midi { channel: u4::new(0), message },
            });
            now = t;
        }
        track.push(TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
        });
        let smf = Smf {
            header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(480))),
            tracks: vec![track],
        };
        let mut buf = Vec::new();
        smf.write_std(&mut buf).map_err(|e| Error::Midi(e.to_string()))?;
        Ok(buf)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.notes_json()?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.framewise_csv())?;
        Ok(())
    }

    pub fn write_midi(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.midi_bytes()?)?;
        Ok(())
    }
}
