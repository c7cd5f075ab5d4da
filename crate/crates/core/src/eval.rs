//! Note and framewise matching, precision/recall/F-measure, accuracy and the
//! harmonic-mean combination over test sets.

use serde::{Deserialize, Serialize};

use crate::frontend::{HOP, SAMPLE_RATE};

/// A note with times in seconds and a (possibly fractional) MIDI pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub onset: f64,
    pub offset: f64,
    pub pitch: f64,
}

impl Note {
    pub fn new(onset: f64, offset: f64, pitch: f64) -> Self {
        Note { onset, offset, pitch }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub pitch_cents: f64,
    pub onset_s: f64,
    pub offset_s: f64,
    /// Offset tolerance when onsets and offsets are scored together: the
    /// larger of `onoff_offset_s` and this fraction of the reference duration.
    pub onoff_offset_ratio: f64,
    pub onoff_offset_s: f64,
    pub frame_cents: f64,
}

impl Default for MatchSpec {
    fn default() -> Self {
        MatchSpec {
            pitch_cents: 50.0,
            onset_s: 0.05,
            offset_s: 0.1,
            onoff_offset_ratio: 0.2,
            onoff_offset_s: 0.05,
            frame_cents: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Onset,
    Offset,
    OnsetOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Matcher {
    /// Eligible pairs taken in order of increasing time distance.
    #[default]
    Greedy,
    /// Maximum-cardinality bipartite matching.
    Optimal,
}

// Slack for tolerances written in decimal seconds.
const EPS: f64 = 1e-9;

fn cents(a: f64, b: f64) -> f64 {
    (a - b).abs() * 100.0
}

pub fn eligible(est: &Note, r: &Note, task: Task, spec: &MatchSpec) -> bool {
    if cents(est.pitch, r.pitch) > spec.pitch_cents + EPS {
        return false;
    }
    let on = (est.onset - r.onset).abs() <= spec.onset_s + EPS;
    let off = |tol: f64| (est.offset - r.offset).abs() <= tol + EPS;
    match task {
        Task::Onset => on,
        Task::Offset => off(spec.offset_s),
        Task::OnsetOffset => on && off(spec.onoff_offset_s.max(spec.onoff_offset_ratio * r.duration())),
    }
}

fn distance(est: &Note, r: &Note, task: Task) -> f64 {
    match task {
        Task::Onset | Task::OnsetOffset => (est.onset - r.onset).abs(),
        Task::Offset => (est.offset - r.offset).abs(),
    }
}

/// Pairs `(estimate, reference)` under `task`.
pub fn match_notes(est: &[Note], refs: &[Note], task: Task, spec: &MatchSpec, matcher: Matcher) -> Vec<(usize, usize)> {
    let adj: Vec<Vec<usize>> = est
        .iter()
        .map(|e| (0..refs.len()).filter(|&j| eligible(e, &refs[j], task, spec)).collect())
        .collect();
    match matcher {
        Matcher::Greedy => {
            let mut pairs: Vec<(f64, f64, usize, usize)> = adj
                .iter()
                .enumerate()
                .flat_map(|(i, js)| {
                    js.iter()
                        .map(move |&j| (distance(&est[i], &refs[j], task), cents(est[i].pitch, refs[j].pitch), i, j))
                })
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))));
            greedy_take(pairs.into_iter().map(|p| (p.2, p.3)), est.len(), refs.len())
        }
        Matcher::Optimal => max_bipartite(&adj, refs.len()),
    }
}

fn greedy_take(pairs: impl Iterator<Item = (usize, usize)>, n_est: usize, n_ref: usize) -> Vec<(usize, usize)> {
    let mut used_e = vec![false; n_est];
    let mut used_r = vec![false; n_ref];
    let mut out = Vec::new();
    for (i, j) in pairs {
        if !used_e[i] && !used_r[j] {
            used_e[i] = true;
            used_r[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Maximum-cardinality matching by augmenting paths.
pub fn max_bipartite(adj: &[Vec<usize>], n_right: usize) -> Vec<(usize, usize)> {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    for u in 0..adj.len() {
        let mut seen = vec![false; n_right];
        augment(u, adj, &mut seen, &mut owner);
    }
    let mut out: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(v, u)| u.map(|u| (u, v)))
        .collect();
    out.sort_unstable();
    out
}

/// Matched, false-positive and false-negative counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, n_est: usize, n_ref: usize) -> Self {
        Counts {
            tp,
            fp: n_est - tp,
            fn_: n_ref - tp,
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::from_counts(*self)
    }
}

/// Metrics on the 0..100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub accuracy: f64,
}

impl MetricReport {
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        MetricReport {
            counts: c,
            precision,
            recall,
            f: f_measure(precision, recall),
            accuracy: 100.0 * accuracy(c.tp, c.fp, c.fn_),
        }
    }
}

/// `2PR / (P + R)`, 0 when both are 0. Works on any scale.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `tp / (tp + fp + fn)`, 0 for an empty evaluation.
pub fn accuracy(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = tp + fp + fn_;
    if d == 0 {
        0.0
    } else {
        tp as f64 / d as f64
    }
}

/// Harmonic mean; 0 if any value is 0.
pub fn combined_metric(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

pub fn note_counts(est: &[Note], refs: &[Note], task: Task, spec: &MatchSpec, matcher: Matcher) -> Counts {
    Counts::new(match_notes(est, refs, task, spec, matcher).len(), est.len(), refs.len())
}

pub fn note_metrics(est: &[Note], refs: &[Note], task: Task, spec: &MatchSpec, matcher: Matcher) -> MetricReport {
    note_counts(est, refs, task, spec, matcher).report()
}

/// Per-frame pitch lists (MIDI).
pub type FramePitches = Vec<Vec<f64>>;

/// Matches within one frame, maximizing the number of pairs within `tol_cents`.
pub fn match_frame(est: &[f64], refs: &[f64], tol_cents: f64) -> Vec<(usize, usize)> {
    let adj: Vec<Vec<usize>> = est
        .iter()
        .map(|&e| (0..refs.len()).filter(|&j| cents(e, refs[j]) <= tol_cents + EPS).collect())
        .collect();
    max_bipartite(&adj, refs.len())
}

pub fn framewise_counts(est: &FramePitches, refs: &FramePitches, spec: &MatchSpec) -> Counts {
    let n = est.len().max(refs.len());
    let empty = Vec::new();
    let mut total = Counts::default();
    for i in 0..n {
        let e = est.get(i).unwrap_or(&empty);
        let r = refs.get(i).unwrap_or(&empty);
        total.add(Counts::new(match_frame(e, r, spec.frame_cents).len(), e.len(), r.len()));
    }
    total
}

pub fn framewise_metrics(est: &FramePitches, refs: &FramePitches, spec: &MatchSpec) -> MetricReport {
    framewise_counts(est, refs, spec).report()
}

/// Reference pitches per output frame: a note sounds in frame `i` when
/// `onset <= t_i < offset` for the frame center `t_i`.
pub fn notes_to_frames(notes: &[Note], n_frames: usize) -> FramePitches {
    let per_frame = HOP as f64 / SAMPLE_RATE as f64;
    let edge = |t: f64| ((t / per_frame - 1e-9).ceil().max(0.0) as usize).min(n_frames);
    let mut frames = vec![Vec::new(); n_frames];
    for n in notes {
        for slot in &mut frames[edge(n.onset)..edge(n.offset)] {
            slot.push(n.pitch);
        }
    }
    frames
}

/// Onset, offset, onset+offset and framewise reports for one track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub onset: MetricReport,
    pub offset: MetricReport,
    pub onset_offset: MetricReport,
    pub framewise: MetricReport,
}

/// Pooled counts over tracks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PooledCounts {
    pub onset: Counts,
    pub offset: Counts,
    pub onset_offset: Counts,
    pub framewise: Counts,
}

impl PooledCounts {
    pub fn add_track(&mut self, est: &[Note], est_frames: &FramePitches, refs: &[Note], ref_frames: &FramePitches, spec: &MatchSpec, matcher: Matcher) {
        self.onset.add(note_counts(est, refs, Task::Onset, spec, matcher));
        self.offset.add(note_counts(est, refs, Task::Offset, spec, matcher));
        self.onset_offset.add(note_counts(est, refs, Task::OnsetOffset, spec, matcher));
        self.framewise.add(framewise_counts(est_frames, ref_frames, spec));
    }

    pub fn report(&self) -> TrackReport {
        TrackReport {
            onset: self.onset.report(),
            offset: self.offset.report(),
            onset_offset: self.onset_offset.report(),
            framewise: self.framewise.report(),
        }
    }
}

/// Human-readable table in the column order of the published result tables.
pub fn format_table(rows: &[(String, TrackReport)]) -> String {
    let mut s = format!(
        "{:<16} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}\n",
        "set", "A_fr", "F_fr", "P", "R", "A_on", "F_on", "P", "R", "F_off", "P", "R", "F_onoff", "P", "R"
    );
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<16} {:>6.1} {:>6.1} {:>6.1} {:>6.1} | {:>6.1} {:>6.1} {:>6.1} {:>6.1} | {:>6.1} {:>6.1} {:>6.1} | {:>6.1} {:>6.1} {:>6.1}\n",
            name,
            r.framewise.accuracy,
            r.framewise.f,
            r.framewise.precision,
            r.framewise.recall,
            r.onset.accuracy,
            r.onset.f,
            r.onset.precision,
            r.onset.recall,
            r.offset.f,
            r.offset.precision,
            r.offset.recall,
            r.onset_offset.f,
            r.onset_offset.precision,
            r.onset_offset.recall
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_max(adj: &[Vec<usize>], n_right: usize) -> usize {
        fn go(i: usize, adj: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
            if i == adj.len() {
                return 0;
            }
            let mut best = go(i + 1, adj, used);
            for &j in &adj[i] {
                if !used[j] {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, adj, used));
                    used[j] = false;
                }
            }
            best
        }
        go(0, adj, &mut vec![false; n_right])
    }

    #[test]
    fn published_f_measures() {
        assert!((f_measure(91.4, 93.1) - 92.2).abs() < 0.05);
        assert!((f_measure(87.0, 89.6) - 88.3).abs() < 0.05);
        assert_eq!(f_measure(0.0, 0.0), 0.0);
        assert!((f_measure(0.7, 0.7) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn published_combined_metrics() {
        assert!((combined_metric(&[88.3, 90.3, 83.8, 81.6]) - 85.9).abs() < 0.05);
        assert!((combined_metric(&[92.2, 78.4, 71.8, 72.9]) - 78.1).abs() < 0.05);
        assert_eq!(combined_metric(&[50.0, 0.0, 60.0, 70.0]), 0.0);
        assert!((combined_metric(&[42.0; 4]) - 42.0).abs() < 1e-12);
    }

    #[test]
    fn exact_note_matches() {
        let n = [Note::new(1.0, 2.0, 60.0)];
        let r = note_metrics(&n, &n, Task::Onset, &MatchSpec::default(), Matcher::Greedy);
        assert_eq!((r.precision, r.recall, r.f), (100.0, 100.0, 100.0));
    }

    #[test]
    fn onset_gate() {
        let spec = MatchSpec::default();
        let r = Note::new(1.0, 2.0, 60.0);
        assert!(!eligible(&Note::new(1.06, 2.0, 60.0), &r, Task::Onset, &spec));
        assert!(eligible(&Note::new(1.049, 2.0, 60.0), &r, Task::Onset, &spec));
        assert!(!eligible(&Note::new(1.051, 2.0, 60.0), &r, Task::Onset, &spec));
        assert!(!eligible(&Note::new(1.0, 2.0, 60.6), &r, Task::Onset, &spec));
    }

    #[test]
    fn onset_offset_tolerance_grows_with_length() {
        let spec = MatchSpec::default();
        let r = Note::new(0.0, 2.0, 60.0);
        assert!(eligible(&Note::new(0.0, 2.39, 60.0), &r, Task::OnsetOffset, &spec));
        assert!(!eligible(&Note::new(0.0, 2.41, 60.0), &r, Task::OnsetOffset, &spec));
        let short = Note::new(0.0, 0.1, 60.0);
        assert!(eligible(&Note::new(0.0, 0.149, 60.0), &short, Task::OnsetOffset, &spec));
    }

    #[test]
    fn greedy_bounded_by_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MatchSpec::default();
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let gen = |rng: &mut ChaCha8Rng| {
                let on = rng.random_range(0.0..0.3);
                Note::new(on, on + 0.5, 60.0 + rng.random_range(-0.6..0.6))
            };
            let est: Vec<Note> = (0..n).map(|_| gen(&mut rng)).collect();
            let refs: Vec<Note> = (0..rng.random_range(1..=6)).map(|_| gen(&mut rng)).collect();
            let adj: Vec<Vec<usize>> = est
                .iter()
                .map(|e| (0..refs.len()).filter(|&j| eligible(e, &refs[j], Task::Onset, &spec)).collect())
                .collect();
            let best = brute_force_max(&adj, refs.len());
            let g = match_notes(&est, &refs, Task::Onset, &spec, Matcher::Greedy).len();
            let o = match_notes(&est, &refs, Task::Onset, &spec, Matcher::Optimal).len();
            assert!(g <= best);
            assert_eq!(o, best);
        }
    }

    #[test]
    fn swapping_roles_swaps_precision_and_recall() {
        let a = [Note::new(0.0, 1.0, 60.0), Note::new(1.0, 2.0, 62.0), Note::new(3.0, 4.0, 64.0)];
        let b = [Note::new(0.01, 1.0, 60.0), Note::new(1.5, 2.0, 62.0)];
        let spec = MatchSpec::default();
        let ab = note_metrics(&a, &b, Task::Onset, &spec, Matcher::Greedy);
        let ba = note_metrics(&b, &a, Task::Onset, &spec, Matcher::Greedy);
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
    }

    #[test]
    fn framewise_examples() {
        let spec = MatchSpec::default();
        let f: FramePitches = vec![vec![60.0, 64.0], vec![60.0]];
        let r = framewise_metrics(&f, &f, &spec);
        assert_eq!((r.precision, r.recall, r.f, r.accuracy), (100.0, 100.0, 100.0, 100.0));
        let r = framewise_metrics(&vec![vec![], vec![]], &f, &spec);
        assert_eq!((r.recall, r.f), (0.0, 0.0));
    }

    #[test]
    fn frame_matching_is_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let e: Vec<f64> = (0..rng.random_range(0..5)).map(|_| 60.0 + rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..rng.random_range(0..5)).map(|_| 60.0 + rng.random_range(-1.0..1.0)).collect();
            let adj: Vec<Vec<usize>> = e
                .iter()
                .map(|&x| (0..r.len()).filter(|&j| (x - r[j]).abs() * 100.0 <= 50.0).collect())
                .collect();
            assert_eq!(match_frame(&e, &r, 50.0).len(), brute_force_max(&adj, r.len()));
        }
    }

    #[test]
    fn frames_from_notes() {
        let hop_s = HOP as f64 / SAMPLE_RATE as f64;
        let frames = notes_to_frames(&[Note::new(2.0 * hop_s, 4.5 * hop_s, 60.0)], 8);
        let active: Vec<usize> = (0..8).filter(|&i| !frames[i].is_empty()).collect();
        assert_eq!(active, vec![2, 3, 4]);
    }

    #[test]
    fn accuracy_definition() {
        assert_eq!(accuracy(3, 1, 0), 0.75);
        assert_eq!(accuracy(0, 0, 0), 0.0);
    }
}
