//! Note and framewise scoring of estimate files against reference files.
//!
//! Note files are JSON arrays (or objects with a `notes` array) whose items
//! carry onset, offset and pitch under either the transcription names
//! (`onset_s`, `offset_s`, `pitch_midi`) or the annotation names
//! (`onset_s`, `offset_s`, `pitch`) or plain `onset`, `offset`, `pitch`.
//! Framewise estimates come from the CSV written by `transcribe`; without
//! one, frames are derived from the estimated notes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use pitchtrack::eval::{combined_metric, format_table, notes_to_frames, FramePitches, MatchSpec, Matcher, Note, PooledCounts, TrackReport};
use pitchtrack::frontend::{time_to_frame, HOP, SAMPLE_RATE};

use crate::Failure;

#[derive(Clone, Copy, ValueEnum)]
pub enum MatcherArg {
    Greedy,
    Optimal,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Estimated note files, paired in order with `--ref`.
    #[arg(long = "est", num_args = 1..)]
    est: Vec<PathBuf>,
    /// Reference note files.
    #[arg(long = "ref", num_args = 1..)]
    refs: Vec<PathBuf>,
    /// Framewise CSVs of the estimates, paired in order with `--est`.
    #[arg(long = "est-frames", num_args = 1..)]
    est_frames: Vec<PathBuf>,
    /// Test-set name of every pair; sets are pooled and then combined by
    /// the harmonic mean.
    #[arg(long = "set-name", num_args = 1..)]
    sets: Vec<String>,
    /// Onset tolerance in seconds.
    #[arg(long, default_value_t = MatchSpec::default().onset_s)]
    onset_tol: f64,
    /// Offset tolerance in seconds for offset-only matching.
    #[arg(long, default_value_t = MatchSpec::default().offset_s)]
    offset_tol: f64,
    /// Pitch tolerance in cents for notes.
    #[arg(long, default_value_t = MatchSpec::default().pitch_cents)]
    pitch_tol: f64,
    /// Pitch tolerance in cents for frames.
    #[arg(long, default_value_t = MatchSpec::default().frame_cents)]
    frame_tol: f64,
    #[arg(long, value_enum, default_value = "greedy")]
    matcher: MatcherArg,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Only print the harmonic mean of these comma-separated values.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["est", "refs"])]
    combine: Vec<f64>,
}

#[derive(Serialize)]
struct Report {
    tracks: Vec<(String, TrackReport)>,
    sets: BTreeMap<String, TrackReport>,
    /// Harmonic mean over sets of each F-measure.
    combined: BTreeMap<String, f64>,
}

fn field(v: &Value, names: &[&str]) -> Option<f64> {
    names.iter().find_map(|n| v.get(*n).and_then(Value::as_f64))
}

pub fn read_notes(path: &Path) -> Result<Vec<Note>, Failure> {
    let bad = |why: String| Failure::Input(format!("{}: {why}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let items = match &v {
        Value::Array(a) => a,
        Value::Object(o) => o.get("notes").and_then(Value::as_array).ok_or_else(|| bad("no `notes` array".into()))?,
        _ => return Err(bad("expected a JSON array of notes".into())),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let on = field(n, &["onset_s", "onset"]);
            let off = field(n, &["offset_s", "offset"]);
            let p = field(n, &["pitch_midi", "pitch"]);
            match (on, off, p) {
                (Some(on), Some(off), Some(p)) => Ok(Note::new(on, off, p)),
                _ => Err(bad(format!("note {i} lacks onset, offset or pitch"))),
            }
        })
        .collect()
}

/// Frame index and pitches (MIDI) from a `time_s,pitch_cents,...` CSV.
fn read_frames(path: &Path) -> Result<Vec<(usize, f64)>, Failure> {
    let bad = |why: String| Failure::Input(format!("{}: {why}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut cols = line.split(',');
        let (Some(t), Some(c)) = (cols.next(), cols.next()) else {
            return Err(bad(format!("line {}: expected time and pitch", i + 1)));
        };
        let t: f64 = t.trim().parse().map_err(|_| bad(format!("line {}: bad time", i + 1)))?;
        let c: f64 = c.trim().parse().map_err(|_| bad(format!("line {}: bad pitch", i + 1)))?;
        out.push((time_to_frame(t).round().max(0.0) as usize, c / 100.0));
    }
    Ok(out)
}

fn frame_count(notes: &[&[Note]], frames: &[(usize, f64)]) -> usize {
    let per = HOP as f64 / SAMPLE_RATE as f64;
    let t = notes.iter().flat_map(|n| n.iter()).map(|n| n.offset).fold(0.0, f64::max);
    let f = frames.iter().map(|f| f.0 + 1).max().unwrap_or(0);
    ((t / per).ceil() as usize + 1).max(f)
}

pub fn run(a: &EvaluateArgs) -> Result<(), Failure> {
    if !a.combine.is_empty() {
        println!("{:.2}", combined_metric(&a.combine));
        return Ok(());
    }
    if a.est.is_empty() || a.est.len() != a.refs.len() {
        return Err(Failure::Input(format!(
            "track lists differ: {} estimate files, {} reference files",
            a.est.len(),
            a.refs.len()
        )));
    }
    for (what, n) in [("--est-frames", a.est_frames.len()), ("--set-name", a.sets.len())] {
        if n != 0 && n != a.est.len() {
            return Err(Failure::Input(format!("{what} lists {n} entries for {} tracks", a.est.len())));
        }
    }
    let spec = MatchSpec {
        onset_s: a.onset_tol,
        offset_s: a.offset_tol,
        pitch_cents: a.pitch_tol,
        frame_cents: a.frame_tol,
        ..MatchSpec::default()
    };
    let matcher = match a.matcher {
        MatcherArg::Greedy => Matcher::Greedy,
        MatcherArg::Optimal => Matcher::Optimal,
    };
    let mut tracks = Vec::new();
    let mut sets: BTreeMap<String, PooledCounts> = BTreeMap::new();
    for (i, (e, r)) in a.est.iter().zip(&a.refs).enumerate() {
        let est = read_notes(e)?;
        let refs = read_notes(r)?;
        let frames = match a.est_frames.get(i) {
            Some(p) => Some(read_frames(p)?),
            None => None,
        };
        let n = frame_count(&[&est, &refs], frames.as_deref().unwrap_or(&[]));
        let est_frames: FramePitches = match &frames {
            Some(f) => {
                let mut fp = vec![Vec::new(); n];
                f.iter().for_each(|&(k, p)| fp[k].push(p));
                fp
            }
            None => notes_to_frames(&est, n),
        };
        let mut one = PooledCounts::default();
        one.add_track(&est, &est_frames, &refs, &notes_to_frames(&refs, n), &spec, matcher);
        let name = e.file_stem().map_or_else(|| format!("track{i}"), |s| s.to_string_lossy().into_owned());
        tracks.push((name, one.report()));
        let set = a.sets.get(i).cloned().unwrap_or_else(|| "all".into());
        let pooled = sets.entry(set).or_default();
        for (dst, src) in [
            (&mut pooled.onset, one.onset),
            (&mut pooled.offset, one.offset),
            (&mut pooled.onset_offset, one.onset_offset),
            (&mut pooled.framewise, one.framewise),
        ] {
            dst.add(src);
        }
    }
    let sets: BTreeMap<String, TrackReport> = sets.into_iter().map(|(k, v)| (k, v.report())).collect();
    let combine = |f: fn(&TrackReport) -> f64| combined_metric(&sets.values().map(f).collect::<Vec<_>>());
    let combined: BTreeMap<String, f64> = [
        ("onset", combine(|r| r.onset.f)),
        ("offset", combine(|r| r.offset.f)),
        ("onset_offset", combine(|r| r.onset_offset.f)),
        ("framewise", combine(|r| r.framewise.f)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let report = Report { tracks, sets, combined };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?);
    } else {
        let mut rows = report.tracks.clone();
        rows.extend(report.sets.iter().map(|(k, v)| (format!("[{k}]"), *v)));
        print!("{}", format_table(&rows));
        let c = &report.combined;
        println!(
            "combined F: onset {:.1}  offset {:.1}  onset+offset {:.1}  frame {:.1}",
            c["onset"], c["offset"], c["onset_offset"], c["framewise"]
        );
    }
    Ok(())
}
