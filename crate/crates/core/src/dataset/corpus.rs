//! Programmatic chorale-style scores, their augmented versions, rendering and
//! the on-disk corpus layout (WAV + annotation JSON + MIDI + manifest).

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::midi::{adjust_annotations, preprocess_midi, Annotation, MidiNote, MidiScore};
use super::synth::{presets, Group, Preset, Synth};
use crate::audio;
use crate::error::{Error, Result};
use crate::eval::Note;
use crate::frontend::SAMPLE_RATE;

/// Bass, tenor, alto and soprano ranges (MIDI, inclusive).
pub const VOICE_RANGES: [(u8, u8); 4] = [(40, 55), (48, 64), (55, 69), (60, 79)];
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Base compositions; each yields `versions` excerpts.
    pub n_scores: usize,
    pub versions: usize,
    pub min_voices: usize,
    pub max_voices: usize,
    pub excerpt_s: f64,
    /// Share of compositions rendered with one struck or plucked instrument.
    pub attacked_fraction: f64,
    pub tempo_range: (f64, f64),
    pub max_transpose: i32,
    pub onset_jitter_s: f64,
    pub validation_fraction: f64,
    pub bpm_range: (f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_scores: 8,
            versions: 5,
            min_voices: 2,
            max_voices: 4,
            excerpt_s: 10.0,
            attacked_fraction: 0.2,
            tempo_range: (0.9, 1.15),
            max_transpose: 2,
            onset_jitter_s: 0.01,
            validation_fraction: 0.1,
            bpm_range: (66.0, 96.0),
        }
    }
}

impl CorpusConfig {
    /// Sets one `corpus.*` key; ranges are written `lo,hi`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::InvalidArgument(format!("config key `{key}`: cannot parse `{v}`"));
        let pair = || -> Result<(f64, f64)> {
            let (a, b) = v.split_once(',').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        };
        match key {
            "corpus.seed" => self.seed = v.parse().map_err(|_| bad())?,
            "corpus.n_scores" => self.n_scores = v.parse().map_err(|_| bad())?,
            "corpus.versions" => self.versions = v.parse().map_err(|_| bad())?,
            "corpus.min_voices" => self.min_voices = v.parse().map_err(|_| bad())?,
            "corpus.max_voices" => self.max_voices = v.parse().map_err(|_| bad())?,
            "corpus.excerpt_s" => self.excerpt_s = v.parse().map_err(|_| bad())?,
            "corpus.attacked_fraction" => self.attacked_fraction = v.parse().map_err(|_| bad())?,
            "corpus.tempo_range" => self.tempo_range = pair()?,
            "corpus.max_transpose" => self.max_transpose = v.parse().map_err(|_| bad())?,
            "corpus.onset_jitter_s" => self.onset_jitter_s = v.parse().map_err(|_| bad())?,
            "corpus.validation_fraction" => self.validation_fraction = v.parse().map_err(|_| bad())?,
            "corpus.bpm_range" => self.bpm_range = pair()?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        if !(1..=VOICE_RANGES.len()).contains(&self.min_voices) || self.max_voices < self.min_voices || self.max_voices > VOICE_RANGES.len() {
            return Err(Error::InvalidArgument(format!(
                "voices must satisfy 1 <= min_voices <= max_voices <= {}",
                VOICE_RANGES.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excerpt {
    pub name: String,
    pub split: Split,
    pub score: MidiScore,
}

/// An excerpt after preprocessing, with its audio and delay-corrected annotations.
#[derive(Debug, Clone)]
pub struct RenderedExcerpt {
    pub name: String,
    pub split: Split,
    pub score: MidiScore,
    pub audio: Vec<f64>,
    pub annotations: Vec<Annotation>,
}

impl RenderedExcerpt {
    pub fn notes(&self) -> Vec<Note> {
        self.annotations.iter().map(Annotation::note).collect()
    }
}

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

/// Next scale degree (0-based) of a simple functional progression.
fn next_degree(rng: &mut ChaCha8Rng, d: usize) -> usize {
    let choices: &[usize] = match d {
        0 => &[3, 4, 5, 1, 3],
        1 => &[4, 4, 6],
        2 => &[5, 3],
        3 => &[4, 0, 1],
        4 => &[0, 0, 5],
        5 => &[1, 3, 4],
        _ => &[0],
    };
    *choices.choose(rng).expect("non-empty")
}

fn chord_classes(tonic: u8, scale: &[u8; 7], degree: usize) -> [u8; 3] {
    [0, 2, 4].map(|k| (tonic + scale[(degree + k) % 7]) % 12)
}

/// Pitch of `range` in one of `classes` closest to `prev`, avoiding `taken`.
fn voice_pitch(rng: &mut ChaCha8Rng, range: (u8, u8), classes: &[u8], prev: Option<u8>, taken: &[u8]) -> Option<u8> {
    let mut options: Vec<u8> = (range.0..=range.1)
        .filter(|p| classes.contains(&(p % 12)) && !taken.contains(p))
        .collect();
    if options.is_empty() {
        return None;
    }
    let target = prev.map(|p| p as i32).unwrap_or((range.0 as i32 + range.1 as i32) / 2);
    options.sort_by_key(|&p| ((p as i32 - target).abs(), p));
    let k = if options.len() > 1 && rng.random_bool(0.25) { 1 } else { 0 };
    Some(options[k])
}

/// A homophonic chorale-like score with `voices` parts on channels 0.., bass first.
pub fn compose(rng: &mut ChaCha8Rng, voices: usize, seconds: f64, bpm: f64) -> Vec<(usize, u8, f64, f64, u8)> {
    let voices = voices.clamp(1, 4);
    let parts: Vec<usize> = match voices {
        1 => vec![3],
        2 => vec![0, 3],
        3 => vec![0, 2, 3],
        _ => vec![0, 1, 2, 3],
    };
    let tonic = rng.random_range(0..12u8);
    let scale = if rng.random_bool(0.6) { &MAJOR } else { &MINOR };
    let beat = 60.0 / bpm;
    let mut t = 0.0;
    let mut degree = 0usize;
    let mut prev: Vec<Option<u8>> = vec![None; parts.len()];
    // (voice, pitch, onset, offset, velocity)
    let mut notes: Vec<(usize, u8, f64, f64, u8)> = Vec::new();
    while t < seconds - beat {
        let len = if rng.random_bool(0.3) { 2.0 * beat } else { beat };
        let classes = chord_classes(tonic, scale, degree);
        let mut taken: Vec<u8> = Vec::new();
        for (v, &part) in parts.iter().enumerate() {
            let allowed: Vec<u8> = if part == 0 && rng.random_bool(0.7) {
                vec![classes[0]]
            } else {
                classes.to_vec()
            };
            let Some(p) = voice_pitch(rng, VOICE_RANGES[part], &allowed, prev[v], &taken) else {
                continue;
            };
            taken.push(p);
            let velocity = rng.random_range(70..=110u8);
            let held = prev[v] == Some(p) && rng.random_bool(0.5);
            if held {
                if let Some(last) = notes.iter_mut().rev().find(|n| n.0 == v) {
                    last.3 = t + len;
                    continue;
                }
            }
            if len > beat && rng.random_bool(0.3) {
                // two quavers: chord tone then a step toward the next chord
                let step = if rng.random_bool(0.5) { 1 } else { -1 };
                let idx = scale.iter().position(|&s| (tonic + s) % 12 == p % 12);
                let passing = idx.map(|i| {
                    let j = (i as i32 + step).rem_euclid(7) as usize;
                    let pc = (tonic + scale[j]) % 12;
                    let base = p as i32 - (p % 12) as i32 + pc as i32;
                    [base - 12, base, base + 12]
                        .into_iter()
                        .min_by_key(|c| (c - p as i32).abs())
                        .unwrap_or(p as i32) as u8
                });
                let half = len / 2.0;
                notes.push((v, p, t, t + half, velocity));
                let q = passing.filter(|q| !taken.contains(q) && *q != p).unwrap_or(p);
                taken.push(q);
                notes.push((v, q, t + half, t + len, velocity));
                prev[v] = Some(q);
            } else {
                notes.push((v, p, t, t + len, velocity));
                prev[v] = Some(p);
            }
        }
        t += len;
        degree = next_degree(rng, degree);
    }
    notes
}

fn weighted_attacked(rng: &mut ChaCha8Rng) -> Group {
    let total: f64 = Group::ATTACKED.iter().map(|g| g.1).sum();
    let mut x = rng.random_range(0.0..total);
    for (g, w) in Group::ATTACKED {
        if x < w {
            return g;
        }
        x -= w;
    }
    Group::Piano
}

fn preset_of(group: Group) -> Preset {
    presets().into_iter().find(|p| p.group == group).expect("every group has a preset")
}

/// Programs for each voice: one attacked instrument for all voices, or a
/// distinct sustained group per voice.
fn instrumentation(rng: &mut ChaCha8Rng, voices: usize, attacked: bool) -> Vec<u8> {
    if attacked {
        vec![preset_of(weighted_attacked(rng)).program; voices]
    } else {
        let mut groups = Group::SUSTAINED.to_vec();
        groups.shuffle(rng);
        (0..voices).map(|v| preset_of(groups[v % groups.len()]).program).collect()
    }
}

/// Applies a tempo factor, a transposition and per-onset jitter.
pub fn make_version(base: &[(usize, u8, f64, f64, u8)], programs: &[u8], tempo: f64, transpose: i32, jitter: f64, rng: &mut ChaCha8Rng) -> MidiScore {
    let mut score = MidiScore::default();
    for &(v, p, on, off, vel) in base {
        let j = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
        let onset = (on / tempo + j).max(0.0);
        let offset = off / tempo;
        if offset <= onset {
            continue;
        }
        score.notes.push(MidiNote {
            pitch: (p as i32 + transpose).clamp(0, 127) as u8,
            onset,
            offset,
            channel: v as u8,
            program: programs[v],
            velocity: vel,
        });
    }
    score.sort();
    score
}

/// Compositions and their versions; about `validation_fraction` of all
/// excerpts are marked for validation.
pub fn generate_excerpts(cfg: &CorpusConfig) -> Vec<Excerpt> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for s in 0..cfg.n_scores {
        let mut srng = ChaCha8Rng::seed_from_u64(rng.random());
        let voices = srng.random_range(cfg.min_voices..=cfg.max_voices.max(cfg.min_voices));
        let bpm = srng.random_range(cfg.bpm_range.0..=cfg.bpm_range.1);
        let attacked = srng.random_bool(cfg.attacked_fraction.clamp(0.0, 1.0));
        let base = compose(&mut srng, voices, cfg.excerpt_s * cfg.tempo_range.0, bpm);
        for v in 0..cfg.versions.max(1) {
            let tempo = srng.random_range(cfg.tempo_range.0..=cfg.tempo_range.1);
            let transpose = srng.random_range(-cfg.max_transpose..=cfg.max_transpose);
            let programs = instrumentation(&mut srng, voices, attacked);
            let score = make_version(&base, &programs, tempo, transpose, cfg.onset_jitter_s, &mut srng);
            out.push(Excerpt {
                name: format!("s{:03}_v{}", s, v),
                split: Split::Train,
                score,
            });
        }
    }
    let n_val = (out.len() as f64 * cfg.validation_fraction).round() as usize;
    let n_val = if out.len() >= 2 { n_val.max(1).min(out.len() - 1) } else { 0 };
    let mut idx: Vec<usize> = (0..out.len()).collect();
    idx.shuffle(&mut rng);
    for &i in &idx[..n_val] {
        out[i].split = Split::Validation;
    }
    out
}

pub fn render_excerpt(ex: &Excerpt, synth: &dyn Synth) -> Result<RenderedExcerpt> {
    let delays = synth.delay_table();
    let score = preprocess_midi(&ex.score, &delays)?;
    let audio = synth.render(&score, SAMPLE_RATE);
    let annotations = adjust_annotations(&score, &delays)?;
    Ok(RenderedExcerpt {
        name: ex.name.clone(),
        split: ex.split,
        score,
        audio,
        annotations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub wav: String,
    pub annotations: String,
    pub midi: String,
    pub n_notes: usize,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sample_rate: u32,
    pub config: Option<CorpusConfig>,
    pub excerpts: Vec<ManifestEntry>,
}

/// Renders every excerpt into `dir` and writes the manifest.
pub fn write_corpus(dir: &Path, cfg: Option<&CorpusConfig>, excerpts: &[Excerpt], synth: &dyn Synth) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for ex in excerpts {
        let r = render_excerpt(ex, synth)?;
        let entry = ManifestEntry {
            name: r.name.clone(),
            split: r.split,
            wav: format!("{}.wav", r.name),
            annotations: format!("{}.json", r.name),
            midi: format!("{}.mid", r.name),
            n_notes: r.annotations.len(),
            duration_s: r.audio.len() as f64 / SAMPLE_RATE as f64,
        };
        audio::write_wav(dir.join(&entry.wav), &r.audio, SAMPLE_RATE)?;
        std::fs::write(dir.join(&entry.annotations), serde_json::to_vec_pretty(&r.annotations)?)?;
        r.score.save(dir.join(&entry.midi))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        format_version: 1,
        sample_rate: SAMPLE_RATE,
        config: cfg.cloned(),
        excerpts: entries,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn build_corpus(dir: &Path, cfg: &CorpusConfig, synth: &dyn Synth) -> Result<Manifest> {
    write_corpus(dir, Some(cfg), &generate_excerpts(cfg), synth)
}

/// A corpus loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedExcerpt {
    pub name: String,
    pub split: Split,
    pub audio: Vec<f64>,
    pub sample_rate: u32,
    pub annotations: Vec<Annotation>,
}

impl LoadedExcerpt {
    pub fn notes(&self) -> Vec<Note> {
        self.annotations.iter().map(Annotation::note).collect()
    }
}

impl From<RenderedExcerpt> for LoadedExcerpt {
    fn from(r: RenderedExcerpt) -> Self {
        LoadedExcerpt {
            name: r.name,
            split: r.split,
            audio: r.audio,
            sample_rate: SAMPLE_RATE,
            annotations: r.annotations,
        }
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_corpus(dir: &Path) -> Result<Vec<LoadedExcerpt>> {
    let path: PathBuf = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    manifest
        .excerpts
        .iter()
        .map(|e| {
            let (audio, sample_rate) = audio::read_wav(dir.join(&e.wav))?;
            Ok(LoadedExcerpt {
                name: e.name.clone(),
                split: e.split,
                audio,
                sample_rate,
                annotations: read_annotations(&dir.join(&e.annotations))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::AdditiveSynth;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 5,
            n_scores: 3,
            excerpt_s: 3.0,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn excerpts_respect_ranges_and_splits() {
        let ex = generate_excerpts(&small());
        assert_eq!(ex.len(), 15);
        let n_val = ex.iter().filter(|e| e.split == Split::Validation).count();
        assert_eq!(n_val, 2);
        for e in &ex {
            assert!(!e.score.notes.is_empty());
            for n in &e.score.notes {
                assert!((VOICE_RANGES[0].0 - 4..=VOICE_RANGES[3].1 + 4).contains(&n.pitch));
                assert!(n.onset < n.offset);
            }
        }
        assert_eq!(generate_excerpts(&small()), ex);
    }

    #[test]
    fn sustained_voices_use_distinct_groups() {
        let cfg = CorpusConfig { attacked_fraction: 0.0, min_voices: 4, ..small() };
        for e in generate_excerpts(&cfg) {
            let mut programs: Vec<(u8, u8)> = e.score.notes.iter().map(|n| (n.channel, n.program)).collect();
            programs.sort_unstable();
            programs.dedup();
            let mut p: Vec<u8> = programs.iter().map(|x| x.1).collect();
            p.sort_unstable();
            p.dedup();
            assert_eq!(p.len(), programs.len());
        }
    }

    #[test]
    fn no_unisons_within_a_chord() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let notes = compose(&mut rng, 4, 20.0, 80.0);
        for a in &notes {
            for b in &notes {
                if a.0 != b.0 && a.1 == b.1 {
                    let overlap = a.2.max(b.2) < a.3.min(b.3);
                    assert!(!overlap, "{a:?} {b:?}");
                }
            }
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { n_scores: 1, versions: 2, excerpt_s: 1.5, ..small() };
        let m = build_corpus(dir.path(), &cfg, &AdditiveSynth::new(1)).unwrap();
        assert_eq!(m.excerpts.len(), 2);
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for (l, e) in loaded.iter().zip(&m.excerpts) {
            assert_eq!(l.annotations.len(), e.n_notes);
            assert_eq!(l.sample_rate, SAMPLE_RATE);
            assert!(l.audio.iter().any(|&v| v != 0.0));
            assert!(dir.path().join(&e.midi).exists());
        }
    }
}
