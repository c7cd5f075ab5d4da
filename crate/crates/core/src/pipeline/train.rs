//! Staged training. Every stage sees spectrograms, annotations and the
//! models of earlier stages only; each stage gets its own random
//! equalization of every excerpt.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{pitch_track, sha256_hex, tentative_f0s, PipelineConfig, PipelineModels, Stage};
use crate::dataset::{apply_eq, random_eq_filter, select_n1_examples, LoadedExcerpt, Split};
use crate::error::{Error, Result};
use crate::eval::{self, notes_to_frames, Matcher, Note, Task};
use crate::events::{
    contour_activations, curve_peaks, offset_curve_targets, offset_examples, offset_inputs, onset_input_matrix,
    onset_targets, smoothed_onset_curve, tune_offset_params, tune_onset_params, FeatureContext, OnsetCurve,
    OnsetTuneTrack, N3_HIDDEN, N3_INPUT, N5_HIDDEN, N5_INPUT,
};
use crate::frontend::{compute_spectrogram, MagnitudeSpectrogram, SpectrogramFamily};
use crate::kernel::{
    forward_select_kernel, train_kernel_weights, KernelExamples, PitchKernel, SelectionConfig, ShiftedStack,
    KERNEL_SIZE,
};
use crate::nn::{self, sigmoid, Model, NormalizationSpec, TrainConfig, TrainLog};
use crate::notes::{
    classify_notes, label_notes, replay_labels, score_all, tentative_notes, NoteContext, TentativeNote, N6_HIDDEN,
    N6_INPUT,
};
use crate::pitchogram::{label_t0s, n2_features, N2_INPUT};

/// Frames kept past the annotated offset in offset-tuning sequences.
const TUNE_TAIL_FRAMES: usize = 250;
const N2_SIZES: [usize; 4] = [N2_INPUT, 100, crate::contours::N2_HIDDEN, 1];

/// What a stage read while building its training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Spectrogram,
    Annotations,
    Model(Stage),
    /// An earlier iteration of the same stage.
    PreviousIteration,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub entries: Vec<(Stage, Source)>,
}

impl AccessLog {
    fn record(&mut self, stage: Stage, src: Source) {
        if !self.entries.contains(&(stage, src)) {
            self.entries.push((stage, src));
        }
    }

    pub fn sources(&self, stage: Stage) -> Vec<Source> {
        self.entries.iter().filter(|e| e.0 == stage).map(|e| e.1).collect()
    }

    /// True when no stage read a model of its own or a later stage.
    pub fn respects_dag(&self) -> bool {
        self.entries.iter().all(|&(s, src)| match src {
            Source::Model(m) => m < s,
            _ => true,
        })
    }
}

pub struct TrainOutcome {
    pub models: PipelineModels,
    pub access: AccessLog,
    /// One JSON object per logged event, as written to the log file.
    pub events: Vec<Value>,
}

/// Deterministic 64-bit seed from a list of integers.
fn mix(parts: &[u64]) -> u64 {
    let bytes: Vec<u8> = parts.iter().flat_map(|p| p.to_le_bytes()).collect();
    let h = sha2::Sha256::digest(&bytes);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

use sha2::Digest;

/// Row-major examples with one target each.
#[derive(Debug, Clone, Default, PartialEq)]
struct Block {
    cols: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

const BLOCK_MAGIC: &[u8; 4] = b"PTB1";

impl Block {
    fn new(cols: usize) -> Self {
        Block { cols, ..Default::default() }
    }

    fn push(&mut self, row: &[f64], y: f64) {
        debug_assert_eq!(row.len(), self.cols);
        self.x.extend_from_slice(row);
        self.y.push(y);
    }

    fn rows(&self) -> usize {
        self.y.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.cols..(i + 1) * self.cols]
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(20 + 8 * (self.x.len() + self.y.len()));
        b.extend_from_slice(BLOCK_MAGIC);
        b.extend_from_slice(&(self.cols as u64).to_le_bytes());
        b.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        for v in self.x.iter().chain(&self.y) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() < 20 || &b[..4] != BLOCK_MAGIC {
            return None;
        }
        let cols = u64::from_le_bytes(b[4..12].try_into().ok()?) as usize;
        let rows = u64::from_le_bytes(b[12..20].try_into().ok()?) as usize;
        let vals: Vec<f64> = b[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if vals.len() != rows * (cols + 1) {
            return None;
        }
        let (x, y) = vals.split_at(rows * cols);
        Some(Block { cols, x: x.to_vec(), y: y.to_vec() })
    }
}

/// Applies `f` to `0..n` on up to `jobs` threads; results keep index order.
fn par_map<T: Send, F: Fn(usize) -> Result<T> + Sync>(n: usize, jobs: usize, f: F) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

struct Track {
    name: String,
    split: Split,
    notes: Vec<Note>,
    magnitude: Array2<f64>,
    audio_hash: String,
}

struct Logger {
    file: Option<BufWriter<File>>,
    events: Vec<Value>,
    started: Instant,
}

impl Logger {
    fn event(&mut self, stage: Option<Stage>, event: &str, mut body: Value) -> Result<()> {
        if let Value::Object(m) = &mut body {
            m.insert("event".into(), json!(event));
            m.insert("stage".into(), json!(stage.map(|s| s.name())));
            m.insert("elapsed_s".into(), json!((self.started.elapsed().as_secs_f64() * 1e3).round() / 1e3));
        }
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &body)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        log::info!("{body}");
        self.events.push(body);
        Ok(())
    }
}

struct Trainer<'c> {
    cfg: &'c PipelineConfig,
    tracks: Vec<Track>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    models: PipelineModels,
    access: AccessLog,
    log: Logger,
}

fn entropy_of_rate(y: &[f64], p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -y.iter().map(|&t| t * p.ln() + (1.0 - t) * (1.0 - p).ln()).sum::<f64>() / y.len().max(1) as f64
}

fn best_val_loss(log: &TrainLog) -> f64 {
    log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
}

fn stage_err(stage: Stage, reason: String) -> Error {
    Error::Stage {
        stage: stage.name().into(),
        reason,
    }
}

fn check_classes(stage: Stage, y: &[f64], what: &str) -> Result<()> {
    let pos = y.iter().filter(|&&v| v >= 0.5).count();
    if pos == 0 || pos == y.len() {
        return Err(stage_err(
            stage,
            format!("{what} examples hold a single class ({pos} of {} positive)", y.len()),
        ));
    }
    Ok(())
}

impl<'c> Trainer<'c> {
    fn rng(&self, parts: &[u64]) -> ChaCha8Rng {
        let mut all = vec![self.cfg.seed];
        all.extend_from_slice(parts);
        ChaCha8Rng::seed_from_u64(mix(&all))
    }

    fn eq_seed(&self, stage: Stage, i: usize) -> u64 {
        mix(&[self.cfg.seed, 0xE9, stage.index() as u64, i as u64])
    }

    /// Spectrogram family of track `i` under the stage's equalization.
    fn family(&self, stage: Stage, i: usize) -> Result<SpectrogramFamily> {
        let m = &self.tracks[i].magnitude;
        let data = if self.cfg.eq_enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(self.eq_seed(stage, i));
            apply_eq(m, &random_eq_filter(&mut rng))?
        } else {
            m.clone()
        };
        Ok(SpectrogramFamily::from_magnitude(MagnitudeSpectrogram::from_data(data), false))
    }

    fn cache_path(&self, stage: Stage, step: &str, deps: &str, variant: &str, i: usize) -> Option<PathBuf> {
        let dir = self.cfg.cache_dir.as_ref()?;
        let t = &self.tracks[i];
        let key = format!(
            "{}|{step}|{}|{}|{deps}|{}|{}|{variant}|{}",
            stage.name(),
            t.name,
            t.audio_hash,
            self.cfg.eq_enabled,
            self.eq_seed(stage, i),
            self.cfg.seed
        );
        Some(dir.join(format!("{}.blk", sha256_hex(key.as_bytes()))))
    }

    /// Per-track example blocks, read from or written to the cache.
    fn blocks<F>(&self, stage: Stage, step: &str, deps: &str, variant: &str, f: F) -> Result<Vec<Block>>
    where
        F: Fn(usize, &SpectrogramFamily, &mut ChaCha8Rng) -> Result<Block> + Sync,
    {
        if let Some(dir) = &self.cfg.cache_dir {
            std::fs::create_dir_all(dir)?;
        }
        par_map(self.tracks.len(), self.cfg.jobs, |i| {
            let path = self.cache_path(stage, step, deps, variant, i);
            if let Some(b) = path.as_ref().and_then(|p| std::fs::read(p).ok()).and_then(|b| Block::from_bytes(&b)) {
                return Ok(b);
            }
            let fam = self.family(stage, i)?;
            let mut rng = self.rng(&[0x5A, stage.index() as u64, mix_str(step), i as u64]);
            let b = f(i, &fam, &mut rng)?;
            if let Some(p) = path {
                let tmp = p.with_extension(format!("tmp{i}"));
                std::fs::write(&tmp, b.to_bytes())?;
                std::fs::rename(&tmp, &p)?;
            }
            Ok(b)
        })
    }

    /// Per-track results without caching.
    fn pass<T: Send, F>(&self, stage: Stage, step: &str, f: F) -> Result<Vec<T>>
    where
        F: Fn(usize, &SpectrogramFamily, &mut ChaCha8Rng) -> Result<T> + Sync,
    {
        par_map(self.tracks.len(), self.cfg.jobs, |i| {
            let fam = self.family(stage, i)?;
            let mut rng = self.rng(&[0x5A, stage.index() as u64, mix_str(step), i as u64]);
            f(i, &fam, &mut rng)
        })
    }

    /// Stacks the blocks of the given tracks, keeping at most `max` random rows.
    fn assemble(&self, blocks: &[&Block], idx: &[usize], max: usize, salt: &[u64]) -> (Array2<f64>, Vec<f64>) {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let total: usize = idx.iter().map(|&i| blocks[i].rows()).sum();
        let mut keep: Option<Vec<bool>> = None;
        if total > max {
            let mut rng = self.rng(salt);
            let mut mask = vec![false; total];
            for r in sample(&mut rng, total, max) {
                mask[r] = true;
            }
            keep = Some(mask);
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        let mut r = 0;
        for &i in idx {
            let b = blocks[i];
            for k in 0..b.rows() {
                if keep.as_ref().is_none_or(|m| m[r]) {
                    x.extend_from_slice(b.row(k));
                    y.push(b.y[k]);
                }
                r += 1;
            }
        }
        let n = y.len();
        (Array2::from_shape_vec((n, cols), x).expect("rows of equal width"), y)
    }

    fn train_config(&self, stage: Stage, step: u64) -> TrainConfig {
        let b = self.cfg.budget(stage);
        TrainConfig::new(b.max_epochs, b.patience, mix(&[self.cfg.seed, 0x7E, stage.index() as u64, step]))
    }

    /// Normalizes, trains and checks one network.
    fn fit(&mut self, stage: Stage, step: u64, sizes: &[usize], blocks: &[Block], max: usize) -> Result<Model> {
        let refs: Vec<&Block> = blocks.iter().collect();
        let salt = |split: u64| vec![0xCA, stage.index() as u64, step, split];
        let (mut x, y) = self.assemble(&refs, &self.train_idx, max, &salt(0));
        let (mut vx, vy) = self.assemble(&refs, &self.val_idx, max, &salt(1));
        check_classes(stage, &y, "training")?;
        check_classes(stage, &vy, "validation")?;
        let norm = NormalizationSpec::fit(x.view())?;
        norm.apply_inplace(&mut x)?;
        norm.apply_inplace(&mut vx)?;
        let (net, tlog) = nn::fit(sizes, x.view(), &y, vx.view(), &vy, &self.train_config(stage, step))?;
        let rate = y.iter().sum::<f64>() / y.len() as f64;
        self.report_fit(stage, step, &y, &vy, &tlog, entropy_of_rate(&vy, rate))?;
        Ok(Model::new(net, Some(norm), stage.layout()))
    }

    fn report_fit(&mut self, stage: Stage, step: u64, y: &[f64], vy: &[f64], tlog: &TrainLog, base: f64) -> Result<()> {
        let val = best_val_loss(tlog);
        self.log.event(
            Some(stage),
            "fit",
            json!({
                "step": step,
                "n_train": y.len(),
                "n_val": vy.len(),
                "train_positive": y.iter().filter(|&&v| v >= 0.5).count(),
                "val_positive": vy.iter().filter(|&&v| v >= 0.5).count(),
                "best_epoch": tlog.best_epoch,
                "stop_reason": tlog.stop_reason,
                "val_loss": val,
                "base_rate_loss": base,
                "epochs": tlog.epochs,
            }),
        )?;
        if !(val < base) {
            return Err(stage_err(
                stage,
                format!("validation loss {val:.5} does not beat the base-rate loss {base:.5}"),
            ));
        }
        Ok(())
    }

    fn deps(&self, stage: Stage) -> String {
        let mut s: String = Stage::ALL
            .iter()
            .filter(|&&d| d < stage)
            .map(|&d| self.models.stage_hash(d))
            .collect::<Vec<_>>()
            .join(",");
        if stage >= Stage::N5 {
            s.push_str(&serde_json::to_string(&self.models.params).unwrap_or_default());
        }
        s
    }

    fn uses(&mut self, stage: Stage) {
        self.access.record(stage, Source::Spectrogram);
        self.access.record(stage, Source::Annotations);
        for d in Stage::ALL.into_iter().filter(|&d| d < stage) {
            self.access.record(stage, Source::Model(d));
        }
    }

    fn stage_n1(&mut self) -> Result<()> {
        self.uses(Stage::N1);
        let indices = PitchKernel::reference().indices;
        let stride = self.cfg.n1_frame_stride;
        let mut kernel: Option<PitchKernel> = None;
        for it in 0..self.cfg.n1_iterations {
            if it > 0 {
                self.access.record(Stage::N1, Source::PreviousIteration);
            }
            let prev = kernel.clone();
            let deps = prev.as_ref().map(|k| sha256_hex(k.to_text().as_bytes())).unwrap_or_default();
            let step = format!("it{it}");
            let blocks = self.blocks(Stage::N1, &step, &deps, &format!("stride{stride}"), |i, fam, _| {
                let refs = notes_to_frames(&self.tracks[i].notes, fam.n_frames());
                let det = prev.as_ref().map(|k| tentative_f0s(fam, k)).transpose()?;
                let stack = ShiftedStack::new(fam.l4.view(), &indices)?;
                let mut b = Block::new(KERNEL_SIZE + 1);
                for e in select_n1_examples(&refs, det.as_deref()) {
                    if (e.frame + it) % stride != 0 {
                        continue;
                    }
                    let p = e.pitch_bin();
                    let mut row = stack.cross_section(p, e.frame);
                    row.push(p as f64);
                    b.push(&row, e.target);
                }
                Ok(b)
            })?;
            let to_examples = |idx: &[usize]| -> Result<KernelExamples> {
                let mut ex = KernelExamples::new(indices.clone());
                for &i in idx {
                    let b = &blocks[i];
                    for k in 0..b.rows() {
                        let r = b.row(k);
                        ex.push_levels(&r[..KERNEL_SIZE], r[KERNEL_SIZE] as usize, b.y[k])?;
                    }
                }
                Ok(ex)
            };
            let (tr, va) = (to_examples(&self.train_idx)?, to_examples(&self.val_idx)?);
            check_classes(Stage::N1, tr.targets(), "training")?;
            check_classes(Stage::N1, va.targets(), "validation")?;
            let (k, tlog) = train_kernel_weights(&tr, &va, &indices, 1, &self.train_config(Stage::N1, it as u64))?;
            let rate = tr.targets().iter().sum::<f64>() / tr.len() as f64;
            let base = entropy_of_rate(va.targets(), rate);
            self.report_fit(Stage::N1, it as u64, tr.targets(), va.targets(), &tlog, base)?;
            kernel = Some(k);
        }
        let mut kernel = kernel.expect("at least one iteration");
        if self.cfg.n1_forward_select {
            kernel = self.select_kernel(&kernel)?;
        }
        self.models.kernel = Some(kernel);
        Ok(())
    }

    /// Re-selects the kernel offsets, starting from the harmonic partials.
    fn select_kernel(&mut self, current: &PitchKernel) -> Result<PitchKernel> {
        let sel = SelectionConfig {
            train: self.train_config(Stage::N1, 100),
            ..SelectionConfig::default()
        };
        let stride = self.cfg.n1_frame_stride;
        let parts = self.pass(Stage::N1, "select", |i, fam, _| {
            let refs = notes_to_frames(&self.tracks[i].notes, fam.n_frames());
            let det = tentative_f0s(fam, current)?;
            let mut ex = KernelExamples::candidate_window(&sel);
            for e in select_n1_examples(&refs, Some(&det)) {
                if e.frame % stride == 0 {
                    ex.push_from_l4(fam.l4.view(), e.frame, e.pitch_bin(), e.target);
                }
            }
            Ok(ex)
        })?;
        let join = |idx: &[usize]| -> Result<KernelExamples> {
            let mut ex = KernelExamples::candidate_window(&sel);
            for &i in idx {
                ex.extend(&parts[i])?;
            }
            Ok(ex)
        };
        let (tr, va) = (join(&self.train_idx)?, join(&self.val_idx)?);
        let (k, steps) = forward_select_kernel(&tr, &va, &PitchKernel::partials_only(), &sel)?;
        let chosen: Vec<i32> = steps.iter().map(|s| s.chosen).collect();
        self.log.event(Some(Stage::N1), "forward_selection", json!({ "chosen": chosen, "indices": k.indices }))?;
        Ok(k)
    }

    fn stage_n2(&mut self) -> Result<()> {
        self.uses(Stage::N2);
        let kernel = self.models.kernel()?.clone();
        let (kp, kn) = (self.cfg.n2_keep_positive, self.cfg.n2_keep_negative);
        let tol = self.cfg.match_spec.frame_cents;
        let blocks = self.blocks(Stage::N2, "", &self.deps(Stage::N2), &format!("{kp}/{kn}/{tol}"), |i, fam, rng| {
            let refs = notes_to_frames(&self.tracks[i].notes, fam.n_frames());
            let t0s = tentative_f0s(fam, &kernel)?;
            let stack = ShiftedStack::new(fam.l4.view(), &kernel.indices)?;
            let mut b = Block::new(N2_INPUT);
            let mut row = Vec::with_capacity(N2_INPUT);
            for (frame, ft) in t0s.iter().enumerate() {
                for (t, label) in ft.iter().zip(label_t0s(ft, &refs[frame], tol)) {
                    let Some(y) = label else { continue };
                    let keep = if y >= 0.5 { kp } else { kn };
                    if rng.random::<f64>() >= keep {
                        continue;
                    }
                    row.clear();
                    n2_features(&stack, frame, t.cents, ft, &mut row);
                    b.push(&row, y);
                }
            }
            Ok(b)
        })?;
        let m = self.fit(Stage::N2, 0, &N2_SIZES, &blocks, self.cfg.n2_max_examples)?;
        self.models.n2 = Some(m);
        Ok(())
    }

    fn stage_n3(&mut self) -> Result<()> {
        self.uses(Stage::N3);
        let kernel = self.models.kernel()?.clone();
        let n2 = self.models.require(Stage::N2)?.clone();
        let keep = self.cfg.n3_keep_negative;
        let blocks = self.blocks(Stage::N3, "", &self.deps(Stage::N3), &keep.to_string(), |i, fam, rng| {
            let notes = &self.tracks[i].notes;
            let pt = pitch_track(fam, &kernel, &n2)?;
            let ctx = FeatureContext::new(fam, &kernel.indices)?;
            let mut b = Block::new(N3_INPUT);
            for c in &pt.contours {
                let targets = onset_targets(c, notes, keep, rng);
                if targets.is_empty() {
                    continue;
                }
                let frames: Vec<usize> = targets.iter().map(|t| t.0).collect();
                let x = onset_input_matrix(&ctx, c, &frames)?;
                for (r, (_, y)) in x.rows().into_iter().zip(&targets) {
                    b.push(r.as_slice().expect("standard layout"), *y);
                }
            }
            Ok(b)
        })?;
        let sizes = [N3_INPUT, N3_HIDDEN[0], N3_HIDDEN[1], 1];
        let m = self.fit(Stage::N3, 0, &sizes, &blocks, self.cfg.n3_max_examples)?;
        self.models.n3 = Some(m);
        Ok(())
    }

    /// Trains the offset-curve network and tunes the onset picker on the
    /// onset network's curves of the training and validation tracks.
    fn stage_n4(&mut self) -> Result<()> {
        self.uses(Stage::N4);
        let kernel = self.models.kernel()?.clone();
        let n2 = self.models.require(Stage::N2)?.clone();
        let n3 = self.models.require(Stage::N3)?.clone();
        let keep = self.cfg.n4_keep_zero;
        let tune = self.cfg.onset_tune;
        let parts = self.pass(Stage::N4, "", |i, fam, rng| {
            let notes = &self.tracks[i].notes;
            let pt = pitch_track(fam, &kernel, &n2)?;
            let ctx = FeatureContext::new(fam, &kernel.indices)?;
            let mut b = Block::new(N3_INPUT);
            let mut curves = Vec::new();
            for c in &pt.contours {
                let frames: Vec<usize> = (0..c.len()).collect();
                let x = onset_input_matrix(&ctx, c, &frames)?;
                for (k, &y) in offset_curve_targets(c, notes).iter().enumerate() {
                    if y > 0.0 || rng.random::<f64>() < keep {
                        b.push(x.row(k).as_slice().expect("standard layout"), y);
                    }
                }
                if tune {
                    let oc = n3.forward_batch(x)?.prelogits.to_vec();
                    curves.push(OnsetCurve::from_contour(c, oc));
                }
            }
            Ok((b, OnsetTuneTrack { curves, refs: notes.clone() }))
        })?;
        let (blocks, tracks): (Vec<Block>, Vec<OnsetTuneTrack>) = parts.into_iter().unzip();
        if tune {
            let (p, score) = tune_onset_params(&tracks, &self.cfg.onset_grid, &self.cfg.match_spec);
            self.models.params.onset = p;
            self.log.event(Some(Stage::N4), "onset_params", json!({ "params": p, "score": score }))?;
        }
        let sizes = [N3_INPUT, N3_HIDDEN[0], N3_HIDDEN[1], 1];
        let m = self.fit(Stage::N4, 0, &sizes, &blocks, self.cfg.n4_max_examples)?;
        self.models.n4 = Some(m);
        Ok(())
    }

    fn stage_n5(&mut self) -> Result<()> {
        self.uses(Stage::N5);
        let kernel = self.models.kernel()?.clone();
        let n2 = self.models.require(Stage::N2)?.clone();
        let n3 = self.models.require(Stage::N3)?.clone();
        let n4 = self.models.require(Stage::N4)?.clone();
        let onset = self.models.params.onset;
        let spec = self.cfg.match_spec;
        let per_track = self.cfg.n5_tune_per_excerpt;
        let parts = self.pass(Stage::N5, "", |i, fam, rng| {
            let notes = &self.tracks[i].notes;
            let pt = pitch_track(fam, &kernel, &n2)?;
            let ctx = FeatureContext::new(fam, &kernel.indices)?;
            let mut b = Block::new(N5_INPUT);
            let mut seqs: Vec<(Array2<f64>, usize)> = Vec::new();
            for c in &pt.contours {
                let act = contour_activations(&ctx, c, &n3, &n4)?;
                let mut onsets: Vec<usize> = curve_peaks(&smoothed_onset_curve(&act.oc, &onset), onset.threshold)
                    .iter()
                    .map(|&p| (p.round().max(0.0) as usize).min(c.len() - 1))
                    .collect();
                onsets.dedup();
                for ex in offset_examples(c, &onsets, notes, &spec) {
                    let x = offset_inputs(&ctx, c, &act.ofc, ex.onset, c.len() - 1)?;
                    for &(k, y) in &ex.frames {
                        b.push(x.row(k - ex.onset).as_slice().expect("standard layout"), y);
                    }
                    // the annotated offset is where the target ramp reaches one half
                    if let Some(&(f, _)) = ex.frames.iter().find(|e| e.1 >= 0.5) {
                        let f = f - ex.onset;
                        let len = (f + TUNE_TAIL_FRAMES).min(x.nrows());
                        seqs.push((x.slice(ndarray::s![..len, ..]).to_owned(), f));
                    }
                }
            }
            if seqs.len() > per_track {
                let mut pick: Vec<usize> = sample(rng, seqs.len(), per_track).into_vec();
                pick.sort_unstable();
                let mut all: Vec<Option<(Array2<f64>, usize)>> = seqs.into_iter().map(Some).collect();
                seqs = pick.into_iter().map(|j| all[j].take().expect("distinct")).collect();
            }
            Ok((b, seqs))
        })?;
        let (blocks, seqs): (Vec<Block>, Vec<Vec<(Array2<f64>, usize)>>) = parts.into_iter().unzip();
        let sizes = [N5_INPUT, N5_HIDDEN[0], 1];
        let m = self.fit(Stage::N5, 0, &sizes, &blocks, self.cfg.n5_max_examples)?;
        if self.cfg.offset_tune {
            let mut tune: Vec<(Vec<f64>, usize)> = Vec::new();
            for &i in &self.train_idx {
                for (x, f) in &seqs[i] {
                    let out = m.forward_batch(x.clone())?.prelogits.iter().map(|&z| sigmoid(z)).collect();
                    tune.push((out, *f));
                }
            }
            if !tune.is_empty() {
                let (p, dist) = tune_offset_params(&tune, &self.cfg.offset_sigmas, &self.cfg.offset_thresholds);
                self.models.params.offset = p;
                self.log.event(
                    Some(Stage::N5),
                    "offset_params",
                    json!({ "params": p, "mean_abs_frames": dist, "sequences": tune.len() }),
                )?;
            }
        }
        self.models.n5 = Some(m);
        Ok(())
    }

    fn stage_n6(&mut self) -> Result<()> {
        self.uses(Stage::N6);
        let kernel = self.models.kernel()?.clone();
        let n2 = self.models.require(Stage::N2)?.clone();
        let n3 = self.models.require(Stage::N3)?.clone();
        let n4 = self.models.require(Stage::N4)?.clone();
        let n5 = self.models.require(Stage::N5)?.clone();
        let params = self.models.params;
        let spec = self.cfg.match_spec;
        let stop = self.cfg.stop_probability;

        // everything up to the tentative notes of one track
        let with_notes = |fam: &SpectrogramFamily, run: &mut dyn FnMut(&NoteContext, Vec<TentativeNote>) -> Result<()>| {
            let pt = pitch_track(fam, &kernel, &n2)?;
            let ctx = FeatureContext::new(fam, &kernel.indices)?;
            let acts = pt
                .contours
                .iter()
                .map(|c| contour_activations(&ctx, c, &n3, &n4))
                .collect::<Result<Vec<_>>>()?;
            let nc = NoteContext::new(&ctx, &pt.t0s, &pt.contours, &acts, &params.onset);
            let notes = tentative_notes(&nc, &n5, &params.onset, &params.offset)?;
            run(&nc, notes)
        };
        let unshifted =
            |nc: &NoteContext, n: &TentativeNote| Note::new(nc.onset_seconds(n), nc.offset_seconds(n), n.cents / 100.0);

        let deps = self.deps(Stage::N6);
        let step1 = self.blocks(Stage::N6, "step1", &deps, "", |i, fam, _| {
            let mut b = Block::new(N6_INPUT);
            with_notes(fam, &mut |nc, mut notes| {
                score_all(nc, &mut notes, None)?;
                let est: Vec<Note> = notes.iter().map(|n| unshifted(nc, n)).collect();
                for (n, y) in notes.iter().zip(label_notes(&est, &self.tracks[i].notes, &spec, Matcher::Greedy)) {
                    b.push(&n.features, y as u8 as f64);
                }
                Ok(())
            })?;
            Ok(b)
        })?;
        let sizes = [N6_INPUT, N6_HIDDEN[0], 1];
        let v1 = self.fit(Stage::N6, 1, &sizes, &step1, self.cfg.n6_max_examples)?;

        let deps2 = format!("{deps}|{}", sha256_hex(&serde_json::to_vec(&v1)?));
        let step2 = self.blocks(Stage::N6, "step2", &deps2, &stop.to_string(), |i, fam, _| {
            let mut b = Block::new(N6_INPUT);
            with_notes(fam, &mut |nc, notes| {
                let (notes, trace) = classify_notes(nc, notes, &v1, stop)?;
                let est: Vec<Note> = notes.iter().map(|n| unshifted(nc, n)).collect();
                for (j, y) in replay_labels(&est, &trace.order, &self.tracks[i].notes, &spec, Matcher::Greedy) {
                    b.push(&notes[j].features, y as u8 as f64);
                }
                Ok(())
            })?;
            Ok(b)
        })?;
        let v2 = self.fit(Stage::N6, 2, &sizes, &step2, self.cfg.n6_max_examples)?;

        if self.cfg.stop_tune && !self.cfg.stop_grid.is_empty() {
            self.tune_stop(&v2, &with_notes)?;
        }
        self.models.n6 = Some(v2);
        Ok(())
    }

    /// Picks the stop probability with the best pooled onset F-measure on
    /// the validation tracks. One removal run at the largest grid value
    /// yields the kept set of every smaller value as a prefix.
    #[allow(clippy::type_complexity)]
    fn tune_stop(
        &mut self,
        n6: &Model,
        with_notes: &(dyn Fn(&SpectrogramFamily, &mut dyn FnMut(&NoteContext, Vec<TentativeNote>) -> Result<()>) -> Result<()>
              + Sync),
    ) -> Result<()> {
        let grid = self.cfg.stop_grid.clone();
        let top = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let spec = self.cfg.match_spec;
        let val = self.val_idx.clone();
        let counts = par_map(val.len(), self.cfg.jobs, |v| {
            let i = val[v];
            let fam = self.family(Stage::N6, i)?;
            let mut out = vec![eval::Counts::default(); grid.len()];
            with_notes(&fam, &mut |nc, notes| {
                let (notes, trace) = classify_notes(nc, notes, n6, top)?;
                let est: Vec<Note> = notes.iter().map(|n| nc.output_note(n)).collect();
                for (g, &s) in grid.iter().enumerate() {
                    let cut = trace
                        .order
                        .iter()
                        .position(|&w| trace.probabilities[w] >= s)
                        .unwrap_or(trace.order.len());
                    let mut kept = vec![true; est.len()];
                    trace.order[..cut].iter().for_each(|&w| kept[w] = false);
                    let sub: Vec<Note> = est.iter().zip(&kept).filter(|p| *p.1).map(|p| *p.0).collect();
                    out[g] = eval::note_counts(&sub, &self.tracks[i].notes, Task::Onset, &spec, Matcher::Greedy);
                }
                Ok(())
            })?;
            Ok(out)
        })?;
        let mut scores = Vec::new();
        for g in 0..grid.len() {
            let mut c = eval::Counts::default();
            counts.iter().for_each(|t| c.add(t[g]));
            scores.push(c.report().f);
        }
        // ties go to the value nearest the default
        let default = crate::notes::STOP_PROBABILITY;
        let best = (0..grid.len())
            .max_by(|&a, &b| {
                scores[a]
                    .total_cmp(&scores[b])
                    .then((grid[b] - default).abs().total_cmp(&(grid[a] - default).abs()))
            })
            .expect("non-empty grid");
        self.models.params.stop_probability = grid[best];
        self.log.event(
            Some(Stage::N6),
            "stop_probability",
            json!({ "grid": grid, "onset_f": scores, "chosen": grid[best] }),
        )?;
        Ok(())
    }
}

fn mix_str(s: &str) -> u64 {
    mix(&s.bytes().map(u64::from).collect::<Vec<_>>())
}

/// Trains the configured stages on a corpus in order. Training excerpts fit
/// the weights; validation excerpts drive early stopping.
pub fn train_all(corpus: &[LoadedExcerpt], cfg: &PipelineConfig, log_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_n = corpus.iter().filter(|e| e.split == Split::Train).count();
    let val_n = corpus.iter().filter(|e| e.split == Split::Validation).count();
    if train_n == 0 || val_n == 0 {
        return Err(Error::CorpusTooSmall(format!(
            "need training and validation excerpts, got {train_n} and {val_n}"
        )));
    }
    let file = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut log = Logger {
        file,
        events: Vec::new(),
        started: Instant::now(),
    };
    log.event(None, "config", json!({ "config": cfg.to_pairs().into_iter().collect::<std::collections::BTreeMap<_, _>>() }))?;

    let used: Vec<&LoadedExcerpt> = corpus.iter().filter(|e| e.split != Split::Test).collect();
    let tracks = par_map(used.len(), cfg.jobs, |i| {
        let e = used[i];
        let m = compute_spectrogram(&e.audio, e.sample_rate)?;
        let bytes: Vec<u8> = e.audio.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Track {
            name: e.name.clone(),
            split: e.split,
            notes: e.notes(),
            magnitude: m.data,
            audio_hash: sha256_hex(&bytes),
        })
    })?;
    let idx = |s: Split| -> Vec<usize> { (0..tracks.len()).filter(|&i| tracks[i].split == s).collect() };
    let (train_idx, val_idx) = (idx(Split::Train), idx(Split::Validation));
    log.event(
        None,
        "corpus",
        json!({ "train": train_idx.len(), "validation": val_idx.len(), "frames": tracks.iter().map(|t| t.magnitude.nrows()).sum::<usize>() }),
    )?;
    let mut t = Trainer {
        cfg,
        tracks,
        train_idx,
        val_idx,
        models: PipelineModels {
            seed: Some(cfg.seed),
            params: super::TunedParams {
                stop_probability: cfg.stop_probability,
                ..Default::default()
            },
            ..Default::default()
        },
        access: AccessLog::default(),
        log,
    };
    for &s in &cfg.stages {
        match s {
            Stage::N1 => t.stage_n1()?,
            Stage::N2 => t.stage_n2()?,
            Stage::N3 => t.stage_n3()?,
            Stage::N4 => t.stage_n4()?,
            Stage::N5 => t.stage_n5()?,
            Stage::N6 => t.stage_n6()?,
        }
        let hash = t.models.stage_hash(s);
        t.log.event(Some(s), "done", json!({ "sha256": hash }))?;
    }
    Ok(TrainOutcome {
        models: t.models,
        access: t.access,
        events: t.log.events,
    })
}
