//! Sparse pitch kernel, DCT whitening of the Tentogram, the shifted-spectrum
//! summation that produces the Tentogram, and forward selection of kernel bins.

use std::path::Path;
use std::sync::OnceLock;

use log::info;
use ndarray::{Array2, Array3, ArrayView2};

use crate::dsp;
use crate::error::{Error, Result};
use crate::frontend::{BINS_PER_OCTAVE, L4_BINS, UPSAMPLE};
use crate::nn::{self, TrainConfig};

/// Pitch bins of the Tentogram (5 cents each, MIDI 25.85 to 103.95).
pub const PITCH_BINS: usize = 1563;
pub const PITCH_MIN_MIDI: f64 = 25.85;
pub const PITCH_MAX_MIDI: f64 = 103.95;
pub const PITCH_BIN_CENTS: f64 = 5.0;
/// Pitch bin `p` lies at L4 bin `p - L4_OFFSET`.
pub const L4_OFFSET: isize = 3;
pub const N_DCT: usize = 15;
pub const KERNEL_SIZE: usize = 50;
pub const N_PARTIALS: u32 = 11;
/// Constant added to `W + K_b` before clamping the Tentogram.
pub const TENTOGRAM_OFFSET: f64 = 3.5;
pub const TENTOGRAM_SIGMA: f64 = 3.0;
pub const TENTOGRAM_HALF_WIDTH: usize = 5;

pub fn pitch_bin_to_midi(p: f64) -> f64 {
    PITCH_MIN_MIDI + p * PITCH_BIN_CENTS / 100.0
}

pub fn midi_to_pitch_bin(midi: f64) -> f64 {
    (midi - PITCH_MIN_MIDI) * 100.0 / PITCH_BIN_CENTS
}

/// Offset of the `n`th partial: `log2(n) * bpo * uf` rounded to the nearest integer.
pub fn partial_bin_index(n: u32, bpo: usize, uf: usize) -> i32 {
    assert!(n >= 1, "partial numbers start at 1");
    ((n as f64).log2() * (bpo * uf) as f64).round() as i32
}

/// Offsets of partials 1..=11 on the L4 grid.
pub fn partial_offsets() -> Vec<i32> {
    (1..=N_PARTIALS)
        .map(|n| partial_bin_index(n, BINS_PER_OCTAVE, UPSAMPLE))
        .collect()
}

/// 1-based column of the DCT basis for a MIDI pitch.
pub fn dct_index(midi: f64) -> Result<usize> {
    if !(PITCH_MIN_MIDI - 1e-9..=PITCH_MAX_MIDI + 1e-9).contains(&midi) {
        return Err(Error::PitchOutOfRange(midi));
    }
    Ok((((midi - 25.8) * 20.0).round() as usize).clamp(1, PITCH_BINS))
}

/// DCT-III components 1..=15 evaluated on the 1563 pitch bins (`15 x 1563`).
pub fn dct_basis() -> &'static Array2<f64> {
    static BASIS: OnceLock<Array2<f64>> = OnceLock::new();
    BASIS.get_or_init(|| {
        Array2::from_shape_fn((N_DCT, PITCH_BINS), |(c, p)| {
            (std::f64::consts::PI * (c + 1) as f64 * (p as f64 + 0.5) / PITCH_BINS as f64).cos()
        })
    })
}

/// The 15 DCT features of pitch bin `p` (0-based).
pub fn dct_features(p: usize) -> [f64; N_DCT] {
    let b = dct_basis();
    std::array::from_fn(|c| b[[c, p]])
}

/// `W = W_DCT x B_DCT`.
pub fn whitening_vector(dct_weights: &[f64]) -> Result<Vec<f64>> {
    if dct_weights.len() != N_DCT {
        return Err(Error::DimensionMismatch {
            expected: N_DCT,
            got: dct_weights.len(),
        });
    }
    let w = ndarray::ArrayView1::from(dct_weights);
    Ok(w.dot(dct_basis()).to_vec())
}

/// Sparse kernel: L4 offsets, their weights, the bias and optional whitening weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchKernel {
    pub indices: Vec<i32>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dct_weights: Option<Vec<f64>>,
}

const KERNEL_MAGIC: &str = "pitchkernel";
const KERNEL_VERSION: u32 = 1;
const TABLE_A1: &str = include_str!("../fixtures/table_a1.kernel");

impl PitchKernel {
    pub fn new(indices: Vec<i32>, weights: Vec<f64>, bias: f64, dct_weights: Option<Vec<f64>>) -> Result<Self> {
        let k = PitchKernel {
            indices,
            weights,
            bias,
            dct_weights,
        };
        k.validate()?;
        Ok(k)
    }

    /// The eleven partial offsets with zero weights; the start of forward selection.
    pub fn partials_only() -> Self {
        let indices = partial_offsets();
        let n = indices.len();
        PitchKernel {
            indices,
            weights: vec![0.0; n],
            bias: 0.0,
            dct_weights: None,
        }
    }

    /// The published 50-bin kernel and its constant term.
    pub fn reference() -> Self {
        Self::parse(TABLE_A1, "table_a1.kernel").expect("bundled kernel fixture is valid")
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.indices.len(),
                got: self.weights.len(),
            });
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("kernel indices must be strictly increasing".into()));
        }
        for p in partial_offsets() {
            if self.indices.binary_search(&p).is_err() {
                return Err(Error::InvalidArgument(format!("kernel lacks partial offset {p}")));
            }
        }
        if let Some(d) = &self.dct_weights {
            if d.len() != N_DCT {
                return Err(Error::DimensionMismatch {
                    expected: N_DCT,
                    got: d.len(),
                });
            }
        }
        Ok(())
    }

    /// Whitening vector `W`; zero when no DCT weights are present.
    pub fn whitening(&self) -> Vec<f64> {
        match &self.dct_weights {
            Some(d) => whitening_vector(d).expect("validated length"),
            None => vec![0.0; PITCH_BINS],
        }
    }

    /// Parses the versioned text format.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_string(),
            reason,
        };
        let mut lines = text
            .lines()
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, l)) if l == format!("{KERNEL_MAGIC} {KERNEL_VERSION}") => {}
            Some((n, l)) => return Err(bad(format!("line {}: unsupported header `{l}`", n + 1))),
            None => return Err(bad("empty kernel file".into())),
        }
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        let mut bias = None;
        let mut dct = None;
        for (n, line) in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let values: Vec<&str> = parts.collect();
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("line {}: bad number `{s}`", n + 1)))
            };
            match (key, values.as_slice()) {
                ("bias", [v]) => bias = Some(num(v)?),
                ("bin", [i, w]) => {
                    indices.push(
                        i.parse::<i32>()
                            .map_err(|_| bad(format!("line {}: bad bin index `{i}`", n + 1)))?,
                    );
                    weights.push(num(w)?);
                }
                ("dct", vals) => dct = Some(vals.iter().map(|v| num(v)).collect::<Result<Vec<_>>>()?),
                _ => return Err(bad(format!("line {}: unrecognized `{line}`", n + 1))),
            }
        }
        let bias = bias.ok_or_else(|| bad("missing bias".into()))?;
        Self::new(indices, weights, bias, dct).map_err(|e| bad(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{KERNEL_MAGIC} {KERNEL_VERSION}\nbias {}\n", self.bias);
        for (i, w) in self.indices.iter().zip(&self.weights) {
            s.push_str(&format!("bin {i} {w}\n"));
        }
        if let Some(d) = &self.dct_weights {
            s.push_str("dct");
            for v in d {
                s.push_str(&format!(" {v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Full Tentogram of an L4 spectrogram (`frames x L4_BINS`).
    pub fn tentogram(&self, l4: ArrayView2<f64>) -> Result<Tentogram> {
        let stack = ShiftedStack::new(l4, &self.indices)?;
        compute_tentogram(&stack, &self.weights, self.bias, &self.whitening())
    }
}

/// Lazy view of `L_K^4`: slice `k` is L4 shifted by `-K_j[k]` bins and cropped
/// to the pitch range, zero where the source falls outside the spectrogram.
#[derive(Debug, Clone)]
pub struct ShiftedStack<'a> {
    l4: ArrayView2<'a, f64>,
    indices: Vec<i32>,
}

impl<'a> ShiftedStack<'a> {
    pub fn new(l4: ArrayView2<'a, f64>, indices: &[i32]) -> Result<Self> {
        if l4.ncols() != L4_BINS {
            return Err(Error::DimensionMismatch {
                expected: L4_BINS,
                got: l4.ncols(),
            });
        }
        Ok(ShiftedStack {
            l4,
            indices: indices.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.l4.nrows()
    }

    pub fn indices(&self) -> &[i32] {
        &self.indices
    }

    pub fn l4(&self) -> ArrayView2<'a, f64> {
        self.l4
    }

    /// L4 value at pitch bin `p` (may lie outside the pitch range) shifted by `offset`.
    #[inline]
    pub fn level(&self, p: isize, offset: i32, frame: usize) -> f64 {
        let b = p - L4_OFFSET + offset as isize;
        if b >= 0 && (b as usize) < L4_BINS {
            self.l4[[frame, b as usize]]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn get(&self, k: usize, p: usize, frame: usize) -> f64 {
        self.level(p as isize, self.indices[k], frame)
    }

    /// `K_L` at pitch bin `p` and `frame`.
    pub fn cross_section(&self, p: usize, frame: usize) -> Vec<f64> {
        self.indices.iter().map(|&o| self.level(p as isize, o, frame)).collect()
    }

    /// Maximum level within `radius` L4 bins around each kernel position.
    pub fn pooled_cross_section(&self, p: usize, frame: usize, radius: usize) -> Vec<f64> {
        let r = radius as isize;
        self.indices
            .iter()
            .map(|&o| {
                (-r..=r)
                    .map(|d| self.level(p as isize + d, o, frame))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Slice `k` as `frames x PITCH_BINS`.
    pub fn slice(&self, k: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.n_frames(), PITCH_BINS), |(i, p)| self.get(k, p, i))
    }

    /// Materialized stack, `K x PITCH_BINS x frames`.
    pub fn to_array3(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.len(), PITCH_BINS, self.n_frames()), |(k, p, i)| self.get(k, p, i))
    }
}

/// Tentative-f0 activations, `frames x PITCH_BINS`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Tentogram {
    pub data: Array2<f64>,
}

impl Tentogram {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }
}

/// `K_w x L_K^4` without bias, computed by shift-and-accumulate over the kernel.
pub fn kernel_sum(stack: &ShiftedStack, weights: &[f64]) -> Result<Array2<f64>> {
    if weights.len() != stack.len() {
        return Err(Error::DimensionMismatch {
            expected: stack.len(),
            got: weights.len(),
        });
    }
    let nf = stack.n_frames();
    let mut out = Array2::<f64>::zeros((nf, PITCH_BINS));
    for i in 0..nf {
        let src = stack.l4.row(i);
        let src = src.as_slice().map(std::borrow::Cow::Borrowed).unwrap_or_else(|| src.to_vec().into());
        let mut dst = out.row_mut(i);
        let dst = dst.as_slice_mut().expect("owned rows are contiguous");
        for (&o, &w) in stack.indices.iter().zip(weights) {
            let shift = o as isize - L4_OFFSET;
            let p0 = (-shift).max(0) as usize;
            let p1 = ((L4_BINS as isize - shift).min(PITCH_BINS as isize)).max(0) as usize;
            if p0 >= p1 {
                continue;
            }
            let s0 = (p0 as isize + shift) as usize;
            for (d, &s) in dst[p0..p1].iter_mut().zip(&src[s0..s0 + (p1 - p0)]) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// Adds `c = W + K_b + 3.5` to every frame, clamps at zero and smooths with
/// an 11x11 Gaussian.
pub fn finish_tentogram(mut raw: Array2<f64>, bias: f64, whitening: &[f64]) -> Result<Tentogram> {
    if whitening.len() != PITCH_BINS {
        return Err(Error::DimensionMismatch {
            expected: PITCH_BINS,
            got: whitening.len(),
        });
    }
    let c: Vec<f64> = whitening.iter().map(|w| w + bias + TENTOGRAM_OFFSET).collect();
    for mut row in raw.rows_mut() {
        for (v, c) in row.iter_mut().zip(&c) {
            *v = (*v + c).max(0.0);
        }
    }
    let g = dsp::gaussian_kernel(TENTOGRAM_SIGMA, TENTOGRAM_HALF_WIDTH);
    let mut data = dsp::smooth_2d_zero_padded(&raw, &g, &g);
    data.mapv_inplace(|v| v.max(0.0));
    Ok(Tentogram { data })
}

pub fn compute_tentogram(stack: &ShiftedStack, weights: &[f64], bias: f64, whitening: &[f64]) -> Result<Tentogram> {
    finish_tentogram(kernel_sum(stack, weights)?, bias, whitening)
}

/// L4 levels at a fixed set of offsets plus pitch bins and targets, the
/// training material for the Tentogram network.
#[derive(Debug, Clone)]
pub struct KernelExamples {
    offsets: Vec<i32>,
    levels: Vec<f64>,
    pitch_bins: Vec<usize>,
    targets: Vec<f64>,
}

impl KernelExamples {
    pub fn new(offsets: Vec<i32>) -> Self {
        KernelExamples {
            offsets,
            levels: Vec::new(),
            pitch_bins: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Offsets spanning every forward-selection candidate and the partials.
    pub fn candidate_window(cfg: &SelectionConfig) -> Self {
        let mut offsets: Vec<i32> = (cfg.candidate_min..=cfg.candidate_max).collect();
        offsets.extend(partial_offsets());
        offsets.sort_unstable();
        offsets.dedup();
        Self::new(offsets)
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn pitch_bins(&self) -> &[usize] {
        &self.pitch_bins
    }

    /// Adds an example read from an L4 spectrogram at `frame` and pitch bin `p`.
    pub fn push_from_l4(&mut self, l4: ArrayView2<f64>, frame: usize, p: usize, target: f64) {
        let row = l4.row(frame);
        for &o in &self.offsets {
            let b = p as isize - L4_OFFSET + o as isize;
            self.levels.push(if b >= 0 && (b as usize) < row.len() {
                row[b as usize]
            } else {
                0.0
            });
        }
        self.pitch_bins.push(p);
        self.targets.push(target);
    }

    pub fn push_levels(&mut self, levels: &[f64], p: usize, target: f64) -> Result<()> {
        if levels.len() != self.offsets.len() {
            return Err(Error::DimensionMismatch {
                expected: self.offsets.len(),
                got: levels.len(),
            });
        }
        if p >= PITCH_BINS {
            return Err(Error::InvalidArgument(format!("pitch bin {p} out of range")));
        }
        self.levels.extend_from_slice(levels);
        self.pitch_bins.push(p);
        self.targets.push(target);
        Ok(())
    }

    pub fn extend(&mut self, other: &KernelExamples) -> Result<()> {
        if other.offsets != self.offsets {
            return Err(Error::InvalidArgument("example sets use different offsets".into()));
        }
        self.levels.extend_from_slice(&other.levels);
        self.pitch_bins.extend_from_slice(&other.pitch_bins);
        self.targets.extend_from_slice(&other.targets);
        Ok(())
    }

    fn columns(&self, kernel: &[i32]) -> Result<Vec<usize>> {
        kernel
            .iter()
            .map(|o| {
                self.offsets
                    .iter()
                    .position(|x| x == o)
                    .ok_or_else(|| Error::InvalidArgument(format!("offset {o} not stored in the examples")))
            })
            .collect()
    }

    /// Network inputs for `rows`: kernel levels followed by the 15 DCT features.
    pub fn design(&self, kernel: &[i32], rows: &[usize]) -> Result<Array2<f64>> {
        let cols = self.columns(kernel)?;
        let width = self.offsets.len();
        let basis = dct_basis();
        Ok(Array2::from_shape_fn((rows.len(), cols.len() + N_DCT), |(r, c)| {
            let row = rows[r];
            if c < cols.len() {
                self.levels[row * width + cols[c]]
            } else {
                basis[[c - cols.len(), self.pitch_bins[row]]]
            }
        }))
    }

    pub fn targets_of(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.targets[r]).collect()
    }

    fn stride_rows(&self, stride: usize) -> Vec<usize> {
        (0..self.len()).step_by(stride.max(1)).collect()
    }
}

/// Settings of the forward bin selection. Strides subsample examples; the
/// defaults are the rates used on a corpus of about 2e8 frames.
#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub target_size: usize,
    pub candidate_min: i32,
    pub candidate_max: i32,
    pub screen_train_stride: usize,
    pub screen_val_stride: usize,
    pub refine_train_stride: usize,
    pub refine_val_stride: usize,
    pub final_stride: usize,
    pub refine_count: usize,
    pub smooth_len: usize,
    /// Fewest examples of each class any subsample may contain.
    pub min_class_examples: usize,
    pub train: TrainConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            target_size: KERNEL_SIZE,
            candidate_min: -800,
            candidate_max: 900,
            screen_train_stride: 2900,
            screen_val_stride: 500,
            refine_train_stride: 100,
            refine_val_stride: 100,
            final_stride: 2,
            refine_count: 45,
            smooth_len: 13,
            min_class_examples: 5,
            train: TrainConfig::new(200, 6, 0),
        }
    }
}

/// Scores of one forward-selection iteration.
#[derive(Debug, Clone)]
pub struct SelectionStep {
    /// Screening validation loss per candidate (`candidate_min..=candidate_max`), members interpolated.
    pub screen: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Refined candidates and their validation losses.
    pub refined: Vec<(i32, f64)>,
    pub chosen: i32,
}

fn check_subsample(ex: &KernelExamples, rows: &[usize], stride: usize, need: usize, what: &str) -> Result<()> {
    let pos = rows.iter().filter(|&&r| ex.targets[r] >= 0.5).count();
    let neg = rows.len() - pos;
    if pos < need || neg < need {
        return Err(Error::CorpusTooSmall(format!(
            "{what} keeps every {stride}th of {} examples ({pos} positive, {neg} negative); \
             need at least {need} of each class, i.e. about {} examples",
            ex.len(),
            2 * need * stride
        )));
    }
    Ok(())
}

/// Validation loss of a logistic network trained on the given kernel offsets.
pub fn kernel_loss(
    train: &KernelExamples,
    val: &KernelExamples,
    kernel: &[i32],
    train_rows: &[usize],
    val_rows: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let x = train.design(kernel, train_rows)?;
    let y = train.targets_of(train_rows);
    let vx = val.design(kernel, val_rows)?;
    let vy = val.targets_of(val_rows);
    let (net, _) = nn::fit(&[x.ncols(), 1], x.view(), &y, vx.view(), &vy, cfg)?;
    net.loss(vx.view(), &vy)
}

/// Trains the logistic Tentogram network on fixed offsets and unpacks it into a kernel.
pub fn train_kernel_weights(
    train: &KernelExamples,
    val: &KernelExamples,
    indices: &[i32],
    stride: usize,
    cfg: &TrainConfig,
) -> Result<(PitchKernel, nn::TrainLog)> {
    let rows = train.stride_rows(stride);
    let vrows = val.stride_rows(stride);
    if rows.is_empty() || vrows.is_empty() {
        return Err(Error::CorpusTooSmall("no Tentogram training examples".into()));
    }
    let x = train.design(indices, &rows)?;
    let y = train.targets_of(&rows);
    let vx = val.design(indices, &vrows)?;
    let vy = val.targets_of(&vrows);
    let (net, log) = nn::fit(&[x.ncols(), 1], x.view(), &y, vx.view(), &vy, cfg)?;
    let (w, b) = net.layer(0);
    let w = w.row(0).to_vec();
    let k = indices.len();
    let kernel = PitchKernel::new(indices.to_vec(), w[..k].to_vec(), b[0], Some(w[k..].to_vec()))?;
    Ok((kernel, log))
}

fn fill_members(x: &mut [f64], member: &[bool]) {
    let known: Vec<usize> = (0..x.len()).filter(|&i| !member[i]).collect();
    if known.is_empty() {
        return;
    }
    for i in 0..x.len() {
        if !member[i] {
            continue;
        }
        let right = known.partition_point(|&k| k < i);
        x[i] = match (right.checked_sub(1).map(|l| known[l]), known.get(right)) {
            (Some(l), Some(&r)) => {
                let t = (i - l) as f64 / (r - l) as f64;
                x[l] * (1.0 - t) + x[r] * t
            }
            (Some(l), None) => x[l],
            (None, Some(&r)) => x[r],
            (None, None) => unreachable!(),
        };
    }
}

/// Grows `initial` one offset at a time until it holds `cfg.target_size`
/// offsets, then trains the final weights. A kernel that is already full is
/// returned unchanged.
pub fn forward_select_kernel(
    train: &KernelExamples,
    val: &KernelExamples,
    initial: &PitchKernel,
    cfg: &SelectionConfig,
) -> Result<(PitchKernel, Vec<SelectionStep>)> {
    if initial.len() >= cfg.target_size {
        return Ok((initial.clone(), Vec::new()));
    }
    let candidates: Vec<i32> = (cfg.candidate_min..=cfg.candidate_max).collect();
    let screen_rows = train.stride_rows(cfg.screen_train_stride);
    let screen_vrows = val.stride_rows(cfg.screen_val_stride);
    let refine_rows = train.stride_rows(cfg.refine_train_stride);
    let refine_vrows = val.stride_rows(cfg.refine_val_stride);
    let need = cfg.min_class_examples;
    check_subsample(train, &screen_rows, cfg.screen_train_stride, need, "screening (training)")?;
    check_subsample(val, &screen_vrows, cfg.screen_val_stride, need, "screening (validation)")?;
    check_subsample(train, &refine_rows, cfg.refine_train_stride, need, "refinement (training)")?;
    check_subsample(val, &refine_vrows, cfg.refine_val_stride, need, "refinement (validation)")?;

    let mut indices = initial.indices.clone();
    let mut steps = Vec::new();
    let window = dsp::hann(cfg.smooth_len);
    while indices.len() < cfg.target_size {
        let member: Vec<bool> = candidates.iter().map(|c| indices.binary_search(c).is_ok()).collect();
        if member.iter().all(|&m| m) {
            break;
        }
        let mut screen = vec![0.0; candidates.len()];
        for (j, &c) in candidates.iter().enumerate() {
            if member[j] {
                continue;
            }
            let mut trial = indices.clone();
            trial.insert(trial.partition_point(|&x| x < c), c);
            screen[j] = kernel_loss(train, val, &trial, &screen_rows, &screen_vrows, &cfg.train)?;
        }
        fill_members(&mut screen, &member);
        let smoothed = dsp::smooth_renormalized(&screen, &window);
        let mut order: Vec<usize> = (0..candidates.len()).filter(|&j| !member[j]).collect();
        order.sort_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b]).then(a.cmp(&b)));
        order.truncate(cfg.refine_count.max(1));
        let mut refined = Vec::with_capacity(order.len());
        for &j in &order {
            let c = candidates[j];
            let mut trial = indices.clone();
            trial.insert(trial.partition_point(|&x| x < c), c);
            refined.push((c, kernel_loss(train, val, &trial, &refine_rows, &refine_vrows, &cfg.train)?));
        }
        let &(chosen, loss) = refined
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("at least one refined candidate");
        info!("kernel size {} -> {}: added offset {chosen} (loss {loss:.5})", indices.len(), indices.len() + 1);
        indices.insert(indices.partition_point(|&x| x < chosen), chosen);
        steps.push(SelectionStep {
            screen,
            smoothed,
            refined,
            chosen,
        });
    }
    let (kernel, _) = train_kernel_weights(train, val, &indices, cfg.final_stride, &cfg.train)?;
    Ok((kernel, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_l4(nf: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((nf, L4_BINS), |_| rng.random_range(0.0..10.0))
    }

    #[test]
    fn partial_offsets_match_table() {
        assert_eq!(partial_offsets(), vec![0, 240, 380, 480, 557, 620, 674, 720, 761, 797, 830]);
    }

    #[test]
    fn reference_kernel_values() {
        let k = PitchKernel::reference();
        assert_eq!(k.len(), 50);
        assert_eq!(k.bias, -5.2314);
        let w = |i: i32| k.weights[k.indices.iter().position(|&x| x == i).unwrap()];
        assert_eq!(w(0), 0.1152);
        assert_eq!(w(-430), -0.1713);
        assert_eq!(w(-429), 0.1418);
        assert_eq!((k.indices[0], k.indices[49]), (-705, 874));
        assert!(k.dct_weights.is_none());
    }

    #[test]
    fn kernel_text_round_trip() {
        let mut k = PitchKernel::reference();
        k.dct_weights = Some((0..15).map(|i| i as f64 * 0.1 - 0.7).collect());
        assert_eq!(PitchKernel::parse(&k.to_text(), "mem").unwrap(), k);
    }

    #[test]
    fn kernel_rejects_missing_partial_and_unsorted() {
        let mut idx = partial_offsets();
        idx.remove(3);
        assert!(PitchKernel::new(idx.clone(), vec![0.0; 10], 0.0, None).is_err());
        let mut idx = partial_offsets();
        idx.swap(0, 1);
        assert!(PitchKernel::new(idx, vec![0.0; 11], 0.0, None).is_err());
        assert!(PitchKernel::parse("pitchkernel 2\nbias 0\n", "x").is_err());
    }

    #[test]
    fn dct_index_examples() {
        assert_eq!(dct_index(25.85).unwrap(), 1);
        assert_eq!(dct_index(26.8).unwrap(), 20);
        assert_eq!(dct_index(103.95).unwrap(), 1563);
        assert!(dct_index(25.0).is_err());
        assert!(dct_index(104.5).is_err());
    }

    #[test]
    fn whitening_is_basis_combination() {
        assert!(whitening_vector(&[0.0; 15]).unwrap().iter().all(|&v| v == 0.0));
        let mut e1 = [0.0; 15];
        e1[0] = 1.0;
        let w = whitening_vector(&e1).unwrap();
        assert_eq!(w, dct_basis().row(0).to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = whitening_vector(&d).unwrap();
        for p in (0..PITCH_BINS).step_by(37) {
            let naive: f64 = (0..15)
                .map(|c| d[c] * (std::f64::consts::PI * (c + 1) as f64 * (p as f64 + 0.5) / 1563.0).cos())
                .sum();
            assert!((w[p] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_single_zero_offset_is_cropped_l4() {
        let l4 = random_l4(4, 1);
        let stack = ShiftedStack::new(l4.view(), &[0]).unwrap();
        let s = stack.slice(0);
        for i in 0..4 {
            assert_eq!(s[[i, 0]], 0.0);
            assert_eq!(s[[i, 1]], 0.0);
            assert_eq!(s[[i, 2]], 0.0);
            for p in 3..PITCH_BINS {
                assert_eq!(s[[i, p]], l4[[i, p - 3]]);
            }
        }
    }

    #[test]
    fn stack_large_shift_is_zero() {
        let l4 = random_l4(3, 2);
        let stack = ShiftedStack::new(l4.view(), &[5000, -5000]).unwrap();
        assert!(stack.to_array3().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_matches_index_oracle() {
        let l4 = random_l4(5, 3);
        let k = PitchKernel::reference();
        let stack = ShiftedStack::new(l4.view(), &k.indices).unwrap();
        let a = stack.to_array3();
        assert_eq!(a.dim(), (50, PITCH_BINS, 5));
        for ((kk, p, i), &v) in a.indexed_iter() {
            let b = p as i64 - 3 + k.indices[kk] as i64;
            let expect = if (0..L4_BINS as i64).contains(&b) { l4[[i, b as usize]] } else { 0.0 };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn pooled_never_below_cross_section() {
        let l4 = random_l4(2, 4);
        let k = PitchKernel::reference();
        let stack = ShiftedStack::new(l4.view(), &k.indices).unwrap();
        for p in [0, 100, 800, 1562] {
            let a = stack.cross_section(p, 1);
            let b = stack.pooled_cross_section(p, 1, 6);
            assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        }
        let flat = Array2::from_elem((1, L4_BINS), 2.0);
        let stack = ShiftedStack::new(flat.view(), &k.indices).unwrap();
        assert_eq!(stack.cross_section(700, 0), stack.pooled_cross_section(700, 0, 6));
    }

    #[test]
    fn kernel_sum_matches_naive_loop() {
        let l4 = random_l4(6, 5);
        let k = PitchKernel::reference();
        let stack = ShiftedStack::new(l4.view(), &k.indices).unwrap();
        let fast = kernel_sum(&stack, &k.weights).unwrap();
        for i in 0..6 {
            for p in (0..PITCH_BINS).step_by(7) {
                let naive: f64 = (0..50).map(|kk| k.weights[kk] * stack.get(kk, p, i)).sum();
                assert!((fast[[i, p]] - naive).abs() <= 1e-9 * naive.abs().max(1.0));
            }
        }
    }

    #[test]
    fn kernel_sum_is_linear_in_l4() {
        let l4 = random_l4(3, 6);
        let k = PitchKernel::reference();
        let a = kernel_sum(&ShiftedStack::new(l4.view(), &k.indices).unwrap(), &k.weights).unwrap();
        let l4s = l4.mapv(|v| v * 2.5);
        let b = kernel_sum(&ShiftedStack::new(l4s.view(), &k.indices).unwrap(), &k.weights).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (2.5 * x - y).abs() < 1e-9));
    }

    #[test]
    fn silent_input_gives_zero_tentogram_with_reference_bias() {
        let l4 = Array2::zeros((8, L4_BINS));
        let t = PitchKernel::reference().tentogram(l4.view()).unwrap();
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tentogram_is_non_negative() {
        let l4 = random_l4(20, 7);
        let t = PitchKernel::reference().tentogram(l4.view()).unwrap();
        assert!(t.data.iter().all(|&v| v >= 0.0));
        assert!(t.data.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn member_interpolation() {
        let mut x = vec![1.0, 0.0, 0.0, 4.0, 0.0];
        fill_members(&mut x, &[false, true, true, false, true]);
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn full_kernel_is_returned_unchanged() {
        let k = PitchKernel::reference();
        let ex = KernelExamples::new(vec![0]);
        let (out, steps) = forward_select_kernel(&ex, &ex, &k, &SelectionConfig::default()).unwrap();
        assert_eq!(out, k);
        assert!(steps.is_empty());
    }

    fn planted_examples(cfg: &SelectionConfig, n: usize, planted: i32, seed: u64) -> KernelExamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ex = KernelExamples::candidate_window(cfg);
        let col = ex.offsets().iter().position(|&o| o == planted).unwrap();
        for _ in 0..n {
            let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let mut levels: Vec<f64> = (0..ex.offsets().len()).map(|_| rng.random_range(0.0..1.0)).collect();
            levels[col] += 2.0 * y;
            ex.push_levels(&levels, rng.random_range(200..1200), y).unwrap();
        }
        ex
    }

    #[test]
    fn planted_offset_is_selected_first() {
        let cfg = SelectionConfig {
            target_size: 12,
            candidate_min: -30,
            candidate_max: 30,
            screen_train_stride: 2,
            screen_val_stride: 2,
            refine_train_stride: 1,
            refine_val_stride: 1,
            final_stride: 1,
            refine_count: 5,
            train: TrainConfig::new(60, 6, 1),
            ..SelectionConfig::default()
        };
        let train = planted_examples(&cfg, 300, 17, 1);
        let val = planted_examples(&cfg, 200, 17, 2);
        let (k, steps) = forward_select_kernel(&train, &val, &PitchKernel::partials_only(), &cfg).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].chosen, 17);
        let argmin = (0..steps[0].screen.len())
            .filter(|&j| cfg.candidate_min + j as i32 != 0)
            .min_by(|&a, &b| steps[0].screen[a].total_cmp(&steps[0].screen[b]))
            .unwrap();
        assert_eq!(cfg.candidate_min + argmin as i32, 17);
        assert!(k.indices.contains(&17));
        assert_eq!(k.dct_weights.as_ref().map(Vec::len), Some(15));
    }

    #[test]
    fn small_corpus_is_rejected_with_minimum() {
        let cfg = SelectionConfig {
            target_size: 12,
            ..SelectionConfig::default()
        };
        let mut ex = KernelExamples::candidate_window(&cfg);
        let levels = vec![0.0; ex.offsets().len()];
        for i in 0..100 {
            ex.push_levels(&levels, 500, (i % 2) as f64).unwrap();
        }
        let err = forward_select_kernel(&ex, &ex, &PitchKernel::partials_only(), &cfg).unwrap_err();
        assert!(matches!(err, Error::CorpusTooSmall(_)), "{err}");
    }
}
