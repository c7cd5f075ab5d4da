//! Log-frequency magnitude spectrogram, causal noise-floor estimation and the
//! whitened spectrogram family (`L`, `L15`, `L25`, and the 4x upsampled `L4`).

use std::sync::{Arc, OnceLock};

use ndarray::{Array2, Axis};
use realfft::num_complex::Complex;
use realfft::{RealFftPlanner, RealToComplex};

use crate::dsp::{self, db, LOG_FLOOR};
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 44_100;
/// Output hop in samples (about 5.8 ms at 44.1 kHz).
pub const HOP: usize = 256;
/// Hop of the underlying analysis grid; every other native frame is kept.
pub const NATIVE_HOP: usize = 128;
pub const N_BINS: usize = 518;
pub const BINS_PER_OCTAVE: usize = 60;
/// MIDI pitch of the lowest bin center.
pub const MIN_MIDI: f64 = 26.0;
/// Bandwidth offset (Hz) widening the low-frequency filters.
pub const GAMMA_HZ: f64 = 11.6;
pub const UPSAMPLE: usize = 4;
pub const L4_BINS: usize = N_BINS * UPSAMPLE;
/// Hann length for the noise-floor smoothing (frequency for `V^s`, time for `V^l`).
pub const FLOOR_SMOOTH_LEN: usize = 33;
/// Look-ahead of the level estimate, in frames.
pub const LEVEL_LOOKAHEAD: usize = 16;

const FFT_LEN: usize = 4096;
const KERNEL_SPARSITY: f64 = 1e-5;

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

pub fn hz_to_midi(hz: f64) -> f64 {
    69.0 + 12.0 * (hz / 440.0).log2()
}

/// Center frequency of spectrogram bin `j`.
pub fn bin_frequency(j: usize) -> f64 {
    midi_to_hz(MIN_MIDI) * 2f64.powf(j as f64 / BINS_PER_OCTAVE as f64)
}

/// MIDI pitch at a (fractional) position of the 518-bin grid.
pub fn bin_to_midi(bin: f64) -> f64 {
    MIN_MIDI + bin * 12.0 / BINS_PER_OCTAVE as f64
}

pub fn midi_to_bin(midi: f64) -> f64 {
    (midi - MIN_MIDI) * BINS_PER_OCTAVE as f64 / 12.0
}

/// Time in seconds of the center of output frame `i`.
pub fn frame_time(i: f64) -> f64 {
    i * HOP as f64 / SAMPLE_RATE as f64
}

/// Nearest output frame of a time in seconds.
pub fn time_to_frame(t: f64) -> f64 {
    t * SAMPLE_RATE as f64 / HOP as f64
}

#[derive(Debug, Clone)]
pub struct MagnitudeSpectrogram {
    /// Linear magnitudes, `frames x N_BINS`.
    pub data: Array2<f64>,
    pub sample_rate: u32,
    pub hop: usize,
    pub bin_freqs: Vec<f64>,
}

impl MagnitudeSpectrogram {
    pub fn from_data(data: Array2<f64>) -> Self {
        assert_eq!(data.ncols(), N_BINS);
        MagnitudeSpectrogram {
            data,
            sample_rate: SAMPLE_RATE,
            hop: HOP,
            bin_freqs: (0..N_BINS).map(bin_frequency).collect(),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }
}

struct SparseKernel {
    start: usize,
    coeffs: Vec<Complex<f64>>,
}

/// Variable-Q filterbank evaluated through a spectral kernel: each bin is a
/// Hann-windowed complex exponential whose length follows
/// `sr / (alpha * f + gamma)`, so low bins trade frequency resolution for
/// time resolution.
struct VariableQ {
    kernels: Vec<SparseKernel>,
    fft: Arc<dyn RealToComplex<f64>>,
}

impl VariableQ {
    fn new() -> Self {
        let sr = SAMPLE_RATE as f64;
        let alpha = 2f64.powf(1.0 / BINS_PER_OCTAVE as f64) - 1.0;
        let mut planner = RealFftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(FFT_LEN);
        let mut cplanner = rustfft::FftPlanner::<f64>::new();
        let cfft = cplanner.plan_fft_forward(FFT_LEN);
        let center = FFT_LEN / 2;
        let kernels = (0..N_BINS)
            .map(|k| {
                let f = bin_frequency(k);
                let len = ((sr / (alpha * f + GAMMA_HZ)).round() as usize).clamp(16, FFT_LEN - 1);
                let w = dsp::hann(len);
                let wsum: f64 = w.iter().sum();
                let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
                let first = center - len / 2;
                for (m, &wm) in w.iter().enumerate() {
                    let n = first + m;
                    let phase = 2.0 * std::f64::consts::PI * f * (n as f64 - center as f64) / sr;
                    // factor 2: a real sinusoid of amplitude a reads as magnitude a
                    buf[n] = Complex::from_polar(2.0 * wm / wsum, phase);
                }
                cfft.process(&mut buf);
                // only the non-negative half is needed against a real-input spectrum
                let half = &buf[..=FFT_LEN / 2];
                let peak = half.iter().map(|c| c.norm()).fold(0.0, f64::max);
                let keep = |c: &Complex<f64>| c.norm() >= KERNEL_SPARSITY * peak;
                let start = half.iter().position(keep).unwrap_or(0);
                let end = half.iter().rposition(keep).unwrap_or(0);
                SparseKernel {
                    start,
                    coeffs: half[start..=end]
                        .iter()
                        .map(|c| c.conj() / FFT_LEN as f64)
                        .collect(),
                }
            })
            .collect();
        VariableQ { kernels, fft }
    }

    fn shared() -> &'static VariableQ {
        static BANK: OnceLock<VariableQ> = OnceLock::new();
        BANK.get_or_init(VariableQ::new)
    }

    fn analyze(&self, audio: &[f64]) -> Array2<f64> {
        let n_frames = audio.len().div_ceil(HOP);
        let mut out = Array2::<f64>::zeros((n_frames, N_BINS));
        let mut input = self.fft.make_input_vec();
        let mut spectrum = self.fft.make_output_vec();
        let mut scratch = self.fft.make_scratch_vec();
        let center = FFT_LEN / 2;
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            // native frame 2i of the 128-sample grid sits exactly on sample 256 i
            let native = 2 * i;
            let mid = native * NATIVE_HOP;
            let mut any = false;
            for (n, slot) in input.iter_mut().enumerate() {
                let s = mid as isize + n as isize - center as isize;
                *slot = if s >= 0 && (s as usize) < audio.len() {
                    audio[s as usize]
                } else {
                    0.0
                };
                any |= *slot != 0.0;
            }
            if !any {
                continue;
            }
            self.fft
                .process_with_scratch(&mut input, &mut spectrum, &mut scratch)
                .expect("fixed-size fft");
            for (k, kern) in self.kernels.iter().enumerate() {
                let acc: Complex<f64> = spectrum[kern.start..kern.start + kern.coeffs.len()]
                    .iter()
                    .zip(&kern.coeffs)
                    .map(|(x, h)| x * h)
                    .sum();
                row[k] = acc.norm();
            }
        }
        out
    }
}

/// Computes the 518-bin log-frequency magnitude spectrogram with a 256-sample hop.
/// Input at other sample rates is resampled to 44.1 kHz first.
pub fn compute_spectrogram(audio: &[f64], sample_rate: u32) -> Result<MagnitudeSpectrogram> {
    if audio.is_empty() {
        return Err(Error::EmptyInput("audio"));
    }
    if let Some(bad) = audio.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite sample at index {bad}")));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    let resampled;
    let audio = if sample_rate != SAMPLE_RATE {
        resampled = crate::audio::resample(audio, sample_rate, SAMPLE_RATE)?;
        &resampled[..]
    } else {
        audio
    };
    Ok(MagnitudeSpectrogram::from_data(VariableQ::shared().analyze(audio)))
}

#[derive(Debug, Clone)]
pub struct NoiseFloor {
    /// `V^s`, frames x bins, at most 0 in every frame.
    pub spectral: Array2<f64>,
    /// `V^l`, one dB level per frame.
    pub level: Vec<f64>,
    /// `V^ls`, the combined per-frame noise floor in dB.
    pub combined: Array2<f64>,
}

/// Long-term average spectrum relative to its own maximum (`V^s`). Frame `i`
/// depends only on frames `0..=i`.
pub fn spectral_variation(m: &MagnitudeSpectrogram) -> Array2<f64> {
    let (nf, nb) = m.data.dim();
    let kernel = dsp::unit_sum(dsp::hann(FLOOR_SMOOTH_LEN));
    let mut out = Array2::<f64>::zeros((nf, nb));
    let mut cum = vec![0.0; nb];
    for i in 0..nf {
        for (c, &v) in cum.iter_mut().zip(m.data.row(i)) {
            *c += v;
        }
        let count = (i + 1) as f64;
        let mean_db: Vec<f64> = cum.iter().map(|&c| db(c / count)).collect();
        let smoothed = dsp::smooth_renormalized(&mean_db, &kernel);
        let peak = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (o, s) in out.row_mut(i).iter_mut().zip(&smoothed) {
            *o = (s - peak) / 3.0;
        }
    }
    out
}

/// Time-varying level estimate (`V^l`) in dB. In causal mode the cumulative
/// maximum starts from the first frame; otherwise the whole-track maximum is used.
pub fn level_variation(m: &MagnitudeSpectrogram, causal: bool) -> Vec<f64> {
    let nf = m.n_frames();
    if nf == 0 {
        return Vec::new();
    }
    let frame_max: Vec<f64> = m
        .data
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|&v| db(v)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut cmax = Vec::with_capacity(nf);
    let mut running = if causal {
        frame_max[0]
    } else {
        frame_max.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    };
    for &v in &frame_max {
        running = running.max(v);
        cmax.push(running);
    }
    let combined: Vec<f64> = frame_max
        .iter()
        .zip(&cmax)
        .map(|(&mx, &cm)| mx.max(cm - 30.0))
        .collect();
    let smoothed = dsp::smooth_renormalized(&combined, &dsp::unit_sum(dsp::hann(FLOOR_SMOOTH_LEN)));
    smoothed
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let ahead = cmax[(i + LEVEL_LOOKAHEAD).min(nf - 1)];
            (s + ahead) / 2.0 - 6.0
        })
        .collect()
}

/// Combines `V^s` and `V^l` into the per-frame noise floor. Both are in dB, so
/// scaling the spectral shape by the frame level is an addition here.
pub fn combine_floor(spectral: Array2<f64>, level: Vec<f64>) -> NoiseFloor {
    let mut combined = spectral.clone();
    for (mut row, &l) in combined.axis_iter_mut(Axis(0)).zip(&level) {
        row.mapv_inplace(|v| v + l);
    }
    NoiseFloor {
        spectral,
        level,
        combined,
    }
}

pub fn noise_floor(m: &MagnitudeSpectrogram, causal: bool) -> NoiseFloor {
    combine_floor(spectral_variation(m), level_variation(m, causal))
}

/// `max{20 log10 M - V^ls + offset_db, 0}`; zero magnitudes map to 0.
pub fn whiten(m: &Array2<f64>, floor: &Array2<f64>, offset_db: f64) -> Result<Array2<f64>> {
    if m.dim() != floor.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.len(),
            got: floor.len(),
        });
    }
    let mut out = Array2::<f64>::zeros(m.dim());
    ndarray::Zip::from(&mut out)
        .and(m)
        .and(floor)
        .for_each(|o, &mag, &fl| {
            *o = if mag <= LOG_FLOOR {
                0.0
            } else {
                (db(mag) - fl + offset_db).max(0.0)
            };
        });
    Ok(out)
}

/// Linear interpolation along frequency to `UPSAMPLE` times as many bins.
/// Positions past the last original bin hold its value.
pub fn upsample4(l: &Array2<f64>) -> Array2<f64> {
    let (nf, nb) = l.dim();
    let mut out = Array2::<f64>::zeros((nf, nb * UPSAMPLE));
    for (src, mut dst) in l.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for (b, d) in dst.iter_mut().enumerate() {
            let j = b / UPSAMPLE;
            let t = (b % UPSAMPLE) as f64 / UPSAMPLE as f64;
            *d = if t == 0.0 || j + 1 >= nb {
                src[j]
            } else {
                src[j] * (1.0 - t) + src[j + 1] * t
            };
        }
    }
    out
}

/// Everything derived from one magnitude spectrogram.
#[derive(Debug, Clone)]
pub struct SpectrogramFamily {
    pub magnitude: MagnitudeSpectrogram,
    pub floor: NoiseFloor,
    pub l: Array2<f64>,
    pub l15: Array2<f64>,
    pub l25: Array2<f64>,
    /// `L` upsampled 4x along frequency, `frames x L4_BINS`.
    pub l4: Array2<f64>,
}

impl SpectrogramFamily {
    pub fn from_magnitude(magnitude: MagnitudeSpectrogram, causal: bool) -> Self {
        let floor = noise_floor(&magnitude, causal);
        // Lower planes are derived from L25: subtracting 10 or 15 from a value at
        // least that large is exact, so plane differences hold exactly.
        let l25 = whiten(&magnitude.data, &floor.combined, 25.0).expect("shapes agree");
        let l15 = l25.mapv(|v| (v - 10.0).max(0.0));
        let l = l15.mapv(|v| (v - 15.0).max(0.0));
        let l4 = upsample4(&l);
        SpectrogramFamily {
            magnitude,
            floor,
            l,
            l15,
            l25,
            l4,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.magnitude.n_frames()
    }
}
