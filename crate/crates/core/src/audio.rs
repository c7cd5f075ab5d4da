//! WAV input/output and sample-rate conversion.

use std::path::Path;

use rubato::{FftFixedIn, Resampler};

use crate::error::{Error, Result};

/// Reads a PCM (16/24/32-bit int) or 32-bit float WAV file, downmixing to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes mono audio as 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Band-limited resampling of a mono signal. The output is aligned with the
/// input (resampler delay removed) and has `round(n * to / from)` samples.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == to {
        return Ok(samples.to_vec());
    }
    let chunk = 1024;
    let mut rs = FftFixedIn::<f64>::new(from as usize, to as usize, chunk, 2, 1)
        .map_err(|e| Error::Resample(e.to_string()))?;
    let expected = (samples.len() as f64 * to as f64 / from as f64).round() as usize;
    let delay = rs.output_delay();
    let mut out = Vec::with_capacity(expected + delay + chunk);
    let mut pos = 0;
    while pos < samples.len() {
        let need = rs.input_frames_next();
        let end = (pos + need).min(samples.len());
        let block = [&samples[pos..end]];
        let res = if end - pos == need {
            rs.process(&block, None)
        } else {
            rs.process_partial(Some(&block), None)
        }
        .map_err(|e| Error::Resample(e.to_string()))?;
        out.extend_from_slice(&res[0]);
        pos = end;
    }
    while out.len() < expected + delay {
        let res = rs
            .process_partial::<&[f64]>(None, None)
            .map_err(|e| Error::Resample(e.to_string()))?;
        if res[0].is_empty() {
            break;
        }
        out.extend_from_slice(&res[0]);
    }
    let mut aligned: Vec<f64> = out.into_iter().skip(delay).take(expected).collect();
    aligned.resize(expected, 0.0);
    Ok(aligned)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        write_wav(&path, &x, 44_100).unwrap();
        let (y, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 44_100);
        assert_eq!(y.len(), x.len());
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn stereo_int_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22_050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let (y, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 22_050);
        assert_eq!(y.len(), 10);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn resampling_preserves_length_and_tone() {
        let from = 48_000;
        let f = 440.0;
        let x: Vec<f64> = (0..48_000)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / from as f64).sin())
            .collect();
        let y = resample(&x, from, 44_100).unwrap();
        assert_eq!(y.len(), 44_100);
        // compare against the analytic tone away from the edges
        let err = (2000..42_000)
            .map(|i| (y[i] - (2.0 * std::f64::consts::PI * f * i as f64 / 44_100.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "max error {err}");
    }
}
