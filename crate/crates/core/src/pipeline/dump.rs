//! On-disk dumps of intermediate representations for inspection and plotting.
//!
//! Matrices are `PTM1`, rows and columns as little-endian `u64`, then
//! row-major `f32` values. Contours and activation curves are JSON.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Trace;
use crate::contours::FrameKind;
use crate::error::{Error, Result};
use crate::frontend::SpectrogramFamily;
use crate::pitchogram::PITCHOGRAM_MIN_CENTS;

pub const SPECTROGRAM_FILE: &str = "spectrogram.mat";
pub const TENTOGRAM_FILE: &str = "tentogram.mat";
pub const PITCHOGRAM_FILE: &str = "pitchogram.mat";
pub const CONTOURS_FILE: &str = "contours.json";
pub const ACTIVATIONS_FILE: &str = "activations.json";

const MAGIC: &[u8; 4] = b"PTM1";

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let mut b = Vec::with_capacity(20 + 4 * m.len());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    b.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        b.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, b)?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let b = std::fs::read(path)?;
    if b.len() < 20 || &b[..4] != MAGIC {
        return Err(bad("not a matrix dump"));
    }
    let rows = u64::from_le_bytes(b[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
    if b.len() != 20 + 4 * rows * cols {
        return Err(bad("truncated matrix dump"));
    }
    let v: Vec<f64> = b[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), v).map_err(|e| bad(&e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourDump {
    pub id: usize,
    pub start: usize,
    pub cents: Vec<f64>,
    /// Pitchogram column of every frame.
    pub bins: Vec<f64>,
    /// `true` where the frame lies on the region's ridge.
    pub ridge: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationDump {
    pub contour: usize,
    pub start: usize,
    pub oc: Vec<f64>,
    pub ocs: Vec<f64>,
    pub ofc: Vec<f64>,
}

/// Writes the whitened spectrogram, Tentogram, Pitchogram, contours and
/// activation curves into `dir`.
pub fn write_trace(dir: impl AsRef<Path>, family: &SpectrogramFamily, trace: &Trace) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_matrix(dir.join(SPECTROGRAM_FILE), &family.l)?;
    write_matrix(dir.join(TENTOGRAM_FILE), &trace.tentogram.data)?;
    write_matrix(dir.join(PITCHOGRAM_FILE), &trace.pitchogram.data)?;
    let contours: Vec<ContourDump> = trace
        .contours
        .iter()
        .map(|c| ContourDump {
            id: c.id,
            start: c.start(),
            cents: c.frames.iter().map(|f| f.cents).collect(),
            bins: c.frames.iter().map(|f| f.cents - PITCHOGRAM_MIN_CENTS).collect(),
            ridge: c.frames.iter().map(|f| f.kind == FrameKind::Ridge).collect(),
        })
        .collect();
    std::fs::write(dir.join(CONTOURS_FILE), serde_json::to_string(&contours)?)?;
    let acts: Vec<ActivationDump> = trace
        .contours
        .iter()
        .enumerate()
        .map(|(i, c)| ActivationDump {
            contour: c.id,
            start: c.start(),
            oc: trace.activations[i].oc.clone(),
            ocs: trace.ocs[i].clone(),
            ofc: trace.activations[i].ofc.clone(),
        })
        .collect();
    std::fs::write(dir.join(ACTIVATIONS_FILE), serde_json::to_string(&acts)?)?;
    Ok(())
}

pub fn read_contours(path: impl AsRef<Path>) -> Result<Vec<ContourDump>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<Vec<ActivationDump>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((3, 5), |(i, j)| i as f64 * 0.5 - j as f64);
        let p = dir.path().join("m.mat");
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
        std::fs::write(&p, b"PTM1").unwrap();
        assert!(read_matrix(&p).is_err());
    }
}
