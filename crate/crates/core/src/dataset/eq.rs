//! Random equalization filters applied to training spectrograms so that the
//! networks do not learn the spectral tilt of the synthesizer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::frontend::N_BINS;

pub const N_BUMPS: usize = 10;
pub const BUMP_DB: f64 = 7.0;
pub const SHELF_DB: f64 = 3.5;
/// Half the length of the shelf's linear transition.
pub const SHELF_HALF_RAMP: f64 = 30.0;
pub const MIN_WIDTH: usize = 121;
pub const MAX_WIDTH: usize = 361;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    /// Odd Hann length in bins.
    pub width: usize,
    /// 0-based center bin.
    pub center: usize,
    pub amplitude_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqDraw {
    pub bumps: Vec<Bump>,
    pub shelf_center: usize,
    pub shelf_db: f64,
}

impl EqDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let bumps = (0..N_BUMPS)
            .map(|_| Bump {
                width: 2 * rng.random_range(0..=120) + 1 + 120,
                center: rng.random_range(0..N_BINS),
                amplitude_db: rng.random_range(-BUMP_DB..BUMP_DB),
            })
            .collect();
        EqDraw {
            bumps,
            shelf_center: rng.random_range(0..N_BINS),
            shelf_db: rng.random_range(-SHELF_DB..SHELF_DB),
        }
    }
}

/// Zero-mean gain curve in dB and its linear counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqFilter {
    pub g_db: Vec<f64>,
    pub g: Vec<f64>,
}

impl EqFilter {
    pub fn flat() -> Self {
        EqFilter {
            g_db: vec![0.0; N_BINS],
            g: vec![1.0; N_BINS],
        }
    }

    pub fn from_draw(d: &EqDraw) -> Self {
        let mut g_db = vec![0.0; N_BINS];
        for b in &d.bumps {
            let w = dsp::hann(b.width);
            let half = (b.width / 2) as isize;
            for (k, v) in w.iter().enumerate() {
                let j = b.center as isize + k as isize - half;
                if (0..N_BINS as isize).contains(&j) {
                    g_db[j as usize] += b.amplitude_db * v;
                }
            }
        }
        // full amplitude below the shelf, linear ramp to zero across it
        let c = d.shelf_center as f64;
        for (j, g) in g_db.iter_mut().enumerate() {
            let t = ((j as f64 - (c - SHELF_HALF_RAMP)) / (2.0 * SHELF_HALF_RAMP)).clamp(0.0, 1.0);
            *g += d.shelf_db * (1.0 - t);
        }
        let mean = g_db.iter().sum::<f64>() / N_BINS as f64;
        g_db.iter_mut().for_each(|v| *v -= mean);
        let g = g_db.iter().map(|v| 10f64.powf(v / 20.0)).collect();
        EqFilter { g_db, g }
    }
}

pub fn random_eq_filter<R: Rng + ?Sized>(rng: &mut R) -> EqFilter {
    EqFilter::from_draw(&EqDraw::sample(rng))
}

/// Multiplies every frame of a magnitude spectrogram by the filter gains.
pub fn apply_eq(m: &Array2<f64>, eq: &EqFilter) -> Result<Array2<f64>> {
    if m.ncols() != eq.g.len() {
        return Err(Error::DimensionMismatch {
            expected: eq.g.len(),
            got: m.ncols(),
        });
    }
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        row.iter_mut().zip(&eq.g).for_each(|(v, g)| *v *= g);
    }
    Ok(out)
}
