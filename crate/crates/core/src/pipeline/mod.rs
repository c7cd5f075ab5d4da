//! Model bundles, run-time transcription and staged training.

mod config;
pub mod dump;
mod train;

pub use config::{Budget, PipelineConfig};
pub use train::{train_all, AccessLog, Source, TrainOutcome};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contours::{annotate_n2, extract_contours, Contour};
use crate::error::{Error, Result};
use crate::events::{contour_activations, ContourActivations, FeatureContext, OffsetParams, OnsetParams, N3_LAYOUT, N4_LAYOUT, N5_LAYOUT};
use crate::frontend::{compute_spectrogram, SpectrogramFamily};
use crate::kernel::{PitchKernel, ShiftedStack, Tentogram, KERNEL_SIZE, N_DCT};
use crate::nn::Model;
use crate::notes::{classify_notes, tentative_notes, NoteContext, Transcription, N6_LAYOUT, STOP_PROBABILITY};
use crate::pitchogram::{classify_t0s, pick_tentative_f0s, render_pitchogram, PitchogramGrid, TentativeF0, N2_LAYOUT};

pub const BUNDLE_MANIFEST: &str = "bundle.json";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const N1_LAYOUT: &str = "n1-65-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    N1,
    N2,
    N3,
    N4,
    N5,
    N6,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::N1, Stage::N2, Stage::N3, Stage::N4, Stage::N5, Stage::N6];

    pub fn name(self) -> &'static str {
        match self {
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::N4 => "N4",
            Stage::N5 => "N5",
            Stage::N6 => "N6",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn layout(self) -> &'static str {
        match self {
            Stage::N1 => N1_LAYOUT,
            Stage::N2 => N2_LAYOUT,
            Stage::N3 => N3_LAYOUT,
            Stage::N4 => N4_LAYOUT,
            Stage::N5 => N5_LAYOUT,
            Stage::N6 => N6_LAYOUT,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::N1 => "n1.kernel",
            Stage::N2 => "n2.json",
            Stage::N3 => "n3.json",
            Stage::N4 => "n4.json",
            Stage::N5 => "n5.json",
            Stage::N6 => "n6.json",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}` (expected N1..N6)")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Decision parameters tuned on the training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedParams {
    pub onset: OnsetParams,
    pub offset: OffsetParams,
    pub stop_probability: f64,
}

impl Default for TunedParams {
    fn default() -> Self {
        TunedParams {
            onset: OnsetParams::default(),
            offset: OffsetParams::default(),
            stop_probability: STOP_PROBABILITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub stage: Stage,
    pub file: String,
    pub layout: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub entries: Vec<BundleEntry>,
    /// Stages the bundle does not provide.
    pub missing: Vec<Stage>,
    pub params: TunedParams,
    pub seed: Option<u64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn model_bytes(m: &Model) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(m)?)
}

/// The six trained stages plus tuned parameters. Any stage may be absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineModels {
    pub kernel: Option<PitchKernel>,
    pub n2: Option<Model>,
    pub n3: Option<Model>,
    pub n4: Option<Model>,
    pub n5: Option<Model>,
    pub n6: Option<Model>,
    pub params: TunedParams,
    pub seed: Option<u64>,
}

impl PipelineModels {
    pub fn model(&self, s: Stage) -> Option<&Model> {
        match s {
            Stage::N1 => None,
            Stage::N2 => self.n2.as_ref(),
            Stage::N3 => self.n3.as_ref(),
            Stage::N4 => self.n4.as_ref(),
            Stage::N5 => self.n5.as_ref(),
            Stage::N6 => self.n6.as_ref(),
        }
    }

    pub fn set_model(&mut self, s: Stage, m: Model) {
        let slot = match s {
            Stage::N1 => panic!("N1 is a kernel"),
            Stage::N2 => &mut self.n2,
            Stage::N3 => &mut self.n3,
            Stage::N4 => &mut self.n4,
            Stage::N5 => &mut self.n5,
            Stage::N6 => &mut self.n6,
        };
        *slot = Some(m);
    }

    pub fn has(&self, s: Stage) -> bool {
        match s {
            Stage::N1 => self.kernel.is_some(),
            _ => self.model(s).is_some(),
        }
    }

    pub fn missing(&self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|&s| !self.has(s)).collect()
    }

    /// Fails with the first absent stage.
    pub fn require_all(&self) -> Result<()> {
        match self.missing().first() {
            Some(s) => Err(Error::MissingModel(s.name())),
            None => Ok(()),
        }
    }

    pub fn kernel(&self) -> Result<&PitchKernel> {
        self.kernel.as_ref().ok_or(Error::MissingModel(Stage::N1.name()))
    }

    pub fn require(&self, s: Stage) -> Result<&Model> {
        self.model(s).ok_or(Error::MissingModel(s.name()))
    }

    /// Hash of a stage's serialized weights, empty when absent.
    pub fn stage_hash(&self, s: Stage) -> String {
        match s {
            Stage::N1 => self.kernel.as_ref().map(|k| sha256_hex(k.to_text().as_bytes())),
            _ => self.model(s).and_then(|m| model_bytes(m).ok()).map(|b| sha256_hex(&b)),
        }
        .unwrap_or_default()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<BundleManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for s in Stage::ALL {
            let path = dir.join(s.file_name());
            match s {
                Stage::N1 => match &self.kernel {
                    Some(k) => k.save(&path)?,
                    None => continue,
                },
                _ => match self.model(s) {
                    Some(m) => m.save(&path)?,
                    None => continue,
                },
            }
            let bytes = std::fs::read(&path)?;
            entries.push(BundleEntry {
                stage: s,
                file: s.file_name().to_string(),
                layout: s.layout().to_string(),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            entries,
            missing: self.missing(),
            params: self.params,
            seed: self.seed,
        };
        std::fs::write(dir.join(BUNDLE_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Loads a bundle, checking every listed file's hash and layout tag.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(BUNDLE_MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::Format {
            path: mpath.display().to_string(),
            reason: format!("cannot read bundle manifest: {e}"),
        })?;
        let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mpath.display().to_string(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Format {
                path: mpath.display().to_string(),
                reason: format!("unsupported bundle version {}", manifest.format_version),
            });
        }
        let mut out = PipelineModels {
            params: manifest.params,
            seed: manifest.seed,
            ..Default::default()
        };
        for e in &manifest.entries {
            let s = e.stage;
            if e.layout != s.layout() {
                return Err(Error::LayoutMismatch {
                    model: s.name().into(),
                    found: e.layout.clone(),
                    expected: s.layout().into(),
                });
            }
            let path = dir.join(&e.file);
            let bytes = std::fs::read(&path).map_err(|_| Error::MissingModel(s.name()))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("{} weights do not match the manifest hash", s.name()),
                });
            }
            if s == Stage::N1 {
                let text = String::from_utf8(bytes).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
                let k = PitchKernel::parse(&text, &path.display().to_string())?;
                if k.len() != KERNEL_SIZE {
                    return Err(Error::LayoutMismatch {
                        model: s.name().into(),
                        found: format!("n1-{}-v1", k.len() + N_DCT),
                        expected: N1_LAYOUT.into(),
                    });
                }
                out.kernel = Some(k);
            } else {
                let m = Model::load_expecting(&path, s.layout()).map_err(|e| match e {
                    Error::LayoutMismatch { found, expected, .. } => Error::LayoutMismatch {
                        model: s.name().into(),
                        found,
                        expected,
                    },
                    other => other,
                })?;
                out.set_model(s, m);
            }
        }
        Ok(out)
    }
}

/// Clears the t0s of frames whose whitened spectrum is zero everywhere.
fn silence_guard(family: &SpectrogramFamily, mut t0s: Vec<Vec<TentativeF0>>) -> Vec<Vec<TentativeF0>> {
    for (i, row) in family.l.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v <= 0.0) {
            t0s[i].clear();
        }
    }
    t0s
}

/// Tentative f0s with frames of a fully silent spectrum left empty.
pub fn tentative_f0s(family: &SpectrogramFamily, kernel: &PitchKernel) -> Result<Vec<Vec<TentativeF0>>> {
    let tento = kernel.tentogram(family.l4.view())?;
    Ok(silence_guard(family, pick_tentative_f0s(&tento)))
}

/// Tentative f0s and pitch contours of one track.
#[derive(Debug, Clone)]
pub struct PitchTrack {
    pub t0s: Vec<Vec<TentativeF0>>,
    pub contours: Vec<Contour>,
}

pub fn pitch_track(family: &SpectrogramFamily, kernel: &PitchKernel, n2: &Model) -> Result<PitchTrack> {
    Ok(pitch_track_full(family, kernel, n2)?.0)
}

fn pitch_track_full(
    family: &SpectrogramFamily,
    kernel: &PitchKernel,
    n2: &Model,
) -> Result<(PitchTrack, Tentogram, PitchogramGrid)> {
    let stack = ShiftedStack::new(family.l4.view(), &kernel.indices)?;
    let tento = kernel.tentogram(family.l4.view())?;
    let t0s = silence_guard(family, pick_tentative_f0s(&tento));
    let prelogits = classify_t0s(n2, &stack, &t0s)?;
    let deposits: Vec<Vec<(f64, f64)>> = t0s
        .iter()
        .zip(&prelogits)
        .map(|(f, z)| f.iter().zip(z).map(|(t, &z)| (t.cents, z)).collect())
        .collect();
    let grid = render_pitchogram(family.n_frames(), &deposits);
    let mut contours = extract_contours(&grid);
    annotate_n2(&mut contours, n2, &stack, &t0s)?;
    Ok((PitchTrack { t0s, contours }, tento, grid))
}

/// Intermediate representations of one transcription.
#[derive(Debug, Clone)]
pub struct Trace {
    pub tentogram: Tentogram,
    pub pitchogram: PitchogramGrid,
    pub contours: Vec<Contour>,
    pub activations: Vec<ContourActivations>,
    /// Smoothed onset curve per contour.
    pub ocs: Vec<Vec<f64>>,
}

fn run(family: &SpectrogramFamily, models: &PipelineModels, keep_trace: bool) -> Result<(Transcription, Option<Trace>)> {
    models.require_all()?;
    let kernel = models.kernel()?;
    let (n3, n4) = (models.require(Stage::N3)?, models.require(Stage::N4)?);
    let (pt, tento, grid) = pitch_track_full(family, kernel, models.require(Stage::N2)?)?;
    let ctx = FeatureContext::new(family, &kernel.indices)?;
    let acts = pt
        .contours
        .iter()
        .map(|c| contour_activations(&ctx, c, n3, n4))
        .collect::<Result<Vec<_>>>()?;
    let p = &models.params;
    let nc = NoteContext::new(&ctx, &pt.t0s, &pt.contours, &acts, &p.onset);
    let notes = tentative_notes(&nc, models.require(Stage::N5)?, &p.onset, &p.offset)?;
    let (notes, _) = classify_notes(&nc, notes, models.require(Stage::N6)?, p.stop_probability)?;
    let tr = Transcription::from_notes(&nc, &notes, family.n_frames());
    let trace = keep_trace.then(|| Trace {
        tentogram: tento,
        pitchogram: grid,
        contours: pt.contours.clone(),
        ocs: nc.ocs.clone(),
        activations: acts.clone(),
    });
    Ok((tr, trace))
}

/// Transcribes one track from its spectrogram family.
pub fn transcribe_family(family: &SpectrogramFamily, models: &PipelineModels) -> Result<Transcription> {
    Ok(run(family, models, false)?.0)
}

/// Transcribes mono audio at any sample rate.
pub fn transcribe(audio: &[f64], sample_rate: u32, models: &PipelineModels) -> Result<Transcription> {
    models.require_all()?;
    let m = compute_spectrogram(audio, sample_rate)?;
    transcribe_family(&SpectrogramFamily::from_magnitude(m, false), models)
}

/// Like [`transcribe`], also returning the spectrogram family and intermediates.
pub fn transcribe_traced(
    audio: &[f64],
    sample_rate: u32,
    models: &PipelineModels,
) -> Result<(Transcription, SpectrogramFamily, Trace)> {
    models.require_all()?;
    let fam = SpectrogramFamily::from_magnitude(compute_spectrogram(audio, sample_rate)?, false);
    let (tr, trace) = run(&fam, models, true)?;
    Ok((tr, fam, trace.expect("trace requested")))
}
