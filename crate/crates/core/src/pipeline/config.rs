//! Training configuration and its `key = value` text form.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};
use crate::eval::MatchSpec;
use crate::events::OnsetGrid;
use crate::notes::STOP_PROBABILITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Stages to train, an ordered prefix of N1..N6.
    pub stages: Vec<Stage>,
    pub jobs: usize,
    pub eq_enabled: bool,
    pub cache_dir: Option<PathBuf>,

    pub n1: Budget,
    pub n1_iterations: usize,
    pub n1_frame_stride: usize,
    pub n1_forward_select: bool,

    pub n2: Budget,
    pub n2_keep_positive: f64,
    pub n2_keep_negative: f64,
    pub n2_max_examples: usize,

    pub n3: Budget,
    pub n3_keep_negative: f64,
    pub n3_max_examples: usize,

    pub n4: Budget,
    pub n4_keep_zero: f64,
    pub n4_max_examples: usize,

    pub n5: Budget,
    pub n5_max_examples: usize,
    pub n5_tune_per_excerpt: usize,

    pub n6: Budget,
    pub n6_max_examples: usize,

    pub onset_tune: bool,
    pub onset_grid: OnsetGrid,
    pub offset_tune: bool,
    pub offset_sigmas: Vec<f64>,
    pub offset_thresholds: Vec<f64>,
    pub stop_tune: bool,
    pub stop_grid: Vec<f64>,
    pub stop_probability: f64,

    pub match_spec: MatchSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            stages: Stage::ALL.to_vec(),
            jobs: 1,
            eq_enabled: true,
            cache_dir: None,
            n1: Budget { max_epochs: 300, patience: 8 },
            n1_iterations: 2,
            n1_frame_stride: 8,
            n1_forward_select: false,
            n2: Budget { max_epochs: 200, patience: 8 },
            n2_keep_positive: 0.25,
            n2_keep_negative: 0.05,
            n2_max_examples: 60_000,
            n3: Budget { max_epochs: 150, patience: 12 },
            n3_keep_negative: 0.05,
            n3_max_examples: 30_000,
            n4: Budget { max_epochs: 150, patience: 12 },
            n4_keep_zero: 0.05,
            n4_max_examples: 30_000,
            n5: Budget { max_epochs: 150, patience: 12 },
            n5_max_examples: 40_000,
            n5_tune_per_excerpt: 15,
            n6: Budget { max_epochs: 150, patience: 12 },
            n6_max_examples: 40_000,
            onset_tune: true,
            onset_grid: OnsetGrid::default(),
            offset_tune: true,
            offset_sigmas: vec![1.3, 2.3, 3.3, 4.3, 5.3, 6.3, 7.3],
            offset_thresholds: (0..=10).map(|i| 0.27 + 0.04 * i as f64).map(round6).collect(),
            stop_tune: true,
            stop_grid: vec![0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75],
            stop_probability: STOP_PROBABILITY,
            match_spec: MatchSpec::default(),
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::InvalidArgument(format!("config key `{key}`: cannot parse `{value}` as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, what))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "a boolean")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = v
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s, "a number list"))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(bad(key, v, "a non-empty number list"));
    }
    Ok(out)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        PipelineConfig { seed, ..Self::default() }
    }

    fn budget_mut(&mut self, stage: &str) -> Option<&mut Budget> {
        Some(match stage {
            "n1" => &mut self.n1,
            "n2" => &mut self.n2,
            "n3" => &mut self.n3,
            "n4" => &mut self.n4,
            "n5" => &mut self.n5,
            "n6" => &mut self.n6,
            _ => return None,
        })
    }

    pub fn budget(&self, stage: Stage) -> Budget {
        match stage {
            Stage::N1 => self.n1,
            Stage::N2 => self.n2,
            Stage::N3 => self.n3,
            Stage::N4 => self.n4,
            Stage::N5 => self.n5,
            Stage::N6 => self.n6,
        }
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        if let Some((stage, field)) = key.split_once('.') {
            if field == "max_epochs" || field == "patience" {
                if let Some(b) = self.budget_mut(stage) {
                    let n = num(key, v, "an integer")?;
                    match field {
                        "max_epochs" => b.max_epochs = n,
                        _ => b.patience = n,
                    }
                    return Ok(());
                }
            }
        }
        match key {
            "seed" => self.seed = num(key, v, "an integer")?,
            "stages" => {
                self.stages = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(Stage::parse)
                    .collect::<Result<_>>()?
            }
            "jobs" => self.jobs = num(key, v, "an integer")?,
            "eq.enabled" => self.eq_enabled = flag(key, v)?,
            "cache_dir" => self.cache_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "n1.iterations" => self.n1_iterations = num(key, v, "an integer")?,
            "n1.frame_stride" => self.n1_frame_stride = num(key, v, "an integer")?,
            "n1.forward_select" => self.n1_forward_select = flag(key, v)?,
            "n2.keep_positive" => self.n2_keep_positive = num(key, v, "a number")?,
            "n2.keep_negative" => self.n2_keep_negative = num(key, v, "a number")?,
            "n2.max_examples" => self.n2_max_examples = num(key, v, "an integer")?,
            "n3.keep_negative" => self.n3_keep_negative = num(key, v, "a number")?,
            "n3.max_examples" => self.n3_max_examples = num(key, v, "an integer")?,
            "n4.keep_zero" => self.n4_keep_zero = num(key, v, "a number")?,
            "n4.max_examples" => self.n4_max_examples = num(key, v, "an integer")?,
            "n5.max_examples" => self.n5_max_examples = num(key, v, "an integer")?,
            "n5.tune_per_excerpt" => self.n5_tune_per_excerpt = num(key, v, "an integer")?,
            "n6.max_examples" => self.n6_max_examples = num(key, v, "an integer")?,
            "onset.tune" => self.onset_tune = flag(key, v)?,
            "onset.grid.z" => self.onset_grid.z = list(key, v)?,
            "onset.grid.r" => self.onset_grid.r = list(key, v)?,
            "onset.grid.sigma" => self.onset_grid.sigma = list(key, v)?,
            "onset.grid.threshold" => self.onset_grid.threshold = list(key, v)?,
            "offset.tune" => self.offset_tune = flag(key, v)?,
            "offset.sigmas" => self.offset_sigmas = list(key, v)?,
            "offset.thresholds" => self.offset_thresholds = list(key, v)?,
            "note.tune_stop" => self.stop_tune = flag(key, v)?,
            "note.stop_grid" => self.stop_grid = list(key, v)?,
            "note.stop_probability" => self.stop_probability = num(key, v, "a number")?,
            "eval.pitch_cents" => self.match_spec.pitch_cents = num(key, v, "a number")?,
            "eval.onset_s" => self.match_spec.onset_s = num(key, v, "a number")?,
            "eval.offset_s" => self.match_spec.offset_s = num(key, v, "a number")?,
            "eval.onoff_offset_ratio" => self.match_spec.onoff_offset_ratio = num(key, v, "a number")?,
            "eval.onoff_offset_s" => self.match_spec.onoff_offset_s = num(key, v, "a number")?,
            "eval.frame_cents" => self.match_spec.frame_cents = num(key, v, "a number")?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, in a form `apply_text` reads back.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("stages".into(), self.stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")),
            ("jobs".into(), self.jobs.to_string()),
            ("eq.enabled".into(), self.eq_enabled.to_string()),
            (
                "cache_dir".into(),
                self.cache_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ];
        for s in Stage::ALL {
            let b = self.budget(s);
            let p = s.name().to_lowercase();
            v.push((format!("{p}.max_epochs"), b.max_epochs.to_string()));
            v.push((format!("{p}.patience"), b.patience.to_string()));
        }
        let rest: [(&str, String); 30] = [
            ("n1.iterations", self.n1_iterations.to_string()),
            ("n1.frame_stride", self.n1_frame_stride.to_string()),
            ("n1.forward_select", self.n1_forward_select.to_string()),
            ("n2.keep_positive", self.n2_keep_positive.to_string()),
            ("n2.keep_negative", self.n2_keep_negative.to_string()),
            ("n2.max_examples", self.n2_max_examples.to_string()),
            ("n3.keep_negative", self.n3_keep_negative.to_string()),
            ("n3.max_examples", self.n3_max_examples.to_string()),
            ("n4.keep_zero", self.n4_keep_zero.to_string()),
            ("n4.max_examples", self.n4_max_examples.to_string()),
            ("n5.max_examples", self.n5_max_examples.to_string()),
            ("n5.tune_per_excerpt", self.n5_tune_per_excerpt.to_string()),
            ("n6.max_examples", self.n6_max_examples.to_string()),
            ("onset.tune", self.onset_tune.to_string()),
            ("onset.grid.z", fmt_list(&self.onset_grid.z)),
            ("onset.grid.r", fmt_list(&self.onset_grid.r)),
            ("onset.grid.sigma", fmt_list(&self.onset_grid.sigma)),
            ("onset.grid.threshold", fmt_list(&self.onset_grid.threshold)),
            ("offset.tune", self.offset_tune.to_string()),
            ("offset.sigmas", fmt_list(&self.offset_sigmas)),
            ("offset.thresholds", fmt_list(&self.offset_thresholds)),
            ("note.tune_stop", self.stop_tune.to_string()),
            ("note.stop_grid", fmt_list(&self.stop_grid)),
            ("note.stop_probability", self.stop_probability.to_string()),
            ("eval.pitch_cents", self.match_spec.pitch_cents.to_string()),
            ("eval.onset_s", self.match_spec.onset_s.to_string()),
            ("eval.offset_s", self.match_spec.offset_s.to_string()),
            ("eval.onoff_offset_ratio", self.match_spec.onoff_offset_ratio.to_string()),
            ("eval.onoff_offset_s", self.match_spec.onoff_offset_s.to_string()),
            ("eval.frame_cents", self.match_spec.frame_cents.to_string()),
        ];
        v.extend(rest.into_iter().map(|(k, s)| (k.to_string(), s)));
        v
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks that the stages form an ordered prefix of N1..N6.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("no stages to train".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if *s != Stage::ALL[i] {
                return Err(Error::InvalidArgument(format!(
                    "stage order violated: position {} holds {} but {} is required; \
                     every stage depends on all earlier ones",
                    i + 1,
                    s.name(),
                    Stage::ALL[i].name()
                )));
            }
        }
        if self.jobs == 0 {
            return Err(Error::InvalidArgument("jobs must be at least 1".into()));
        }
        if self.n1_iterations == 0 || self.n1_frame_stride == 0 {
            return Err(Error::InvalidArgument("n1.iterations and n1.frame_stride must be positive".into()));
        }
        Ok(())
    }
}
