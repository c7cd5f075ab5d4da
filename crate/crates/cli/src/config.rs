//! Layered configuration: defaults, then a key/value file, then `--set`
//! overrides, then dedicated flags. Keys under `corpus.` configure corpus
//! rendering; all others configure training.

use std::path::Path;

use pitchtrack::dataset::CorpusConfig;
use pitchtrack::pipeline::PipelineConfig;

use crate::Failure;

#[derive(Debug, Clone, Default)]
pub struct Layered {
    pub pipeline: PipelineConfig,
    pub corpus: CorpusConfig,
}

impl Layered {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let r = if key.starts_with("corpus.") {
            self.corpus.set(key, value)
        } else {
            self.pipeline.set(key, value)
        };
        r.map_err(|e| Failure::Input(e.to_string()))
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Failure> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Input(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Failure::Input(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then each `key=value` of `sets`.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, Failure> {
        let mut c = Layered::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", p.display())))?;
            c.apply_text(&text, &p.display().to_string())?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::Input(format!("--set expects KEY=VALUE, got `{s}`")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }
}
