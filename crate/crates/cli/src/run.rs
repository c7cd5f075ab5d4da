use std::path::Path;

use pitchtrack::audio::read_wav;
use pitchtrack::dataset::{build_corpus, load_corpus, AdditiveSynth};
use pitchtrack::pipeline::{dump, train_all, transcribe_traced, PipelineModels};

use crate::config::Layered;
use crate::{Failure, SynthArgs, TrainArgs, TranscribeArgs};

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned())
}

pub fn transcribe(a: &TranscribeArgs) -> Result<(), Failure> {
    let (audio, sr) =
        read_wav(&a.audio).map_err(|e| Failure::Input(format!("cannot read audio {}: {e}", a.audio.display())))?;
    let models = PipelineModels::load(&a.models).map_err(|e| Failure::Bundle(format!("model bundle {}: {e}", a.models.display())))?;
    if let Some(s) = models.missing().first() {
        return Err(Failure::Bundle(format!("model bundle {} lacks stage {s}", a.models.display())));
    }
    let (tr, family, trace) = transcribe_traced(&audio, sr, &models)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    let base = a.out.join(stem(&a.audio));
    let json = base.with_extension("notes.json");
    let csv = base.with_extension("frames.csv");
    tr.write_json(&json)?;
    tr.write_csv(&csv)?;
    if a.midi {
        tr.write_midi(base.with_extension("mid"))?;
    }
    if let Some(d) = &a.dump {
        dump::write_trace(d, &family, &trace)?;
    }
    println!("{}", json.display());
    println!("{}", csv.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = Layered::load(a.config.as_deref(), &a.sets)?.pipeline;
    cfg.seed = a.seed;
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = &a.stages {
        cfg.set("stages", s).map_err(|e| Failure::Input(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Input(e.to_string()))?;
    let corpus = load_corpus(&a.corpus).map_err(|e| Failure::Input(format!("corpus {}: {e}", a.corpus.display())))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text()).map_err(|e| Failure::Runtime(e.to_string()))?;
    let log = a.log.clone().unwrap_or_else(|| a.out.join("train_log.jsonl"));
    let outcome = train_all(&corpus, &cfg, Some(&log))?;
    let manifest = outcome.models.save(&a.out)?;
    for e in &manifest.entries {
        println!("{} {} {}", e.stage, e.file, e.sha256);
    }
    for s in &manifest.missing {
        println!("{s} missing");
    }
    if !outcome.access.respects_dag() {
        return Err(Failure::Runtime("a stage read a model of its own or a later stage".into()));
    }
    Ok(())
}

pub fn synth_dataset(a: &SynthArgs) -> Result<(), Failure> {
    let mut cfg = Layered::load(a.config.as_deref(), &a.sets)?.corpus;
    cfg.seed = a.seed;
    if let Some(n) = a.scores {
        cfg.n_scores = n;
    }
    if let Some(v) = a.versions {
        cfg.versions = v;
    }
    let synth = AdditiveSynth::new(a.seed);
    let manifest = build_corpus(&a.out, &cfg, &synth)?;
    println!("{} excerpts in {}", manifest.excerpts.len(), a.out.display());
    Ok(())
}
