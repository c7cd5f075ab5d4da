//! Builds a small synthetic corpus, trains every stage and scores held-out
//! excerpts. Usage: desk_run [n_scores] [versions] [test_excerpts]

use std::time::Instant;

use pitchtrack::dataset::{generate_excerpts, render_excerpt, AdditiveSynth, CorpusConfig, LoadedExcerpt, Split};
use pitchtrack::eval::{notes_to_frames, Matcher, PooledCounts};
use pitchtrack::pipeline::{train_all, transcribe, PipelineConfig};

fn corpus(cfg: &CorpusConfig, synth: &AdditiveSynth) -> Vec<LoadedExcerpt> {
    generate_excerpts(cfg)
        .iter()
        .map(|e| render_excerpt(e, synth).map(LoadedExcerpt::from))
        .collect::<Result<_, _>>()
        .expect("render")
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let synth = AdditiveSynth::new(7);
    let t = Instant::now();
    let train_cfg = CorpusConfig { seed: 1, n_scores: arg(0, 8), versions: arg(1, 5), ..Default::default() };
    let data = corpus(&train_cfg, &synth);
    let test_cfg = CorpusConfig { seed: 2, n_scores: arg(2, 8), versions: 1, validation_fraction: 0.0, ..Default::default() };
    let test: Vec<LoadedExcerpt> = corpus(&test_cfg, &synth).into_iter().map(|mut e| {
        e.split = Split::Test;
        e
    }).collect();
    println!("corpus {} + {} test excerpts in {:.1}s", data.len(), test.len(), t.elapsed().as_secs_f64());

    let cfg = PipelineConfig::with_seed(11);
    let out = train_all(&data, &cfg, None).expect("training");
    for e in &out.events {
        let mut e = e.clone();
        if let Some(m) = e.as_object_mut() {
            m.remove("epochs");
            m.remove("config");
        }
        println!("{e}");
    }
    let spec = cfg.match_spec;
    let mut pooled = PooledCounts::default();
    let t = Instant::now();
    for e in &test {
        let tr = transcribe(&e.audio, e.sample_rate, &out.models).expect("transcribe");
        let refs = e.notes();
        let n = tr.framewise.len();
        pooled.add_track(&tr.eval_notes(), &tr.frame_pitches(), &refs, &notes_to_frames(&refs, n), &spec, Matcher::Greedy);
    }
    let r = pooled.report();
    println!("transcribed in {:.1}s", t.elapsed().as_secs_f64());
    println!("F_on {:.1} F_off {:.1} F_onoff {:.1} F_fr {:.1}", r.onset.f, r.offset.f, r.onset_offset.f, r.framewise.f);
}
