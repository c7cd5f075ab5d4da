//! Training corpora: MIDI preprocessing, rendering, random equalization and
//! example selection for the Tentogram network.

pub mod corpus;
pub mod eq;
pub mod midi;
pub mod n1;
pub mod synth;

pub use corpus::{build_corpus, generate_excerpts, load_corpus, render_excerpt, CorpusConfig, Excerpt, LoadedExcerpt, Split};
pub use eq::{apply_eq, random_eq_filter, EqFilter};
pub use midi::{adjust_annotations, preprocess_midi, Annotation, DelayTable, MidiNote, MidiScore};
pub use n1::{select_n1_examples, N1Example};
pub use synth::{AdditiveSynth, Synth};
