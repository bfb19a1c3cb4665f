//! Synthetic multi-domain samples, captions and the hash tokenizer.

pub mod captions;
pub mod probe;
pub mod synth;
pub mod tokenizer;

pub use captions::{apply_captions, export_dataset, load_captions, parse_captions, write_captions};
pub use probe::{domain_dominance_probe, ProbeReport};
pub use synth::{
    generate_synthetic_dataset, AttackSubtype, CaptionTemplates, DatasetSpec, Label,
    SyntheticSample,
};
pub use tokenizer::{tokenize_caption, TokenSequence};
