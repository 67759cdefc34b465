//! On-disk formats (feature records, word vectors, splits) and the synthetic
//! dataset generator.

mod records;
mod split;
mod synth;
mod vectors;

pub use records::{
    decode_records, decode_records_raw, encode_records, load_feature_records, load_records_raw, save_feature_records,
    FeatureRecord, MAGIC,
};
pub use split::{load_split, parse_split, save_split};
pub use synth::{synth_generate, ScaleSpec, SynthDataset, SynthSpec};
pub use vectors::{load_word_vectors, parse_word_vectors, save_word_vectors, write_word_vectors};
