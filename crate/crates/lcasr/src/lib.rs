//! Long-context speech recognition laboratory: a CPU-only CTC/Conformer
//! stack with attention variants, long-form decoding schemes, and the
//! evaluation harness around them.

pub mod alloc_meter;
pub mod attention;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod encoder;
pub mod eval;
pub mod longform;
pub mod params;
pub mod posenc;
pub mod schedule;
pub mod tensor;
pub mod toyset;
pub mod train;
pub mod tokenizer;
