//! Datasets, streaming chunks, the `LCDM` container and synthetic data.

pub mod container;
pub mod dataset;
pub mod lcdm;
pub mod synth;

pub use dataset::{
    load_matrix, mat_from_lcdm, mat_to_lcdm, save_matrix, Chunk, ChunkStream, LabelMatrix,
    PairedDataset, TeacherFeatures,
};
pub use lcdm::{Dtype, LcdmMatrix, Payload};
pub use synth::{synth_generate, SynthConfig, SynthData};
