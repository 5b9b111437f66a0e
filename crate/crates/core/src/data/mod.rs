//! Synthetic grounded-VQA data: generation, vocabulary, and disk format.

pub mod gen;
pub mod io;
pub mod vocab;

pub use gen::{derive_seed, generate_sample, tag_response, DataSample, QuestionFamily, TaskConfig};
pub use io::{gen_dataset, read_dataset, split_samples, write_dataset, DatasetManifest, DATASET_VERSION};
