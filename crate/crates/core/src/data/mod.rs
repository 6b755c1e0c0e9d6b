//! Vocabularies, composition spaces, datasets and their file formats.

mod dataset;
pub mod io;
mod space;
mod synthetic;

pub use dataset::{batches, EmbeddingDataset, Split, UNIT_NORM_TOL};
pub use io::{load_dataset, write_dataset, LoadedDataset};
pub use space::{target_space, CompositionSpace, World};
pub use synthetic::{generate_synthetic, Synthetic, SyntheticConfig, SyntheticSource};
