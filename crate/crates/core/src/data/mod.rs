//! Synthetic data generation and on-disk formats.

pub mod loader;
pub mod manifest;
pub mod pgm;
pub mod phantom;

pub use loader::{load_batch, standardize, Batch, SliceItem, SliceSet};
pub use manifest::{Manifest, SliceRecord, Split};
pub use pgm::{read_pgm, write_pgm, GrayImage};
pub use phantom::{generate_dataset, generate_volume, PhantomParams, PhantomSlice};
