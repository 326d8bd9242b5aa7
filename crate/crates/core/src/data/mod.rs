//! Synthetic datasets, image and map files, checkpoints, and fold plans.

mod checkpoint;
mod csv;
mod folds;
mod pgm;
mod synthetic;

pub use checkpoint::{
    decode_tensors, encode_tensors, load_checkpoint, read_tensors, save_checkpoint, write_tensors, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use csv::{read_map_csv, write_csv, write_map_csv};
pub use folds::{kfold, FoldPlan};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use synthetic::{generate_synthetic, render_sample, Sample, Shape, ShapeKind, SyntheticConfig};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` through a sibling temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
