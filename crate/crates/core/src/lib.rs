//! Non-neural tooling for instance-segmentation pipelines.
//!
//! - [`mask`]: dense masks, COCO RLE codec, polygon rasterization, IoU, flips
//! - [`coco`]: COCO-style dataset and result files
//! - [`augment`]: scale/crop/pad/flip augmentation and Copy-Paste
//! - [`softnms`]: score-decay non-maximum suppression
//! - [`tta`]: horizontal-flip test-time augmentation fusion
//! - [`ensemble`]: per-category integration of two models' results
//! - [`swa`]: checkpoint averaging and cyclic learning-rate schedules
//! - [`eval`]: COCO mask AP@[0.50:0.95]
//! - [`cli`]: the `segkit` command line (feature `cli`)

pub mod augment;
#[cfg(feature = "cli")]
pub mod cli;
pub mod coco;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod mask;
pub mod softnms;
pub mod swa;
pub mod tta;

pub use coco::{Annotation, Category, Dataset, Detection, ImageInfo, Segmentation};
pub use error::{Error, Result};
pub use mask::{BBox, BinaryMask, Rle};

/// Order-preserving map, parallel when the `parallel` feature is enabled.
/// Results never depend on the number of worker threads.
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
