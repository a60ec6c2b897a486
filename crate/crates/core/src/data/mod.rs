//! Samples, dataset manifests, the synthetic shapes corpus and batching.

mod batch;
mod manifest;
mod synth;

use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;

pub use batch::{make_batches, Batch, BatchStream, PreparedSample};
pub use manifest::{
    load_dataset, Dataset, DatasetKind, DatasetManifest, DescriptionSources, LoadReport, Record, RecordError,
    SplitRule,
};
pub use synth::{foreground_mean_ab, synth_generate, write_corpus, Palette, Shape, SYNTH_BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Evaluation-only annotations; empty for real datasets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleMeta {
    /// Row-major foreground mask, same size as the image.
    pub mask: Option<Vec<bool>>,
    pub color: Option<String>,
    pub shape: Option<Shape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub description: String,
    pub split: Split,
    pub meta: SampleMeta,
}
