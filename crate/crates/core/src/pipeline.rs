//! Inference: image and description in, colourised image out.
//!
//! decode -> resize/crop -> CIELAB -> L only -> embed description ->
//! generator (eval mode) -> reassemble LAB -> sRGB -> PNG.

use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};

use crate::colorspace::{assemble_rgb, l_to_model, rgb_to_lab, RgbImage};
use crate::error::{Error, Result};
use crate::imageio;
use crate::models::{Checkpoint, Generator};
use crate::nn::Mode;
use crate::text::{encode_description, TextEncoderSpec, Vocabulary, EMBEDDING_DIM};
use crate::trainer::META_TEXT_ENCODER;

/// A generator plus the vocabulary it was trained with. Immutable; safe to share.
pub struct Colorizer {
    id: String,
    generator: Generator,
    vocab: Arc<Vocabulary>,
}

impl std::fmt::Debug for Colorizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Colorizer").field("id", &self.id).finish_non_exhaustive()
    }
}

impl Colorizer {
    pub fn new(id: impl Into<String>, generator: Generator, vocab: Arc<Vocabulary>) -> Self {
        Self {
            id: id.into(),
            generator,
            vocab,
        }
    }

    /// Loads a checkpoint that embeds a text-encoder spec; the id is the file stem.
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let ck = Checkpoint::load(path, device)?;
        let spec: TextEncoderSpec = ck
            .metadata_json(META_TEXT_ENCODER)?
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{}: no text encoder recorded", path.display())))?;
        let id = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        Ok(Self::new(id, ck.generator(device)?, Arc::new(spec.build()?)))
    }

    /// Writes `generator` with `spec` recorded, in the form [`Colorizer::load`] reads.
    pub fn save(generator: &Generator, spec: &TextEncoderSpec, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.put_generator(generator);
        ck.set_metadata_json(META_TEXT_ENCODER, spec);
        ck.save(path)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn image_size(&self) -> usize {
        self.generator.config().image_size
    }

    /// Colourises each `(image, description)` pair; an empty description uses the zero embedding.
    pub fn colorize_batch(&self, items: &[(&RgbImage, &str)]) -> Result<Vec<RgbImage>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let size = self.image_size();
        let mut ls = Vec::with_capacity(items.len() * size * size);
        let mut ss = Vec::with_capacity(items.len() * EMBEDDING_DIM);
        for (image, description) in items {
            let lab = rgb_to_lab(&imageio::resize_center_crop(image, size)?);
            ls.extend(lab.l.iter().map(|&v| l_to_model(v as f64) as f32));
            ss.extend(encode_description(description, &self.vocab).0);
        }
        let (n, dev, dt) = (items.len(), self.generator.device(), self.generator.dtype());
        let l = Tensor::from_vec(ls.clone(), (n, 1, size, size), dev)?.to_dtype(dt)?;
        let s = Tensor::from_vec(ss, (n, EMBEDDING_DIM), dev)?.to_dtype(dt)?;
        let ab: Vec<f32> = self
            .generator
            .forward(&l, &s, Mode::Eval)?
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        let plane = size * size;
        (0..n)
            .map(|i| assemble_rgb(size, size, &ls[i * plane..(i + 1) * plane], &ab[i * 2 * plane..(i + 1) * 2 * plane]))
            .collect()
    }

    pub fn colorize(&self, image: &RgbImage, description: &str) -> Result<RgbImage> {
        Ok(self.colorize_batch(&[(image, description)])?.remove(0))
    }

    pub fn colorize_png(&self, bytes: &[u8], description: &str) -> Result<Vec<u8>> {
        imageio::encode_png(&self.colorize(&imageio::decode(bytes)?, description)?)
    }
}
