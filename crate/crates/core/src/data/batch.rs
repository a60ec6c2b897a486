use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::colorspace::{rgb_to_lab, to_model_units};
use crate::error::{Error, Result};
use crate::text::{encode_description, Vocabulary, EMBEDDING_DIM};

/// One sample in model units, converted once up front.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub size: usize,
    /// `size * size` lightness values in `[-1, 1]`.
    pub l: Vec<f32>,
    /// Planar `2 * size * size` chroma values in `[-1, 1]`.
    pub ab: Vec<f32>,
    pub embedding: Vec<f32>,
}

impl PreparedSample {
    pub fn new(sample: &Sample, vocab: &Vocabulary) -> Result<Self> {
        let (w, h) = (sample.image.width(), sample.image.height());
        if w != h {
            return Err(Error::Data(format!("sample {} is {w}x{h}, expected a square image", sample.id)));
        }
        let m = to_model_units(&rgb_to_lab(&sample.image));
        Ok(Self {
            id: sample.id.clone(),
            size: w,
            l: m.l,
            ab: m.ab,
            embedding: encode_description(&sample.description, vocab).0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(N, 1, S, S)`
    pub l: Tensor,
    /// `(N, 2, S, S)`
    pub ab: Tensor,
    /// `(N, 256)`
    pub s: Tensor,
}

impl Batch {
    pub fn from_prepared(items: &[&PreparedSample], dtype: DType, device: &Device) -> Result<Self> {
        let n = items.len();
        let size = items.first().map_or(0, |p| p.size);
        let cat = |f: &dyn Fn(&PreparedSample) -> &[f32]| -> Vec<f32> { items.iter().flat_map(|p| f(p).iter().copied()).collect() };
        let l = Tensor::from_vec(cat(&|p| &p.l), (n, 1, size, size), device)?.to_dtype(dtype)?;
        let ab = Tensor::from_vec(cat(&|p| &p.ab), (n, 2, size, size), device)?.to_dtype(dtype)?;
        let s = Tensor::from_vec(cat(&|p| &p.embedding), (n, EMBEDDING_DIM), device)?.to_dtype(dtype)?;
        Ok(Self {
            ids: items.iter().map(|p| p.id.clone()).collect(),
            l,
            ab,
            s,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Seeded epoch-shuffled batches over a prepared corpus.
///
/// Iteration `k` maps to epoch `k / batches_per_epoch`, so any batch can be
/// rebuilt from its iteration number alone (used when resuming).
#[derive(Debug, Clone)]
pub struct BatchStream {
    samples: Vec<PreparedSample>,
    batch_size: usize,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Converts and encodes `samples` once; batches are cut from per-epoch shuffles.
pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64, vocab: &Vocabulary) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("no samples to batch".into()));
    }
    let prepared = samples
        .iter()
        .map(|s| PreparedSample::new(s, vocab))
        .collect::<Result<Vec<_>>>()?;
    let size = prepared[0].size;
    if let Some(p) = prepared.iter().find(|p| p.size != size) {
        return Err(Error::Data(format!("sample {} is {}x{}, others are {size}x{size}", p.id, p.size, p.size)));
    }
    Ok(BatchStream {
        samples: prepared,
        batch_size,
        seed,
        dtype: DType::F32,
        device: Device::Cpu,
    })
}

impl BatchStream {
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_device(mut self, device: Device) -> Self {
        self.device = device;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.samples[0].size
    }

    pub fn samples(&self) -> &[PreparedSample] {
        &self.samples
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn build(&self, order: &[usize], index: usize) -> Result<Batch> {
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        let items: Vec<&PreparedSample> = order[start..end].iter().map(|&i| &self.samples[i]).collect();
        Batch::from_prepared(&items, self.dtype, &self.device)
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.epoch_order(epoch);
        (0..self.batches_per_epoch()).map(move |i| self.build(&order, i))
    }

    /// The batch consumed at a 0-based training iteration.
    pub fn batch_at(&self, iteration: u64) -> Result<Batch> {
        let per = self.batches_per_epoch() as u64;
        let order = self.epoch_order(iteration / per);
        self.build(&order, (iteration % per) as usize)
    }

    /// Every sample once, in corpus order.
    pub fn sequential(&self) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order: Vec<usize> = (0..self.samples.len()).collect();
        (0..self.batches_per_epoch()).map(move |i| self.build(&order, i))
    }
}
