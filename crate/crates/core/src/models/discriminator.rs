use std::cell::RefCell;
use std::ops::Range;

use candle_core::{DType, Device, Tensor};

use super::config::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Builder, Conv2d, ConvBlock, Mode, ParamStore};

/// PatchGAN discriminator over `(L, AB)` stacks.
#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    blocks: Vec<ConvBlock>,
    last: Conv2d,
}

/// Per-patch responses `(N, 1, P, P)` and their spatial means `(N,)`.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub patches: Tensor,
    pub logits: Tensor,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = RefCell::new(ParamStore::default());
        let root = Builder::new(&store, seed, dtype, device);
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::with_capacity(cfg.filters.len());
        for (i, (&f, &s)) in cfg.filters.iter().zip(&cfg.strides).enumerate() {
            blocks.push(ConvBlock::new(
                &root.pp(format!("block{i}")),
                cin,
                f,
                cfg.kernel,
                s,
                cfg.padding,
                Activation::LeakyRelu(cfg.leaky_slope),
            )?);
            cin = f;
        }
        let last = Conv2d::new(&root.pp("out"), cin, 1, cfg.kernel, 1, cfg.padding, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            store: store.into_inner(),
            blocks,
            last,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn first_conv_weight_shape(&self) -> Vec<usize> {
        self.blocks[0].conv().weight().dims().to_vec()
    }

    pub fn forward(&self, l: &Tensor, ab: &Tensor, mode: Mode) -> Result<DiscriminatorOutput> {
        let size = self.cfg.image_size;
        let n = match l.dims() {
            &[n, 1, h, w] if h == size && w == size && n > 0 => n,
            other => return Err(Error::shape(format!("l: (N, 1, {size}, {size})"), format!("{other:?}"))),
        };
        if ab.dims() != [n, 2, size, size] {
            return Err(Error::shape(
                format!("ab: ({n}, 2, {size}, {size})"),
                format!("{:?}", ab.dims()),
            ));
        }
        let mut h = Tensor::cat(&[l, &ab.to_dtype(l.dtype())?], 1)?;
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
        }
        let patches = self.last.forward(&h)?;
        let logits = patches.flatten_from(1)?.mean(1)?;
        Ok(DiscriminatorOutput { patches, logits })
    }

    /// Input rows (or columns) that can influence patch row `index`, clipped to the image.
    pub fn receptive_field(&self, index: usize) -> Range<usize> {
        // Walk back through the stack: an output span [lo, hi] at a layer
        // with (k, s, p) reads input span [lo*s - p, hi*s - p + k - 1].
        let (mut lo, mut hi) = (index as isize, index as isize);
        for (k, s, p) in self.cfg.layers().into_iter().rev() {
            lo = lo * s as isize - p as isize;
            hi = hi * s as isize - p as isize + k as isize - 1;
        }
        let size = self.cfg.image_size as isize;
        (lo.max(0) as usize)..((hi + 1).min(size) as usize)
    }
}
