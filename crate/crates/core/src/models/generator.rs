use std::cell::RefCell;

use candle_core::{DType, Device, Tensor};

use super::config::{GeneratorConfig, RrdbConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Builder, Conv2d, ConvBlock, ConvTranspose2d, Linear, Mode, ParamStore};

/// Dense block: every conv sees the block input concatenated with all earlier outputs.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    convs: Vec<ConvBlock>,
}

impl DenseBlock {
    fn new(b: &Builder, channels: usize, cfg: &RrdbConfig, kernel: usize, slope: f64) -> Result<Self> {
        let n = cfg.convs_per_rdb;
        let convs = (0..n)
            .map(|i| {
                let cin = channels + i * cfg.growth_channels;
                let cout = if i + 1 == n { channels } else { cfg.growth_channels };
                ConvBlock::new(&b.pp(i), cin, cout, kernel, 1, kernel / 2, Activation::LeakyRelu(slope))
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor, beta: f64, mode: Mode) -> Result<Tensor> {
        let mut features = vec![x.clone()];
        let mut last = x.clone();
        for conv in &self.convs {
            let input = if features.len() == 1 {
                x.clone()
            } else {
                Tensor::cat(&features, 1)?
            };
            last = conv.forward(&input, mode)?;
            features.push(last.clone());
        }
        Ok((last.affine(beta, 0.0)? + x)?)
    }
}

/// Residual-in-residual dense block: `x + beta * RDB_n(... RDB_1(x))`.
#[derive(Debug, Clone)]
pub struct Rrdb {
    blocks: Vec<DenseBlock>,
}

impl Rrdb {
    fn new(b: &Builder, channels: usize, cfg: &RrdbConfig, kernel: usize, slope: f64) -> Result<Self> {
        let blocks = (0..cfg.num_rdb)
            .map(|i| DenseBlock::new(&b.pp(i), channels, cfg, kernel, slope))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Only `cfg.beta` is read, so callers may vary it without rebuilding.
    pub fn forward(&self, x: &Tensor, cfg: &RrdbConfig, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, cfg.beta, mode)?;
        }
        Ok((h.affine(cfg.beta, 0.0)? + x)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    convs: [ConvBlock; 2],
    down: Option<ConvBlock>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: ConvTranspose2d,
    up_bn: crate::nn::BatchNorm2d,
    convs: [ConvBlock; 2],
}

/// Intermediate tensors of one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    /// Encoder output multiplied by the text field, before the RRDB.
    pub fused: Tensor,
    /// Text field, `(N, 1, F, F)`.
    pub text_field: Tensor,
    /// Chroma prediction in model units, `(N, 2, H, W)`.
    pub ab: Tensor,
}

/// Text-conditioned U-Net style generator predicting AB from L.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    encoder: Vec<EncoderLevel>,
    text_fc1: Linear,
    text_fc2: Linear,
    rrdb: Rrdb,
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = RefCell::new(ParamStore::default());
        let root = Builder::new(&store, seed, dtype, device);
        let f = cfg.base_filters;
        let k = cfg.kernel;
        let p = k / 2;
        let relu = Activation::Relu;

        let mut encoder = Vec::with_capacity(cfg.encoder_levels);
        for level in 0..cfg.encoder_levels {
            let b = root.pp(format!("enc{level}"));
            let cin = if level == 0 { 1 } else { f };
            let convs = [
                ConvBlock::new(&b.pp("conv0"), cin, f, k, 1, p, relu)?,
                ConvBlock::new(&b.pp("conv1"), f, f, k, 1, p, relu)?,
            ];
            let down = if level + 1 < cfg.encoder_levels {
                Some(ConvBlock::new(&b.pp("down"), f, f, k, 2, p, relu)?)
            } else {
                None
            };
            encoder.push(EncoderLevel { convs, down });
        }

        let (hidden, area) = cfg.text_fc_sizes;
        let text_fc1 = Linear::new(&root.pp("text.fc1"), cfg.text_dim, hidden)?;
        let text_fc2 = Linear::new(&root.pp("text.fc2"), hidden, area)?;
        let rrdb = Rrdb::new(&root.pp("rrdb"), f, &cfg.rrdb, k, cfg.leaky_slope)?;

        let mut decoder = Vec::with_capacity(cfg.decoder_filters.len());
        let mut cin = f;
        for (i, &df) in cfg.decoder_filters.iter().enumerate() {
            let b = root.pp(format!("dec{i}"));
            decoder.push(DecoderLevel {
                up: ConvTranspose2d::new(&b.pp("up"), cin, df)?,
                up_bn: crate::nn::BatchNorm2d::new(&b.pp("up_bn"), df)?,
                convs: [
                    ConvBlock::new(&b.pp("conv0"), df + f, df, k, 1, p, relu)?,
                    ConvBlock::new(&b.pp("conv1"), df, df, k, 1, p, relu)?,
                ],
            });
            cin = df;
        }
        let head = Conv2d::new(&root.pp("head"), cin, cfg.output_channels, 1, 1, 0, true)?;

        Ok(Self {
            cfg: cfg.clone(),
            store: store.into_inner(),
            encoder,
            text_fc1,
            text_fc2,
            rrdb,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.head.weight().dtype()
    }

    pub fn device(&self) -> &Device {
        self.head.weight().device()
    }

    pub fn rrdb(&self) -> &Rrdb {
        &self.rrdb
    }

    fn check_inputs(&self, l: &Tensor, s: &Tensor) -> Result<usize> {
        let size = self.cfg.image_size;
        let n = match l.dims() {
            &[n, 1, h, w] if h == size && w == size && n > 0 => n,
            other => return Err(Error::shape(format!("l: (N, 1, {size}, {size})"), format!("{other:?}"))),
        };
        if s.dims() != [n, self.cfg.text_dim] {
            return Err(Error::shape(
                format!("s: ({n}, {})", self.cfg.text_dim),
                format!("{:?}", s.dims()),
            ));
        }
        Ok(n)
    }

    /// Runs the encoder and the text path and returns `(skips, fused, text_field)`.
    fn encode(&self, l: &Tensor, s: &Tensor, mode: Mode) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
        let n = self.check_inputs(l, s)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = l.clone();
        for level in &self.encoder {
            h = level.convs[0].forward(&h, mode)?;
            h = level.convs[1].forward(&h, mode)?;
            if let Some(down) = &level.down {
                skips.push(h.clone());
                h = down.forward(&h, mode)?;
            }
        }
        let fusion = self.cfg.fusion_size();
        let hidden = self.text_fc1.forward(&s.to_dtype(h.dtype())?)?.relu()?;
        let field = self.text_fc2.forward(&hidden)?.reshape((n, 1, fusion, fusion))?;
        let fused = h.broadcast_mul(&field)?;
        Ok((skips, fused, field))
    }

    pub fn forward_trace(&self, l: &Tensor, s: &Tensor, mode: Mode) -> Result<GeneratorTrace> {
        let (skips, fused, text_field) = self.encode(l, s, mode)?;
        let mut h = self.rrdb.forward(&fused, &self.cfg.rrdb, mode)?;
        for (level, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = level.up_bn.forward(&level.up.forward(&h)?, mode)?.relu()?;
            h = Tensor::cat(&[&h, skip], 1)?;
            h = level.convs[0].forward(&h, mode)?;
            h = level.convs[1].forward(&h, mode)?;
        }
        let ab = self.head.forward(&h)?.tanh()?;
        Ok(GeneratorTrace { fused, text_field, ab })
    }

    /// `l`: `(N, 1, S, S)` in model units; `s`: `(N, text_dim)`. Returns AB `(N, 2, S, S)` in `[-1, 1]`.
    pub fn forward(&self, l: &Tensor, s: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_trace(l, s, mode)?.ab)
    }
}
