//! Minimal layer toolkit over `candle_core`: a named parameter store with
//! seeded initialisation, convolutions, batch normalisation and linear maps.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics, deterministic.
    Eval,
}

/// Learnable parameters and non-learnable buffers, keyed by dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every tensor, parameters first, in name order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every entry from `lookup`, which must supply matching shapes and dtypes.
    pub fn assign_from(&self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = lookup(name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() || t.dtype() != var.dtype() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {name}: expected {:?} {:?}, found {:?} {:?}",
                    var.dims(),
                    var.dtype(),
                    t.dims(),
                    t.dtype()
                )));
            }
            var.set(&t)?;
        }
        Ok(())
    }

    /// Sum of squares of all trainable values, in f64.
    pub fn squared_norm(&self) -> Result<f64> {
        let mut total = 0.0;
        for v in self.params.values() {
            total += v.as_tensor().to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(total)
    }

    /// Deep copy, so later updates to `self` are not visible in the snapshot.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named_tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect()
    }
}

pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Registers parameters into a [`ParamStore`] under a name prefix.
///
/// Each tensor draws from its own stream seeded by `(seed, full name)`, so
/// values do not depend on construction order.
pub(crate) struct Builder<'a> {
    store: &'a RefCell<ParamStore>,
    prefix: String,
    seed: u64,
    dtype: DType,
    device: &'a Device,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a RefCell<ParamStore>, seed: u64, dtype: DType, device: &'a Device) -> Self {
        Self {
            store,
            prefix: String::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Builder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            seed: self.seed,
            dtype: self.dtype,
            device: self.device,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let full = self.full_name(name);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(&full));
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let var = self.make(shape, values)?;
        self.store.borrow_mut().params.insert(full, var.clone());
        Ok(var)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let full = self.full_name(name);
        let n: usize = shape.iter().product();
        let var = self.make(shape, vec![value; n])?;
        let mut store = self.store.borrow_mut();
        if trainable {
            store.params.insert(full, var.clone());
        } else {
            store.buffers.insert(full, var.clone());
        }
        Ok(var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            // relu(x) - slope * relu(-x)
            Activation::LeakyRelu(slope) => (x.relu()? - x.neg()?.relu()?.affine(slope, 0.0)?)?,
            Activation::Tanh => x.tanh()?,
            Activation::Identity => x.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Fan-in scaled uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub(crate) fn new(
        b: &Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = b.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = if bias {
            Some(b.uniform("bias", &[out_channels], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

/// Transposed convolution with kernel 4, stride 2, padding 1: doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
}

impl ConvTranspose2d {
    pub(crate) fn new(b: &Builder, in_channels: usize, out_channels: usize) -> Result<Self> {
        let bound = 1.0 / ((out_channels * 16) as f64).sqrt();
        let weight = b.uniform("weight", &[in_channels, out_channels, 4, 4], bound)?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv_transpose2d(self.weight.as_tensor(), 1, 0, 2, 1)?)
    }
}

/// Bias-free linear map `y = x W^T`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
}

impl Linear {
    pub(crate) fn new(b: &Builder, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = b.uniform("weight", &[out_features, in_features], bound)?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub(crate) fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[channels], 1.0, true)?,
            beta: b.constant("beta", &[channels], 0.0, true)?,
            running_mean: b.constant("running_mean", &[channels], 0.0, false)?,
            running_var: b.constant("running_var", &[channels], 1.0, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let normalized = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let count = n * h * w;
                let m = BN_MOMENTUM;
                let new_mean = (self.running_mean.as_tensor().affine(1.0 - m, 0.0)?
                    + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
                self.running_mean.set(&new_mean)?;
                if count > 1 {
                    let unbiased = var.detach().flatten_all()?.affine(count as f64 / (count - 1) as f64, 0.0)?;
                    let new_var = (self.running_var.as_tensor().affine(1.0 - m, 0.0)? + unbiased.affine(m, 0.0)?)?;
                    self.running_var.set(&new_var)?;
                }
                centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?
            }
            Mode::Eval => {
                let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
                let std = (self.running_var.as_tensor().reshape((1, c, 1, 1))? + BN_EPS)?.sqrt()?;
                x.broadcast_sub(&mean)?.broadcast_div(&std)?
            }
        };
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normalized.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Convolution, batch normalisation, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        b: &Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&b.pp("conv"), in_channels, out_channels, kernel, stride, padding, false)?,
            bn: BatchNorm2d::new(&b.pp("bn"), out_channels)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.act.apply(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }
}

/// Output size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}
