//! Feature extractors for the perceptual loss.
//!
//! Layer index `rho` (1-based) selects the activation at the end of the
//! `rho`-th convolutional stage. For VGG19 the table is:
//!
//! | rho | layer     | torchvision `features` index |
//! |-----|-----------|------------------------------|
//! | 1   | relu1_2   | 3                            |
//! | 2   | relu2_2   | 8                            |
//! | 3   | relu3_4   | 17                           |
//! | 4   | relu4_4   | 26                           |
//! | 5   | relu5_4   | 35                           |
//!
//! Weights are read from a safetensors file using torchvision names
//! (`features.<index>.weight`, `features.<index>.bias`).

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub trait PerceptualExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Number of addressable layers; valid `rho` values are `1..=num_layers()`.
    fn num_layers(&self) -> usize;

    /// Features of an sRGB batch `(N, 3, H, W)` in `[0, 1]` at layer `rho`.
    fn features(&self, rgb: &Tensor, rho: usize) -> Result<Tensor>;

    fn check_layer(&self, rho: usize) -> Result<()> {
        if rho == 0 || rho > self.num_layers() {
            return Err(Error::Config(format!(
                "{}: unknown perceptual layer {rho} (valid: 1..={})",
                self.name(),
                self.num_layers()
            )));
        }
        Ok(())
    }
}

/// Test stub: every layer is the input itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl PerceptualExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity-stub"
    }

    fn num_layers(&self) -> usize {
        5
    }

    fn features(&self, rgb: &Tensor, rho: usize) -> Result<Tensor> {
        self.check_layer(rho)?;
        Ok(rgb.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VggItem {
    Conv(usize),
    Pool,
}

pub const VGG16_LAYOUT: &[usize] = &[2, 2, 3, 3, 3];
pub const VGG19_LAYOUT: &[usize] = &[2, 2, 4, 4, 4];
const VGG_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Frozen VGG feature stack with torchvision indexing.
#[derive(Debug, Clone)]
pub struct Vgg {
    name: String,
    layout: Vec<usize>,
    /// `(weight, bias)` per conv, in order.
    convs: Vec<(Tensor, Tensor)>,
}

impl Vgg {
    fn items(layout: &[usize]) -> Vec<VggItem> {
        let mut items = Vec::new();
        for (stage, &n) in layout.iter().enumerate() {
            for _ in 0..n {
                items.push(VggItem::Conv(VGG_WIDTHS[stage]));
            }
            items.push(VggItem::Pool);
        }
        items
    }

    /// torchvision `features` indices of every conv layer.
    fn conv_indices(layout: &[usize]) -> Vec<usize> {
        let mut idx = 0;
        let mut out = Vec::new();
        for item in Self::items(layout) {
            match item {
                VggItem::Conv(_) => {
                    out.push(idx);
                    idx += 2; // conv + relu
                }
                VggItem::Pool => idx += 1,
            }
        }
        out
    }

    /// Builds from named tensors; `lookup` receives torchvision names.
    pub fn from_lookup(
        name: &str,
        layout: &[usize],
        dtype: DType,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        let widths = Self::items(layout).into_iter().filter_map(|i| match i {
            VggItem::Conv(c) => Some(c),
            VggItem::Pool => None,
        });
        for (idx, cout) in Self::conv_indices(layout).into_iter().zip(widths) {
            let w_name = format!("features.{idx}.weight");
            let b_name = format!("features.{idx}.bias");
            let w = lookup(&w_name).ok_or_else(|| Error::ProviderMissing(format!("{name}: missing {w_name}")))?;
            let b = lookup(&b_name).ok_or_else(|| Error::ProviderMissing(format!("{name}: missing {b_name}")))?;
            if w.dims() != [cout, cin, 3, 3] || b.dims() != [cout] {
                return Err(Error::Config(format!(
                    "{name}: {w_name} has shape {:?}, expected [{cout}, {cin}, 3, 3]",
                    w.dims()
                )));
            }
            convs.push((w.to_dtype(dtype)?, b.to_dtype(dtype)?));
            cin = cout;
        }
        Ok(Self {
            name: name.to_string(),
            layout: layout.to_vec(),
            convs,
        })
    }

    pub fn load(path: &Path, layout: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ProviderMissing(format!("weight file {} not found", path.display())));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let name = if layout == VGG19_LAYOUT { "vgg19" } else { "vgg" };
        Self::from_lookup(name, layout, dtype, |k| tensors.get(k).cloned())
    }

    pub fn vgg19(path: &Path, device: &Device) -> Result<Self> {
        Self::load(path, VGG19_LAYOUT, DType::F32, device)
    }

    pub fn normalize(rgb: &Tensor) -> Result<Tensor> {
        let dev = rgb.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(rgb.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(rgb.dtype())?.reshape((1, 3, 1, 1))?;
        Ok(rgb.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Activations at the end of stages `1..=up_to` (post-ReLU, pre-pool).
    pub fn stage_outputs(&self, x: &Tensor, up_to: usize) -> Result<Vec<Tensor>> {
        let mut outputs = Vec::with_capacity(up_to);
        let mut h = x.to_dtype(self.convs[0].0.dtype())?;
        let mut conv = self.convs.iter();
        for (stage, &n) in self.layout.iter().enumerate().take(up_to) {
            if stage > 0 {
                h = h.max_pool2d(2)?;
            }
            for _ in 0..n {
                let (w, b) = conv.next().expect("layout matches conv count");
                h = h.conv2d(w, 1, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
            }
            outputs.push(h.clone());
        }
        Ok(outputs)
    }
}

impl PerceptualExtractor for Vgg {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_layers(&self) -> usize {
        self.layout.len()
    }

    fn features(&self, rgb: &Tensor, rho: usize) -> Result<Tensor> {
        self.check_layer(rho)?;
        let x = Self::normalize(rgb)?;
        Ok(self.stage_outputs(&x, rho)?.pop().expect("rho >= 1"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn random_vgg(layout: &[usize], dev: &Device) -> HashMap<String, Tensor> {
        let mut map = HashMap::new();
        let mut cin = 3;
        let widths: Vec<usize> = Vgg::items(layout)
            .into_iter()
            .filter_map(|i| if let VggItem::Conv(c) = i { Some(c / 16) } else { None })
            .collect();
        for (k, (idx, cout)) in Vgg::conv_indices(layout).into_iter().zip(widths).enumerate() {
            let w = crate::testutil::uniform_tensor(&[cout, cin, 3, 3], -0.1, 0.1, k as u64, dev);
            map.insert(format!("features.{idx}.weight"), w);
            map.insert(format!("features.{idx}.bias"), Tensor::zeros(cout, DType::F32, dev).unwrap());
            cin = cout;
        }
        map
    }

    #[test]
    fn torchvision_indices() {
        let idx = Vgg::conv_indices(VGG19_LAYOUT);
        assert_eq!(idx.len(), 16);
        assert_eq!(&idx[..4], &[0, 2, 5, 7]);
        // conv4_4 sits at 25, so its relu (the rho = 4 output) is index 26.
        assert_eq!(idx[11], 25);
        assert_eq!(*idx.last().unwrap(), 34);
        assert_eq!(Vgg::conv_indices(VGG16_LAYOUT)[9], 21);
    }

    #[test]
    fn identity_stub_checks_layer() {
        let x = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(IdentityExtractor.features(&x, 4).is_ok());
        assert!(IdentityExtractor.features(&x, 0).is_err());
        assert!(IdentityExtractor.features(&x, 6).is_err());
    }

    #[test]
    fn missing_weights_are_reported() {
        let err = Vgg::load(Path::new("/nonexistent/vgg19.safetensors"), VGG19_LAYOUT, DType::F32, &Device::Cpu);
        assert!(matches!(err, Err(Error::ProviderMissing(_))));
    }

    #[test]
    fn stage_shapes_follow_pooling() {
        // Channel widths are scaled down by 16 so the check stays cheap; shape
        // validation therefore goes through a lookup that rescales widths.
        let dev = Device::Cpu;
        let weights = random_vgg(VGG19_LAYOUT, &dev);
        let mut convs = Vec::new();
        for idx in Vgg::conv_indices(VGG19_LAYOUT) {
            convs.push((
                weights[&format!("features.{idx}.weight")].clone(),
                weights[&format!("features.{idx}.bias")].clone(),
            ));
        }
        let vgg = Vgg {
            name: "vgg19-small".into(),
            layout: VGG19_LAYOUT.to_vec(),
            convs,
        };
        let x = crate::testutil::uniform_tensor(&[1, 3, 32, 32], 0.0, 1.0, 9, &dev);
        let outs = vgg.stage_outputs(&Vgg::normalize(&x).unwrap(), 5).unwrap();
        let dims: Vec<Vec<usize>> = outs.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![1, 4, 32, 32], vec![1, 8, 16, 16], vec![1, 16, 8, 8], vec![1, 32, 4, 4], vec![1, 32, 2, 2]]
        );
        assert_eq!(vgg.features(&x, 4).unwrap().dims(), &[1, 32, 4, 4]);
    }

    #[test]
    fn full_width_file_round_trip() {
        let dev = Device::Cpu;
        let mut map = HashMap::new();
        let mut cin = 3;
        let widths: Vec<usize> = Vgg::items(VGG16_LAYOUT)
            .into_iter()
            .filter_map(|i| if let VggItem::Conv(c) = i { Some(c) } else { None })
            .collect();
        for (idx, cout) in Vgg::conv_indices(VGG16_LAYOUT).into_iter().zip(widths) {
            map.insert(format!("features.{idx}.weight"), Tensor::zeros((cout, cin, 3, 3), DType::F32, &dev).unwrap());
            map.insert(format!("features.{idx}.bias"), Tensor::zeros(cout, DType::F32, &dev).unwrap());
            cin = cout;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg16.safetensors");
        candle_core::safetensors::save(&map, &path).unwrap();
        let vgg = Vgg::load(&path, VGG16_LAYOUT, DType::F32, &dev).unwrap();
        assert_eq!(vgg.num_layers(), 5);
        map.remove("features.28.weight");
        candle_core::safetensors::save(&map, &path).unwrap();
        assert!(matches!(
            Vgg::load(&path, VGG16_LAYOUT, DType::F32, &dev),
            Err(Error::ProviderMissing(_))
        ));
    }
}
