//! Image quality metrics and evaluation reports.
//!
//! PSNR and SSIM are computed on 8-bit sRGB values. SSIM uses an 11x11
//! Gaussian window (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`, `L = 255`, only
//! windows fully inside the image, and averages the three channels.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde_json::{json, Value};

use crate::colorspace::RgbImage;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::imageio;
use crate::perceptual::{Vgg, VGG16_LAYOUT};
use crate::pipeline::Colorizer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn check_same(x: &RgbImage, y: &RgbImage) -> Result<()> {
    if (x.width(), x.height()) != (y.width(), y.height()) {
        return Err(Error::shape(
            format!("{}x{}", x.width(), x.height()),
            format!("{}x{}", y.width(), y.height()),
        ));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` over all 8-bit channel values; identical images give `+inf`.
pub fn psnr(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    check_same(x, y)?;
    let (a, b) = (x.to_u8(), y.to_u8());
    let sse: f64 = a.iter().zip(&b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / (sse / a.len() as f64)).log10())
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one channel pair.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_window();
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(a, w, h, &k);
    let my = filter_valid(b, w, h, &k);
    let xx = filter_valid(&prod(a, a), w, h, &k);
    let yy = filter_valid(&prod(b, b), w, h, &k);
    let xy = filter_valid(&prod(a, b), w, h, &k);
    let mut sum = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let sx = xx[i] - ux * ux;
        let sy = yy[i] - uy * uy;
        let sxy = xy[i] - ux * uy;
        sum += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sx + sy + c2));
    }
    sum / mx.len() as f64
}

fn channel(bytes: &[u8], c: usize) -> Vec<f64> {
    bytes.chunks_exact(3).map(|p| p[c] as f64).collect()
}

pub fn ssim(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    check_same(x, y)?;
    let (w, h) = (x.width(), x.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Data(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let (a, b) = (x.to_u8(), y.to_u8());
    Ok((0..3).map(|c| ssim_plane(&channel(&a, c), &channel(&b, c), w, h)).sum::<f64>() / 3.0)
}

/// A perceptual distance between two same-sized sRGB images.
pub trait DistanceProvider: Send + Sync {
    fn name(&self) -> &str;

    /// True for placeholder providers whose numbers are not comparable to published values.
    fn is_stub(&self) -> bool {
        false
    }

    fn distance(&self, x: &RgbImage, y: &RgbImage) -> Result<f64>;
}

/// Placeholder: mean absolute difference of `[0, 1]` channel values.
#[derive(Debug, Clone, Copy, Default)]
pub struct L1Stub;

impl DistanceProvider for L1Stub {
    fn name(&self) -> &str {
        "identity-stub"
    }

    fn is_stub(&self) -> bool {
        true
    }

    fn distance(&self, x: &RgbImage, y: &RgbImage) -> Result<f64> {
        check_same(x, y)?;
        let n = x.data().len() as f64;
        Ok(x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / n)
    }
}

const LPIPS_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const LPIPS_SCALE: [f64; 3] = [0.458, 0.448, 0.450];

/// LPIPS over VGG16 features. The weight file holds torchvision
/// `features.<i>.weight/bias` tensors and the five `lin<k>.model.1.weight`
/// channel weightings of shape `(1, C, 1, 1)`.
pub struct LpipsVgg {
    vgg: Vgg,
    lins: Vec<Tensor>,
}

impl LpipsVgg {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ProviderMissing(format!("lpips-vgg: weight file {} not found", path.display())));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let vgg = Vgg::from_lookup("lpips-vgg", VGG16_LAYOUT, DType::F32, |k| tensors.get(k).cloned())?;
        let lins = (0..5)
            .map(|k| {
                let name = format!("lin{k}.model.1.weight");
                tensors
                    .get(&name)
                    .ok_or_else(|| Error::ProviderMissing(format!("lpips-vgg: missing {name}")))
                    .and_then(|t| Ok(t.to_dtype(DType::F32)?.flatten_all()?.reshape((1, (), 1, 1))?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vgg, lins })
    }

    fn input(img: &RgbImage) -> Result<Tensor> {
        let (w, h) = (img.width(), img.height());
        let mut planar = vec![0f32; 3 * w * h];
        for (i, p) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                let v = (p[c] as f64 * 2.0 - 1.0 - LPIPS_SHIFT[c]) / LPIPS_SCALE[c];
                planar[c * w * h + i] = v as f32;
            }
        }
        Ok(Tensor::from_vec(planar, (1, 3, h, w), &Device::Cpu)?)
    }
}

impl DistanceProvider for LpipsVgg {
    fn name(&self) -> &str {
        "lpips-vgg"
    }

    fn distance(&self, x: &RgbImage, y: &RgbImage) -> Result<f64> {
        check_same(x, y)?;
        let fx = self.vgg.stage_outputs(&Self::input(x)?, 5)?;
        let fy = self.vgg.stage_outputs(&Self::input(y)?, 5)?;
        let unit = |f: &Tensor| -> Result<Tensor> {
            let norm = (f.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            Ok(f.broadcast_div(&norm)?)
        };
        let mut total = 0.0;
        for ((a, b), lin) in fx.iter().zip(&fy).zip(&self.lins) {
            let d = (unit(a)? - unit(b)?)?.sqr()?;
            let weighted = d.broadcast_mul(lin)?.sum_keepdim(1)?;
            total += weighted.mean_all()?.to_scalar::<f32>()? as f64;
        }
        Ok(total)
    }
}

/// Resolves a provider by name. `lpips-vgg` needs a weight file; `lpips-sqz` has no implementation.
pub fn distance_provider(name: &str, weights: Option<&Path>) -> Result<Box<dyn DistanceProvider>> {
    match name {
        "identity-stub" | "stub" => Ok(Box::new(L1Stub)),
        "lpips-vgg" => match weights {
            Some(p) => Ok(Box::new(LpipsVgg::load(p)?)),
            None => Err(Error::ProviderMissing("lpips-vgg: no weight file configured".into())),
        },
        "lpips-sqz" => Err(Error::ProviderMissing("lpips-sqz: SqueezeNet features are not available in this build".into())),
        other => Err(Error::Config(format!("unknown perceptual provider `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub id: String,
    pub ssim: f64,
    pub psnr: f64,
    /// Provider name to distance.
    pub perceptual: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    /// `(name, is_stub)` in column order.
    pub providers: Vec<(String, bool)>,
    pub images: Vec<ImageScores>,
    pub failures: usize,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_perceptual: BTreeMap<String, f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn fmt_value(v: f64, digits: usize) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.digits$}")
    }
}

/// JSON number, or the strings `inf` / `-inf` / `nan`.
fn json_value(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_value(v, 0).replace("NaN", "nan"))
    }
}

impl EvalReport {
    pub fn new(model: impl Into<String>, providers: Vec<(String, bool)>, images: Vec<ImageScores>, failures: usize) -> Self {
        let mean_perceptual = providers
            .iter()
            .map(|(p, _)| (p.clone(), mean(images.iter().map(|i| i.perceptual[p]))))
            .collect();
        Self {
            model: model.into(),
            mean_ssim: mean(images.iter().map(|i| i.ssim)),
            mean_psnr: mean(images.iter().map(|i| i.psnr)),
            mean_perceptual,
            providers,
            images,
            failures,
        }
    }

    fn column(name: &str, stub: bool) -> String {
        if stub {
            format!("{name} (stub) ↓")
        } else {
            format!("{name} ↓")
        }
    }

    /// Table with one row per image and a final mean row.
    pub fn to_table(&self) -> String {
        let mut header = vec!["image".to_string(), "SSIM ↑".into(), "PSNR ↑".into()];
        header.extend(self.providers.iter().map(|(p, s)| Self::column(p, *s)));
        let mut rows = vec![header];
        let row = |id: &str, ssim: f64, psnr: f64, perc: &BTreeMap<String, f64>| {
            let mut r = vec![id.to_string(), fmt_value(ssim, 4), fmt_value(psnr, 2)];
            r.extend(self.providers.iter().map(|(p, _)| fmt_value(perc[p], 4)));
            r
        };
        for i in &self.images {
            rows.push(row(&i.id, i.ssim, i.psnr, &i.perceptual));
        }
        rows.push(row(&format!("mean ({})", self.model), self.mean_ssim, self.mean_psnr, &self.mean_perceptual));
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str(&format!("samples: {}  failures: {}\n", self.images.len(), self.failures));
        out
    }

    pub fn to_json(&self) -> Value {
        let images: Vec<Value> = self
            .images
            .iter()
            .map(|i| {
                let perc: serde_json::Map<String, Value> =
                    i.perceptual.iter().map(|(k, v)| (k.clone(), json_value(*v))).collect();
                json!({"id": i.id, "ssim": json_value(i.ssim), "psnr": json_value(i.psnr), "perceptual": perc})
            })
            .collect();
        let means: serde_json::Map<String, Value> =
            self.mean_perceptual.iter().map(|(k, v)| (k.clone(), json_value(*v))).collect();
        let providers: Vec<Value> = self.providers.iter().map(|(p, s)| json!({"name": p, "stub": s})).collect();
        json!({
            "model": self.model,
            "samples": self.images.len(),
            "failures": self.failures,
            "providers": providers,
            "mean": {"ssim": json_value(self.mean_ssim), "psnr": json_value(self.mean_psnr), "perceptual": means},
            "images": images,
        })
    }
}

/// Colourises every sample from its lightness and description, then scores it against the original.
///
/// With `ablate_text` every description is replaced by the empty string.
pub fn evaluate(
    colorizer: &Colorizer,
    samples: &[Sample],
    providers: &[&dyn DistanceProvider],
    ablate_text: bool,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let size = colorizer.image_size();
    let mut images = Vec::with_capacity(samples.len());
    let mut failures = 0;
    for chunk in samples.chunks(8) {
        let items: Vec<(&RgbImage, &str)> = chunk
            .iter()
            .map(|s| (&s.image, if ablate_text { "" } else { s.description.as_str() }))
            .collect();
        let outputs = colorizer.colorize_batch(&items)?;
        for (s, out) in chunk.iter().zip(outputs) {
            let scored = imageio::resize_center_crop(&s.image, size).and_then(|truth| {
                let mut perceptual = BTreeMap::new();
                for p in providers {
                    perceptual.insert(p.name().to_string(), p.distance(&out, &truth)?);
                }
                Ok(ImageScores {
                    id: s.id.clone(),
                    ssim: ssim(&out, &truth)?,
                    psnr: psnr(&out, &truth)?,
                    perceptual,
                })
            });
            match scored {
                Ok(sc) => images.push(sc),
                Err(e) => {
                    log::warn!("evaluation of {} failed: {e}", s.id);
                    failures += 1;
                }
            }
        }
    }
    let names = providers.iter().map(|p| (p.name().to_string(), p.is_stub())).collect();
    Ok(EvalReport::new(colorizer.id(), names, images, failures))
}
