//! sRGB <-> CIELAB conversion (D65 white, sRGB companding) and the affine
//! mapping between physical LAB units and the `[-1, 1]` model units used
//! inside the networks.
//!
//! Physical ranges: `L` in `[0, 100]`, `A`/`B` in `[-128, 127]`.
//! Model units: `l = L / 50 - 1`, `ab = (A, B) / 128`, both clamped to `[-1, 1]`.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// D65 reference white in XYZ (Y normalised to 1).
pub const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

// CIE constants: delta = 6/29.
const DELTA: f64 = 6.0 / 29.0;

pub const L_MAX: f64 = 100.0;
pub const AB_MIN: f64 = -128.0;
pub const AB_MAX: f64 = 127.0;
pub const L_SCALE: f64 = 50.0;
pub const AB_SCALE: f64 = 128.0;

/// Interleaved `H x W x 3` sRGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    /// Builds an image from interleaved RGB data, validating the range of every value.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("positive width and height", format!("{width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                format!("{} values for {width}x{height}x3", width * height * 3),
                data.len().to_string(),
            ));
        }
        for (i, &v) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    index: i / 3,
                    channel: i % 3,
                    value: v as f64,
                    min: 0.0,
                    max: 1.0,
                });
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> [f32; 3] {
        let p = &self.data[index * 3..index * 3 + 3];
        [p[0], p[1], p[2]]
    }

    /// Quantizes to 8-bit with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Planar CIELAB image in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl LabImage {
    pub fn new(width: usize, height: usize, l: Vec<f32>, a: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        let n = width * height;
        for (name, plane) in [("L", &l), ("A", &a), ("B", &b)] {
            if plane.len() != n {
                return Err(Error::shape(
                    format!("{n} values in {name} plane"),
                    plane.len().to_string(),
                ));
            }
        }
        let img = Self {
            width,
            height,
            l,
            a,
            b,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let planes: [(&[f32], f64, f64); 3] = [
            (&self.l, 0.0, L_MAX),
            (&self.a, AB_MIN, AB_MAX),
            (&self.b, AB_MIN, AB_MAX),
        ];
        for (channel, (plane, min, max)) in planes.into_iter().enumerate() {
            for (index, &v) in plane.iter().enumerate() {
                let v = v as f64;
                if !(min..=max).contains(&v) {
                    return Err(Error::OutOfRange {
                        index,
                        channel,
                        value: v,
                        min,
                        max,
                    });
                }
            }
        }
        Ok(())
    }
}

/// LAB in model units: `l` is `H x W`, `ab` is planar `2 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLab {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f32>,
    pub ab: Vec<f32>,
}

fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Converts one sRGB triple (components in `[0, 1]`) to `[L, A, B]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let linear = rgb.map(srgb_decode);
    let xyz = mat_vec(&RGB_TO_XYZ, linear);
    let fx = lab_f(xyz[0] / WHITE_D65[0]);
    let fy = lab_f(xyz[1] / WHITE_D65[1]);
    let fz = lab_f(xyz[2] / WHITE_D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one `[L, A, B]` triple to sRGB, clamping out-of-gamut results to `[0, 1]`.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE_D65[0] * lab_f_inv(fx),
        WHITE_D65[1] * lab_f_inv(fy),
        WHITE_D65[2] * lab_f_inv(fz),
    ];
    mat_vec(&XYZ_TO_RGB, xyz).map(|v| srgb_encode(v.clamp(0.0, 1.0)))
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.width * img.height;
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.data.chunks_exact(3) {
        let lab = srgb_to_lab([px[0] as f64, px[1] as f64, px[2] as f64]);
        l.push(lab[0].clamp(0.0, L_MAX) as f32);
        a.push(lab[1].clamp(AB_MIN, AB_MAX) as f32);
        b.push(lab[2].clamp(AB_MIN, AB_MAX) as f32);
    }
    LabImage {
        width: img.width,
        height: img.height,
        l,
        a,
        b,
    }
}

pub fn lab_to_rgb(img: &LabImage) -> Result<RgbImage> {
    img.validate()?;
    let mut data = Vec::with_capacity(img.len() * 3);
    for i in 0..img.len() {
        let rgb = lab_to_srgb([img.l[i] as f64, img.a[i] as f64, img.b[i] as f64]);
        data.extend(rgb.map(|v| v as f32));
    }
    Ok(RgbImage {
        width: img.width,
        height: img.height,
        data,
    })
}

pub fn l_to_model(l: f64) -> f64 {
    (l / L_SCALE - 1.0).clamp(-1.0, 1.0)
}

pub fn ab_to_model(ab: f64) -> f64 {
    (ab / AB_SCALE).clamp(-1.0, 1.0)
}

pub fn l_from_model(l: f64) -> f64 {
    ((l + 1.0) * L_SCALE).clamp(0.0, L_MAX)
}

pub fn ab_from_model(ab: f64) -> f64 {
    (ab * AB_SCALE).clamp(AB_MIN, AB_MAX)
}

pub fn to_model_units(img: &LabImage) -> ModelLab {
    let map = |plane: &[f32], f: fn(f64) -> f64| plane.iter().map(|&v| f(v as f64) as f32).collect::<Vec<_>>();
    let mut ab = map(&img.a, ab_to_model);
    ab.extend(map(&img.b, ab_to_model));
    ModelLab {
        width: img.width,
        height: img.height,
        l: map(&img.l, l_to_model),
        ab,
    }
}

pub fn from_model_units(m: &ModelLab) -> Result<LabImage> {
    let n = m.width * m.height;
    if m.l.len() != n || m.ab.len() != 2 * n {
        return Err(Error::shape(
            format!("l: {n}, ab: {}", 2 * n),
            format!("l: {}, ab: {}", m.l.len(), m.ab.len()),
        ));
    }
    let map = |plane: &[f32], f: fn(f64) -> f64| plane.iter().map(|&v| f(v as f64) as f32).collect::<Vec<_>>();
    Ok(LabImage {
        width: m.width,
        height: m.height,
        l: map(&m.l, l_from_model),
        a: map(&m.ab[..n], ab_from_model),
        b: map(&m.ab[n..], ab_from_model),
    })
}

/// Assembles an RGB image from a lightness plane and chroma planes, all in model units.
pub fn assemble_rgb(width: usize, height: usize, l: &[f32], ab: &[f32]) -> Result<RgbImage> {
    let lab = from_model_units(&ModelLab {
        width,
        height,
        l: l.to_vec(),
        ab: ab.to_vec(),
    })?;
    lab_to_rgb(&lab)
}

/// Differentiable LAB (model units) to sRGB on batched tensors.
///
/// `l`: `(N, 1, H, W)`, `ab`: `(N, 2, H, W)`; returns `(N, 3, H, W)` in `[0, 1]`.
/// Matches [`assemble_rgb`] per pixel, clamping included.
pub fn model_lab_to_rgb_tensor(l: &Tensor, ab: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = l.dims4()?;
    if c != 1 || ab.dims() != [n, 2, h, w] {
        return Err(Error::shape(
            format!("l: (N, 1, H, W), ab: (N, 2, H, W) with N={n} H={h} W={w}"),
            format!("{:?} / {:?}", l.dims(), ab.dims()),
        ));
    }
    let ab = ab.to_dtype(l.dtype())?;
    let lum = ((l + 1.0)? * L_SCALE)?.clamp(0.0, L_MAX)?;
    let a = (ab.narrow(1, 0, 1)? * AB_SCALE)?.clamp(AB_MIN, AB_MAX)?;
    let b = (ab.narrow(1, 1, 1)? * AB_SCALE)?.clamp(AB_MIN, AB_MAX)?;
    let fy = ((lum + 16.0)? / 116.0)?;
    let fx = (&fy + (a / 500.0)?)?;
    let fz = (&fy - (b / 200.0)?)?;
    let f_inv = |t: &Tensor| -> Result<Tensor> {
        let cube = t.powf(3.0)?;
        let linear = ((t - 4.0 / 29.0)? * (3.0 * DELTA * DELTA))?;
        Ok(t.gt(DELTA)?.where_cond(&cube, &linear)?)
    };
    let xyz = [
        (f_inv(&fx)? * WHITE_D65[0])?,
        (f_inv(&fy)? * WHITE_D65[1])?,
        (f_inv(&fz)? * WHITE_D65[2])?,
    ];
    let mut channels = Vec::with_capacity(3);
    for row in XYZ_TO_RGB {
        let lin = ((&xyz[0] * row[0])? + (&xyz[1] * row[1])? + (&xyz[2] * row[2])?)?.clamp(0.0, 1.0)?;
        // Both branches are evaluated; keep the power branch away from 0.
        let pow = ((lin.maximum(0.0031308)?.powf(1.0 / 2.4)? * 1.055)? - 0.055)?;
        let low = (&lin * 12.92)?;
        channels.push(lin.le(0.0031308)?.where_cond(&low, &pow)?);
    }
    Ok(Tensor::cat(&channels, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    // Textbook formulas written out independently of the module internals.
    fn reference_lab(rgb: [f64; 3]) -> [f64; 3] {
        let lin: Vec<f64> = rgb
            .iter()
            .map(|&c| if c > 0.04045 { ((c + 0.055) / 1.055).powf(2.4) } else { c / 12.92 })
            .collect();
        let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
        let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
        let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
        let eps = 216.0 / 24389.0;
        let kappa = 24389.0 / 27.0;
        let f = |t: f64| if t > eps { t.powf(1.0 / 3.0) } else { (kappa * t + 16.0) / 116.0 };
        let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    #[test]
    fn anchors() {
        assert!(close(srgb_to_lab([1.0; 3]), [100.0, 0.0, 0.0], 1e-3));
        assert!(close(srgb_to_lab([0.0; 3]), [0.0, 0.0, 0.0], 1e-12));
        assert!(close(lab_to_srgb([100.0, 0.0, 0.0]), [1.0; 3], 1e-3));
        assert!(close(lab_to_srgb([0.0, 0.0, 0.0]), [0.0; 3], 1e-12));
    }

    #[test]
    fn mid_gray_matches_reference() {
        let oracle = reference_lab([0.5; 3]);
        assert!((oracle[0] - 53.39).abs() < 0.01);
        let lab = srgb_to_lab([0.5; 3]);
        assert!(close(lab, oracle, 1e-9), "{lab:?} vs {oracle:?}");
        assert!(lab[1].abs() < 1e-3 && lab[2].abs() < 1e-3);
    }

    #[test]
    fn out_of_range_pixel_is_named() {
        let mut data = vec![0.5f32; 12];
        data[7] = 1.5;
        match RgbImage::new(2, 2, data) {
            Err(Error::OutOfRange { index, channel, .. }) => assert_eq!((index, channel), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        let lab = LabImage {
            width: 1,
            height: 1,
            l: vec![101.0],
            a: vec![0.0],
            b: vec![0.0],
        };
        assert!(matches!(lab_to_rgb(&lab), Err(Error::OutOfRange { index: 0, channel: 0, .. })));
    }

    #[test]
    fn black_pixels_have_zero_chroma() {
        let img = RgbImage::filled(3, 2, [0.0; 3]).unwrap();
        let lab = rgb_to_lab(&img);
        assert!(lab.l.iter().chain(&lab.a).chain(&lab.b).all(|&v| v == 0.0));
    }

    #[test]
    fn model_units_affine() {
        assert_eq!(l_to_model(50.0), 0.0);
        assert_eq!(l_to_model(0.0), -1.0);
        assert_eq!(l_to_model(100.0), 1.0);
        assert_eq!(ab_to_model(-128.0), -1.0);
        assert_eq!(ab_to_model(128.0), 1.0);
        assert_eq!(l_from_model(0.0), 50.0);
        assert_eq!(ab_from_model(-1.0), -128.0);
        // +1 maps to 128, clamped to the physical maximum.
        assert_eq!(ab_from_model(1.0), 127.0);
    }

    #[test]
    fn model_units_round_trip() {
        let lab = LabImage::new(2, 1, vec![0.0, 73.5], vec![-128.0, 12.25], vec![127.0, -3.5]).unwrap();
        let back = from_model_units(&to_model_units(&lab)).unwrap();
        for (x, y) in lab.l.iter().chain(&lab.a).chain(&lab.b).zip(back.l.iter().chain(&back.a).chain(&back.b)) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
        let m = ModelLab {
            width: 1,
            height: 1,
            l: vec![0.25],
            ab: vec![-0.5, 0.75],
        };
        let back = to_model_units(&from_model_units(&m).unwrap());
        assert_eq!(back, m);
    }

    #[test]
    fn gray_ramp_is_monotone_and_neutral() {
        let mut prev = -1.0;
        for g in 0..=255 {
            let v = g as f64 / 255.0;
            let lab = srgb_to_lab([v; 3]);
            assert!(lab[0] > prev || g == 0);
            assert!(lab[1].abs() <= 0.5 && lab[2].abs() <= 0.5);
            prev = lab[0];
        }
    }

    #[test]
    fn tensor_conversion_matches_scalar_path() {
        use candle_core::{DType, Device};
        let dev = Device::Cpu;
        let l = crate::testutil::uniform_tensor(&[2, 1, 5, 5], -1.0, 1.0, 1, &dev).to_dtype(DType::F64).unwrap();
        let ab = crate::testutil::uniform_tensor(&[2, 2, 5, 5], -1.0, 1.0, 2, &dev).to_dtype(DType::F64).unwrap();
        let rgb = model_lab_to_rgb_tensor(&l, &ab).unwrap();
        assert_eq!(rgb.dims(), &[2, 3, 5, 5]);
        let rgb: Vec<f64> = rgb.flatten_all().unwrap().to_vec1().unwrap();
        let lv: Vec<f64> = l.flatten_all().unwrap().to_vec1().unwrap();
        let abv: Vec<f64> = ab.flatten_all().unwrap().to_vec1().unwrap();
        for n in 0..2 {
            for p in 0..25 {
                let lab = [
                    l_from_model(lv[n * 25 + p]),
                    ab_from_model(abv[n * 50 + p]),
                    ab_from_model(abv[n * 50 + 25 + p]),
                ];
                let expected = lab_to_srgb(lab);
                for c in 0..3 {
                    let got = rgb[n * 75 + c * 25 + p];
                    assert!((got - expected[c]).abs() < 1e-9, "{got} vs {}", expected[c]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let back = lab_to_srgb(srgb_to_lab([r, g, b]));
            prop_assert!(close(back, [r, g, b], 2e-3), "{:?} -> {:?}", [r, g, b], back);
        }

        #[test]
        fn matches_reference(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assert!(close(srgb_to_lab([r, g, b]), reference_lab([r, g, b]), 1e-6));
        }
    }
}
