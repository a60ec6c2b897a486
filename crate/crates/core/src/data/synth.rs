use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, SampleMeta, Split};
use crate::colorspace::{srgb_to_lab, RgbImage};
use crate::error::{Error, Result};

const DEFAULT_PALETTE: &str = include_str!("../../data/palette.txt");

/// Background grey (sRGB, all channels; exact in 8 bits), CIELAB L of about 32.
pub const SYNTH_BACKGROUND: f32 = 77.0 / 255.0;

/// Ordered colour-word to 8-bit sRGB table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<(String, [u8; 3])>,
}

impl Palette {
    /// Parses `word r g b` lines; `#` starts a comment line.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries: Vec<(String, [u8; 3])> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(err(format!("expected `word r g b`, got {} fields", parts.len())));
            }
            let mut rgb = [0u8; 3];
            for (c, p) in rgb.iter_mut().zip(&parts[1..]) {
                *c = p.parse().map_err(|_| err(format!("`{p}` is not an integer in 0..=255")))?;
            }
            let word = parts[0].to_lowercase();
            if entries.iter().any(|(w, _)| *w == word) {
                return Err(err(format!("duplicate colour `{word}`")));
            }
            entries.push((word, rgb));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn from_entries(entries: Vec<(String, [u8; 3])>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(w, _)| w.as_str())
    }

    pub fn rgb(&self, word: &str) -> Option<[u8; 3]> {
        self.entries.iter().find(|(w, _)| w == word).map(|(_, c)| *c)
    }

    /// CIELAB `[L, A, B]` of a palette colour.
    pub fn lab(&self, word: &str) -> Option<[f64; 3]> {
        self.rgb(word).map(|c| srgb_to_lab(c.map(|v| v as f64 / 255.0)))
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self::parse(DEFAULT_PALETTE, Path::new("<bundled>")).expect("bundled palette parses")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    /// Pixel-centre inclusion test for a shape centred at `(cx, cy)` with half-extent `r`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            // Upward isosceles triangle: apex at (cx, cy - r), base at y = cy + r.
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        })
    }
}

/// `n` images of one flat-coloured shape on a grey background, captioned `a <color> <shape>`.
///
/// Shapes are not anti-aliased, so every foreground pixel carries the exact palette colour.
pub fn synth_generate(n: usize, seed: u64, palette: &Palette, size: usize) -> Result<Vec<Sample>> {
    if palette.is_empty() {
        return Err(Error::Data("synthetic palette is empty".into()));
    }
    if n == 0 {
        return Err(Error::Data("synthetic corpus size must be at least 1".into()));
    }
    if size < 8 {
        return Err(Error::Data(format!("synthetic image size {size} is below the minimum of 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let (word, rgb) = &palette.entries[rng.random_range(0..palette.len())];
        let shape = Shape::ALL[rng.random_range(0..3)];
        let r = rng.random_range(0.22 * s..0.34 * s);
        let cx = rng.random_range(r..s - r);
        let cy = rng.random_range(r..s - r);
        let fg = rgb.map(|v| v as f32 / 255.0);
        let mut data = Vec::with_capacity(size * size * 3);
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let inside = shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r);
                mask.push(inside);
                data.extend_from_slice(&if inside { fg } else { [SYNTH_BACKGROUND; 3] });
            }
        }
        samples.push(Sample {
            id: format!("synth-{seed}-{i:05}"),
            image: RgbImage::new(size, size, data)?,
            description: format!("a {word} {shape}"),
            split: Split::Train,
            meta: SampleMeta {
                mask: Some(mask),
                color: Some(word.clone()),
                shape: Some(shape),
            },
        });
    }
    Ok(samples)
}

/// Mean CIELAB `(A, B)` over the pixels where `mask` is set.
pub fn foreground_mean_ab(image: &RgbImage, mask: &[bool]) -> Option<[f64; 2]> {
    let lab = crate::colorspace::rgb_to_lab(image);
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        a += lab.a[i] as f64;
        b += lab.b[i] as f64;
        n += 1;
    }
    (n > 0).then(|| [a / n as f64, b / n as f64])
}

/// Writes `<id>.png`, a `records.jsonl` and a `manifest.toml` (kind `synthetic`, explicit splits).
pub fn write_corpus(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut records = String::new();
    for s in samples {
        let file = format!("{}.png", s.id);
        crate::imageio::write_png(&dir.join(&file), &s.image)?;
        let rec = super::Record {
            id: s.id.clone(),
            image: file.into(),
            text: Some(s.description.clone()),
            class: None,
            captions: Vec::new(),
            split: Some(s.split),
        };
        records.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        records.push('\n');
    }
    std::fs::write(dir.join("records.jsonl"), records)?;
    let size = samples.first().map_or(0, |s| s.image.width());
    let manifest = super::DatasetManifest {
        name: "synthetic-shapes".into(),
        kind: super::DatasetKind::Synthetic,
        root: ".".into(),
        records: "records.jsonl".into(),
        image_size: size,
        split: Some(super::SplitRule::Explicit),
        base_dir: Default::default(),
    };
    std::fs::write(dir.join("manifest.toml"), toml::to_string(&manifest).expect("manifest serializes"))?;
    Ok(())
}
