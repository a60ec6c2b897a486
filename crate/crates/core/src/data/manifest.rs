//! Dataset manifests.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! name = "cub-200"
//! kind = "birds"            # birds | ncd | coco | synthetic
//! root = "images"           # relative paths resolve against the manifest's directory
//! records = "records.jsonl"
//! image_size = 256          # optional, default 256
//!
//! [split]                   # optional; birds/ncd/coco default to the published counts
//! rule = "count"            # "count" (first `train` records, then `test`) or "explicit"
//! train = 5032
//! test = 1000
//! ```
//!
//! Each line of the records file is a JSON object:
//!
//! ```json
//! {"id": "0001", "image": "001.Black_footed_Albatross/0001.jpg", "text": "a black bird", "split": "train"}
//! ```
//!
//! `text` is the description for `birds` and `synthetic`, `class` is mapped
//! through the class-colour table for `ncd`, and `captions` are filtered by
//! the colour lexicon for `coco`. `split` is required under the explicit rule.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Sample, SampleMeta, Split};
use crate::error::{Error, Result};
use crate::imageio;
use crate::text::{extract_color_sentences, ClassColorTable, ColorLexicon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Birds,
    Ncd,
    Coco,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitRule {
    Explicit,
    Count { train: usize, test: usize },
}

impl DatasetKind {
    pub fn default_split(self) -> SplitRule {
        match self {
            DatasetKind::Birds => SplitRule::Count { train: 5032, test: 1000 },
            DatasetKind::Ncd => SplitRule::Count { train: 600, test: 130 },
            DatasetKind::Coco => SplitRule::Count { train: 39000, test: 6225 },
            DatasetKind::Synthetic => SplitRule::Explicit,
        }
    }
}

fn default_image_size() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub records: PathBuf,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRule>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        if m.image_size < 8 {
            return Err(Error::Config(format!("manifest image_size {} is below 8", m.image_size)));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn split_rule(&self) -> SplitRule {
        self.split.unwrap_or_else(|| self.kind.default_split())
    }

    pub fn root_dir(&self) -> PathBuf {
        self.base_dir.join(&self.root)
    }

    pub fn records_path(&self) -> PathBuf {
        self.base_dir.join(&self.records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub id: String,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub errors: Vec<RecordError>,
}

impl LoadReport {
    pub fn summary(&self) -> String {
        format!("{} loaded, {} failed", self.loaded, self.errors.len())
    }
}

/// Lookup tables used to turn a record into a description.
#[derive(Debug, Clone, Default)]
pub struct DescriptionSources {
    pub lexicon: ColorLexicon,
    pub classes: ClassColorTable,
}

/// An opened manifest: records with resolved splits, images not yet decoded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    records: Vec<(Record, Split)>,
}

impl Dataset {
    pub fn open(manifest: DatasetManifest) -> Result<Self> {
        let path = manifest.records_path();
        let text = std::fs::read_to_string(&path)?;
        let mut raw = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            raw.push(rec);
        }
        Self::from_records(manifest, raw)
    }

    pub fn from_records(manifest: DatasetManifest, raw: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &raw {
            if !seen.insert(r.id.clone()) {
                return Err(Error::Data(format!("{}: duplicate record id `{}`", manifest.name, r.id)));
            }
        }
        let records = match manifest.split_rule() {
            SplitRule::Explicit => raw
                .into_iter()
                .map(|r| match r.split {
                    Some(s) => Ok((r, s)),
                    None => Err(Error::Data(format!("{}: record `{}` has no split", manifest.name, r.id))),
                })
                .collect::<Result<Vec<_>>>()?,
            SplitRule::Count { train, test } => {
                if raw.len() != train + test {
                    return Err(Error::Data(format!(
                        "{}: split rule expects {train} + {test} = {} records, found {}",
                        manifest.name,
                        train + test,
                        raw.len()
                    )));
                }
                raw.into_iter()
                    .enumerate()
                    .map(|(i, r)| (r, if i < train { Split::Train } else { Split::Test }))
                    .collect()
            }
        };
        Ok(Self { manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|(_, s)| *s == split).count()
    }

    pub fn records(&self) -> impl Iterator<Item = (&Record, Split)> {
        self.records.iter().map(|(r, s)| (r, *s))
    }

    fn describe(&self, r: &Record, sources: &DescriptionSources) -> std::result::Result<String, String> {
        let text = match self.manifest.kind {
            DatasetKind::Birds | DatasetKind::Synthetic => r.text.clone().ok_or("record has no `text`")?,
            DatasetKind::Ncd => {
                let class = r.class.as_deref().ok_or("record has no `class`")?;
                sources
                    .classes
                    .color_of(class)
                    .ok_or_else(|| format!("class `{class}` is not in the colour table"))?
                    .to_string()
            }
            DatasetKind::Coco => extract_color_sentences(&r.captions, &sources.lexicon),
        };
        if text.trim().is_empty() {
            return Err("empty colour description".into());
        }
        Ok(text)
    }

    fn load_one(&self, r: &Record, split: Split, sources: &DescriptionSources) -> std::result::Result<Sample, RecordError> {
        let path = self.manifest.root_dir().join(&r.image);
        let fail = |reason: String| RecordError {
            id: r.id.clone(),
            path: path.clone(),
            reason,
        };
        let description = self.describe(r, sources).map_err(fail)?;
        if !path.exists() {
            return Err(fail("image file not found".into()));
        }
        let image = imageio::read(&path)
            .and_then(|img| imageio::resize_center_crop(&img, self.manifest.image_size))
            .map_err(|e| fail(e.to_string()))?;
        Ok(Sample {
            id: r.id.clone(),
            image,
            description,
            split,
            meta: SampleMeta::default(),
        })
    }

    /// Lazily decodes the records of one split (or all), in manifest order.
    pub fn samples<'a>(
        &'a self,
        split: Option<Split>,
        sources: &'a DescriptionSources,
    ) -> impl Iterator<Item = std::result::Result<Sample, RecordError>> + 'a {
        self.records
            .iter()
            .filter(move |(_, s)| split.is_none_or(|want| want == *s))
            .map(move |(r, s)| self.load_one(r, *s, sources))
    }

    pub fn load(&self, split: Option<Split>, sources: &DescriptionSources) -> (Vec<Sample>, LoadReport) {
        let mut report = LoadReport::default();
        let mut out = Vec::new();
        for item in self.samples(split, sources) {
            match item {
                Ok(s) => {
                    report.loaded += 1;
                    out.push(s);
                }
                Err(e) => {
                    log::warn!("skipping record {} ({}): {}", e.id, e.path.display(), e.reason);
                    report.errors.push(e);
                }
            }
        }
        (out, report)
    }
}

/// Opens a manifest and decodes one split, collecting record-level failures.
pub fn load_dataset(
    manifest: &DatasetManifest,
    sources: &DescriptionSources,
    split: Option<Split>,
) -> Result<(Vec<Sample>, LoadReport)> {
    Ok(Dataset::open(manifest.clone())?.load(split, sources))
}
