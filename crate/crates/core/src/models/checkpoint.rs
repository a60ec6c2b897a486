//! Checkpoint container: a safetensors file whose header metadata carries
//! the format tag, format version and JSON config echoes.
//!
//! Tensor names:
//!
//! | prefix                        | contents                              |
//! |-------------------------------|---------------------------------------|
//! | `generator.<param>`           | generator parameters and BN buffers   |
//! | `discriminator.<param>`       | discriminator parameters and buffers  |
//! | `optim.<net>.m.<param>`       | Adam first moments                    |
//! | `optim.<net>.v.<param>`       | Adam second moments                   |
//!
//! Parameter names are dotted paths such as `enc0.conv1.conv.weight`,
//! `rrdb.2.4.bn.running_var` or `block0.conv.weight`.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, View};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "textcolor-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub const KEY_FORMAT: &str = "format";
pub const KEY_VERSION: &str = "format_version";
pub const KEY_GENERATOR: &str = "generator_config";
pub const KEY_DISCRIMINATOR: &str = "discriminator_config";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

struct RawTensor {
    dtype: StDtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &RawTensor {
    fn dtype(&self) -> StDtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(name: &str, t: &Tensor) -> Result<RawTensor> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F32 => (
            StDtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name}: unsupported dtype {other:?}"
            )))
        }
    };
    Ok(RawTensor {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

fn from_view(name: &str, dtype: StDtype, shape: &[usize], data: &[u8], device: &Device) -> Result<Tensor> {
    let t = match dtype {
        StDtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name}: unsupported dtype {other:?}"
            )))
        }
    };
    Ok(t)
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(KEY_FORMAT.to_string(), FORMAT_TAG.to_string());
        metadata.insert(KEY_VERSION.to_string(), FORMAT_VERSION.to_string());
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_prefixed(&mut self, prefix: &str, named: Vec<(String, Tensor)>) {
        for (name, t) in named {
            self.tensors.insert(format!("{prefix}.{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn metadata_json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.metadata
            .get(key)
            .map(|s| serde_json::from_str(s).map_err(|e| Error::CorruptCheckpoint(format!("metadata {key}: {e}"))))
            .transpose()
    }

    pub fn set_metadata_json<T: serde::Serialize>(&mut self, key: &str, value: &T) {
        let json = serde_json::to_string(value).expect("config serializes");
        self.metadata.insert(key.to_string(), json);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raws = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), to_raw(k, t)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(raws.iter().map(|(k, r)| (k.as_str(), r)), Some(meta))
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        if metadata.get(KEY_FORMAT).map(String::as_str) != Some(FORMAT_TAG) {
            return Err(Error::CorruptCheckpoint(format!("missing `{KEY_FORMAT} = {FORMAT_TAG}` tag")));
        }
        let version: u32 = metadata
            .get(KEY_VERSION)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::CorruptCheckpoint("missing format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = from_view(&name, view.dtype(), view.shape(), view.data(), device)?;
            tensors.insert(name, t);
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes to a sibling temp file, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = dir.join(format!(".{file_name}.tmp"));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, device)
    }

    fn dtype_of(&self, prefix: &str) -> Result<DType> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .find(|(k, _)| k.starts_with(&p))
            .map(|(_, t)| t.dtype())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("no `{prefix}.*` tensors")))
    }

    pub fn put_generator(&mut self, g: &Generator) {
        self.set_metadata_json(KEY_GENERATOR, g.config());
        self.insert_prefixed("generator", g.params().named_tensors());
    }

    pub fn put_discriminator(&mut self, d: &Discriminator) {
        self.set_metadata_json(KEY_DISCRIMINATOR, d.config());
        self.insert_prefixed("discriminator", d.params().named_tensors());
    }

    pub fn generator(&self, device: &Device) -> Result<Generator> {
        let cfg: GeneratorConfig = self
            .metadata_json(KEY_GENERATOR)?
            .ok_or_else(|| Error::CorruptCheckpoint("missing generator config".into()))?;
        cfg.validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("embedded generator config: {e}")))?;
        let g = Generator::new(&cfg, 0, self.dtype_of("generator")?, device)?;
        g.params()
            .assign_from(|name| self.tensors.get(&format!("generator.{name}")).cloned())?;
        Ok(g)
    }

    pub fn discriminator(&self, device: &Device) -> Result<Discriminator> {
        let cfg: DiscriminatorConfig = self
            .metadata_json(KEY_DISCRIMINATOR)?
            .ok_or_else(|| Error::CorruptCheckpoint("missing discriminator config".into()))?;
        cfg.validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("embedded discriminator config: {e}")))?;
        let d = Discriminator::new(&cfg, 0, self.dtype_of("discriminator")?, device)?;
        d.params()
            .assign_from(|name| self.tensors.get(&format!("discriminator.{name}")).cloned())?;
        Ok(d)
    }
}

impl Generator {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.put_generator(self);
        ck.save(path)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Checkpoint::load(path, device)?.generator(device)
    }
}

impl Discriminator {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.put_discriminator(self);
        ck.save(path)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Checkpoint::load(path, device)?.discriminator(device)
    }
}
