use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Device;
use serde::Serialize;
use textcolor::pipeline::Colorizer;

/// Loaded checkpoints in registration order. The first one is the default.
#[derive(Debug, Default)]
pub struct Registry {
    entries: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub id: String,
    pub path: PathBuf,
    pub colorizer: Arc<Colorizer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelInfo {
    pub id: String,
    pub path: String,
    pub image_size: usize,
}

/// Canonical form used to recognise re-registration of the same file.
pub fn canonical(path: &Path) -> PathBuf {
    std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Loads a checkpoint without touching any registry.
pub fn load(path: &Path, device: &Device) -> textcolor::Result<Colorizer> {
    Colorizer::load(path, device)
}

impl Registry {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn default_id(&self) -> Option<&str> {
        self.entries.first().map(|e| e.id.as_str())
    }

    /// `None` selects the default checkpoint.
    pub fn get(&self, id: Option<&str>) -> Option<&Entry> {
        match id {
            None => self.entries.first(),
            Some(id) => self.entries.iter().find(|e| e.id == id),
        }
    }

    /// Inserts a loaded colorizer for `path`. Registering the same file again
    /// replaces the weights and keeps the id.
    pub fn insert(&mut self, path: &Path, colorizer: Colorizer) -> String {
        let path = canonical(path);
        if let Some(e) = self.entries.iter_mut().find(|e| e.path == path) {
            e.colorizer = Arc::new(colorizer);
            return e.id.clone();
        }
        let stem = colorizer.id().to_string();
        let mut id = stem.clone();
        let mut k = 2;
        while self.entries.iter().any(|e| e.id == id) {
            id = format!("{stem}-{k}");
            k += 1;
        }
        self.entries.push(Entry {
            id: id.clone(),
            path,
            colorizer: Arc::new(colorizer),
        });
        id
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.entries
            .iter()
            .map(|e| ModelInfo {
                id: e.id.clone(),
                path: e.path.display().to_string(),
                image_size: e.colorizer.image_size(),
            })
            .collect()
    }
}

/// `*.safetensors` files directly inside `dir`, sorted by name.
pub fn checkpoint_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    out.sort();
    Ok(out)
}
