//! Named parameter storage and the on-disk checkpoint layout.
//!
//! A checkpoint is a directory holding one raw little-endian `f32` file per
//! tensor and a `manifest.txt` listing, line by line:
//!
//! ```text
//! diffsynth-checkpoint 1
//! pipeline_version 0.1.0
//! meta <key> <value>
//! tensor <name> f32 <d0>,<d1>,... <file>
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");
const MANIFEST: &str = "manifest.txt";
const FORMAT_LINE: &str = "diffsynth-checkpoint 1";

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    tensors: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Short content hash of the parameters as stored on disk (`f32` LE).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the checkpoint directory, replacing any previous contents of
    /// the manifest and tensor files.
    pub fn save(&self, dir: &Path, meta: &[(String, String)]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{FORMAT_LINE}\npipeline_version {PIPELINE_VERSION}\n");
        for (k, v) in meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry `{k}` not representable")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = format!("{i:04}.f32");
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("tensor {name} f32 {} {file}\n", dims.join(",")));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Reads a checkpoint directory written by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<(Self, IndexMap<String, String>)> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_LINE) {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint manifest", path.display())));
        }
        let mut meta = IndexMap::new();
        let mut store = Self::new();
        for line in lines {
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match kind {
                "pipeline_version" => {
                    meta.insert("pipeline_version".to_owned(), rest.to_owned());
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_owned(), v.to_owned());
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, dims, file] = fields[..] else {
                        return Err(Error::Checkpoint(format!("malformed tensor line `{line}`")));
                    };
                    if dtype != "f32" {
                        return Err(Error::Checkpoint(format!("unsupported dtype `{dtype}`")));
                    }
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Checkpoint(format!("bad shape `{dims}`")))?;
                    let fpath = dir.join(file);
                    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
                    if bytes.len() % 4 != 0 {
                        return Err(Error::Checkpoint(format!("{} truncated", fpath.display())));
                    }
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| S::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                        .collect();
                    store.insert(name, Tensor::new(shape, data)?);
                }
                "" => {}
                other => return Err(Error::Checkpoint(format!("unknown manifest entry `{other}`"))),
            }
        }
        Ok((store, meta))
    }
}
