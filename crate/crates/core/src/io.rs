//! Flat binary tensor files.
//!
//! A bundle is two files: `<stem>.bin` holds every tensor's entries as
//! consecutive little-endian `f64` in row-major order, and `<stem>.json`
//! is a sidecar listing each tensor's name, shape and element offset plus
//! free-form metadata:
//!
//! ```json
//! {"format":"f64-le","data":"model.bin","meta":{...},
//!  "tensors":[{"name":"layer0.w_q","rows":32,"cols":32,"offset":0}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT: &str = "f64-le";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub data: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// An in-memory tensor bundle.
#[derive(Debug, Clone, Default)]
pub struct TensorBundle {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorBundle {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("tensor `{name}` missing from bundle")))
    }

    /// Writes `<stem>.bin` and `<stem>.json`; `path` may name either file
    /// or the bare stem.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let (bin_path, json_path) = bundle_paths(path);
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += m.data().len();
            for v in m.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sidecar = Sidecar {
            format: FORMAT.to_string(),
            data: bin_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        fs::write(&bin_path, bytes)?;
        fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(json_path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (_, json_path) = bundle_paths(path);
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(&json_path)?)?;
        if sidecar.format != FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported tensor format `{}`",
                sidecar.format
            )));
        }
        let bin_path = json_path.with_file_name(&sidecar.data);
        let bytes = fs::read(&bin_path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidArgument("tensor data is not a multiple of 8 bytes".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut tensors = Vec::with_capacity(sidecar.tensors.len());
        for e in sidecar.tensors {
            let end = e.offset + e.rows * e.cols;
            if end > values.len() {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{}` extends past the end of {}",
                    e.name,
                    bin_path.display()
                )));
            }
            let m = Matrix::new(e.rows, e.cols, values[e.offset..end].to_vec())?;
            tensors.push((e.name, m));
        }
        Ok(Self {
            meta: sidecar.meta,
            tensors,
        })
    }
}

fn bundle_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("bin"), with("json"))
}
