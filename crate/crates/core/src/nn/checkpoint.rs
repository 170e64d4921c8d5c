//! Single-file parameter container.
//!
//! Layout: the magic line `slicewise-checkpoint`, one JSON header line, then
//! every tensor as little-endian f32 in header order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "slicewise-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub version: u32,
    pub architecture: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, version: u32, architecture: &str) -> Self {
        Self {
            header: CheckpointHeader {
                kind: kind.into(),
                version,
                architecture: architecture.into(),
                meta: BTreeMap::new(),
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.header.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn push(&mut self, name: &str, values: Vec<f32>) {
        self.header.tensors.push((name.into(), values.len()));
        self.data.push(values);
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.header
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.data[i].as_slice())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.header.meta.get(key).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io)?;
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(w, "{header}").map_err(io)?;
        for tensor in &self.data {
            for v in tensor {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads a checkpoint and checks its kind, version and architecture.
    pub fn load(path: &Path, kind: &str, version: u32, architecture: &str) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let file = std::fs::File::open(path).map_err(io)?;
        let mut r = BufReader::new(file);
        let corrupt = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(corrupt("not a slicewise checkpoint".into()));
        }
        line.clear();
        r.read_line(&mut line).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.kind != kind {
            return Err(corrupt(format!(
                "expected a {kind} checkpoint, found {}",
                header.kind
            )));
        }
        if header.version != version || header.architecture != architecture {
            return Err(corrupt(format!(
                "architecture mismatch: file has {} v{}, expected {} v{}",
                header.architecture, header.version, architecture, version
            )));
        }
        let mut data = Vec::with_capacity(header.tensors.len());
        for (name, len) in &header.tensors {
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| corrupt(format!("truncated tensor {name}")))?;
            data.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, data })
    }
}
