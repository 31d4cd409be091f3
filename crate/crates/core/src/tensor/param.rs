//! Named parameter storage, SGD with momentum, and checkpoint I/O.
//!
//! Checkpoint layout: a plain-text manifest followed by raw little-endian
//! f64 data. Manifest lines:
//!
//! ```text
//! LGFD-CHECKPOINT v1
//! config <one-line JSON blob supplied by the model>
//! param <name> <d0>x<d1>x... <byte offset into the data section>
//! ...
//! data <total data bytes>
//! <raw bytes>
//! ```
//!
//! Round trips are bit-exact.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight: receives gradients, updated by the optimizer.
    Weight,
    /// Persistent state (batch-norm running statistics): checkpointed but
    /// never touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub velocity: Vec<f64>,
    pub kind: ParamKind,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        for (a, b) in self.grad.iter_mut().zip(g.iter()) {
            *a += b;
        }
    }
}

/// Registration-ordered parameter set with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    items: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>, kind: ParamKind) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {} shape/data mismatch",
            name
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {}",
            name
        );
        let id = self.items.len();
        let n = data.len();
        self.items.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            kind,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.items[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.items[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&id| &self.items[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total trainable scalar count.
    pub fn num_weights(&self) -> usize {
        self.items
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.numel())
            .sum()
    }

    /// SGD with momentum: `v <- momentum v + g; w <- w - lr v`.
    /// With `lr = 0` the data stays bit-identical.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        for p in self.items.iter_mut() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            for i in 0..p.data.len() {
                p.velocity[i] = momentum * p.velocity[i] + p.grad[i];
                p.data[i] -= lr * p.velocity[i];
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.items.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    // ── checkpoint I/O ───────────────────────────────────────────────────

    pub fn save(&self, path: &Path, config_line: &str) -> Result<()> {
        debug_assert!(!config_line.contains('\n'));
        let mut manifest = String::from("LGFD-CHECKPOINT v1\n");
        manifest.push_str("config ");
        manifest.push_str(config_line);
        manifest.push('\n');
        let mut offset = 0usize;
        for p in &self.items {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("param {} {} {}\n", p.name, dims.join("x"), offset));
            offset += p.numel() * 8;
        }
        manifest.push_str(&format!("data {}\n", offset));

        let mut bytes = Vec::with_capacity(manifest.len() + offset);
        bytes.extend_from_slice(manifest.as_bytes());
        for p in &self.items {
            for v in &p.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Read a checkpoint into `(config line, entries)`.
    pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<CheckpointEntry>)> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let p = path.display().to_string();

        let mut pos = 0usize;
        let next_line = |raw: &[u8], pos: &mut usize| -> Result<String> {
            let start = *pos;
            while *pos < raw.len() && raw[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= raw.len() {
                return Err(Error::parse(p.clone(), "truncated manifest"));
            }
            let line = String::from_utf8(raw[start..*pos].to_vec())
                .map_err(|_| Error::parse(p.clone(), "manifest is not UTF-8"))?;
            *pos += 1;
            Ok(line)
        };

        let magic = next_line(&raw, &mut pos)?;
        if magic != "LGFD-CHECKPOINT v1" {
            return Err(Error::parse(p, format!("bad magic line: {}", magic)));
        }
        let config_line = next_line(&raw, &mut pos)?;
        let config = config_line
            .strip_prefix("config ")
            .ok_or_else(|| Error::parse(p.clone(), "missing config line"))?
            .to_string();

        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let data_len;
        loop {
            let line = next_line(&raw, &mut pos)?;
            if let Some(rest) = line.strip_prefix("param ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(Error::parse(p, format!("bad param line: {}", line)));
                }
                let shape: Vec<usize> = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(p.clone(), format!("bad shape in: {}", line)))?;
                let offset: usize = parts[2]
                    .parse()
                    .map_err(|_| Error::parse(p.clone(), format!("bad offset in: {}", line)))?;
                entries.push((parts[0].to_string(), shape, offset));
            } else if let Some(rest) = line.strip_prefix("data ") {
                data_len = rest
                    .parse::<usize>()
                    .map_err(|_| Error::parse(p.clone(), format!("bad data line: {}", line)))?;
                break;
            } else {
                return Err(Error::parse(p, format!("unexpected manifest line: {}", line)));
            }
        }
        if raw.len() - pos != data_len {
            return Err(Error::parse(
                p,
                format!("data section is {} bytes, manifest says {}", raw.len() - pos, data_len),
            ));
        }
        let data = &raw[pos..];
        let mut out = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > data.len() {
                return Err(Error::parse(p, format!("parameter {} overruns data section", name)));
            }
            let values: Vec<f64> = data[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(CheckpointEntry { name, shape, data: values });
        }
        Ok((config, out))
    }

    /// Fill this store's parameters from checkpoint entries. Names and
    /// shapes must match the registered set exactly.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry], path_for_errors: &str) -> Result<()> {
        if entries.len() != self.items.len() {
            return Err(Error::parse(
                path_for_errors,
                format!("checkpoint has {} parameters, model expects {}", entries.len(), self.items.len()),
            ));
        }
        for e in entries {
            let id = *self.index.get(&e.name).ok_or_else(|| {
                Error::parse(path_for_errors, format!("unknown parameter {} in checkpoint", e.name))
            })?;
            let p = &mut self.items[id];
            if p.shape != e.shape {
                return Err(Error::parse(
                    path_for_errors,
                    format!("parameter {} shape {:?} != expected {:?}", e.name, e.shape, p.shape),
                ));
            }
            p.data.copy_from_slice(&e.data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
