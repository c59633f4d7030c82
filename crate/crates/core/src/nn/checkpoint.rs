//! Flat checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! b"GDNCKPT1"
//! manifest_len, manifest (UTF-8 `key = value` lines of the network config)
//! record_count
//! record_count x { name_len, name, n, c, h, w, n*c*h*w x f32 }
//! ```
//!
//! Records hold every learnable parameter in build order followed by the
//! batch-norm running mean and variance of each normalisation layer.

use std::path::Path;

use super::gdnet::{Gdnet, GdnetConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"GDNCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub records: Vec<Record>,
}

fn stats_names(name: &str) -> [String; 2] {
    [format!("{name}.running_mean"), format!("{name}.running_var")]
}

impl Checkpoint {
    pub fn capture(cfg: &GdnetConfig, store: &ParamStore) -> Self {
        let mut records: Vec<Record> = store
            .params()
            .iter()
            .map(|p| Record {
                name: p.name.clone(),
                shape: p.value.shape(),
                data: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        for (name, stats) in store.stats() {
            let shape = Shape::new(1, stats.mean.len(), 1, 1);
            let [m, v] = stats_names(name);
            for (n, values) in [(m, &stats.mean), (v, &stats.var)] {
                records.push(Record {
                    name: n,
                    shape,
                    data: values.iter().map(|&x| x as f32).collect(),
                });
            }
        }
        Checkpoint {
            manifest: cfg.to_manifest(),
            records,
        }
    }

    pub fn config(&self) -> Result<GdnetConfig> {
        GdnetConfig::from_manifest(&self.manifest)
    }

    /// Copies every record into `store`, which must have been built from the
    /// same configuration. Any missing, extra or mis-shaped record is an error.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let expected = store.len() + 2 * store.stats().len();
        if self.records.len() != expected {
            return Err(Error::config(format!(
                "checkpoint has {} records, network expects {expected}",
                self.records.len()
            )));
        }
        let (params, stats) = self.records.split_at(store.len());
        for (rec, p) in params.iter().zip(store.params_mut()) {
            if rec.name != p.name || rec.shape != p.value.shape() {
                return Err(Error::config(format!(
                    "checkpoint record {} {} does not match parameter {} {}",
                    rec.name,
                    rec.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (pair, (name, running)) in stats.chunks(2).zip(store.stats()) {
            let names = stats_names(name);
            let shape = Shape::new(1, running.mean.len(), 1, 1);
            for (rec, want) in pair.iter().zip(&names) {
                if &rec.name != want || rec.shape != shape {
                    return Err(Error::config(format!(
                        "checkpoint record {} {} does not match buffer {want} {shape}",
                        rec.name, rec.shape
                    )));
                }
            }
        }
        for (rec, p) in params.iter().zip(store.params_mut()) {
            p.value = Tensor::from_vec(rec.shape, rec.data.iter().map(|&v| f64::from(v)).collect())?;
        }
        for (pair, (_, running)) in stats.chunks(2).zip(store.stats_mut()) {
            running.mean = pair[0].data.iter().map(|&v| f64::from(v)).collect();
            running.var = pair[1].data.iter().map(|&v| f64::from(v)).collect();
        }
        Ok(())
    }

    /// Builds the network described by the manifest and loads the weights.
    pub fn into_model(&self) -> Result<(Gdnet, ParamStore)> {
        let cfg = self.config()?;
        let (net, mut store) = Gdnet::new(&cfg, 0)?;
        self.restore(&mut store)?;
        Ok((net, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, self.manifest.len());
        out.extend_from_slice(self.manifest.as_bytes());
        put(&mut out, self.records.len());
        for r in &self.records {
            put(&mut out, r.name.len());
            out.extend_from_slice(r.name.as_bytes());
            for d in r.shape.dims() {
                put(&mut out, d);
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0, path };
        if rd.take(MAGIC.len())? != MAGIC {
            return Err(rd.error(0, "not a checkpoint (bad magic)"));
        }
        let len = rd.u32()?;
        let at = rd.pos;
        let manifest = String::from_utf8(rd.take(len)?.to_vec())
            .map_err(|_| rd.error(at, "manifest is not UTF-8"))?;
        let count = rd.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = rd.u32()?;
            let at = rd.pos;
            let name = String::from_utf8(rd.take(len)?.to_vec())
                .map_err(|_| rd.error(at, "record name is not UTF-8"))?;
            let shape = Shape::new(rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?);
            let raw = rd.take(shape.numel() * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            records.push(Record { name, shape, data });
        }
        if rd.pos != bytes.len() {
            return Err(rd.error(rd.pos, "trailing bytes after last record"));
        }
        Ok(Checkpoint { manifest, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(self.pos, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}
