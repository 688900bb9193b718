//! Binary checkpoints: a header with the configuration text and a manifest of
//! named arrays, followed by the little-endian `f64` payload.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::intensity::OutputActivation;
use crate::model::Stgnpp;

pub const MAGIC: &[u8; 8] = b"STGNPPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    /// Run configuration followed by model-only keys (`n_links`,
    /// `output_activation`, units).
    pub config: String,
    pub manifest: Vec<ManifestEntry>,
    pub payload: Vec<f64>,
}

fn activation_name(a: OutputActivation) -> &'static str {
    match a {
        OutputActivation::Softplus => "softplus",
        OutputActivation::Linear => "linear",
    }
}

impl ModelCheckpoint {
    /// Run paths are not stored, so the bytes depend only on the model.
    pub fn from_model(model: &Stgnpp, run: &RunConfig) -> Self {
        let mut run = run.clone();
        run.data = None;
        run.out = None;
        let mut config = run.to_string();
        config.push_str(&format!("n_links={}\n", model.cfg.n_links));
        config.push_str(&format!("output_activation={}\n", activation_name(model.head.activation)));
        config.push_str("tau_unit=hours\n");
        config.push_str(&format!("speed_scale={}\n", crate::encoder::SPEED_SCALE));
        let mut manifest = Vec::with_capacity(model.params.len());
        let mut payload = Vec::with_capacity(model.params.numel());
        for (_, p) in model.params.iter() {
            manifest.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: (payload.len() * 8) as u64,
            });
            payload.extend_from_slice(p.value.data());
        }
        Self {
            format_version: FORMAT_VERSION,
            config,
            manifest,
            payload,
        }
    }

    /// Splits the stored text into the run configuration and model-only keys.
    fn split_config(&self) -> Result<(RunConfig, usize, OutputActivation)> {
        let mut run = String::new();
        let mut n_links = None;
        let mut activation = OutputActivation::Softplus;
        for line in self.config.lines() {
            match line.split_once('=') {
                Some(("n_links", v)) => {
                    n_links = Some(v.parse().map_err(|_| Error::Data(format!("bad n_links `{v}`")))?)
                }
                Some(("output_activation", "softplus")) => activation = OutputActivation::Softplus,
                Some(("output_activation", "linear")) => activation = OutputActivation::Linear,
                Some(("output_activation", v)) => return Err(Error::Data(format!("unknown activation `{v}`"))),
                Some(("tau_unit", "hours")) | Some(("speed_scale", _)) => {}
                Some(("tau_unit", v)) => return Err(Error::Data(format!("unsupported tau unit `{v}`"))),
                _ => {
                    run.push_str(line);
                    run.push('\n');
                }
            }
        }
        let n_links = n_links.ok_or_else(|| Error::Data("checkpoint lacks n_links".into()))?;
        Ok((RunConfig::parse_text(&run)?, n_links, activation))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(self.split_config()?.0)
    }

    /// Rebuilds the model and loads every parameter, requiring the manifest
    /// to match the architecture exactly.
    pub fn to_model(&self) -> Result<(Stgnpp, RunConfig)> {
        let (run, n_links, activation) = self.split_config()?;
        let mut model = Stgnpp::new(run.model(n_links), 0)?;
        model.head.activation = activation;
        if self.manifest.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} arrays, model expects {}",
                self.manifest.len(),
                model.params.len()
            )));
        }
        for entry in &self.manifest {
            let start = (entry.offset / 8) as usize;
            let len: usize = entry.shape.iter().product();
            let data = self
                .payload
                .get(start..start + len)
                .ok_or_else(|| Error::Data(format!("array {} runs past the payload", entry.name)))?;
            let id = model
                .params
                .id(&entry.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {}", entry.name)))?;
            if model.params.value(id).shape() != entry.shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    model.params.value(id).shape()
                )));
            }
            *model.params.value_mut(id) = Tensor::new(&entry.shape, data.to_vec())?;
        }
        Ok((model, run))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.manifest.len() as u64).to_le_bytes());
        for e in &self.manifest {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.offset.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {format_version}")));
        }
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint config is not UTF-8".into()))?;
        let n = r.u64()? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        let mut expected = 0u64;
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            if offset != expected {
                return Err(Error::Data(format!("array {name} is not contiguous in the payload")));
            }
            expected += 8 * shape.iter().product::<usize>() as u64;
            manifest.push(ManifestEntry { name, shape, offset });
        }
        let count = r.u64()? as usize;
        if (count * 8) as u64 != expected {
            return Err(Error::Data("payload size disagrees with the manifest".into()));
        }
        let raw = r.take(count * 8)?;
        let payload = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            format_version,
            config,
            manifest,
            payload,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
