//! Encoder plus decoder, their joint configuration, and checkpoints.
//!
//! # Checkpoint format
//!
//! All integers little-endian.
//!
//! ```text
//! magic    8 bytes  "HMERCKPT"
//! version  u32      1
//! config   u32 length, then ModelConfig as UTF-8 JSON
//! count    u32      number of entries
//! entry    u16 name length, name (UTF-8 dotted path),
//!          u32 rank, rank x u32 extents,
//!          product(extents) x f32 values
//! ```
//!
//! Batch-norm running statistics are stored as `<path>.mean` and
//! `<path>.var` entries of rank 1. Entry order is the model's traversal
//! order; loading matches by name and requires every entry to be present.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::nn::{Module, Slot, Visitor};
use crate::numerics::{Float, RngState, Tensor};
use crate::training::parse_value;
use crate::{io_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HMERCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Guards allocation against corrupt shape headers.
const MAX_ENTRY_VALUES: usize = 1 << 28;

/// Adadelta and gradient-clipping settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm limit; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1.0, rho: 0.9, eps: 1e-6, weight_decay: 1e-4, clip_norm: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub optim: OptimConfig,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig { vocab_size, ..Default::default() },
            optim: OptimConfig::default(),
        }
    }

    /// Reduced preset for CPU-scale experiments.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                growth_rate: 8,
                block_depth: 4,
                n_blocks: 3,
                compression: 0.5,
                d_model: 128,
                ..Default::default()
            },
            decoder: DecoderConfig {
                d_model: 128,
                heads: 4,
                d_ff: 512,
                layers: 2,
                dropout: 0.1,
                vocab_size,
                ..Default::default()
            },
            optim: OptimConfig::default(),
        }
    }

    /// Applies one `encoder.*`, `decoder.*` or `optim.*` key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        let o = &mut self.optim;
        match key {
            "encoder.growth_rate" => e.growth_rate = parse_value(key, value)?,
            "encoder.block_depth" => e.block_depth = parse_value(key, value)?,
            "encoder.n_blocks" => e.n_blocks = parse_value(key, value)?,
            "encoder.compression" => e.compression = parse_value(key, value)?,
            "encoder.d_model" => e.d_model = parse_value(key, value)?,
            "encoder.stem_channels" => e.stem_channels = parse_value(key, value)?,
            "encoder.bottleneck" => e.bottleneck = parse_value(key, value)?,
            "encoder.swap_pos_axes" => e.swap_pos_axes = parse_value(key, value)?,
            "decoder.d_model" => d.d_model = parse_value(key, value)?,
            "decoder.heads" => d.heads = parse_value(key, value)?,
            "decoder.d_ff" => d.d_ff = parse_value(key, value)?,
            "decoder.layers" => d.layers = parse_value(key, value)?,
            "decoder.dropout" => d.dropout = parse_value(key, value)?,
            "decoder.max_positions" => d.max_positions = parse_value(key, value)?,
            "decoder.tie_embeddings" => d.tie_embeddings = parse_value(key, value)?,
            "optim.lr" => o.lr = parse_value(key, value)?,
            "optim.rho" => o.rho = parse_value(key, value)?,
            "optim.eps" => o.eps = parse_value(key, value)?,
            "optim.weight_decay" => o.weight_decay = parse_value(key, value)?,
            "optim.clip_norm" => o.clip_norm = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder d_model {} differs from decoder d_model {}",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.rho) && o.eps > 0.0 && o.weight_decay >= 0.0 && o.clip_norm >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Float> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed);
        let encoder = Encoder::new(&config.encoder, &mut rng)?;
        let decoder = Decoder::new(&config.decoder, &mut rng)?;
        Ok(Model { config: config.clone(), encoder, decoder })
    }

    /// Copies every parameter and statistic, converting the element type.
    pub fn convert<U: Float>(&self) -> Result<Model<U>> {
        let mut src = self.clone();
        let entries = collect_entries(&mut src);
        let mut out = Model::<U>::new(&self.config, 0)?;
        apply_entries(&mut out, &entries)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut src = self.clone();
        let entries = collect_entries(&mut src);
        let ck = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let config = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC).map_err(ck)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(ck)?;
        w.write_all(&(config.len() as u32).to_le_bytes()).map_err(ck)?;
        w.write_all(&config).map_err(ck)?;
        w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(ck)?;
        for (name, shape, values) in &entries {
            w.write_all(&(name.len() as u16).to_le_bytes()).map_err(ck)?;
            w.write_all(name.as_bytes()).map_err(ck)?;
            w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(ck)?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(ck)?;
            }
            let mut buf = Vec::with_capacity(values.len() * 4);
            for &v in values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf).map_err(ck)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut config = vec![0u8; read_u32(r)? as usize];
        read_exact(r, &mut config)?;
        let config: ModelConfig =
            serde_json::from_slice(&config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= MAX_ENTRY_VALUES);
            let n = n.ok_or_else(|| Error::Checkpoint(format!("{name}: implausible shape {shape:?}")))?;
            let mut buf = vec![0u8; n * 4];
            read_exact(r, &mut buf)?;
            let values = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            entries.push((name, shape, values));
        }
        let mut model = Model::new(&config, 0)?;
        apply_entries(&mut model, &entries)?;
        Ok(model)
    }
}

impl<T: Float> Module<T> for Model<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.scope("encoder", |v| self.encoder.visit(v));
        v.scope("decoder", |v| self.decoder.visit(v));
    }
}

type Entry = (String, Vec<usize>, Vec<f64>);

fn collect_entries<T: Float>(m: &mut Model<T>) -> Vec<Entry> {
    let mut out = Vec::new();
    let mut f = |p: &str, s: Slot<'_, T>| match s {
        Slot::Param(t) => out.push((p.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.f64()).collect())),
        Slot::Stats(st) => {
            out.push((format!("{p}.mean"), vec![st.mean.len()], st.mean.clone()));
            out.push((format!("{p}.var"), vec![st.var.len()], st.var.clone()));
        }
    };
    m.visit(&mut Visitor::new(&mut f));
    out
}

fn apply_entries<T: Float>(m: &mut Model<T>, entries: &[Entry]) -> Result<()> {
    let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.0.as_str(), e)).collect();
    let mut err: Option<Error> = None;
    let mut used = 0usize;
    let mut f = |p: &str, s: Slot<'_, T>| {
        if err.is_some() {
            return;
        }
        let mut take = |name: String, shape: &[usize]| -> Option<Vec<f64>> {
            match by_name.get(name.as_str()) {
                Some((_, sh, v)) if sh == shape => {
                    used += 1;
                    Some(v.clone())
                }
                Some((_, sh, _)) => {
                    err = Some(Error::Checkpoint(format!("{name}: shape {sh:?}, model expects {shape:?}")));
                    None
                }
                None => {
                    err = Some(Error::Checkpoint(format!("missing entry {name}")));
                    None
                }
            }
        };
        match s {
            Slot::Param(t) => {
                if let Some(v) = take(p.to_string(), t.shape()) {
                    let data = v.into_iter().map(T::lit).collect();
                    match Tensor::param(data, t.shape()) {
                        Ok(nt) => *t = nt,
                        Err(e) => err = Some(e.into()),
                    }
                }
            }
            Slot::Stats(st) => {
                let c = st.mean.len();
                if let Some(v) = take(format!("{p}.mean"), &[c]) {
                    st.mean = v;
                }
                if let Some(v) = take(format!("{p}.var"), &[c]) {
                    st.var = v;
                }
            }
        }
    };
    m.visit(&mut Visitor::new(&mut f));
    if let Some(e) = err {
        return Err(e);
    }
    if used != entries.len() {
        return Err(Error::Checkpoint(format!("{} entries do not belong to this model", entries.len() - used)));
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
