//! Binary checkpoint format.
//!
//! Layout: the magic bytes `WDDA`, a little-endian `u32` version, a `u32`
//! length followed by a JSON header (configs, phase, step, layer specs,
//! optimizer scalars), then tensor records until end of file. Each record
//! is a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32`
//! extents and the little-endian `f32` payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AlignmentConfig;
use crate::detector::{DetectorConfig, DetectorHead};
use crate::error::{Error, Result};
use crate::nn::{build_network, Adam, AdamMeta, LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WDDA";
pub const VERSION: u32 = 1;

/// Training stage a checkpoint was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Source,
    Global,
    Local,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Source => "source",
            Phase::Global => "global",
            Phase::Local => "local",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: AlignmentConfig,
    pub detector: DetectorConfig,
    pub phase: Phase,
    pub step: u64,
    pub source_backbone: Network,
    pub target_backbone: Option<Network>,
    pub head: DetectorHead,
    pub global_critic: Option<Network>,
    pub local_critic: Option<Network>,
    pub optimizers: BTreeMap<String, Adam>,
}

#[derive(Serialize, Deserialize)]
struct NetworkMeta {
    name: String,
    specs: Vec<LayerSpec>,
    frozen: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    name: String,
    meta: AdamMeta,
    slots: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: AlignmentConfig,
    detector: DetectorConfig,
    phase: Phase,
    step: u64,
    networks: Vec<NetworkMeta>,
    optimizers: Vec<OptimizerMeta>,
}

impl Checkpoint {
    /// The backbone a domain's images go through.
    pub fn backbone_for(&self, target: bool) -> &Network {
        if target {
            self.target_backbone.as_ref().unwrap_or(&self.source_backbone)
        } else {
            &self.source_backbone
        }
    }

    fn networks(&self) -> Vec<&Network> {
        let mut v = vec![&self.source_backbone];
        v.extend(self.target_backbone.as_ref());
        v.extend([&self.head.rpn_trunk, &self.head.rpn_head, &self.head.classifier]);
        v.extend(self.global_critic.as_ref());
        v.extend(self.local_critic.as_ref());
        v
    }

    /// Serialized bytes; identical checkpoints give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let nets = self.networks();
        let header = Header {
            config: self.config.clone(),
            detector: self.detector.clone(),
            phase: self.phase,
            step: self.step,
            networks: nets
                .iter()
                .map(|n| NetworkMeta {
                    name: n.name().to_string(),
                    specs: n.specs(),
                    frozen: n.frozen_layers().len(),
                })
                .collect(),
            optimizers: self
                .optimizers
                .iter()
                .map(|(name, a)| OptimizerMeta {
                    name: name.clone(),
                    meta: a.meta(),
                    slots: a.moments().0.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for n in &nets {
            for (name, t) in n.named_tensors() {
                write_record(&mut out, &name, t.shape(), t.data());
            }
        }
        for (name, a) in &self.optimizers {
            let (m, v) = a.moments();
            for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
                write_record(&mut out, &format!("optim.{name}.m.{i}"), &[mi.len()], mi);
                write_record(&mut out, &format!("optim.{name}.v.{i}"), &[vi.len()], vi);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
        while r.pos < bytes.len() {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let payload = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if records.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate record {name}")));
            }
        }

        let lookup = |k: &str| records.get(k).cloned();
        let mut nets: BTreeMap<String, Network> = BTreeMap::new();
        for meta in &header.networks {
            let mut net = build_network(&meta.name, &meta.specs, 0)?;
            net.freeze_leading(meta.frozen);
            net.load_named(&lookup)?;
            nets.insert(meta.name.clone(), net);
        }
        let mut take_net = |name: &str| nets.remove(name);
        let source_backbone = take_net("source_backbone").ok_or_else(|| Error::Format("missing source backbone".into()))?;
        let target_backbone = take_net("target_backbone");
        let head = DetectorHead {
            rpn_trunk: take_net("rpn_trunk").ok_or_else(|| Error::Format("missing rpn trunk".into()))?,
            rpn_head: take_net("rpn_head").ok_or_else(|| Error::Format("missing rpn head".into()))?,
            classifier: take_net("classifier").ok_or_else(|| Error::Format("missing classifier".into()))?,
        };
        let global_critic = take_net("global_critic");
        let local_critic = take_net("local_critic");
        if let Some(extra) = nets.keys().next() {
            return Err(Error::Format(format!("unexpected network {extra}")));
        }
        let mut optimizers = BTreeMap::new();
        for o in &header.optimizers {
            let mut m = Vec::with_capacity(o.slots);
            let mut v = Vec::with_capacity(o.slots);
            for i in 0..o.slots {
                let get = |kind: &str| {
                    let key = format!("optim.{}.{kind}.{i}", o.name);
                    lookup(&key)
                        .map(|t| t.into_data())
                        .ok_or_else(|| Error::Format(format!("missing tensor {key}")))
                };
                m.push(get("m")?);
                v.push(get("v")?);
            }
            optimizers.insert(o.name.clone(), Adam::from_parts(o.meta, m, v)?);
        }
        Ok(Self {
            config: header.config,
            detector: header.detector,
            phase: header.phase,
            step: header.step,
            source_backbone,
            target_backbone,
            head,
            global_critic,
            local_critic,
            optimizers,
        })
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
