//! Checkpoint container: `CDCK` magic, u32 format version, u32 manifest
//! length, JSON manifest, then one `CDT1` block per parameter in manifest
//! order. Little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conv2d, SegNet, BLOCKS, UPSAMPLE};
use crate::bn::init_branches;
use crate::error::{Error, Result};
use crate::tensor::{read_block, write_block, ChannelStats, Precision, RawBlock, Real, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned text record of the layer stack.
pub fn architecture_descriptor(classes: usize) -> String {
    let mut parts: Vec<String> = BLOCKS
        .iter()
        .enumerate()
        .map(|(i, (ci, co, s))| format!("conv3x3({ci}->{co},s{s},p1)+bn[t{i}]+relu"))
        .collect();
    parts.push(format!("conv1x1({}->{classes})", BLOCKS[3].1));
    parts.push(format!("upsample_bilinear(x{UPSAMPLE})"));
    parts.push("softmax".into());
    format!("segnet/1: {}", parts.join(" | "))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    architecture: String,
    classes: usize,
    branches: usize,
    alpha: f64,
    epsilon: f64,
    precision: Precision,
    blocks: Vec<BlockEntry>,
}

impl<T: Real> SegNet<T> {
    /// Every parameter serialized as a named `CDT1` block, in a fixed order.
    pub fn parameter_blocks(&self) -> Vec<(String, Vec<u8>)> {
        fn vector<U: Real>(v: &[U]) -> Vec<u8> {
            let mut b = Vec::new();
            write_block(&mut b, &[v.len()], v).expect("rank-1 block");
            b
        }
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), conv.weight.to_cdt_bytes()));
            out.push((format!("conv{i}.bias"), vector(&conv.bias)));
        }
        out.push(("head.weight".into(), self.head.weight.to_cdt_bytes()));
        out.push(("head.bias".into(), vector(&self.head.bias)));
        for (i, bn) in self.bns.iter().enumerate() {
            out.push((format!("bn{i}.source_mean"), vector(&bn.source().means)));
            out.push((format!("bn{i}.source_var"), vector(&bn.source().vars)));
            for (k, a) in bn.branches().iter().enumerate() {
                out.push((format!("bn{i}.branch{k}.gamma"), vector(&a.gamma)));
                out.push((format!("bn{i}.branch{k}.beta"), vector(&a.beta)));
            }
        }
        out
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let blocks = self.parameter_blocks();
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            architecture: architecture_descriptor(self.classes),
            classes: self.classes,
            branches: self.k(),
            alpha: self.alpha(),
            epsilon: self.bns[0].epsilon(),
            precision: T::PRECISION,
            blocks: blocks
                .iter()
                .map(|(name, b)| BlockEntry {
                    name: name.clone(),
                    bytes: b.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in blocks {
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("truncated checkpoint".into());
        if bytes.len() < 12 {
            return Err(truncated());
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let mbytes = bytes.get(12..12 + mlen).ok_or_else(truncated)?;
        let manifest: Manifest = serde_json::from_slice(mbytes)
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if manifest.architecture != architecture_descriptor(manifest.classes) {
            return Err(Error::Format(format!(
                "unsupported architecture '{}'",
                manifest.architecture
            )));
        }

        let mut at = 12 + mlen;
        let mut blocks = Blocks::new();
        for entry in &manifest.blocks {
            let slice = bytes.get(at..at + entry.bytes).ok_or_else(truncated)?;
            let (block, used) = read_block(slice)?;
            if used != entry.bytes {
                return Err(Error::Format(format!("block '{}' length mismatch", entry.name)));
            }
            blocks.insert(entry.name.clone(), block);
            at += entry.bytes;
        }
        if at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint blocks".into()));
        }
        let mut convs = Vec::new();
        for (i, &(ci, co, s)) in BLOCKS.iter().enumerate() {
            convs.push(Conv2d {
                weight: take_tensor(&mut blocks, &format!("conv{i}.weight"), Shape::new(co, ci, 3, 3))?,
                bias: take_vector(&mut blocks, &format!("conv{i}.bias"), co)?,
                stride: s,
                padding: 1,
            });
        }
        let head = Conv2d {
            weight: take_tensor(
                &mut blocks,
                "head.weight",
                Shape::new(manifest.classes, BLOCKS[3].1, 1, 1),
            )?,
            bias: take_vector(&mut blocks, "head.bias", manifest.classes)?,
            stride: 1,
            padding: 0,
        };

        let mut bns = Vec::new();
        for (i, &(_, co, _)) in BLOCKS.iter().enumerate() {
            let means: Vec<f64> = take_vector(&mut blocks, &format!("bn{i}.source_mean"), co)?;
            let vars: Vec<f64> = take_vector(&mut blocks, &format!("bn{i}.source_var"), co)?;
            let source = ChannelStats::new(means, vars)?;
            if manifest.branches == 0 {
                return Err(Error::Format("checkpoint has zero branches".into()));
            }
            let mut bank = init_branches(
                take_vector(&mut blocks, &format!("bn{i}.branch0.gamma"), co)?,
                take_vector(&mut blocks, &format!("bn{i}.branch0.beta"), co)?,
                source,
                manifest.branches,
                manifest.alpha,
            )?;
            for k in 1..manifest.branches {
                let gamma = take_vector(&mut blocks, &format!("bn{i}.branch{k}.gamma"), co)?;
                let beta = take_vector(&mut blocks, &format!("bn{i}.branch{k}.beta"), co)?;
                let a = bank.branch_mut(k)?;
                a.gamma = gamma;
                a.beta = beta;
            }
            bns.push(bank);
        }
        Ok(SegNet::from_parts(convs, bns, head, manifest.classes))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

type Blocks = std::collections::HashMap<String, RawBlock>;

fn take_block(blocks: &mut Blocks, name: &str) -> Result<RawBlock> {
    blocks
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks block '{name}'")))
}

fn take_vector<U: Real>(blocks: &mut Blocks, name: &str, len: usize) -> Result<Vec<U>> {
    let b = take_block(blocks, name)?;
    if b.dims != [len] {
        return Err(Error::Format(format!("block '{name}' has dims {:?}", b.dims)));
    }
    Ok(b.values())
}

fn take_tensor<U: Real>(blocks: &mut Blocks, name: &str, shape: Shape) -> Result<Tensor<U>> {
    let t: Tensor<U> = take_block(blocks, name)?.into_tensor()?;
    if t.shape() != shape {
        return Err(Error::Format(format!("block '{name}' has shape {}", t.shape())));
    }
    Ok(t)
}
