//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//! `b"CSEGCKPT"`, `u32` format version, `u32` header length, JSON header
//! (network config, optimizer step, free-form metadata), `u32` entry count,
//! then per entry: `u16` name length, UTF-8 name, `u8` kind tag, `u8` rank,
//! `u32` per dim, and the `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{NetworkParams, ParamEntry, ParamKind, ParamSet};
use crate::unet::UNetConfig;

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: UNetConfig,
    pub step: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: NetworkParams,
}

fn kind_tag(kind: ParamKind) -> (u8, u32) {
    match kind {
        ParamKind::Weight { fan_in } => (0, fan_in as u32),
        ParamKind::Bias => (1, 0),
        ParamKind::NormScale => (2, 0),
        ParamKind::NormShift => (3, 0),
        ParamKind::RunningMean => (4, 0),
        ParamKind::RunningVar => (5, 0),
    }
}

fn kind_from(tag: u8, extra: u32) -> Result<ParamKind> {
    Ok(match tag {
        0 => ParamKind::Weight { fan_in: extra as usize },
        1 => ParamKind::Bias,
        2 => ParamKind::NormScale,
        3 => ParamKind::NormShift,
        4 => ParamKind::RunningMean,
        5 => ParamKind::RunningVar,
        t => return Err(NnError::Checkpoint(format!("unknown parameter kind {t}"))),
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in self.params.entries() {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let (tag, extra) = kind_tag(e.kind);
            out.push(tag);
            out.extend_from_slice(&extra.to_le_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        read_exact(&mut r, &mut hbuf)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut nl = [0u8; 2];
            read_exact(&mut r, &mut nl)?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(e.to_string()))?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            let extra = read_u32(&mut r)?;
            let kind = kind_from(tag[0], extra)?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f32::from_bits(read_u32(&mut r)?));
            }
            entries.push(ParamEntry {
                name,
                shape,
                kind,
                data,
            });
        }
        if !r.is_empty() {
            return Err(NnError::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self {
            header,
            params: ParamSet::new(entries)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(NnError::Checkpoint("unexpected end of data".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
