//! The FULM-v1 container file format.
//!
//! ```text
//! 0..4    magic "FULM"
//! 4..8    u32 LE version (1)
//! 8..16   u64 LE header length H
//! 16..    H bytes of UTF-8 JSON header, space padded so the payload starts
//!         on an 8-byte boundary
//! ...     little-endian f32 payload; tensor offsets are relative to the
//!         payload start and 8-byte aligned
//! ```
//!
//! LoRA entries are stored as two tensors, `<name>.lora_down` and
//! `<name>.lora_up`, plus a `lora` header record holding rank and alpha.
//! Model parameter files carry metadata role `"model"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterDelta, DeltaEntry, DeltaMetadata, LoraFactors, Role};
use crate::error::{Error, Result};
use crate::tensor::{numel, ModelParams, TensorF32};

pub const MAGIC: [u8; 4] = *b"FULM";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const MODEL_ROLE: &str = "model";

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Delta(AdapterDelta),
    Params(ModelParams),
}

impl Container {
    fn kind_name(&self) -> &'static str {
        match self {
            Container::Delta(_) => "delta",
            Container::Params(_) => "params",
        }
    }

    pub fn into_delta(self) -> Result<AdapterDelta> {
        match self {
            Container::Delta(d) => Ok(d),
            other => Err(Error::WrongContainerKind {
                expected: "delta",
                found: other.kind_name(),
            }),
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        match self {
            Container::Params(p) => Ok(p),
            other => Err(Error::WrongContainerKind {
                expected: "params",
                found: other.kind_name(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Dense,
    LoraDown,
    LoraUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraRecord {
    pub rank: usize,
    pub alpha: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRecord {
    pub role: String,
    pub domain: String,
    pub client_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub lora: BTreeMap<String, LoraRecord>,
    pub metadata: MetadataRecord,
}

fn align8(n: u64) -> u64 {
    n.div_ceil(8) * 8
}

fn lora_keys(name: &str) -> (String, String) {
    (format!("{name}.lora_down"), format!("{name}.lora_up"))
}

struct Layout<'a> {
    header: Header,
    blobs: Vec<&'a [f32]>,
}

fn layout(container: &Container) -> Result<Layout<'_>> {
    let mut parts: BTreeMap<String, (TensorKind, &TensorF32)> = BTreeMap::new();
    let mut lora = BTreeMap::new();
    let mut put = |key: String, kind, t| {
        if parts.insert(key.clone(), (kind, t)).is_some() {
            return Err(Error::MalformedHeader(format!("duplicate tensor key `{key}`")));
        }
        Ok(())
    };
    let metadata = match container {
        Container::Params(p) => {
            for (name, t) in &p.entries {
                put(name.clone(), TensorKind::Dense, t)?;
            }
            MetadataRecord {
                role: MODEL_ROLE.into(),
                domain: String::new(),
                client_id: String::new(),
            }
        }
        Container::Delta(d) => {
            for (name, entry) in &d.entries {
                match entry {
                    DeltaEntry::Dense(t) => put(name.clone(), TensorKind::Dense, t)?,
                    DeltaEntry::Lora(f) => {
                        f.validate(name)?;
                        let (down, up) = lora_keys(name);
                        put(down, TensorKind::LoraDown, &f.down)?;
                        put(up, TensorKind::LoraUp, &f.up)?;
                        lora.insert(
                            name.clone(),
                            LoraRecord {
                                rank: f.rank,
                                alpha: f.alpha,
                            },
                        );
                    }
                }
            }
            MetadataRecord {
                role: d.metadata.role.as_str().into(),
                domain: d.metadata.domain.clone(),
                client_id: d.metadata.client_id.clone(),
            }
        }
    };
    let mut tensors = BTreeMap::new();
    let mut blobs = Vec::with_capacity(parts.len());
    let mut offset = 0u64;
    for (key, (kind, t)) in parts {
        let nbytes = 4 * t.len() as u64;
        tensors.insert(
            key,
            TensorRecord {
                kind,
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            },
        );
        blobs.push(t.data());
        offset = align8(offset + nbytes);
    }
    Ok(Layout {
        header: Header {
            tensors,
            lora,
            metadata,
        },
        blobs,
    })
}

/// Serializes a delta or parameter set to FULM-v1 bytes.
pub fn encode(container: &Container) -> Result<Vec<u8>> {
    let Layout { header, blobs } = layout(container)?;
    let mut json = serde_json::to_vec(&header)?;
    let padded = align8((PREAMBLE + json.len()) as u64) as usize - PREAMBLE;
    json.resize(padded, b' ');

    let payload_len = header
        .tensors
        .values()
        .map(|r| align8(r.offset + r.nbytes))
        .max()
        .unwrap_or(0) as usize;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let start = out.len();
    out.resize(start + payload_len, 0);
    for (record, data) in header.tensors.values().zip(blobs) {
        let at = start + record.offset as usize;
        for (i, v) in data.iter().enumerate() {
            out[at + 4 * i..at + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the preamble and JSON header; returns the header and payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let available = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(Error::ContainerTruncated {
            needed: 4,
            available,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::ContainerTruncated {
            needed: PREAMBLE as u64,
            available,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64).saturating_add(header_len);
    if header_end > available {
        return Err(Error::ContainerTruncated {
            needed: header_end,
            available,
        });
    }
    let header_end = header_end as usize;
    let text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let header: Header =
        serde_json::from_str(text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

fn read_tensor(payload: &[u8], key: &str, record: &TensorRecord) -> Result<TensorF32> {
    let start = record.offset as usize;
    let end = start + record.nbytes as usize;
    let data: Vec<f32> = payload[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    TensorF32::new(record.shape.clone(), data).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite(format!("container tensor `{key}`")),
        _ => Error::MalformedHeader(format!("tensor `{key}` has invalid shape {:?}", record.shape)),
    })
}

fn check_payload(header: &Header, payload: &[u8]) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    for (key, r) in &header.tensors {
        let expected = numel(&r.shape) as u64 * 4;
        if r.nbytes != expected {
            return Err(Error::LengthMismatch(format!(
                "`{key}` declares {} bytes but shape {:?} needs {expected}",
                r.nbytes, r.shape
            )));
        }
        if r.offset % 8 != 0 {
            return Err(Error::LengthMismatch(format!(
                "`{key}` offset {} is not 8-byte aligned",
                r.offset
            )));
        }
        let end = r.offset.checked_add(r.nbytes).ok_or_else(|| {
            Error::LengthMismatch(format!("`{key}` extent overflows"))
        })?;
        spans.push((r.offset, end, key));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::LengthMismatch(format!(
                "`{}` overlaps `{}`",
                pair[1].2, pair[0].2
            )));
        }
    }
    let needed = spans.iter().map(|s| s.1).max().unwrap_or(0);
    let available = payload.len() as u64;
    if available < needed {
        return Err(Error::ContainerTruncated {
            needed,
            available,
        });
    }
    if available > align8(needed) {
        return Err(Error::LengthMismatch(format!(
            "payload has {available} bytes but tensors cover {needed}"
        )));
    }
    Ok(())
}

/// Parses FULM-v1 bytes.
pub fn decode(bytes: &[u8]) -> Result<Container> {
    let (header, payload) = decode_header(bytes)?;
    check_payload(&header, payload)?;

    if header.metadata.role == MODEL_ROLE {
        if !header.lora.is_empty() {
            return Err(Error::MalformedHeader("model parameters cannot hold LoRA".into()));
        }
        let mut params = ModelParams::new();
        for (key, r) in &header.tensors {
            if r.kind != TensorKind::Dense {
                return Err(Error::MalformedHeader(format!("`{key}` is not dense")));
            }
            params.insert(key.clone(), read_tensor(payload, key, r)?);
        }
        return Ok(Container::Params(params));
    }

    let role = Role::parse(&header.metadata.role)
        .ok_or_else(|| Error::MalformedHeader(format!("unknown role `{}`", header.metadata.role)))?;
    let mut delta = AdapterDelta::new(DeltaMetadata::new(
        role,
        header.metadata.domain.clone(),
        header.metadata.client_id.clone(),
    ));
    let mut claimed = 0usize;
    for (name, lr) in &header.lora {
        let (down_key, up_key) = lora_keys(name);
        let fetch = |key: &str, kind| match header.tensors.get(key) {
            Some(r) if r.kind == kind => read_tensor(payload, key, r),
            _ => Err(Error::MalformedHeader(format!("missing LoRA tensor `{key}`"))),
        };
        let down = fetch(&down_key, TensorKind::LoraDown)?;
        let up = fetch(&up_key, TensorKind::LoraUp)?;
        let factors = LoraFactors {
            down,
            up,
            rank: lr.rank,
            alpha: lr.alpha,
        };
        factors.validate(name)?;
        delta.entries.insert(name.clone(), DeltaEntry::Lora(factors));
        claimed += 2;
    }
    for (key, r) in &header.tensors {
        if r.kind == TensorKind::Dense {
            if delta.entries.contains_key(key) {
                return Err(Error::MalformedHeader(format!("duplicate tensor `{key}`")));
            }
            delta
                .entries
                .insert(key.clone(), DeltaEntry::Dense(read_tensor(payload, key, r)?));
            claimed += 1;
        }
    }
    if claimed != header.tensors.len() {
        return Err(Error::MalformedHeader("LoRA tensors without a lora record".into()));
    }
    Ok(Container::Delta(delta))
}

pub fn save(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    fs::write(path, encode(container)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Container> {
    decode(&fs::read(path)?)
}

pub fn save_delta(path: impl AsRef<Path>, delta: &AdapterDelta) -> Result<()> {
    save(path, &Container::Delta(delta.clone()))
}

pub fn load_delta(path: impl AsRef<Path>) -> Result<AdapterDelta> {
    load(path)?.into_delta()
}

pub fn save_params(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    save(path, &Container::Params(params.clone()))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    load(path)?.into_params()
}

pub fn delta_bytes(delta: &AdapterDelta) -> Result<Vec<u8>> {
    encode(&Container::Delta(delta.clone()))
}

pub fn params_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    encode(&Container::Params(params.clone()))
}

/// Hex SHA-256 of the encoded container.
pub fn digest(container: &Container) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode(container)?)))
}

pub fn delta_digest(delta: &AdapterDelta) -> Result<String> {
    digest(&Container::Delta(delta.clone()))
}

pub fn params_digest(params: &ModelParams) -> Result<String> {
    digest(&Container::Params(params.clone()))
}
