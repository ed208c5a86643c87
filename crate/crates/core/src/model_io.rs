//! Checkpoints and their binary wire format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GFPK" | version u16 | meta_len u32 | meta JSON | count u32 | entries…
//! entry: name_len u16 | name | dtype u8 (0 = f32) | rank u8 | dims u32×rank | payload
//! ```
//!
//! Entries are written in name order and the loader rejects any other order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GFPK";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub type Params = BTreeMap<String, Tensor<f32>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Architecture id, e.g. `"restorer"` or `"denoiser"`.
    pub arch: String,
    /// Serialized architecture hyper-parameters needed to rebuild the model.
    #[serde(default)]
    pub arch_config: serde_json::Value,
    pub seed: u64,
    /// Training provenance tag such as `"N20"`.
    #[serde(default)]
    pub provenance: String,
    /// Provenance tags of the checkpoints this one was finetuned from, oldest first.
    #[serde(default)]
    pub lineage: Vec<String>,
    #[serde(default)]
    pub config_hash: String,
    /// Entry names whose interpolation is flagged as experimental.
    #[serde(default)]
    pub experimental: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params,
}

/// Hex SHA-256 of a serializable config (canonical compact JSON).
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Names of running statistics, which interpolate like parameters but are flagged.
pub fn is_running_stat(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with("running_"))
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: Params) -> Self {
        Self { meta, params }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params.get(name).ok_or_else(|| Error::Missing(name.to_string()))
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// All parameters concatenated in name order.
    pub fn flat(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.total_len());
        for t in self.params.values() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + 4 * self.total_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.params.len(), "entry count")?.to_le_bytes());
        for (name, t) in &self.params {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("entry name longer than 65535 bytes: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::InvalidArgument(format!("rank {} too large for `{name}`", t.rank())))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u32("entry count")?;
        let mut params = Params::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u16("entry name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "entry name")?.to_vec())
                .map_err(|e| Error::InvalidArgument(format!("entry name is not UTF-8: {e}")))?;
            if let Some(p) = &prev {
                if *p >= name {
                    return Err(Error::Unsorted { prev: p.clone(), next: name });
                }
            }
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::UnsupportedDtype(dtype));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated("payload"))?;
            let payload = r.take(n.checked_mul(4).ok_or(Error::Truncated("payload"))?, "payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name.clone(), Tensor::new(shape, data)?);
            prev = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidArgument(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CompatIssue {
    /// Present in the first checkpoint only.
    Missing(String),
    /// Present in the second checkpoint only.
    Extra(String),
    Shape { name: String, a: Vec<usize>, b: Vec<usize> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompatReport {
    pub issues: Vec<CompatIssue>,
}

impl CompatReport {
    pub fn is_compatible(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_compatible() {
            Ok(())
        } else {
            Err(Error::Incompatible(self.to_string()))
        }
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            match issue {
                CompatIssue::Missing(n) => writeln!(f, "missing\t{n}")?,
                CompatIssue::Extra(n) => writeln!(f, "extra\t{n}")?,
                CompatIssue::Shape { name, a, b } => writeln!(f, "shape\t{name}\t{a:?}\t{b:?}")?,
            }
        }
        Ok(())
    }
}

/// Compare name sets and shapes of two parameter maps.
pub fn compat_check(a: &Params, b: &Params) -> CompatReport {
    let mut issues = Vec::new();
    for (name, ta) in a {
        match b.get(name) {
            None => issues.push(CompatIssue::Missing(name.clone())),
            Some(tb) if ta.shape() != tb.shape() => issues.push(CompatIssue::Shape {
                name: name.clone(),
                a: ta.shape().to_vec(),
                b: tb.shape().to_vec(),
            }),
            Some(_) => {}
        }
    }
    issues.extend(b.keys().filter(|n| !a.contains_key(*n)).map(|n| CompatIssue::Extra(n.clone())));
    CompatReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = Params::new();
        params.insert("b.weight".into(), Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        params.insert("a.bias".into(), Tensor::new([3], vec![-0.0, f32::MIN_POSITIVE, 7.5]).unwrap());
        let meta = CheckpointMeta {
            arch: "denoiser".into(),
            arch_config: serde_json::json!({"c1": 32, "gain": 0.1}),
            seed: 9,
            provenance: "N20".into(),
            lineage: vec!["base".into()],
            config_hash: "abc".into(),
            experimental: vec![],
        };
        Checkpoint::new(meta, params)
    }

    #[test]
    fn empty_roundtrip() {
        let c = Checkpoint::default();
        let bytes = c.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn payload_layout() {
        let mut params = Params::new();
        params.insert("w".into(), Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = Checkpoint::new(CheckpointMeta::default(), params).encode().unwrap();
        let expect: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(&bytes[bytes.len() - 16..], &expect[..]);
        // dtype, rank, dims precede the payload
        let head = &bytes[bytes.len() - 16 - 10..bytes.len() - 16];
        assert_eq!(head, &[0, 2, 2, 0, 0, 0, 2, 0, 0, 0]);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.encode().unwrap(), bytes);
        assert!(back.params["a.bias"].data()[0].is_sign_negative());
    }

    #[test]
    fn error_variants() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::VersionMismatch(7))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..5]), Err(Error::Truncated(_))));

        // swap the two entries on the wire
        let c = sample();
        let meta = serde_json::to_vec(&c.meta).unwrap();
        let start = 4 + 2 + 4 + meta.len() + 4;
        let a_len = 2 + 6 + 2 + 4 + 12;
        let mut swapped = bytes[..start].to_vec();
        swapped.extend_from_slice(&bytes[start + a_len..]);
        swapped.extend_from_slice(&bytes[start..start + a_len]);
        assert!(matches!(Checkpoint::decode(&swapped), Err(Error::Unsorted { .. })));

        let mut bad = bytes.clone();
        bad[start + 2 + 6] = 1;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::UnsupportedDtype(1))));
    }

    #[test]
    fn flipped_payload_byte_changes_tensor() {
        let c = sample();
        let mut bytes = c.encode().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.params["a.bias"], c.params["a.bias"]);
        assert_ne!(back.params["b.weight"], c.params["b.weight"]);
    }

    #[test]
    fn compat_rows() {
        let a = sample().params;
        assert!(compat_check(&a, &a).is_compatible());
        let mut b = a.clone();
        b.remove("a.bias");
        assert_eq!(compat_check(&a, &b).issues, vec![CompatIssue::Missing("a.bias".into())]);
        assert_eq!(compat_check(&b, &a).issues, vec![CompatIssue::Extra("a.bias".into())]);
        let mut b = a.clone();
        let w = b.remove("b.weight").unwrap().reshape([4]).unwrap();
        b.insert("b.weight".into(), w);
        let r = compat_check(&a, &b);
        assert_eq!(r.issues.len(), 1);
        assert!(matches!(&r.issues[0], CompatIssue::Shape { name, .. } if name == "b.weight"));
        assert!(r.into_result().is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gfpk");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn running_stat_names() {
        assert!(is_running_stat("bn1.running_mean"));
        assert!(!is_running_stat("conv1.weight"));
    }

    #[test]
    fn config_hash_is_stable() {
        let h = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&serde_json::json!({"a": 1})).unwrap());
    }
}
