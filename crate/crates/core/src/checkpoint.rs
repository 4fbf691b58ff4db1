//! Binary checkpoint files.
//!
//! Layout:
//!
//! | bytes        | content                                          |
//! |--------------|--------------------------------------------------|
//! | 0..8         | magic `CLRPCKPT`                                 |
//! | 8..12        | format version, `u32` little-endian              |
//! | 12..20       | header length `L`, `u64` little-endian           |
//! | 20..20+L     | UTF-8 JSON [`CheckpointHeader`]                  |
//! | rest         | every tensor in header order, `f32` little-endian |
//!
//! The header lists each store's entries with name, kind and shape, the
//! architecture or head descriptor needed to rebuild the network, and a
//! SHA-256 digest of the payload. The identity projector's seed is recorded
//! together with the projection matrices it produced; loading rebuilds the
//! matrices from the seed and rejects the file if they differ.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enhance::{EnhanceNet, NetworkSpec};
use crate::error::{Error, Result};
use crate::fie::IdentityProjector;
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::task_head::{HeadDescriptor, TaskHead, ToyHead, ToyHeadConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"CLRPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;
const PROJECTION_STORE: &str = "fie.projection";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Enhancement network, optionally with the identity projector.
    Enhancer,
    /// A pretrained task head.
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub branch_channels: Vec<usize>,
    pub projection_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub name: String,
    pub entries: Vec<EntryRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityRecord>,
    pub stores: Vec<StoreRecord>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    /// Free-form provenance (seed, step, validation score).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub header: CheckpointHeader,
    pub stores: Vec<ParamStore<S>>,
}

fn records<S: Scalar>(stores: &[ParamStore<S>]) -> Vec<StoreRecord> {
    stores
        .iter()
        .map(|s| StoreRecord {
            name: s.name().to_string(),
            entries: s
                .entries()
                .iter()
                .map(|e| {
                    let sh = e.tensor.shape();
                    EntryRecord { name: e.name.clone(), kind: e.kind, shape: [sh.c(), sh.n(), sh.h(), sh.w()] }
                })
                .collect(),
        })
        .collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<S: Scalar> Checkpoint<S> {
    fn assemble(kind: CheckpointKind, stores: Vec<ParamStore<S>>, meta: serde_json::Value) -> Self {
        let header = CheckpointHeader {
            kind,
            architecture: None,
            head: None,
            identity: None,
            stores: records(&stores),
            payload_bytes: 0,
            payload_sha256: String::new(),
            meta,
        };
        Self { header, stores }
    }

    /// Enhancer parameters, plus `φ`, its projection seed and the matrices built so far.
    pub fn for_enhancer(net: &EnhanceNet<S>, identity: Option<&IdentityProjector<S>>, meta: serde_json::Value) -> Self {
        let mut stores = vec![net.store().clone()];
        if let Some(p) = identity {
            stores.push(p.store().clone());
            let mut mats = ParamStore::new(PROJECTION_STORE);
            for (dim, m) in p.projections() {
                mats.add(format!("projection/{dim}"), ParamKind::Buffer, (*m).clone());
            }
            stores.push(mats);
        }
        let mut ck = Self::assemble(CheckpointKind::Enhancer, stores, meta);
        ck.header.architecture = Some(net.spec().clone());
        ck.header.identity =
            identity.map(|p| IdentityRecord { branch_channels: p.branch_channels(), projection_seed: p.projection_seed() });
        ck
    }

    pub fn for_head<H: TaskHead<S>>(head: &H, meta: serde_json::Value) -> Self {
        let mut ck = Self::assemble(CheckpointKind::Head, vec![head.store().clone()], meta);
        ck.header.head = Some(head.descriptor());
        ck
    }

    pub fn store(&self, name: &str) -> Result<&ParamStore<S>> {
        self.stores.iter().find(|s| s.name() == name).ok_or_else(|| corrupt(format!("no store `{name}`")))
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(corrupt(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)))
        }
    }

    pub fn enhancer(&self) -> Result<EnhanceNet<S>> {
        self.expect_kind(CheckpointKind::Enhancer)?;
        let spec = self.header.architecture.clone().ok_or_else(|| corrupt("enhancer checkpoint without architecture"))?;
        EnhanceNet::from_store(spec, self.store(crate::enhance::model::STORE_NAME)?.clone())
    }

    /// The identity projector, if one was saved.
    pub fn identity(&self) -> Result<Option<IdentityProjector<S>>> {
        let Some(rec) = &self.header.identity else { return Ok(None) };
        let p = IdentityProjector::from_parts(&rec.branch_channels, rec.projection_seed, self.store(crate::fie::STORE_NAME)?)?;
        if let Ok(mats) = self.store(PROJECTION_STORE) {
            for e in mats.entries() {
                let dim: usize = e
                    .name
                    .strip_prefix("projection/")
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| corrupt(format!("bad projection entry `{}`", e.name)))?;
                if *p.projection(dim) != e.tensor {
                    return Err(corrupt(format!("projection for {dim} does not match seed {}", rec.projection_seed)));
                }
            }
        }
        Ok(Some(p))
    }

    /// Rebuild the bundled stripe-counting head, frozen.
    pub fn toy_head(&self) -> Result<ToyHead<S>> {
        self.expect_kind(CheckpointKind::Head)?;
        let desc = self.header.head.as_ref().ok_or_else(|| corrupt("head checkpoint without descriptor"))?;
        if desc.name != crate::task_head::toy::HEAD_NAME {
            return Err(corrupt(format!("head `{}` is not the bundled toy head", desc.name)));
        }
        let cfg: ToyHeadConfig = serde_json::from_value(desc.config.clone())?;
        ToyHead::from_store(cfg, self.store(crate::task_head::toy::STORE_NAME)?)
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.stores {
            for e in s.entries() {
                for v in e.tensor.data() {
                    out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload();
        let mut header = self.header.clone();
        header.stores = records(&self.stores);
        header.payload_bytes = payload.len() as u64;
        header.payload_sha256 = hex::encode(Sha256::digest(&payload));
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let end = usize::try_from(len).ok().and_then(|l| l.checked_add(PREAMBLE)).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| corrupt(format!("header: {e}")))?;
        let payload = &bytes[end..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(corrupt(format!("payload is {} bytes, header says {}", payload.len(), header.payload_bytes)));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload digest mismatch"));
        }
        let mut chunks = payload.chunks_exact(4);
        let mut stores = Vec::with_capacity(header.stores.len());
        for rec in &header.stores {
            let mut store = ParamStore::new(rec.name.clone());
            for e in &rec.entries {
                let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3]);
                let mut data = Vec::with_capacity(shape.numel());
                for _ in 0..shape.numel() {
                    let c = chunks.next().ok_or_else(|| corrupt("payload shorter than the listed tensors"))?;
                    data.push(S::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64));
                }
                store.add(e.name.clone(), e.kind, Tensor::from_vec(shape, data)?);
            }
            stores.push(store);
        }
        if chunks.next().is_some() {
            return Err(corrupt("payload longer than the listed tensors"));
        }
        Ok(Self { header, stores })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhance::{HBlockSpec, Variant};
    use crate::task_head::ToyHead;

    fn tiny() -> EnhanceNet<f32> {
        EnhanceNet::new(NetworkSpec::custom(vec![HBlockSpec { depth: 4, growth: 4 }], 2).unwrap(), 7).unwrap()
    }

    #[test]
    fn enhancer_round_trip_is_bit_exact() {
        let net = tiny();
        let fie = IdentityProjector::<f32>::new(&[32, 32], 9).unwrap();
        fie.projection(32 * 4);
        let ck = Checkpoint::for_enhancer(&net, Some(&fie), serde_json::json!({"step": 3}));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let net2 = back.enhancer().unwrap();
        assert!(net2.store().bitwise_eq(net.store(), &[ParamKind::Trainable, ParamKind::Buffer]));
        let fie2 = back.identity().unwrap().unwrap();
        assert_eq!(fie2.projection_seed(), fie.projection_seed());
        assert_eq!(*fie2.projection(128), *fie.projection(128));
        assert_eq!(back.header.meta["step"], 3);
    }

    #[test]
    fn payload_is_little_endian_f32_in_header_order() {
        let net = tiny();
        let bytes = Checkpoint::for_enhancer(&net, None, serde_json::Value::Null).to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let first = &net.store().entries()[0].tensor;
        let at = 20 + len;
        for (i, v) in first.data().iter().take(5).enumerate() {
            assert_eq!(&bytes[at + 4 * i..at + 4 * i + 4], &v.to_le_bytes());
        }
        let total: usize = net.store().entries().iter().map(|e| e.tensor.len()).sum();
        assert_eq!(bytes.len(), at + 4 * total);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::for_enhancer(&tiny(), None, serde_json::Value::Null).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 3] ^= 0x40;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"garbage").is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn tampered_projection_is_rejected() {
        let fie = IdentityProjector::<f32>::new(&[32], 1).unwrap();
        fie.projection(64);
        let mut ck = Checkpoint::for_enhancer(&tiny(), Some(&fie), serde_json::Value::Null);
        let mats = ck.stores.iter_mut().find(|s| s.name() == PROJECTION_STORE).unwrap();
        let id = mats.find("projection/64").unwrap();
        mats.get_mut(id).data_mut()[0] += 1.0;
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(matches!(back.identity(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn head_checkpoint_rebuilds_frozen_head() {
        let mut head = ToyHead::<f32>::new(ToyHeadConfig::default(), 4).unwrap();
        head.freeze();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("head.ckpt");
        Checkpoint::for_head(&head, serde_json::Value::Null).save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        let h2 = back.toy_head().unwrap();
        assert!(h2.store().bitwise_eq(head.store(), &[ParamKind::Frozen]));
        assert!(h2.store().entries().iter().all(|e| e.kind == ParamKind::Frozen));
        assert!(back.enhancer().is_err());
        assert_eq!(back.header.head.as_ref().unwrap().name, "toy-stripes");
    }

    #[test]
    fn architecture_survives_for_full_variants() {
        let net = EnhanceNet::<f32>::new(NetworkSpec::build(Variant::Layers33).unwrap(), 0).unwrap();
        let back = Checkpoint::<f32>::from_bytes(&Checkpoint::for_enhancer(&net, None, serde_json::Value::Null).to_bytes().unwrap()).unwrap();
        assert_eq!(back.header.architecture.as_ref(), Some(net.spec()));
    }
}
