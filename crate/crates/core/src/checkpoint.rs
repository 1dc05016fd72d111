//! Single-file parameter container.
//!
//! Layout: magic `LSCK`, `u32` format version, `u64` manifest length, the
//! JSON manifest, then the concatenated little-endian array payload. The
//! manifest records each array's name, shape, dtype and byte range together
//! with a SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Tensor};

const MAGIC: &[u8; 4] = b"LSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// What the file holds, e.g. `model`, `syncnet`, `adapter`.
    pub kind: String,
    pub modules: BTreeMap<String, String>,
    pub config_fingerprint: String,
    /// Fully resolved run configuration.
    pub config: BTreeMap<String, String>,
    pub created: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_fingerprint: String,
    pub config: BTreeMap<String, String>,
    pub created: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

fn module_versions() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    ["codec", "generator", "syncnet", "training", "personalization"]
        .iter()
        .map(|m| (m.to_string(), v.clone()))
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: &str, config_fingerprint: &str, params: ParamStore<f32>) -> Self {
        Self {
            kind: kind.to_string(),
            config_fingerprint: config_fingerprint.to_string(),
            config: BTreeMap::new(),
            created: BTreeMap::new(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.params.numel() * 4);
        let mut arrays = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: DType::F32.name().to_string(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            modules: module_versions(),
            config_fingerprint: self.config_fingerprint.clone(),
            config: self.config.clone(),
            created: self.created.clone(),
            arrays,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses the manifest only.
    pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = 16usize.checked_add(mlen).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(bad("manifest version disagrees with header"));
        }
        Ok((manifest, end))
    }

    /// Decodes arrays whose names start with one of `prefixes` (all arrays
    /// when empty). The checksum always covers the whole payload.
    pub fn from_bytes_filtered(bytes: &[u8], prefixes: &[&str]) -> Result<Self> {
        let (manifest, start) = Self::read_manifest(bytes)?;
        let payload = &bytes[start..];
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut params = ParamStore::new();
        for a in &manifest.arrays {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| a.name.starts_with(p)) {
                continue;
            }
            if a.dtype != DType::F32.name() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has unsupported dtype {}",
                    a.name, a.dtype
                )));
            }
            let n: usize = a.shape.iter().product();
            let (lo, hi) = (a.offset as usize, (a.offset + a.nbytes) as usize);
            if a.nbytes as usize != 4 * n || hi > payload.len() {
                return Err(Error::Checkpoint(format!("array `{}` has a bad byte range", a.name)));
            }
            let values = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(a.name.clone(), Tensor::from_vec(&a.shape, values)?);
        }
        Ok(Self {
            kind: manifest.kind,
            config_fingerprint: manifest.config_fingerprint,
            config: manifest.config,
            created: manifest.created,
            params,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_filtered(bytes, &[])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_filtered(path, &[])
    }

    pub fn load_filtered(path: &Path, prefixes: &[&str]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes_filtered(&bytes, prefixes)
    }

    /// Fails listing every name of `expected` that is absent.
    pub fn require<'a>(&self, expected: impl IntoIterator<Item = &'a String>) -> Result<()> {
        let missing: Vec<String> = expected
            .into_iter()
            .filter(|n| !self.params.contains(n))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArrays(missing))
        }
    }

    /// Checks presence and shapes against a freshly initialized template.
    pub fn require_like(&self, template: &ParamStore<f32>) -> Result<()> {
        self.require(template.names())?;
        template.check_congruent(&self.params.filter_names(template))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }

    pub fn expect_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.config_fingerprint == fingerprint {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "config fingerprint {} does not match {fingerprint}",
                self.config_fingerprint
            )))
        }
    }
}
