//! Content-addressed blob storage.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use hg_core::model::ObjectRef;
use hg_core::{ErrorCode, HgError, Result};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn corrupt(digest: &str) -> HgError {
    HgError::new(ErrorCode::Corrupt, format!("object {digest} failed digest check"))
}

/// Append-only blob store keyed by SHA-256.
pub trait ObjectStore: Send + Sync {
    /// Stores `bytes`; identical bytes always yield an identical ref.
    fn put(&self, bytes: &[u8], media_type: &str) -> Result<ObjectRef>;

    /// Raw bytes as stored, not yet verified.
    fn read_raw(&self, digest: &str) -> Result<Vec<u8>>;

    fn contains(&self, digest: &str) -> bool;

    /// Verified read.
    fn get(&self, digest: &str) -> Result<Vec<u8>> {
        if !is_digest(digest) {
            return Err(HgError::validation(format!("malformed digest {digest:?}")));
        }
        let bytes = self.read_raw(digest)?;
        if sha256_hex(&bytes) != digest {
            return Err(corrupt(digest));
        }
        Ok(bytes)
    }

    fn get_ref(&self, r: &ObjectRef) -> Result<Vec<u8>> {
        let bytes = self.get(&r.sha256)?;
        if bytes.len() as u64 != r.size_bytes {
            return Err(corrupt(&r.sha256));
        }
        Ok(bytes)
    }
}

/// `<root>/<first2>/<digest>` on the local filesystem.
#[derive(Debug, Clone)]
pub struct FsObjectStore {
    root: PathBuf,
}

impl FsObjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| HgError::internal(format!("{}: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2]).join(digest)
    }
}

impl ObjectStore for FsObjectStore {
    fn put(&self, bytes: &[u8], media_type: &str) -> Result<ObjectRef> {
        let digest = sha256_hex(bytes);
        let path = self.path_of(&digest);
        if !path.exists() {
            let dir = path.parent().expect("object path has a parent");
            fs::create_dir_all(dir).map_err(HgError::internal)?;
            let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(HgError::internal)?;
            tmp.write_all(bytes).map_err(HgError::internal)?;
            tmp.as_file().sync_all().map_err(HgError::internal)?;
            // A concurrent writer of the same bytes may win; either copy is fine.
            tmp.persist(&path).map_err(|e| HgError::internal(e.error))?;
        }
        Ok(ObjectRef {
            sha256: digest,
            size_bytes: bytes.len() as u64,
            media_type: media_type.to_string(),
        })
    }

    fn read_raw(&self, digest: &str) -> Result<Vec<u8>> {
        fs::read(self.path_of(digest)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HgError::not_found(format!("object {digest}")),
            _ => HgError::internal(e),
        })
    }

    fn contains(&self, digest: &str) -> bool {
        is_digest(digest) && self.path_of(digest).exists()
    }
}

/// In-memory store for tests and throwaway runs.
#[derive(Debug, Default)]
pub struct MemObjectStore {
    blobs: Mutex<HashMap<String, Vec<u8>>>,
}

impl MemObjectStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overwrites a blob in place, bypassing content addressing.
    pub fn tamper(&self, digest: &str, bytes: Vec<u8>) {
        self.blobs.lock().unwrap().insert(digest.to_string(), bytes);
    }

    pub fn len(&self) -> usize {
        self.blobs.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ObjectStore for MemObjectStore {
    fn put(&self, bytes: &[u8], media_type: &str) -> Result<ObjectRef> {
        let digest = sha256_hex(bytes);
        self.blobs
            .lock()
            .unwrap()
            .entry(digest.clone())
            .or_insert_with(|| bytes.to_vec());
        Ok(ObjectRef {
            sha256: digest,
            size_bytes: bytes.len() as u64,
            media_type: media_type.to_string(),
        })
    }

    fn read_raw(&self, digest: &str) -> Result<Vec<u8>> {
        self.blobs
            .lock()
            .unwrap()
            .get(digest)
            .cloned()
            .ok_or_else(|| HgError::not_found(format!("object {digest}")))
    }

    fn contains(&self, digest: &str) -> bool {
        self.blobs.lock().unwrap().contains_key(digest)
    }
}
