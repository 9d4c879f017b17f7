//! Content-addressed blob storage on the local filesystem.
//!
//! Blobs live at `<root>/<hash[0..2]>/<hash[2..4]>/<hash>`. Writes go to a
//! temporary file first and are renamed into place, so concurrent puts of the
//! same content converge on one copy.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlobRef {
    pub hash: String,
    pub size: u64,
}

impl BlobRef {
    pub fn of(content: &[u8]) -> Self {
        Self {
            hash: sha256_hex(content),
            size: content.len() as u64,
        }
    }
}

pub fn sha256_hex(content: &[u8]) -> String {
    hex::encode(Sha256::digest(content))
}

pub fn is_valid_hash(hash: &str) -> bool {
    hash.len() == 64 && hash.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("tmp"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Location of a blob on disk. Exposed for audits and fault-injection tests.
    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[0..2]).join(&hash[2..4]).join(hash)
    }

    pub fn contains(&self, hash: &str) -> bool {
        is_valid_hash(hash) && self.path_for(hash).is_file()
    }

    pub fn put(&self, content: &[u8]) -> Result<BlobRef> {
        let blob = BlobRef::of(content);
        let dest = self.path_for(&blob.hash);
        if dest.is_file() {
            return Ok(blob);
        }
        fs::create_dir_all(dest.parent().expect("fan-out dir"))?;
        let tmp = self.root.join("tmp").join(format!(
            "{}.{}.{}",
            blob.hash,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(content)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &dest)?;
        Ok(blob)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        if !is_valid_hash(hash) {
            return Err(Error::not_found("blob", hash));
        }
        let bytes = match fs::read(self.path_for(hash)) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(Error::not_found("blob", hash))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != hash {
            return Err(Error::corrupt_path(
                hash,
                format!("blob {hash} re-hashes to {actual}"),
            ));
        }
        Ok(bytes)
    }

    pub fn get_ref(&self, blob: &BlobRef) -> Result<Vec<u8>> {
        self.get(&blob.hash)
    }

    pub fn count(&self) -> Result<usize> {
        let mut n = 0;
        for a in fs::read_dir(&self.root)? {
            let a = a?;
            if a.file_name() == "tmp" || !a.file_type()?.is_dir() {
                continue;
            }
            for b in fs::read_dir(a.path())? {
                n += fs::read_dir(b?.path())?.count();
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_content_hash() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let r = store.put(b"").unwrap();
        assert_eq!(
            r.hash,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(r.size, 0);
        assert_eq!(store.get(&r.hash).unwrap(), b"");
    }

    #[test]
    fn idempotent_put() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let a = store.put(b"hello").unwrap();
        let b = store.put(b"hello").unwrap();
        assert_eq!(a, b);
        assert_eq!(store.count().unwrap(), 1);
        let c = store.put(b"hello!").unwrap();
        assert_ne!(a.hash, c.hash);
        assert_eq!(store.count().unwrap(), 2);
    }

    #[test]
    fn abc_reference_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn unknown_and_tampered() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let missing = "0".repeat(64);
        assert!(matches!(store.get(&missing), Err(Error::NotFound { .. })));
        assert!(matches!(store.get("nothex"), Err(Error::NotFound { .. })));
        let r = store.put(b"payload").unwrap();
        fs::write(store.path_for(&r.hash), b"pAyload").unwrap();
        assert!(matches!(store.get(&r.hash), Err(Error::Corruption { .. })));
    }

    #[test]
    fn concurrent_puts_converge() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| store.put(&[7u8; 4096]).unwrap());
            }
        });
        assert_eq!(store.count().unwrap(), 1);
        assert_eq!(fs::read_dir(dir.path().join("tmp")).unwrap().count(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip(len in 0usize..(1 << 20), seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let store = BlobStore::open(dir.path()).unwrap();
            let mut rng = crate::prng::XorShift64Star::new(seed);
            let data: Vec<u8> = (0..len).map(|_| rng.next_u64() as u8).collect();
            let r = store.put(&data).unwrap();
            prop_assert_eq!(store.get(&r.hash).unwrap(), data);
        }
    }
}
