use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::PreprocessError;

/// Hex SHA-256 over (stage, provider name, provider config, input text).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(stage: &str, provider: &str, config: &str, text: &str) -> Self {
        let mut h = Sha256::new();
        for part in [stage, provider, config, text] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let digest = h.finalize();
        Self(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Content-addressed provider-result cache, in memory with an optional
/// on-disk mirror (`<dir>/<first two hex chars>/<key>`).
#[derive(Debug, Default)]
pub struct ProviderCache {
    mem: Mutex<HashMap<CacheKey, String>>,
    dir: Option<PathBuf>,
}

impl ProviderCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            mem: Mutex::default(),
            dir: Some(dir.into()),
        }
    }

    fn path(dir: &Path, key: &CacheKey) -> PathBuf {
        dir.join(&key.0[..2]).join(&key.0)
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        if let Some(v) = self.mem.lock().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let dir = self.dir.as_ref()?;
        let v = fs::read_to_string(Self::path(dir, key)).ok()?;
        self.mem
            .lock()
            .expect("cache lock")
            .insert(key.clone(), v.clone());
        Some(v)
    }

    pub fn put(&self, key: CacheKey, value: &str) -> Result<(), PreprocessError> {
        if let Some(dir) = &self.dir {
            let path = Self::path(dir, &key);
            let parent = path.parent().expect("nested path");
            fs::create_dir_all(parent).map_err(|source| PreprocessError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
            fs::write(&path, value).map_err(|source| PreprocessError::Io { path, source })?;
        }
        self.mem
            .lock()
            .expect("cache lock")
            .insert(key, value.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mem.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
