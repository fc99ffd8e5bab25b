use std::fs::{File, OpenOptions};
use std::path::Path;

use anyhow::{anyhow, Context};

use crate::manifest::sidecar;

/// Advisory lock on `<pool>.lock`, held until dropped. Writers take it
/// exclusively, readers shared.
pub struct PoolLock {
    _file: File,
}

impl PoolLock {
    pub fn exclusive(pool: &Path) -> anyhow::Result<Self> {
        Self::take(pool, true)
    }

    pub fn shared(pool: &Path) -> anyhow::Result<Self> {
        Self::take(pool, false)
    }

    fn take(pool: &Path, exclusive: bool) -> anyhow::Result<Self> {
        let path = sidecar(pool, ".lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .with_context(|| format!("opening lock file {}", path.display()))?;
        let taken = if exclusive {
            file.try_lock()
        } else {
            file.try_lock_shared()
        };
        taken.map_err(|e| anyhow!("pool {} is in use by another process ({e})", pool.display()))?;
        Ok(PoolLock { _file: file })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exclusive_locks_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let pool = dir.path().join("pool.jsonl");
        let held = PoolLock::exclusive(&pool).unwrap();
        assert!(dir.path().join("pool.jsonl.lock").exists());
        assert!(PoolLock::exclusive(&pool).is_err());
        assert!(PoolLock::shared(&pool).is_err());
        drop(held);
        let a = PoolLock::shared(&pool).unwrap();
        let _b = PoolLock::shared(&pool).unwrap();
        drop(a);
    }
}
