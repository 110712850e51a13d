//! Per-observation primitive result cache.
//!
//! Keys are (observation id, primitive name, canonicalized argument text).
//! Values are deterministic, so concurrent writers racing on one key are
//! benign: last write wins with an identical value.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::RwLock;

use super::value::Value;

pub const DEFAULT_MEMORY_CAP_BYTES: usize = 4 * 1024 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub observation: String,
    pub primitive: String,
    pub args: String,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
    pub approx_bytes: usize,
}

#[derive(Debug)]
pub struct PrimitiveCache {
    map: RwLock<HashMap<CacheKey, Value>>,
    hits: AtomicU64,
    misses: AtomicU64,
    bytes: AtomicUsize,
    memory_cap: usize,
}

impl Default for PrimitiveCache {
    fn default() -> Self {
        Self::with_cap(DEFAULT_MEMORY_CAP_BYTES)
    }
}

impl PrimitiveCache {
    pub fn with_cap(memory_cap: usize) -> Self {
        PrimitiveCache {
            map: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            bytes: AtomicUsize::new(0),
            memory_cap,
        }
    }

    pub fn get(&self, key: &CacheKey) -> Option<Value> {
        let found = self.map.read().expect("cache poisoned").get(key).cloned();
        match &found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn insert(&self, key: CacheKey, value: Value) {
        let size = value.approx_bytes() + key.args.len() + key.observation.len() + 64;
        let prev = self
            .map
            .write()
            .expect("cache poisoned")
            .insert(key, value);
        if prev.is_none() {
            self.bytes.fetch_add(size, Ordering::Relaxed);
        }
    }

    pub fn get_or_insert_with<E>(
        &self,
        key: CacheKey,
        compute: impl FnOnce() -> Result<Value, E>,
    ) -> Result<Value, E> {
        if let Some(v) = self.get(&key) {
            return Ok(v);
        }
        let v = compute()?;
        self.insert(key, v.clone());
        Ok(v)
    }

    pub fn stats(&self) -> CacheStats {
        let map = self.map.read().expect("cache poisoned");
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: map.len(),
            approx_bytes: self.bytes.load(Ordering::Relaxed),
        }
    }

    /// Between-generation eviction hook: clears everything once the
    /// approximate footprint exceeds the cap, otherwise a no-op.
    pub fn evict_if_over_cap(&self) -> bool {
        if self.bytes.load(Ordering::Relaxed) <= self.memory_cap {
            return false;
        }
        let mut map = self.map.write().expect("cache poisoned");
        map.clear();
        map.shrink_to_fit();
        self.bytes.store(0, Ordering::Relaxed);
        true
    }

    pub fn clear(&self) {
        self.map.write().expect("cache poisoned").clear();
        self.bytes.store(0, Ordering::Relaxed);
    }
}
