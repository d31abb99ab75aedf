//! Distributed data store for large objects, with a per-host LRU cache.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::HostId;
use crate::sim::{LatencyDist, Millis, RngStream};

const MB: u64 = 1 << 20;
const GB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatastoreConfig {
    pub read: LatencyDist,
    pub write: LatencyDist,
    /// Writes larger than this scale their sampled latency linearly.
    pub write_scale_bytes: u64,
    pub cache_bytes: u64,
    /// Local copy cost of a cache hit, per 100 MB.
    pub hit_ms_per_100mb: f64,
    pub write_failure_probability: f64,
    pub write_retries: u32,
}

impl Default for DatastoreConfig {
    fn default() -> Self {
        Self {
            read: LatencyDist::lognormal_from_quantile(3_950.0, 0.99, 8.0),
            write: LatencyDist::lognormal_from_quantile(7_070.0, 0.99, 8.0),
            write_scale_bytes: 2 * GB,
            cache_bytes: 16 * GB,
            hit_ms_per_100mb: 1.0,
            write_failure_probability: 0.0,
            write_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatastoreError {
    #[error("object size must be positive")]
    ZeroSize,
    #[error("object {0} not found")]
    NotFound(String),
    #[error("{needed} bytes exceed cache capacity {capacity}")]
    TooLarge { needed: u64, capacity: u64 },
    #[error("write of {0} failed after retries")]
    WriteFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoredObject {
    pub key: String,
    pub size: u64,
    pub version: u64,
    pub created_at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WriteRecord {
    pub version: u64,
    pub latency_ms: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReadRecord {
    pub latency_ms: Millis,
    pub cache_hit: bool,
}

/// Byte-bounded LRU cache of object keys on one host.
#[derive(Debug, Clone, Default)]
pub struct NodeCache {
    capacity: u64,
    resident: u64,
    clock: u64,
    entries: BTreeMap<String, (u64, u64)>,
    order: BTreeMap<u64, String>,
}

impl NodeCache {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Keys from least to most recently used.
    pub fn lru_order(&self) -> Vec<&str> {
        self.order.values().map(String::as_str).collect()
    }

    /// Mark a key used. Returns false if it is not resident.
    pub fn touch(&mut self, key: &str) -> bool {
        let Some((_, stamp)) = self.entries.get_mut(key) else { return false };
        self.order.remove(stamp);
        self.clock += 1;
        *stamp = self.clock;
        self.order.insert(self.clock, key.to_string());
        true
    }

    /// Evict least-recently-used entries until `needed` bytes are free.
    pub fn evict(&mut self, needed: u64) -> Result<Vec<String>, DatastoreError> {
        if needed > self.capacity {
            return Err(DatastoreError::TooLarge {
                needed,
                capacity: self.capacity,
            });
        }
        let mut out = Vec::new();
        while self.capacity - self.resident < needed {
            let (_, key) = self.order.pop_first().expect("resident bytes without entries");
            let (size, _) = self.entries.remove(&key).unwrap();
            self.resident -= size;
            out.push(key);
        }
        Ok(out)
    }

    pub fn insert(&mut self, key: &str, size: u64) -> Result<Vec<String>, DatastoreError> {
        if let Some((old, stamp)) = self.entries.remove(key) {
            self.order.remove(&stamp);
            self.resident -= old;
        }
        let evicted = self.evict(size)?;
        self.clock += 1;
        self.entries.insert(key.to_string(), (size, self.clock));
        self.order.insert(self.clock, key.to_string());
        self.resident += size;
        Ok(evicted)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatastoreStats {
    pub puts: u64,
    pub gets: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub cache_hits: u64,
    pub hit_ratio: f64,
    pub evictions: u64,
    pub write_failures: u64,
}

pub struct DataStore {
    config: DatastoreConfig,
    objects: BTreeMap<String, Vec<StoredObject>>,
    caches: BTreeMap<HostId, NodeCache>,
    rng: RngStream,
    stats: DatastoreStats,
}

impl DataStore {
    pub fn new(config: DatastoreConfig, rng: RngStream) -> Self {
        Self {
            config,
            objects: BTreeMap::new(),
            caches: BTreeMap::new(),
            rng,
            stats: DatastoreStats::default(),
        }
    }

    pub fn config(&self) -> &DatastoreConfig {
        &self.config
    }

    pub fn cache(&self, host: HostId) -> Option<&NodeCache> {
        self.caches.get(&host)
    }

    fn cache_mut(&mut self, host: HostId) -> &mut NodeCache {
        let cap = self.config.cache_bytes;
        self.caches.entry(host).or_insert_with(|| NodeCache::new(cap))
    }

    fn cache_insert(&mut self, host: HostId, key: &str, size: u64) {
        if size > self.config.cache_bytes {
            return;
        }
        let n = self.cache_mut(host).insert(key, size).map(|v| v.len()).unwrap_or(0);
        self.stats.evictions += n as u64;
    }

    pub fn latest(&self, key: &str) -> Option<&StoredObject> {
        self.objects.get(key).and_then(|v| v.last())
    }

    pub fn versions(&self, key: &str) -> &[StoredObject] {
        self.objects.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sampled write latency, scaled by size above the scale threshold.
    pub fn sample_write(&mut self, size: u64) -> Millis {
        let base = self.config.write.sample(&mut self.rng);
        let scale = (size as f64 / self.config.write_scale_bytes as f64).max(1.0);
        (base * scale).round() as Millis
    }

    pub fn sample_read(&mut self) -> Millis {
        self.config.read.sample_ms(&mut self.rng)
    }

    pub fn put(&mut self, key: &str, size: u64, from_host: HostId, now: Millis) -> Result<WriteRecord, DatastoreError> {
        if size == 0 {
            return Err(DatastoreError::ZeroSize);
        }
        let mut latency = self.sample_write(size);
        let mut tries = 0;
        while self.config.write_failure_probability > 0.0 && self.rng.bernoulli(self.config.write_failure_probability) {
            self.stats.write_failures += 1;
            tries += 1;
            if tries > self.config.write_retries {
                return Err(DatastoreError::WriteFailed(key.to_string()));
            }
            latency += self.sample_write(size);
        }
        let versions = self.objects.entry(key.to_string()).or_default();
        let version = versions.last().map_or(1, |o| o.version + 1);
        versions.push(StoredObject {
            key: key.to_string(),
            size,
            version,
            created_at: now + latency,
        });
        self.stats.puts += 1;
        self.stats.bytes_written += size;
        self.cache_insert(from_host, key, size);
        Ok(WriteRecord {
            version,
            latency_ms: latency,
        })
    }

    pub fn get(&mut self, key: &str, to_host: HostId) -> Result<ReadRecord, DatastoreError> {
        let size = self.latest(key).ok_or_else(|| DatastoreError::NotFound(key.to_string()))?.size;
        self.stats.gets += 1;
        self.stats.bytes_read += size;
        let hit = self.caches.get_mut(&to_host).is_some_and(|c| c.touch(key));
        let latency = if hit {
            self.stats.cache_hits += 1;
            (self.config.hit_ms_per_100mb * size as f64 / (100 * MB) as f64).ceil() as Millis
        } else {
            let l = self.sample_read();
            self.cache_insert(to_host, key, size);
            l
        };
        self.stats.hit_ratio = self.stats.cache_hits as f64 / self.stats.gets as f64;
        Ok(ReadRecord {
            latency_ms: latency,
            cache_hit: hit,
        })
    }

    /// Time for a new replica on `host` to fetch every listed object.
    /// Reads are sequential and log replay is free.
    pub fn restore<'a>(
        &mut self,
        keys: impl IntoIterator<Item = &'a str>,
        host: HostId,
    ) -> Result<(Millis, Vec<ReadRecord>), DatastoreError> {
        let mut total = 0;
        let mut reads = Vec::new();
        for key in keys {
            let r = self.get(key, host)?;
            total += r.latency_ms;
            reads.push(r);
        }
        Ok((total, reads))
    }

    pub fn stats(&self) -> &DatastoreStats {
        &self.stats
    }
}
