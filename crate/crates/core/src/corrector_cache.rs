//! Content-addressed store of solved correctors.
//!
//! Keys hash the field id, box, particle count, spacing, direction and the
//! exterior restricted to the field's influence collar, with coordinates
//! quantized to `1e-12`. Completed entries are published once and read
//! without locking; a cold key is solved by exactly one caller while the
//! others wait on that key's latch.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conductance::Conductance;
use crate::error::{Error, Result};
use crate::point_process::PointConfiguration;
use crate::sector_solver::{read_blob, relevant_exterior, write_blob, DiscreteCorrector, GridSpec};

/// Default in-memory budget: 2 GiB.
pub const DEFAULT_BYTE_BUDGET: usize = 2 << 30;

const QUANTUM: f64 = 1e-12;

fn quantize(x: f64) -> i64 {
    (x / QUANTUM).round() as i64
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn new(field: &dyn Conductance, grid: &GridSpec, q: &[f64], exterior: &PointConfiguration) -> Result<Self> {
        let ext = relevant_exterior(&grid.region, exterior, field.interaction_radius())?;
        let mut pts: Vec<Vec<i64>> = ext.points().map(|p| p.iter().map(|&x| quantize(x)).collect()).collect();
        pts.sort();
        let mut hasher = Sha256::new();
        hasher.update(b"bulkdiff-corrector-v1\0");
        hasher.update(field.field_id().as_bytes());
        hasher.update([0u8]);
        hasher.update((grid.region.dim() as u64).to_le_bytes());
        for &c in grid.region.center() {
            hasher.update(quantize(c).to_le_bytes());
        }
        hasher.update(quantize(grid.region.side()).to_le_bytes());
        hasher.update((grid.n as u64).to_le_bytes());
        hasher.update(quantize(grid.h).to_le_bytes());
        for &v in q {
            hasher.update(quantize(v).to_le_bytes());
        }
        hasher.update((pts.len() as u64).to_le_bytes());
        for p in &pts {
            for &c in p {
                hasher.update(c.to_le_bytes());
            }
        }
        Ok(Self(hasher.finalize().into()))
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CacheKey({})", &self.hex()[..16])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub bytes: u64,
    pub entries: u64,
}

#[derive(Default)]
struct Slot {
    value: OnceLock<Arc<DiscreteCorrector>>,
    latch: Mutex<()>,
}

#[derive(Default)]
struct Lru {
    tick: u64,
    last_use: HashMap<CacheKey, u64>,
    order: BTreeMap<u64, CacheKey>,
    sizes: HashMap<CacheKey, usize>,
    bytes: usize,
}

#[derive(Serialize, Deserialize, Default)]
struct Manifest {
    entries: BTreeMap<String, ManifestEntry>,
}

#[derive(Serialize, Deserialize, Clone)]
struct ManifestEntry {
    field_id: String,
    n: usize,
    h: f64,
    bytes: u64,
}

pub struct CorrectorCache {
    enabled: bool,
    slots: Mutex<HashMap<CacheKey, Arc<Slot>>>,
    lru: Mutex<Lru>,
    budget: usize,
    dir: Option<PathBuf>,
    manifest: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
}

fn entry_bytes(c: &DiscreteCorrector) -> usize {
    8 * c.values.len() + 256
}

impl CorrectorCache {
    pub fn in_memory(budget: usize) -> Self {
        Self {
            enabled: true,
            slots: Mutex::new(HashMap::new()),
            lru: Mutex::new(Lru::default()),
            budget,
            dir: None,
            manifest: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Memory front backed by one file per entry under `dir`.
    pub fn with_dir(dir: impl AsRef<Path>, budget: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut c = Self::in_memory(budget);
        c.dir = Some(dir);
        Ok(c)
    }

    /// Pass-through: every request solves.
    pub fn disabled() -> Self {
        let mut c = Self::in_memory(0);
        c.enabled = false;
        c
    }

    pub fn stats(&self) -> CacheStats {
        let lru = self.lru.lock().expect("lru lock");
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            bytes: lru.bytes as u64,
            entries: lru.sizes.len() as u64,
        }
    }

    /// Returns the cached corrector for `key`, running `solve` at most once
    /// per key across concurrent callers.
    pub fn get_or_solve(
        &self,
        key: CacheKey,
        solve: impl FnOnce() -> Result<DiscreteCorrector>,
    ) -> Result<Arc<DiscreteCorrector>> {
        if !self.enabled {
            self.misses.fetch_add(1, Ordering::SeqCst);
            return solve().map(Arc::new);
        }
        let slot = {
            let mut slots = self.slots.lock().expect("slot map lock");
            slots.entry(key).or_default().clone()
        };
        if let Some(v) = slot.value.get() {
            self.hits.fetch_add(1, Ordering::SeqCst);
            self.touch(key, None);
            return Ok(v.clone());
        }
        let _guard = slot.latch.lock().expect("slot latch");
        if let Some(v) = slot.value.get() {
            self.hits.fetch_add(1, Ordering::SeqCst);
            self.touch(key, None);
            return Ok(v.clone());
        }
        if let Some(c) = self.load(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            let c = Arc::new(c);
            let _ = slot.value.set(c.clone());
            self.touch(key, Some(entry_bytes(&c)));
            return Ok(c);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let c = Arc::new(solve()?);
        self.store(&key, &c);
        let _ = slot.value.set(c.clone());
        self.touch(key, Some(entry_bytes(&c)));
        Ok(c)
    }

    fn touch(&self, key: CacheKey, new_size: Option<usize>) {
        let mut evict = Vec::new();
        {
            let mut lru = self.lru.lock().expect("lru lock");
            lru.tick += 1;
            let tick = lru.tick;
            if let Some(old) = lru.last_use.insert(key, tick) {
                lru.order.remove(&old);
            }
            lru.order.insert(tick, key);
            if let Some(sz) = new_size {
                if let Some(prev) = lru.sizes.insert(key, sz) {
                    lru.bytes -= prev;
                }
                lru.bytes += sz;
            }
            while lru.bytes > self.budget && lru.order.len() > 1 {
                let (&t, &k) = lru.order.iter().next().expect("nonempty");
                lru.order.remove(&t);
                lru.last_use.remove(&k);
                if let Some(sz) = lru.sizes.remove(&k) {
                    lru.bytes -= sz;
                }
                evict.push(k);
            }
        }
        if !evict.is_empty() {
            let mut slots = self.slots.lock().expect("slot map lock");
            for k in evict {
                slots.remove(&k);
            }
        }
    }

    fn path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.bdc", key.hex())))
    }

    fn load(&self, key: &CacheKey) -> Option<DiscreteCorrector> {
        let path = self.path(key)?;
        let file = fs::File::open(&path).ok()?;
        match read_blob(std::io::BufReader::new(file)) {
            Ok(c) => Some(c),
            Err(reason) => {
                warn!("{}", Error::CorruptEntry { path: path.clone(), reason });
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    fn store(&self, key: &CacheKey, c: &DiscreteCorrector) {
        let Some(path) = self.path(key) else { return };
        let write = || -> Result<()> {
            let tmp = path.with_extension("tmp");
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            write_blob(c, &mut f)?;
            drop(f);
            fs::rename(&tmp, &path)?;
            let _g = self.manifest.lock().expect("manifest lock");
            let mpath = self.dir.as_ref().expect("dir").join("manifest.json");
            let mut m: Manifest = fs::read(&mpath)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or_default();
            m.entries.insert(
                key.hex(),
                ManifestEntry { field_id: c.field_id.clone(), n: c.n(), h: c.grid.h, bytes: entry_bytes(c) as u64 },
            );
            fs::write(&mpath, serde_json::to_vec_pretty(&m)?)?;
            Ok(())
        };
        if let Err(e) = write() {
            warn!("could not persist cache entry {}: {e}", key.hex());
        }
    }
}

/// Summary of an on-disk cache directory, read from its manifest.
pub fn disk_stats(dir: impl AsRef<Path>) -> Result<CacheStats> {
    let mpath = dir.as_ref().join("manifest.json");
    let m: Manifest = match fs::read(&mpath) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
        Err(e) => return Err(e.into()),
    };
    let present: Vec<&ManifestEntry> = m
        .entries
        .iter()
        .filter(|(k, _)| dir.as_ref().join(format!("{k}.bdc")).exists())
        .map(|(_, v)| v)
        .collect();
    Ok(CacheStats {
        hits: 0,
        misses: 0,
        bytes: present.iter().map(|e| e.bytes).sum(),
        entries: present.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductance::CrowdingField;
    use crate::point_process::BoxRegion;
    use crate::sector_solver::{solve_dual, SolverOptions};

    fn setup() -> (CrowdingField, GridSpec) {
        let f = CrowdingField::new(2.0, 0.25).unwrap();
        let g = GridSpec::new(BoxRegion::centered(1.0, 1).unwrap(), 2, 0.125).unwrap();
        (f, g)
    }

    #[test]
    fn keys_ignore_order_and_far_points() {
        let (f, g) = setup();
        let a = PointConfiguration::from_flat(1, vec![0.6, -0.7, 3.0]).unwrap();
        let b = PointConfiguration::from_flat(1, vec![-0.7, 0.6]).unwrap();
        let c = PointConfiguration::from_flat(1, vec![0.6]).unwrap();
        let ka = CacheKey::new(&f, &g, &[1.0], &a).unwrap();
        assert_eq!(ka, CacheKey::new(&f, &g, &[1.0], &b).unwrap());
        assert_ne!(ka, CacheKey::new(&f, &g, &[1.0], &c).unwrap());
        assert_ne!(ka, CacheKey::new(&f, &g, &[2.0], &a).unwrap());
    }

    #[test]
    fn hit_after_miss() {
        let (f, g) = setup();
        let cache = CorrectorCache::in_memory(DEFAULT_BYTE_BUDGET);
        assert_eq!(cache.stats(), CacheStats::default());
        let e = PointConfiguration::empty(1);
        let key = CacheKey::new(&f, &g, &[1.0], &e).unwrap();
        let opts = SolverOptions::default();
        let a = cache.get_or_solve(key, || solve_dual(&f, &g, &[1.0], &e, &opts)).unwrap();
        let b = cache.get_or_solve(key, || panic!("must not solve twice")).unwrap();
        assert_eq!(a.values, b.values);
        let s = cache.stats();
        assert_eq!((s.hits, s.misses, s.entries), (1, 1, 1));
    }

    #[test]
    fn disk_round_trip_and_corruption() {
        let (f, g) = setup();
        let dir = tempfile::tempdir().unwrap();
        let e = PointConfiguration::empty(1);
        let key = CacheKey::new(&f, &g, &[1.0], &e).unwrap();
        let opts = SolverOptions::default();
        let first = {
            let cache = CorrectorCache::with_dir(dir.path(), DEFAULT_BYTE_BUDGET).unwrap();
            cache.get_or_solve(key, || solve_dual(&f, &g, &[1.0], &e, &opts)).unwrap()
        };
        assert_eq!(disk_stats(dir.path()).unwrap().entries, 1);
        let cache = CorrectorCache::with_dir(dir.path(), DEFAULT_BYTE_BUDGET).unwrap();
        let again = cache.get_or_solve(key, || panic!("disk entry expected")).unwrap();
        assert_eq!(first.values, again.values);

        let path = dir.path().join(format!("{}.bdc", key.hex()));
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        let cache = CorrectorCache::with_dir(dir.path(), DEFAULT_BYTE_BUDGET).unwrap();
        let resolved = cache.get_or_solve(key, || solve_dual(&f, &g, &[1.0], &e, &opts)).unwrap();
        assert_eq!(resolved.values, first.values);
        assert_eq!(cache.stats().misses, 1);
    }

    #[test]
    fn eviction_respects_budget() {
        let (f, _) = setup();
        let cache = CorrectorCache::in_memory(1);
        let opts = SolverOptions::default();
        let e = PointConfiguration::empty(1);
        for n in 1..4 {
            let g = GridSpec::new(BoxRegion::centered(1.0, 1).unwrap(), n, 0.25).unwrap();
            let key = CacheKey::new(&f, &g, &[1.0], &e).unwrap();
            cache.get_or_solve(key, || solve_dual(&f, &g, &[1.0], &e, &opts)).unwrap();
        }
        assert_eq!(cache.stats().entries, 1);
    }
}
