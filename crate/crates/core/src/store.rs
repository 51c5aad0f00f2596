//! The per-user candidate store: versioned top-K entries with atomic
//! replacement, read statistics, and a canonical text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::ids::{Hour, ItemId, UserId};
use crate::retrieval::rank_order;

pub const DEFAULT_STORE_K: usize = 200;

const HEADER_TAG: &str = "radar_store v1";

/// Rounds to the 6-decimal grid used by the persistence format, so a saved
/// score parses back to the identical double. Negative zero is folded.
#[inline]
pub fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6 + 0.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadarEntry {
    pub user: UserId,
    pub version: u64,
    pub refreshed_at: Hour,
    pub items: Vec<(ItemId, f64)>,
}

impl RadarEntry {
    /// Quantizes scores and sorts into the canonical order. Does not truncate.
    pub fn new(user: UserId, version: u64, refreshed_at: Hour, mut items: Vec<(ItemId, f64)>) -> Self {
        for (_, s) in items.iter_mut() {
            *s = quantize(*s);
        }
        items.sort_unstable_by(|a, b| rank_order(a.1, a.0, b.1, b.0));
        RadarEntry {
            user,
            version,
            refreshed_at,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn check(&self, store_k: usize) -> std::result::Result<(), String> {
        if self.items.len() > store_k {
            return Err(format!("{} items exceed store_k = {store_k}", self.items.len()));
        }
        if let Some((item, s)) = self.items.iter().find(|(_, s)| !s.is_finite() || quantize(*s) != *s) {
            return Err(format!("score {s} of item {item} is not on the 1e-6 grid"));
        }
        for w in self.items.windows(2) {
            if rank_order(w[0].1, w[0].0, w[1].1, w[1].0) != std::cmp::Ordering::Less {
                return Err(format!("items {} and {} out of order or duplicated", w[0].0, w[1].0));
            }
        }
        let mut ids: Vec<ItemId> = self.items.iter().map(|(i, _)| *i).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("duplicate item {}", w[0]));
        }
        Ok(())
    }
}

/// Upper bounds (exclusive) of the staleness histogram buckets, in hours.
/// The last bucket is open-ended.
pub const STALENESS_BUCKETS: [Hour; 7] = [6, 12, 24, 48, 168, 336, 504];

fn bucket_of(staleness: Hour) -> usize {
    STALENESS_BUCKETS
        .iter()
        .position(|&b| staleness < b)
        .unwrap_or(STALENESS_BUCKETS.len())
}

pub fn bucket_label(i: usize) -> String {
    let lo = if i == 0 { 0 } else { STALENESS_BUCKETS[i - 1] };
    match STALENESS_BUCKETS.get(i) {
        Some(hi) => format!("{lo}-{hi}h"),
        None => format!("{lo}h+"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreStats {
    pub n_entries: usize,
    pub hit_count: u64,
    pub miss_count: u64,
    pub max_staleness: Hour,
    /// Read counts per bucket of [`STALENESS_BUCKETS`], plus the open bucket.
    pub staleness_histogram: Vec<u64>,
}

impl StoreStats {
    pub fn reads(&self) -> u64 {
        self.hit_count + self.miss_count
    }
}

#[derive(Debug, Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    max_staleness: AtomicU64,
    buckets: [AtomicU64; STALENESS_BUCKETS.len() + 1],
}

/// Concurrent store. Entries are immutable once published and swapped
/// whole under a write lock, so readers never see a partial list.
#[derive(Debug)]
pub struct RadarStore {
    store_k: usize,
    entries: RwLock<BTreeMap<UserId, Arc<RadarEntry>>>,
    counters: Counters,
}

impl Default for RadarStore {
    fn default() -> Self {
        RadarStore::new(DEFAULT_STORE_K)
    }
}

impl PartialEq for RadarStore {
    /// Compares contents only; read statistics are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.store_k == other.store_k && *self.read_map() == *other.read_map()
    }
}

impl RadarStore {
    pub fn new(store_k: usize) -> Self {
        RadarStore {
            store_k,
            entries: RwLock::new(BTreeMap::new()),
            counters: Counters::default(),
        }
    }

    pub fn store_k(&self) -> usize {
        self.store_k
    }

    fn read_map(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<UserId, Arc<RadarEntry>>> {
        self.entries.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.read_map().len()
    }

    pub fn is_empty(&self) -> bool {
        self.read_map().is_empty()
    }

    /// Publishes a new entry. The version must be exactly one past the
    /// current version for the user (1 for a new user).
    pub fn put_entry(&self, entry: RadarEntry) -> Result<()> {
        let user = entry.user;
        entry
            .check(self.store_k)
            .map_err(|reason| Error::StoreRejected { user, reason })?;
        let mut map = self.entries.write().unwrap_or_else(|e| e.into_inner());
        let current = map.get(&user).map_or(0, |e| e.version);
        if entry.version != current + 1 {
            return Err(Error::StoreRejected {
                user,
                reason: format!("version {} does not follow {current}", entry.version),
            });
        }
        map.insert(user, Arc::new(entry));
        Ok(())
    }

    /// Reads an entry for serving, recording a hit or miss. Stale entries are
    /// still returned, with their staleness in hours.
    pub fn get_entry(&self, user: UserId, now: Hour) -> Option<(Arc<RadarEntry>, Hour)> {
        let found = self.read_map().get(&user).cloned();
        let c = &self.counters;
        match found {
            Some(entry) => {
                let staleness = now.saturating_sub(entry.refreshed_at);
                c.hits.fetch_add(1, AtomicOrdering::Relaxed);
                c.buckets[bucket_of(staleness)].fetch_add(1, AtomicOrdering::Relaxed);
                c.max_staleness.fetch_max(staleness, AtomicOrdering::Relaxed);
                Some((entry, staleness))
            }
            None => {
                c.misses.fetch_add(1, AtomicOrdering::Relaxed);
                None
            }
        }
    }

    /// Reads an entry without touching the statistics.
    pub fn peek(&self, user: UserId) -> Option<Arc<RadarEntry>> {
        self.read_map().get(&user).cloned()
    }

    pub fn version(&self, user: UserId) -> u64 {
        self.read_map().get(&user).map_or(0, |e| e.version)
    }

    pub fn last_refreshed(&self, user: UserId) -> Option<Hour> {
        self.read_map().get(&user).map(|e| e.refreshed_at)
    }

    /// All entries in user order.
    pub fn entries(&self) -> Vec<Arc<RadarEntry>> {
        self.read_map().values().cloned().collect()
    }

    pub fn stats(&self) -> StoreStats {
        let c = &self.counters;
        StoreStats {
            n_entries: self.len(),
            hit_count: c.hits.load(AtomicOrdering::Relaxed),
            miss_count: c.misses.load(AtomicOrdering::Relaxed),
            max_staleness: c.max_staleness.load(AtomicOrdering::Relaxed),
            staleness_histogram: c.buckets.iter().map(|b| b.load(AtomicOrdering::Relaxed)).collect(),
        }
    }

    pub fn reset_stats(&self) {
        let c = &self.counters;
        c.hits.store(0, AtomicOrdering::Relaxed);
        c.misses.store(0, AtomicOrdering::Relaxed);
        c.max_staleness.store(0, AtomicOrdering::Relaxed);
        for b in &c.buckets {
            b.store(0, AtomicOrdering::Relaxed);
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "{HEADER_TAG} store_k={}", self.store_k)?;
        let mut line = String::new();
        for entry in self.read_map().values() {
            line.clear();
            let _ = write!(
                line,
                "{} {} {} {}",
                entry.user,
                entry.version,
                entry.refreshed_at,
                entry.items.len()
            );
            for (item, score) in &entry.items {
                let _ = write!(line, " {item}:{score:.6}");
            }
            writeln!(out, "{line}")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(file).map_err(|e| Error::io(path, e))
    }

    /// Parses the canonical format. `origin` names the source in errors.
    pub fn read_from<R: BufRead>(reader: R, origin: &str) -> Result<RadarStore> {
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_string(),
            line,
            reason,
        };
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(h) => h.map_err(|e| err(1, e.to_string()))?,
            None => return Err(err(1, "missing header".into())),
        };
        let store_k = header
            .strip_prefix(HEADER_TAG)
            .and_then(|rest| rest.trim().strip_prefix("store_k="))
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?;

        let mut map = BTreeMap::new();
        let mut last_user: Option<UserId> = None;
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let line = line.map_err(|e| err(n, e.to_string()))?;
            let mut fields = line.split(' ');
            let mut next_num = |what: &str| -> Result<u64> {
                fields
                    .next()
                    .and_then(|f| f.parse::<u64>().ok())
                    .ok_or_else(|| err(n, format!("bad or missing {what}")))
            };
            let user = UserId(
                u32::try_from(next_num("user id")?).map_err(|_| err(n, "user id out of range".into()))?,
            );
            let version = next_num("version")?;
            let refreshed_at = next_num("refreshed_at")?;
            let count = next_num("count")? as usize;
            let mut items = Vec::with_capacity(count);
            for f in fields {
                let (id, score) = f
                    .split_once(':')
                    .ok_or_else(|| err(n, format!("bad item field {f:?}")))?;
                let id = id
                    .parse::<u32>()
                    .map_err(|_| err(n, format!("bad item id {id:?}")))?;
                let score = score
                    .parse::<f64>()
                    .map_err(|_| err(n, format!("bad score {score:?}")))?;
                items.push((ItemId(id), score));
            }
            if items.len() != count {
                return Err(err(n, format!("count {count} but {} items", items.len())));
            }
            if last_user.is_some_and(|u| u >= user) {
                return Err(err(n, format!("user {user} out of order")));
            }
            last_user = Some(user);
            let entry = RadarEntry {
                user,
                version,
                refreshed_at,
                items,
            };
            entry.check(store_k).map_err(|r| err(n, r))?;
            if version == 0 {
                return Err(err(n, "version must be at least 1".into()));
            }
            map.insert(user, Arc::new(entry));
        }
        Ok(RadarStore {
            store_k,
            entries: RwLock::new(map),
            counters: Counters::default(),
        })
    }

    pub fn load(path: &Path) -> Result<RadarStore> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        RadarStore::read_from(BufReader::new(file), &path.display().to_string())
    }
}
