//! Per-GPU KV slab allocator.
//!
//! One shared KV byte pool is carved at creation into uniform slabs. A slab
//! is formatted to a single block-size key on demand and holds
//! `slab_size / key` blocks of that size; once its last block is released it
//! goes back to the free list and may be formatted to any other key. The pool
//! never grows after creation.
//!
//! Block ids follow `global = slab_id * blocks_per_slab(key) + local`, one id
//! namespace per key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SlabError;

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Least common multiple of `keys`, or `None` on overflow or an empty set.
pub fn lcm_of<I: IntoIterator<Item = u64>>(keys: I) -> Option<u64> {
    let mut acc: Option<u64> = None;
    for k in keys {
        if k == 0 {
            return None;
        }
        acc = Some(match acc {
            None => k,
            Some(a) => (a / gcd(a, k)).checked_mul(k)?,
        });
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabPoolConfig {
    pub capacity_bytes: u64,
    pub slab_size_bytes: u64,
    pub registered_keys: BTreeSet<u64>,
}

impl SlabPoolConfig {
    /// Slab size = `multiplier * lcm(keys)`.
    pub fn auto_lcm(
        capacity_bytes: u64,
        keys: impl IntoIterator<Item = u64>,
        multiplier: u64,
    ) -> Result<Self, SlabError> {
        let registered_keys: BTreeSet<u64> = keys.into_iter().collect();
        let lcm = lcm_of(registered_keys.iter().copied())
            .ok_or_else(|| SlabError::InvalidConfig("keys are empty, zero or their lcm overflows".into()))?;
        if multiplier == 0 {
            return Err(SlabError::InvalidConfig("lcm multiplier must be >= 1".into()));
        }
        let slab_size_bytes = lcm
            .checked_mul(multiplier)
            .ok_or_else(|| SlabError::InvalidConfig("slab size overflows".into()))?;
        Ok(Self {
            capacity_bytes,
            slab_size_bytes,
            registered_keys,
        })
    }

    pub fn validate(&self) -> Result<(), SlabError> {
        self.validate_keys()?;
        let Some(lcm) = lcm_of(self.registered_keys.iter().copied()) else {
            return Err(SlabError::InvalidConfig("lcm of keys overflows".into()));
        };
        if !self.slab_size_bytes.is_multiple_of(lcm) {
            return Err(SlabError::InvalidConfig(format!(
                "slab size {} is not a multiple of lcm(keys) = {lcm}",
                self.slab_size_bytes
            )));
        }
        Ok(())
    }

    fn validate_keys(&self) -> Result<(), SlabError> {
        let bad = |m: String| Err(SlabError::InvalidConfig(m));
        if self.slab_size_bytes == 0 {
            return bad("slab size must be > 0".into());
        }
        if self.registered_keys.is_empty() {
            return bad("at least one block-size key is required".into());
        }
        if let Some(&k) = self
            .registered_keys
            .iter()
            .find(|&&k| k == 0 || k > self.slab_size_bytes)
        {
            return bad(format!(
                "key {k} must be in 1..={} (the slab size)",
                self.slab_size_bytes
            ));
        }
        Ok(())
    }

    pub fn num_slabs(&self) -> u64 {
        self.capacity_bytes / self.slab_size_bytes
    }

    /// Bytes past the last whole slab; never usable.
    pub fn tail_bytes(&self) -> u64 {
        self.capacity_bytes % self.slab_size_bytes
    }

    pub fn usable_bytes(&self) -> u64 {
        self.num_slabs() * self.slab_size_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SlabState {
    Free,
    Partial,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slab {
    pub slab_id: u64,
    pub key: Option<u64>,
    pub blocks_total: u64,
    used: u64,
    bitmap: Vec<u64>,
    /// Payload bytes recorded per block.
    payload: Vec<u64>,
}

impl Slab {
    fn new(slab_id: u64) -> Self {
        Self {
            slab_id,
            key: None,
            blocks_total: 0,
            used: 0,
            bitmap: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn state(&self) -> SlabState {
        match self.key {
            None => SlabState::Free,
            Some(_) if self.used == self.blocks_total => SlabState::Full,
            Some(_) => SlabState::Partial,
        }
    }

    pub fn used_blocks(&self) -> u64 {
        self.used
    }

    pub fn is_allocated(&self, local: u64) -> bool {
        local < self.blocks_total && self.bitmap[(local / 64) as usize] & (1 << (local % 64)) != 0
    }

    fn format(&mut self, key: u64, blocks_total: u64) {
        self.key = Some(key);
        self.blocks_total = blocks_total;
        self.used = 0;
        self.bitmap = vec![0; blocks_total.div_ceil(64) as usize];
        self.payload = vec![0; blocks_total as usize];
    }

    fn unformat(&mut self) {
        self.key = None;
        self.blocks_total = 0;
        self.used = 0;
        self.bitmap = Vec::new();
        self.payload = Vec::new();
    }

    fn take_lowest_free(&mut self) -> Option<u64> {
        for (w, word) in self.bitmap.iter_mut().enumerate() {
            if *word != u64::MAX {
                let bit = (!*word).trailing_zeros() as u64;
                let local = w as u64 * 64 + bit;
                if local >= self.blocks_total {
                    return None;
                }
                *word |= 1 << bit;
                self.used += 1;
                return Some(local);
            }
        }
        None
    }

    fn release(&mut self, local: u64) {
        self.bitmap[(local / 64) as usize] &= !(1 << (local % 64));
        self.used -= 1;
        self.payload[local as usize] = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockHandle {
    pub slab_id: u64,
    pub local_block_id: u64,
    pub global_block_id: u64,
    pub key: u64,
}

/// Byte accounting of the pool. The four main classes always sum to the
/// usable capacity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentationStats {
    pub allocated_bytes: u64,
    pub free_block_bytes: u64,
    /// `slab_size mod key`, summed over formatted slabs.
    pub slab_residue_bytes: u64,
    pub free_slab_bytes: u64,
    /// Capacity past the last whole slab.
    pub tail_bytes: u64,
    /// Bytes callers reported as actually filled inside allocated blocks.
    pub payload_bytes: u64,
}

impl FragmentationStats {
    pub fn total(&self) -> u64 {
        self.allocated_bytes + self.free_block_bytes + self.slab_residue_bytes + self.free_slab_bytes
    }

    /// Allocated but unfilled bytes inside blocks.
    pub fn internal_fragmentation_bytes(&self) -> u64 {
        self.allocated_bytes - self.payload_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlabOp {
    Alloc,
    Free,
}

/// One line of the operation log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op: SlabOp,
    pub key: u64,
    pub slab_id: u64,
    pub local_id: u64,
    pub global_id: u64,
    pub timestamp: f64,
}

impl fmt::Display for OpRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            SlabOp::Alloc => "alloc",
            SlabOp::Free => "free",
        };
        write!(
            f,
            "{op},{},{},{},{},{}",
            self.key, self.slab_id, self.local_id, self.global_id, self.timestamp
        )
    }
}

impl std::str::FromStr for OpRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(format!("expected 6 fields, got {}", fields.len()));
        }
        let op = match fields[0] {
            "alloc" => SlabOp::Alloc,
            "free" => SlabOp::Free,
            other => return Err(format!("unknown op `{other}`")),
        };
        let int = |i: usize| fields[i].parse::<u64>().map_err(|e| format!("field {i}: {e}"));
        Ok(OpRecord {
            op,
            key: int(1)?,
            slab_id: int(2)?,
            local_id: int(3)?,
            global_id: int(4)?,
            timestamp: fields[5].parse().map_err(|e| format!("field 5: {e}"))?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct KeyCounters {
    allocated_blocks: u64,
    /// Free blocks inside PARTIAL slabs of this key.
    partial_free_blocks: u64,
    formatted_slabs: u64,
}

/// The slab table of one pool: slab metadata, per-key partial lists, the
/// free-slab list and incrementally maintained byte counters.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabTable {
    config: SlabPoolConfig,
    slabs: Vec<Slab>,
    partial: BTreeMap<u64, BTreeSet<u64>>,
    free_slabs: BTreeSet<u64>,
    stats: FragmentationStats,
    per_key: BTreeMap<u64, KeyCounters>,
    log: Option<Vec<OpRecord>>,
    clock: f64,
}

impl SlabTable {
    /// Carves the whole pool into FREE slabs. No further growth happens.
    pub fn create(config: SlabPoolConfig) -> Result<Self, SlabError> {
        config.validate()?;
        Self::build(config)
    }

    fn build(config: SlabPoolConfig) -> Result<Self, SlabError> {
        let n = config.num_slabs();
        let slabs = (0..n).map(Slab::new).collect();
        let partial = config
            .registered_keys
            .iter()
            .map(|&k| (k, BTreeSet::new()))
            .collect();
        let per_key = config
            .registered_keys
            .iter()
            .map(|&k| (k, KeyCounters::default()))
            .collect();
        let stats = FragmentationStats {
            free_slab_bytes: config.usable_bytes(),
            tail_bytes: config.tail_bytes(),
            ..Default::default()
        };
        Ok(Self {
            slabs,
            partial,
            free_slabs: (0..n).collect(),
            stats,
            per_key,
            config,
            log: None,
            clock: 0.0,
        })
    }

    /// Like [`SlabTable::create`] but only requires every key to fit in a
    /// slab, so slab sizes that are not a multiple of the keys' lcm are
    /// accepted and their per-slab residue shows up in the stats.
    pub fn create_relaxed(config: SlabPoolConfig) -> Result<Self, SlabError> {
        config.validate_keys()?;
        Self::build(config)
    }

    pub fn config(&self) -> &SlabPoolConfig {
        &self.config
    }

    pub fn slabs(&self) -> &[Slab] {
        &self.slabs
    }

    pub fn num_slabs(&self) -> u64 {
        self.slabs.len() as u64
    }

    pub fn free_slab_count(&self) -> u64 {
        self.free_slabs.len() as u64
    }

    pub fn is_registered(&self, key: u64) -> bool {
        self.config.registered_keys.contains(&key)
    }

    pub fn blocks_per_slab(&self, key: u64) -> Result<u64, SlabError> {
        if !self.is_registered(key) {
            return Err(SlabError::InvalidKey(key));
        }
        Ok(self.config.slab_size_bytes / key)
    }

    /// Blocks of `key` that could be allocated right now.
    pub fn available_blocks(&self, key: u64) -> Result<u64, SlabError> {
        let bps = self.blocks_per_slab(key)?;
        Ok(self.per_key[&key].partial_free_blocks + self.free_slab_count() * bps)
    }

    pub fn allocated_blocks(&self, key: u64) -> u64 {
        self.per_key.get(&key).map_or(0, |c| c.allocated_blocks)
    }

    pub fn formatted_slabs(&self, key: u64) -> u64 {
        self.per_key.get(&key).map_or(0, |c| c.formatted_slabs)
    }

    /// Ids of PARTIAL slabs formatted to `key`.
    pub fn partial_slabs(&self, key: u64) -> impl Iterator<Item = u64> + '_ {
        self.partial.get(&key).into_iter().flatten().copied()
    }

    pub fn free_slab_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.free_slabs.iter().copied()
    }

    pub fn snapshot_stats(&self) -> FragmentationStats {
        self.stats
    }

    /// Starts recording an operation log.
    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn take_log(&mut self) -> Vec<OpRecord> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Timestamp stamped on subsequent log records.
    pub fn set_clock(&mut self, t: f64) {
        self.clock = t;
    }

    fn record(&mut self, op: SlabOp, h: &BlockHandle) {
        if let Some(log) = self.log.as_mut() {
            log.push(OpRecord {
                op,
                key: h.key,
                slab_id: h.slab_id,
                local_id: h.local_block_id,
                global_id: h.global_block_id,
                timestamp: self.clock,
            });
        }
    }

    /// Allocates one block of size `key`, preferring the lowest-id PARTIAL
    /// slab of that key and otherwise formatting the lowest-id FREE slab.
    pub fn alloc_block(&mut self, key: u64) -> Result<BlockHandle, SlabError> {
        let bps = self.blocks_per_slab(key)?;
        let slab_id = match self.partial[&key].first() {
            Some(&id) => id,
            None => {
                let id = self
                    .free_slabs
                    .pop_first()
                    .ok_or(SlabError::PoolExhausted { key })?;
                self.slabs[id as usize].format(key, bps);
                let residue = self.config.slab_size_bytes - bps * key;
                self.stats.free_slab_bytes -= self.config.slab_size_bytes;
                self.stats.free_block_bytes += bps * key;
                self.stats.slab_residue_bytes += residue;
                let c = self.per_key.get_mut(&key).expect("registered");
                c.formatted_slabs += 1;
                c.partial_free_blocks += bps;
                self.partial.get_mut(&key).expect("registered").insert(id);
                id
            }
        };
        let slab = &mut self.slabs[slab_id as usize];
        let local = slab
            .take_lowest_free()
            .expect("partial or freshly formatted slab has a free block");
        if slab.state() == SlabState::Full {
            self.partial.get_mut(&key).expect("registered").remove(&slab_id);
        }
        self.stats.free_block_bytes -= key;
        self.stats.allocated_bytes += key;
        let c = self.per_key.get_mut(&key).expect("registered");
        c.allocated_blocks += 1;
        c.partial_free_blocks -= 1;
        let handle = BlockHandle {
            slab_id,
            local_block_id: local,
            global_block_id: slab_id * bps + local,
            key,
        };
        self.record(SlabOp::Alloc, &handle);
        Ok(handle)
    }

    fn check_handle(&self, handle: &BlockHandle) -> Result<(), SlabError> {
        let invalid = || Err(SlabError::InvalidFree(*handle));
        let Some(slab) = self.slabs.get(handle.slab_id as usize) else {
            return invalid();
        };
        if slab.key != Some(handle.key)
            || !slab.is_allocated(handle.local_block_id)
            || handle.global_block_id != handle.slab_id * slab.blocks_total + handle.local_block_id
        {
            return invalid();
        }
        Ok(())
    }

    /// Releases a block. A slab whose last block goes away is unformatted
    /// and returned to the free-slab list.
    pub fn free_block(&mut self, handle: BlockHandle) -> Result<(), SlabError> {
        self.check_handle(&handle)?;
        let key = handle.key;
        let slab_size = self.config.slab_size_bytes;
        let slab = &mut self.slabs[handle.slab_id as usize];
        let was_full = slab.state() == SlabState::Full;
        let payload = slab.payload[handle.local_block_id as usize];
        slab.release(handle.local_block_id);
        let now_empty = slab.used == 0;
        let blocks_total = slab.blocks_total;

        self.stats.allocated_bytes -= key;
        self.stats.free_block_bytes += key;
        self.stats.payload_bytes -= payload;
        let c = self.per_key.get_mut(&key).expect("handle key is registered");
        c.allocated_blocks -= 1;
        c.partial_free_blocks += 1;

        let partial = self.partial.get_mut(&key).expect("registered");
        if now_empty {
            partial.remove(&handle.slab_id);
            slab.unformat();
            self.free_slabs.insert(handle.slab_id);
            self.stats.free_block_bytes -= blocks_total * key;
            self.stats.slab_residue_bytes -= slab_size - blocks_total * key;
            self.stats.free_slab_bytes += slab_size;
            c.partial_free_blocks -= blocks_total;
            c.formatted_slabs -= 1;
        } else if was_full {
            partial.insert(handle.slab_id);
        }
        self.record(SlabOp::Free, &handle);
        Ok(())
    }

    /// Records how many bytes of an allocated block are actually filled.
    pub fn set_payload(&mut self, handle: &BlockHandle, bytes: u64) -> Result<(), SlabError> {
        if bytes > handle.key {
            return Err(SlabError::PayloadTooLarge {
                key: handle.key,
                payload: bytes,
            });
        }
        self.check_handle(handle)?;
        let slot = &mut self.slabs[handle.slab_id as usize].payload[handle.local_block_id as usize];
        self.stats.payload_bytes = self.stats.payload_bytes - *slot + bytes;
        *slot = bytes;
        Ok(())
    }

    /// Recovers `(slab_id, local_block_id)` from a global id of `key`.
    pub fn locate(&self, key: u64, global_block_id: u64) -> Result<(u64, u64), SlabError> {
        let bps = self.blocks_per_slab(key)?;
        Ok((global_block_id / bps, global_block_id % bps))
    }

    /// Recomputes every counter from slab metadata and compares it with the
    /// incrementally maintained values.
    pub fn check_invariants(&self) -> Result<(), String> {
        let slab_size = self.config.slab_size_bytes;
        let mut stats = FragmentationStats {
            tail_bytes: self.config.tail_bytes(),
            ..Default::default()
        };
        let mut per_key: BTreeMap<u64, KeyCounters> = self
            .config
            .registered_keys
            .iter()
            .map(|&k| (k, KeyCounters::default()))
            .collect();
        for slab in &self.slabs {
            let set_bits: u64 = slab.bitmap.iter().map(|w| u64::from(w.count_ones())).sum();
            if set_bits != slab.used {
                return Err(format!(
                    "slab {}: bitmap has {set_bits} bits set but {} blocks recorded",
                    slab.slab_id, slab.used
                ));
            }
            let in_free = self.free_slabs.contains(&slab.slab_id);
            match slab.key {
                None => {
                    if slab.used != 0 || !in_free {
                        return Err(format!("slab {} unformatted but not FREE", slab.slab_id));
                    }
                    stats.free_slab_bytes += slab_size;
                }
                Some(key) => {
                    if slab.used == 0 {
                        return Err(format!("slab {} formatted with no live blocks", slab.slab_id));
                    }
                    if in_free {
                        return Err(format!("slab {} formatted but on the free list", slab.slab_id));
                    }
                    if slab.blocks_total != slab_size / key {
                        return Err(format!("slab {} has wrong block count", slab.slab_id));
                    }
                    let in_partial = self.partial.get(&key).is_some_and(|s| s.contains(&slab.slab_id));
                    let listed_elsewhere = self
                        .partial
                        .iter()
                        .any(|(k, s)| *k != key && s.contains(&slab.slab_id));
                    if in_partial != (slab.state() == SlabState::Partial) || listed_elsewhere {
                        return Err(format!("slab {} partial-list membership is wrong", slab.slab_id));
                    }
                    stats.allocated_bytes += slab.used * key;
                    stats.free_block_bytes += (slab.blocks_total - slab.used) * key;
                    stats.slab_residue_bytes += slab_size - slab.blocks_total * key;
                    stats.payload_bytes += slab.payload.iter().sum::<u64>();
                    let c = per_key.get_mut(&key).ok_or("slab formatted to unregistered key")?;
                    c.allocated_blocks += slab.used;
                    c.formatted_slabs += 1;
                    if slab.state() == SlabState::Partial {
                        c.partial_free_blocks += slab.blocks_total - slab.used;
                    }
                }
            }
        }
        if stats != self.stats {
            return Err(format!("stats drifted: recomputed {stats:?}, maintained {:?}", self.stats));
        }
        if per_key != self.per_key {
            return Err("per-key counters drifted".into());
        }
        if stats.total() != self.config.usable_bytes() {
            return Err(format!(
                "conservation violated: {} != usable {}",
                stats.total(),
                self.config.usable_bytes()
            ));
        }
        Ok(())
    }

    /// Flips one occupancy bit without touching any counter. Used to check
    /// that the invariant checker notices corruption.
    #[doc(hidden)]
    pub fn debug_corrupt_bitmap(&mut self, slab_id: u64) {
        if let Some(slab) = self.slabs.get_mut(slab_id as usize) {
            if slab.bitmap.is_empty() {
                slab.bitmap.push(1);
            } else {
                slab.bitmap[0] ^= 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KIB: u64 = 1024;

    fn table(capacity: u64, slab: u64, keys: &[u64]) -> SlabTable {
        SlabTable::create(SlabPoolConfig {
            capacity_bytes: capacity,
            slab_size_bytes: slab,
            registered_keys: keys.iter().copied().collect(),
        })
        .unwrap()
    }

    #[test]
    fn lcm_helpers() {
        assert_eq!(lcm_of([64 * KIB, 32 * KIB]), Some(64 * KIB));
        assert_eq!(lcm_of([3, 5]), Some(15));
        assert_eq!(lcm_of([4, 6, 10]), Some(60));
        assert_eq!(lcm_of([]), None);
        assert_eq!(lcm_of([u64::MAX, u64::MAX - 1]), None);
    }

    #[test]
    fn create_pool_examples() {
        let t = table(4 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        assert_eq!(t.num_slabs(), 4);
        assert!(t.slabs().iter().all(|s| s.state() == SlabState::Free && s.key.is_none()));

        let t = table(30, 15, &[3, 5]);
        assert_eq!(t.num_slabs(), 2);

        let err = SlabTable::create(SlabPoolConfig {
            capacity_bytes: 1 << 20,
            slab_size_bytes: 48 * KIB,
            registered_keys: [64 * KIB].into(),
        });
        assert!(matches!(err, Err(SlabError::InvalidConfig(_))));

        let err = SlabTable::create(SlabPoolConfig {
            capacity_bytes: 1 << 20,
            slab_size_bytes: 60,
            registered_keys: [4, 6].into(),
        });
        assert!(err.is_ok());
        let err = SlabTable::create(SlabPoolConfig {
            capacity_bytes: 1 << 20,
            slab_size_bytes: 30,
            registered_keys: [4, 6].into(),
        });
        assert!(matches!(err, Err(SlabError::InvalidConfig(_))));
    }

    #[test]
    fn tail_is_reported_not_rejected() {
        let t = table(100, 15, &[3, 5]);
        assert_eq!(t.num_slabs(), 6);
        let s = t.snapshot_stats();
        assert_eq!(s.tail_bytes, 10);
        assert_eq!(s.total(), 90);
    }

    #[test]
    fn blocks_per_slab_examples() {
        let t = table(4 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        assert_eq!(t.blocks_per_slab(32 * KIB).unwrap(), 2);
        assert_eq!(t.blocks_per_slab(64 * KIB).unwrap(), 1);
        assert!(matches!(t.blocks_per_slab(16 * KIB), Err(SlabError::InvalidKey(_))));

    }

    #[test]
    fn residue_is_its_own_class() {
        let cfg = SlabPoolConfig {
            capacity_bytes: 30,
            slab_size_bytes: 15,
            registered_keys: [4, 5].into(),
        };
        assert!(SlabTable::create(cfg.clone()).is_err());
        let mut t = SlabTable::create_relaxed(cfg).unwrap();
        assert_eq!(t.blocks_per_slab(4).unwrap(), 3);
        t.alloc_block(4).unwrap();
        let s = t.snapshot_stats();
        assert_eq!(s.slab_residue_bytes, 3);
        assert_eq!((s.allocated_bytes, s.free_block_bytes, s.free_slab_bytes), (4, 8, 15));
        assert_eq!(s.total(), 30);
        t.check_invariants().unwrap();

        let too_big = SlabPoolConfig {
            capacity_bytes: 30,
            slab_size_bytes: 15,
            registered_keys: [16].into(),
        };
        assert!(SlabTable::create_relaxed(too_big).is_err());
    }

    #[test]
    fn worked_example_global_id() {
        // Two blocks per slab; slab 0 is taken by another key, so the first
        // block of this key lands in slab 1 with global id 1 * 2 + 0.
        let mut t = table(4 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        let other = t.alloc_block(64 * KIB).unwrap();
        assert_eq!((other.slab_id, other.local_block_id, other.global_block_id), (0, 0, 0));
        let h = t.alloc_block(32 * KIB).unwrap();
        assert_eq!((h.slab_id, h.local_block_id, h.global_block_id), (1, 0, 2));
        assert_eq!(t.locate(32 * KIB, 2).unwrap(), (1, 0));
    }

    #[test]
    fn first_alloc_is_zero() {
        let mut t = table(4 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        let h = t.alloc_block(32 * KIB).unwrap();
        assert_eq!((h.slab_id, h.local_block_id, h.global_block_id), (0, 0, 0));
    }

    #[test]
    fn exhaustion_and_invalid_key() {
        let mut t = table(2 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        t.alloc_block(64 * KIB).unwrap();
        t.alloc_block(32 * KIB).unwrap();
        // Slab 1 is PARTIAL for 32 KiB, slab 0 FULL for 64 KiB.
        assert!(matches!(t.alloc_block(64 * KIB), Err(SlabError::PoolExhausted { .. })));
        t.alloc_block(32 * KIB).unwrap();
        assert!(matches!(t.alloc_block(32 * KIB), Err(SlabError::PoolExhausted { .. })));
        assert!(matches!(t.alloc_block(8 * KIB), Err(SlabError::InvalidKey(_))));
    }

    #[test]
    fn free_transitions() {
        let mut t = table(2 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        let a = t.alloc_block(32 * KIB).unwrap();
        let b = t.alloc_block(32 * KIB).unwrap();
        assert_eq!(t.slabs()[0].state(), SlabState::Full);
        t.free_block(a).unwrap();
        assert_eq!(t.slabs()[0].state(), SlabState::Partial);
        assert_eq!(t.partial_slabs(32 * KIB).collect::<Vec<_>>(), vec![0]);
        t.free_block(b).unwrap();
        assert_eq!(t.slabs()[0].state(), SlabState::Free);
        assert_eq!(t.slabs()[0].key, None);
        assert!(matches!(t.free_block(b), Err(SlabError::InvalidFree(_))));
        // The freed slab now serves another key.
        let c = t.alloc_block(64 * KIB).unwrap();
        assert_eq!(c.slab_id, 0);
        t.check_invariants().unwrap();
    }

    #[test]
    fn forged_handles_are_rejected() {
        let mut t = table(2 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        let a = t.alloc_block(32 * KIB).unwrap();
        let mut forged = a;
        forged.global_block_id += 7;
        assert!(t.free_block(forged).is_err());
        let mut forged = a;
        forged.key = 64 * KIB;
        assert!(t.free_block(forged).is_err());
        let mut forged = a;
        forged.slab_id = 99;
        assert!(t.free_block(forged).is_err());
    }

    #[test]
    fn stats_examples() {
        let mut t = table(4 * 64 * KIB, 64 * KIB, &[64 * KIB, 16 * KIB]);
        let s = t.snapshot_stats();
        assert_eq!(s, FragmentationStats { free_slab_bytes: 4 * 64 * KIB, ..Default::default() });
        let h = t.alloc_block(16 * KIB).unwrap();
        let s = t.snapshot_stats();
        assert_eq!(s.allocated_bytes, 16 * KIB);
        assert_eq!(s.free_block_bytes, 3 * 16 * KIB);
        t.set_payload(&h, 1000).unwrap();
        assert_eq!(t.snapshot_stats().internal_fragmentation_bytes(), 16 * KIB - 1000);
        assert!(t.set_payload(&h, 16 * KIB + 1).is_err());
        t.free_block(h).unwrap();
        assert_eq!(t.snapshot_stats().payload_bytes, 0);
    }

    #[test]
    fn alloc_then_free_restores_table() {
        let mut t = table(8 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB, 16 * KIB]);
        for k in [16, 32, 16, 64, 16] {
            t.alloc_block(k * KIB).unwrap();
        }
        let before = t.clone();
        for k in [16, 32, 64] {
            let h = t.alloc_block(k * KIB).unwrap();
            t.free_block(h).unwrap();
            assert_eq!(t, before);
        }
    }

    #[test]
    fn log_lines_round_trip() {
        let mut t = table(4 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        t.enable_log();
        t.set_clock(1.5);
        let h = t.alloc_block(32 * KIB).unwrap();
        t.free_block(h).unwrap();
        let log = t.take_log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].to_string(), "alloc,32768,0,0,0,1.5");
        for r in &log {
            assert_eq!(&r.to_string().parse::<OpRecord>().unwrap(), r);
        }
        assert!("alloc,1,2".parse::<OpRecord>().is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let mut t = table(4 * 64 * KIB, 64 * KIB, &[64 * KIB, 32 * KIB]);
        t.alloc_block(32 * KIB).unwrap();
        t.check_invariants().unwrap();
        t.debug_corrupt_bitmap(0);
        assert!(t.check_invariants().is_err());
    }
}
