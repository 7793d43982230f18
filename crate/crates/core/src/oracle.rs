//! Reference implementations used to cross-check the fast paths. They favour
//! plain loops and full rescans over speed and share no code with the
//! structures they check.

use std::collections::{BTreeMap, BTreeSet};

use crate::placement::GpuGroup;
use crate::precision::{MmeEstimator, ModelProfile};
use crate::slab::{OpRecord, SlabOp};

/// Largest number of jobs `(processing, deadline)` that can all finish
/// strictly before their deadlines on one machine, by trying every subset.
/// Each subset is checked in deadline order, which is optimal for a fixed set.
pub fn max_on_time_exhaustive(jobs: &[(f64, f64)]) -> usize {
    assert!(jobs.len() <= 20, "exhaustive search is limited to 20 jobs");
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| jobs[a].1.total_cmp(&jobs[b].1));
    let mut best = 0;
    for mask in 0u32..(1u32 << jobs.len()) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let mut t = 0.0;
        let mut ok = true;
        for &j in &order {
            if mask & (1 << j) != 0 {
                t += jobs[j].0;
                if !(t < jobs[j].1) {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            best = size;
        }
    }
    best
}

/// Greedy placement recomputed from first principles: footprints and
/// replicas from the profiles, then for every instance a full rescan of all
/// groups. Returns instance id to group id, or the first model that fits
/// nowhere.
pub fn naive_placement(
    models: &[ModelProfile],
    groups: &[GpuGroup],
    estimator: &MmeEstimator,
) -> Result<BTreeMap<String, String>, String> {
    let mut instances: Vec<(ModelProfile, u64)> = Vec::new();
    for m in models {
        let n = m.required_replicas().map_err(|e| e.to_string())?.replicas;
        for inst in m.replicate(n) {
            let f = inst.base_footprint().map_err(|e| e.to_string())?.bytes;
            instances.push((inst, f));
        }
    }
    // Bubble sort: footprint descending, id ascending.
    for i in 0..instances.len() {
        for j in 0..instances.len() - 1 - i {
            let (a, b) = (&instances[j], &instances[j + 1]);
            let swap = a.1 < b.1 || (a.1 == b.1 && a.0.model_id > b.0.model_id);
            if swap {
                instances.swap(j, j + 1);
            }
        }
    }

    let mut ids: Vec<&GpuGroup> = groups.iter().collect();
    ids.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    let mut placed: BTreeMap<String, Vec<(ModelProfile, u64)>> = BTreeMap::new();
    for g in &ids {
        let mut pre = Vec::new();
        for r in &g.residents {
            let p = models
                .iter()
                .find(|m| m.model_id == r.model_id)
                .ok_or_else(|| format!("unknown resident {}", r.model_id))?;
            pre.push((p.clone(), r.footprint));
        }
        placed.insert(g.group_id.clone(), pre);
    }

    let mut out = BTreeMap::new();
    for (inst, f) in instances {
        let mut best: Option<(f64, String)> = None;
        for g in &ids {
            if g.member_gpus.len() as u32 != inst.tp_degree {
                continue;
            }
            let residents = &placed[&g.group_id];
            let used: u64 = residents.iter().map(|r| r.1).sum();
            if used > g.total_memory || f > g.total_memory - used {
                continue;
            }
            let k_rem = (g.total_memory - used - f) as f64;
            let mut mu_sum = 0.0;
            for (p, _) in residents {
                mu_sum += estimator.estimate(p, &g.group_id).tokens_per_byte;
            }
            mu_sum += estimator.estimate(&inst, &g.group_id).tokens_per_byte;
            let score = mu_sum / (residents.len() + 1) as f64 * k_rem;
            let better = match &best {
                None => true,
                Some((s, _)) => score > *s,
            };
            if better {
                best = Some((score, g.group_id.clone()));
            }
        }
        let Some((_, gid)) = best else {
            return Err(inst.model_id.clone());
        };
        out.insert(inst.model_id.clone(), gid.clone());
        placed.get_mut(&gid).expect("group exists").push((inst, f));
    }
    Ok(out)
}

/// Slab pool model with one `Vec` entry per slab and linear scans. A block
/// request can fail only when no slab of that key has room and no slab is
/// empty.
#[derive(Debug, Clone)]
pub struct ReferencePool {
    slab_size: u64,
    slabs: Vec<RefSlab>,
}

#[derive(Debug, Clone, Default)]
struct RefSlab {
    key: Option<u64>,
    live: BTreeSet<u64>,
}

impl ReferencePool {
    pub fn new(slab_size: u64, num_slabs: u64) -> Self {
        Self {
            slab_size,
            slabs: vec![RefSlab::default(); num_slabs as usize],
        }
    }

    pub fn blocks_per_slab(&self, key: u64) -> u64 {
        self.slab_size / key
    }

    /// Whether a block of `key` can be allocated right now.
    pub fn can_alloc(&self, key: u64) -> bool {
        let bps = self.blocks_per_slab(key);
        self.slabs
            .iter()
            .any(|s| s.key.is_none() || (s.key == Some(key) && (s.live.len() as u64) < bps))
    }

    /// Allocates like the production pool should: lowest partial slab of the
    /// key, else lowest empty slab; lowest free local index inside it.
    /// Returns `(slab, local, global)`.
    pub fn alloc(&mut self, key: u64) -> Option<(u64, u64, u64)> {
        let bps = self.blocks_per_slab(key);
        let idx = self
            .slabs
            .iter()
            .position(|s| s.key == Some(key) && (s.live.len() as u64) < bps)
            .or_else(|| self.slabs.iter().position(|s| s.key.is_none()))?;
        let slab = &mut self.slabs[idx];
        slab.key = Some(key);
        let local = (0..bps).find(|l| !slab.live.contains(l))?;
        slab.live.insert(local);
        Some((idx as u64, local, idx as u64 * bps + local))
    }

    pub fn free(&mut self, slab: u64, local: u64) -> bool {
        let Some(s) = self.slabs.get_mut(slab as usize) else {
            return false;
        };
        if !s.live.remove(&local) {
            return false;
        }
        if s.live.is_empty() {
            s.key = None;
        }
        true
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.slabs
            .iter()
            .map(|s| s.key.map_or(0, |k| k * s.live.len() as u64))
            .sum()
    }

    pub fn free_slabs(&self) -> u64 {
        self.slabs.iter().filter(|s| s.key.is_none()).count() as u64
    }
}

/// Replays a slab operation log against a [`ReferencePool`] and reports the
/// first record that disagrees with it.
pub fn replay_ledger(slab_size: u64, num_slabs: u64, log: &[OpRecord]) -> Result<(), String> {
    let mut pool = ReferencePool::new(slab_size, num_slabs);
    for (i, rec) in log.iter().enumerate() {
        match rec.op {
            SlabOp::Alloc => {
                let expect = pool
                    .alloc(rec.key)
                    .ok_or_else(|| format!("op {i}: {rec}: reference pool is exhausted"))?;
                let got = (rec.slab_id, rec.local_id, rec.global_id);
                if expect != got {
                    return Err(format!("op {i}: {rec}: expected slab/local/global {expect:?}"));
                }
            }
            SlabOp::Free => {
                let bps = pool.blocks_per_slab(rec.key);
                if rec.global_id != rec.slab_id * bps + rec.local_id {
                    return Err(format!("op {i}: {rec}: global id does not match slab and local"));
                }
                if !pool.free(rec.slab_id, rec.local_id) {
                    return Err(format!("op {i}: {rec}: block was not live"));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_small_cases() {
        assert_eq!(max_on_time_exhaustive(&[]), 0);
        assert_eq!(max_on_time_exhaustive(&[(1.0, 2.0), (1.0, 2.0)]), 1);
        // Skipping the long job saves both short ones.
        assert_eq!(max_on_time_exhaustive(&[(3.0, 3.5), (1.0, 2.0), (1.0, 3.0)]), 2);
        // Finishing exactly at the deadline is late.
        assert_eq!(max_on_time_exhaustive(&[(1.0, 1.0)]), 0);
    }

    #[test]
    fn reference_pool_prefers_partial_then_lowest_free() {
        let mut p = ReferencePool::new(4, 3);
        assert_eq!(p.alloc(2), Some((0, 0, 0)));
        assert_eq!(p.alloc(4), Some((1, 0, 1)));
        assert_eq!(p.alloc(2), Some((0, 1, 1)));
        assert_eq!(p.alloc(2), Some((2, 0, 4)));
        assert!(!p.can_alloc(4));
        assert!(p.free(1, 0));
        assert!(p.can_alloc(4));
        assert!(!p.free(1, 0));
        assert_eq!(p.allocated_bytes(), 6);
    }
}
