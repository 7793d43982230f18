//! Oracle suites on small bundled instances, plus the random instance
//! generators the acceptance tests share.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batching::{
    moore_hodgson, predict_ttft_tokens, schedule_batch, serve_one_at_a_time, BatchLimits, CostModel, Request,
};
use crate::error::{PlacementError, SlabError};
use crate::oracle::{max_on_time_exhaustive, naive_placement, replay_ledger, ReferencePool};
use crate::placement::{place_models, GpuGroup};
use crate::precision::{MmeEstimator, ModelProfile, PrecisionSpec};
use crate::scenarios::{self, GIB};
use crate::slab::{SlabPoolConfig, SlabTable};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Flip a bitmap bit in the allocator suite to prove the checks bite.
    pub corrupt_bitmap: bool,
}

/// Cost model of the batching instances: 512-token chunks, 10 ms per chunk,
/// 0.1 ms per token.
pub fn batching_cost() -> (CostModel, u32) {
    (
        CostModel {
            alpha: 0.01,
            beta: 1.0e-4,
            gamma: 0.0,
            delta: 0.0,
            epsilon: 0.0,
        },
        512,
    )
}

/// `n` requests already waiting at time 0, with arrivals up to one SLO ago.
pub fn batching_instance(rng: &mut impl Rng, n: usize) -> Vec<Request> {
    (0..n as u64)
        .map(|id| {
            let slo = rng.random_range(0.2..1.5);
            let arrival = -rng.random_range(0.0..slo);
            let prompt = rng.random_range(50..2000);
            Request::new(id, "m", arrival, prompt, 16, slo)
        })
        .collect()
}

/// On-time counts for one instance: the one-at-a-time adaptive scheduler,
/// Moore-Hodgson and the exhaustive optimum.
pub fn batching_counts(requests: &[Request], cost: &CostModel, chunk: u32) -> (usize, usize, usize) {
    let solo = |r: &Request| predict_ttft_tokens(u64::from(r.prompt_tokens), cost, chunk);
    let served = serve_one_at_a_time(requests, 0.0, cost, chunk);
    let mut t = 0.0;
    let mut on_time = 0;
    for id in served {
        let r = requests.iter().find(|r| r.request_id == id).expect("served id exists");
        t += solo(r);
        if t < r.deadline {
            on_time += 1;
        }
    }
    let jobs: Vec<(f64, f64)> = requests.iter().map(|r| (solo(r), r.deadline)).collect();
    (on_time, moore_hodgson(&jobs), max_on_time_exhaustive(&jobs))
}

const PRECISIONS: [PrecisionSpec; 3] = [PrecisionSpec::FP16, PrecisionSpec::FP8, PrecisionSpec::W4A8KV4];

/// A small random placement problem: 2 to 4 groups, 2 to 6 models.
pub fn placement_instance(rng: &mut impl Rng) -> (Vec<ModelProfile>, Vec<GpuGroup>) {
    let n_groups = rng.random_range(2..=4);
    let groups = (0..n_groups)
        .map(|i| {
            let tp = if rng.random_bool(0.25) { 2 } else { 1 };
            let members = (0..tp).map(|m| format!("gpu{i}.{m}")).collect();
            let mem = rng.random_range(40..=80) * GIB;
            GpuGroup::new(format!("g{i}"), members, mem)
        })
        .collect();
    let n_models = rng.random_range(2..=6);
    let models = (0..n_models)
        .map(|i| {
            let precision = *PRECISIONS.choose(rng).expect("non-empty");
            let mut m = scenarios::llama8b(&format!("m{i}"), precision);
            m.weight_bytes = rng.random_range(4..=30) * GIB;
            m.avg_kv_bytes = rng.random_range(1..=12) * GIB;
            m.avg_activation_bytes = rng.random_range(1..=3) * GIB;
            m.request_rate = rng.random_range(0.5..70.0);
            m.avg_prompt_tokens = rng.random_range(100..800);
            m.avg_output_tokens = rng.random_range(50..400);
            m.tp_degree = if rng.random_bool(0.2) { 2 } else { 1 };
            m
        })
        .collect();
    (models, groups)
}

/// Compares `place_models` with the naive re-execution on one instance.
pub fn placement_agrees(models: &[ModelProfile], groups: &[GpuGroup], estimator: &MmeEstimator) -> Result<(), String> {
    let fast = place_models(models, groups, estimator);
    let slow = naive_placement(models, groups, estimator);
    match (fast, slow) {
        (Ok(plan), Ok(expected)) if plan.assignments == expected => Ok(()),
        (Ok(plan), Ok(expected)) => Err(format!("got {:?}, oracle {:?}", plan.assignments, expected)),
        (Err(PlacementError::PlacementInfeasible { model }), Err(m)) if model == m => Ok(()),
        (Err(PlacementError::Profile(_)), Err(_)) => Ok(()),
        (a, b) => Err(format!("got {a:?}, oracle {b:?}")),
    }
}

fn allocator_suite(opts: SelftestOptions) -> SuiteResult {
    let name = "allocator replay ledger".to_string();
    let keys = [4096u64, 8192, 12288];
    let config = match SlabPoolConfig::auto_lcm(24 * 24576, keys, 1) {
        Ok(c) => c,
        Err(e) => return fail(name, e.to_string()),
    };
    let (slab, n) = (config.slab_size_bytes, config.num_slabs());
    let mut table = match SlabTable::create(config) {
        Ok(t) => t,
        Err(e) => return fail(name, e.to_string()),
    };
    table.enable_log();
    let mut reference = ReferencePool::new(slab, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut live = Vec::new();
    let ops = 20_000;
    for i in 0..ops {
        if opts.corrupt_bitmap && i == ops / 2 {
            table.debug_corrupt_bitmap(0);
            if let Err(e) = table.check_invariants() {
                return fail(name, format!("op {i}: {e}"));
            }
        }
        if live.is_empty() || rng.random_bool(0.55) {
            let key = keys[rng.random_range(0..keys.len())];
            let expect = reference.can_alloc(key);
            match table.alloc_block(key) {
                Ok(h) => {
                    reference.alloc(key);
                    live.push(h);
                }
                Err(SlabError::PoolExhausted { .. }) if !expect => {}
                Err(e) => return fail(name, format!("op {i}: alloc {key}: {e} (reference could allocate: {expect})")),
            }
        } else {
            let h = live.swap_remove(rng.random_range(0..live.len()));
            if let Err(e) = table.free_block(h) {
                return fail(name, format!("op {i}: {e}"));
            }
            reference.free(h.slab_id, h.local_block_id);
        }
        let st = table.snapshot_stats();
        if st.total() != table.config().usable_bytes() {
            return fail(name, format!("op {i}: conservation broken: {st:?}"));
        }
        if i % 97 == 0 {
            if let Err(e) = table.check_invariants() {
                return fail(name, format!("op {i}: {e}"));
            }
        }
    }
    if let Err(e) = table.check_invariants() {
        return fail(name, e);
    }
    match replay_ledger(slab, n, &table.take_log()) {
        Ok(()) => pass(name, format!("{ops} ops over keys {keys:?}, slab {slab} B x {n}")),
        Err(e) => fail(name, e),
    }
}

fn block_id_suite() -> SuiteResult {
    let name = "block id mapping".to_string();
    // Slab 65536 B: key 32768 gives 2 blocks per slab.
    let cfg = SlabPoolConfig {
        capacity_bytes: 4 * 65536,
        slab_size_bytes: 65536,
        registered_keys: [32768u64, 65536].into(),
    };
    let run = || -> Result<String, String> {
        let mut t = SlabTable::create(cfg.clone()).map_err(|e| e.to_string())?;
        t.alloc_block(65536).map_err(|e| e.to_string())?;
        let h = t.alloc_block(32768).map_err(|e| e.to_string())?;
        if (h.slab_id, h.local_block_id, h.global_block_id) != (1, 0, 2) {
            return Err(format!("expected slab 1, local 0, id 2; got {h:?}"));
        }
        let back = t.locate(32768, h.global_block_id).map_err(|e| e.to_string())?;
        if back != (1, 0) {
            return Err(format!("divmod gave {back:?}"));
        }
        Ok("slab 1, local 0 -> id 2".into())
    };
    match run() {
        Ok(d) => pass(name, d),
        Err(e) => fail(name, e),
    }
}

/// Twelve equal requests with staggered deadlines: serving them one at a
/// time in deadline order meets every deadline.
pub fn bundled_twelve() -> Vec<Request> {
    (0..12u64)
        .map(|i| Request::new(i, "m", 0.0, 300, 16, 0.045 * (i + 1) as f64))
        .collect()
}

/// Anchor, drop soundness and EDF order of every tick in a one-at-a-time run.
fn check_ticks(requests: &[Request], cost: &CostModel, chunk: u32) -> Result<(), String> {
    let limits = BatchLimits {
        n_max: 1,
        t_max: u64::MAX,
        chunk_tokens: chunk,
    };
    let mut waiting = requests.to_vec();
    let mut now = 0.0;
    while !waiting.is_empty() {
        let d = schedule_batch(&waiting, now, cost, limits);
        for id in &d.dropped {
            let r = waiting.iter().find(|r| r.request_id == *id).expect("dropped id is waiting");
            if now + predict_ttft_tokens(u64::from(r.prompt_tokens), cost, chunk) < r.deadline {
                return Err(format!("request {id} dropped although feasible alone"));
            }
        }
        if let Some(anchor) = d.anchor_deadline {
            if !(now + d.predicted_ttft < anchor) {
                return Err(format!("anchor violated at t={now}"));
            }
        }
        let deadlines: Vec<f64> = d
            .admitted
            .iter()
            .map(|id| waiting.iter().find(|r| r.request_id == *id).expect("admitted id").deadline)
            .collect();
        if deadlines.windows(2).any(|w| w[0] > w[1]) {
            return Err("admitted list is not in deadline order".into());
        }
        if d.admitted.is_empty() {
            break;
        }
        now += d.predicted_ttft;
        waiting.retain(|r| !d.admitted.contains(&r.request_id) && !d.dropped.contains(&r.request_id));
    }
    Ok(())
}

fn batching_suite(seed: u64) -> SuiteResult {
    let name = "batching oracles".to_string();
    let (cost, chunk) = batching_cost();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = 100;
    let mut equal = 0;
    for i in 0..instances {
        let n = rng.random_range(1..=12);
        let reqs = batching_instance(&mut rng, n);
        let (ours, mh, opt) = batching_counts(&reqs, &cost, chunk);
        if mh != opt {
            return fail(name, format!("instance {i}: Moore-Hodgson {mh} != exhaustive {opt}"));
        }
        if ours > opt {
            return fail(name, format!("instance {i}: {ours} on time exceeds the optimum {opt}"));
        }
        if let Err(e) = check_ticks(&reqs, &cost, chunk) {
            return fail(name, format!("instance {i}: {e}"));
        }
        equal += usize::from(ours == mh);
    }
    let twelve = bundled_twelve();
    let (ours, _, opt) = batching_counts(&twelve, &cost, chunk);
    if ours != opt {
        return fail(name, format!("bundled 12-request instance: {ours} on time, optimum {opt}"));
    }
    pass(
        name,
        format!("12-request instance {ours}/{opt}; one-at-a-time equals Moore-Hodgson on {equal}/{instances}"),
    )
}

fn placement_suite(seed: u64) -> SuiteResult {
    let name = "placement vs naive re-execution".to_string();
    let cfg = scenarios::mixed_precision();
    match place_models(&cfg.models, &cfg.gpu_groups(), &cfg.estimator) {
        Ok(plan) => {
            let a = &plan.assignments;
            if !(a["model-a"] == a["model-b"] && a["model-c"] != a["model-a"]) {
                return fail(name, format!("mixed-precision case placed as {a:?}"));
            }
        }
        Err(e) => return fail(name, e.to_string()),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = MmeEstimator::default();
    for i in 0..50 {
        let (models, groups) = placement_instance(&mut rng);
        if let Err(e) = placement_agrees(&models, &groups, &est) {
            return fail(name, format!("instance {i}: {e}"));
        }
    }
    pass(name, "mixed-precision case + 50 random instances".into())
}

fn pass(name: String, detail: String) -> SuiteResult {
    SuiteResult { name, passed: true, detail }
}

fn fail(name: String, detail: String) -> SuiteResult {
    SuiteResult { name, passed: false, detail }
}

pub fn run_selftest(opts: SelftestOptions) -> Vec<SuiteResult> {
    vec![
        allocator_suite(opts),
        block_id_suite(),
        batching_suite(opts.seed),
        placement_suite(opts.seed),
    ]
}

/// Number of suites per outcome, for summaries.
pub fn tally(results: &[SuiteResult]) -> BTreeMap<bool, usize> {
    let mut m = BTreeMap::new();
    for r in results {
        *m.entry(r.passed).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_run_passes() {
        for r in run_selftest(SelftestOptions::default()) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn corrupted_bitmap_fails_the_allocator_suite() {
        let results = run_selftest(SelftestOptions {
            seed: 0,
            corrupt_bitmap: true,
        });
        assert!(!results[0].passed);
        assert!(results[1..].iter().all(|r| r.passed));
    }
}
