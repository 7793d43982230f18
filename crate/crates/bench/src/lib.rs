//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slabserve_core::scenarios;
use slabserve_core::selftest::{batching_cost, batching_instance};
use slabserve_core::{CostModel, Request, ScenarioConfig, SlabPoolConfig, SlabTable};

pub const KEYS: [u64; 3] = [4096, 8192, 12288];

/// An empty pool of `slabs` slabs sized for [`KEYS`].
pub fn pool(slabs: u64) -> SlabTable {
    let cfg = SlabPoolConfig::auto_lcm(slabs * 24576, KEYS, 1).expect("valid keys");
    SlabTable::create(cfg).expect("valid pool")
}

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Alloc(u64),
    /// Free the live block at this index modulo the live count.
    Free(usize),
}

/// Mixed alloc/free sequence with a slight bias toward allocation.
pub fn ops(n: usize, seed: u64) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.55) {
                Op::Alloc(KEYS[rng.random_range(0..KEYS.len())])
            } else {
                Op::Free(rng.random_range(0..usize::MAX))
            }
        })
        .collect()
}

/// Applies `ops` to `table`, ignoring exhaustion. Returns blocks left live.
pub fn replay(table: &mut SlabTable, ops: &[Op]) -> usize {
    let mut live = Vec::new();
    for op in ops {
        match *op {
            Op::Alloc(key) => {
                if let Ok(h) = table.alloc_block(key) {
                    live.push(h);
                }
            }
            Op::Free(i) if !live.is_empty() => {
                let h = live.swap_remove(i % live.len());
                table.free_block(h).expect("live block");
            }
            Op::Free(_) => {}
        }
    }
    live.len()
}

/// A waiting queue of `n` requests plus the cost model to schedule it with.
pub fn queue(n: usize, seed: u64) -> (Vec<Request>, CostModel, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cost, chunk) = batching_cost();
    (batching_instance(&mut rng, n), cost, chunk)
}

pub fn placement_case() -> ScenarioConfig {
    scenarios::mixed_precision()
}
