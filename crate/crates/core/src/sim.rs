//! Deterministic discrete-event simulation of co-located model engines.
//!
//! Each GPU group is one simulated device. Engines resident on a device take
//! turns round-robin: a turn is either one prefill of a newly admitted batch
//! (all chunks back to back) or one decode step over the running batch.
//! KV blocks come either from one shared slab pool per device or from a
//! private pool per engine sized proportionally to its base footprint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::batching::{predict_ttft, BatchDecision, BatchLimits, LocalScheduler, Request};
use crate::error::{SimError, SlabError};
use crate::placement::PlacementPlan;
use crate::precision::{base_model_id, ModelProfile};
use crate::slab::{lcm_of, BlockHandle, FragmentationStats, OpRecord, SlabPoolConfig, SlabTable};
use crate::workload::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryMode {
    /// One shared slab pool per device.
    DynamicSlab,
    /// A private pool per engine, proportional to its base footprint.
    StaticPartition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Adaptive,
    Fcfs,
}

/// Which block size each engine uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockSizing {
    /// Every model uses its own precision-specific block size.
    #[default]
    PerModel,
    /// All co-located models use the largest block size on the device and
    /// pack as many of their tokens as fit into it.
    ForceLargest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum SlabSizing {
    /// `multiplier * lcm(block sizes on the pool)`.
    AutoLcm { multiplier: u64 },
    Explicit { bytes: u64 },
}

impl Default for SlabSizing {
    fn default() -> Self {
        SlabSizing::AutoLcm { multiplier: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub mode: MemoryMode,
    pub policy: Policy,
    #[serde(default)]
    pub block_sizing: BlockSizing,
    #[serde(default)]
    pub slab: SlabSizing,
    /// KV pool bytes per device. Defaults to memory left after weights and
    /// activations of the residents.
    #[serde(default)]
    pub kv_pool_bytes: Option<u64>,
    /// Horizon used for throughput rates. Defaults to the makespan.
    #[serde(default)]
    pub duration: Option<f64>,
    pub sample_interval: f64,
    #[serde(default)]
    pub record_decisions: bool,
    #[serde(default)]
    pub record_slab_log: bool,
    /// Re-verify allocator and block conservation after every operation.
    #[serde(default)]
    pub check_invariants: bool,
    /// Time window `[start, end)` over which cached tokens and KV blocks are
    /// averaged. Defaults to the whole run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure_window: Option<(f64, f64)>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            mode: MemoryMode::DynamicSlab,
            policy: Policy::Adaptive,
            block_sizing: BlockSizing::PerModel,
            slab: SlabSizing::default(),
            kv_pool_bytes: None,
            duration: None,
            sample_interval: 1.0,
            record_decisions: false,
            record_slab_log: false,
            check_invariants: false,
            measure_window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// Dropped by the scheduler as unable to meet its deadline.
    Dropped,
    /// Aborted after its first token to break a memory deadlock.
    Preempted,
    /// Still queued when the simulation ran out of events.
    Unserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub request_id: u64,
    pub model_id: String,
    pub arrival_time: f64,
    pub prompt_tokens: u32,
    pub ttft: Option<f64>,
    pub slo_met: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: f64,
    pub model_id: String,
    pub admitted: Vec<u64>,
    pub dropped: Vec<u64>,
    pub deferred: Vec<u64>,
    pub predicted_ttft: f64,
    pub anchor_deadline: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub arrivals: u64,
    pub completed: u64,
    pub dropped: u64,
    pub preempted: u64,
    pub unserved: u64,
    pub slo_met: u64,
    pub ttft_slo_attainment: f64,
    /// Completed requests per second.
    pub throughput: f64,
    /// Requests meeting the TTFT SLO per second.
    pub slo_attained_throughput: f64,
    pub decode_tokens: u64,
    /// Decode-phase output tokens per second.
    pub token_gen_throughput: f64,
    pub mean_ttft: Option<f64>,
    pub p95_ttft: Option<f64>,
    pub peak_queue: u64,
    /// Time-averaged cached tokens.
    pub mean_cached_tokens: f64,
    pub mean_kv_blocks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSample {
    pub allocated_bytes: u64,
    pub free_block_bytes: u64,
    pub slab_residue_bytes: u64,
    pub free_slab_bytes: u64,
    pub internal_fragmentation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub queue: BTreeMap<String, u64>,
    pub kv_blocks: BTreeMap<String, u64>,
    pub cached_tokens: BTreeMap<String, u64>,
    pub pools: BTreeMap<String, PoolSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: MemoryMode,
    pub policy: Policy,
    pub block_sizing: BlockSizing,
    pub horizon: f64,
    pub makespan: f64,
    /// KV pool bytes per device.
    pub pool_bytes: BTreeMap<String, u64>,
    pub models: BTreeMap<String, ModelMetrics>,
    pub aggregate: ModelMetrics,
    /// Time-averaged internal fragmentation summed over pools, bytes.
    pub mean_internal_fragmentation_bytes: f64,
    /// Admitted batches whose predicted prefill end reached the anchor deadline.
    pub anchor_violations: u64,
    pub admitted_batches: u64,
    pub samples: Vec<Sample>,
    pub requests: Vec<RequestLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decisions: Vec<DecisionRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub slab_logs: BTreeMap<String, Vec<OpRecord>>,
}

impl MetricsReport {
    /// SLO attainment recomputed from the per-request log.
    pub fn attainment_from_log(&self, model_id: Option<&str>) -> f64 {
        let rows: Vec<_> = self
            .requests
            .iter()
            .filter(|r| model_id.is_none_or(|m| r.model_id == m))
            .collect();
        if rows.is_empty() {
            return 1.0;
        }
        rows.iter().filter(|r| r.slo_met).count() as f64 / rows.len() as f64
    }

    /// Largest sampled queue length of `model_id` within `[t0, t1)`.
    pub fn peak_queue_in(&self, model_id: &str, t0: f64, t1: f64) -> u64 {
        self.samples
            .iter()
            .filter(|s| s.time >= t0 && s.time < t1)
            .filter_map(|s| s.queue.get(model_id).copied())
            .max()
            .unwrap_or(0)
    }

    /// Requests of `model_id` (all models if `None`) that arrived in
    /// `[t0, t1)` and met the SLO.
    pub fn slo_met_in(&self, model_id: Option<&str>, t0: f64, t1: f64) -> u64 {
        self.requests
            .iter()
            .filter(|r| model_id.is_none_or(|m| r.model_id == m))
            .filter(|r| r.arrival_time >= t0 && r.arrival_time < t1 && r.slo_met)
            .count() as u64
    }

    /// Mean sampled cached tokens of `model_id` within `[t0, t1)`.
    pub fn mean_cached_in(&self, model_id: &str, t0: f64, t1: f64) -> f64 {
        let vals: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.time >= t0 && s.time < t1)
            .map(|s| s.cached_tokens.get(model_id).copied().unwrap_or(0) as f64)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// JSON summary without the per-sample and per-request detail.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "mode": self.mode,
            "policy": self.policy,
            "block_sizing": self.block_sizing,
            "horizon": self.horizon,
            "makespan": self.makespan,
            "pool_bytes": self.pool_bytes,
            "aggregate": self.aggregate,
            "models": self.models,
            "mean_internal_fragmentation_bytes": self.mean_internal_fragmentation_bytes,
            "anchor_violations": self.anchor_violations,
            "admitted_batches": self.admitted_batches,
        })
    }

    /// Long-format CSV: `time,series,key,value`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("time,series,key,value\n");
        for s in &self.samples {
            for (name, map) in [
                ("queue", &s.queue),
                ("kv_blocks", &s.kv_blocks),
                ("cached_tokens", &s.cached_tokens),
            ] {
                for (k, v) in map {
                    let _ = writeln!(out, "{},{name},{k},{v}", s.time);
                }
            }
            for (pool, p) in &s.pools {
                for (name, v) in [
                    ("pool_allocated_bytes", p.allocated_bytes),
                    ("pool_free_block_bytes", p.free_block_bytes),
                    ("pool_slab_residue_bytes", p.slab_residue_bytes),
                    ("pool_free_slab_bytes", p.free_slab_bytes),
                    ("pool_internal_fragmentation_bytes", p.internal_fragmentation_bytes),
                ] {
                    let _ = writeln!(out, "{},{name},{pool},{v}", s.time);
                }
            }
        }
        out
    }

    /// Per-request CSV log.
    pub fn requests_csv(&self) -> String {
        let mut out = String::from("request_id,model_id,arrival_time_s,prompt_tokens,ttft_s,slo_met,outcome\n");
        for r in &self.requests {
            let ttft = r.ttft.map(|t| t.to_string()).unwrap_or_default();
            let outcome = serde_json::to_value(r.outcome)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{ttft},{},{outcome}",
                r.request_id, r.model_id, r.arrival_time, r.prompt_tokens, r.slo_met
            );
        }
        out
    }
}

/// Finite-difference marginal memory efficiency of `model_id` between two
/// runs that differ only in the KV pool size of `group_id`, in tokens per byte.
pub fn measure_mme(
    small: &MetricsReport,
    large: &MetricsReport,
    model_id: &str,
    group_id: &str,
) -> Result<f64, SimError> {
    let k0 = small.pool_bytes.get(group_id).copied();
    let k1 = large.pool_bytes.get(group_id).copied();
    let (Some(k0), Some(k1)) = (k0, k1) else {
        return Err(SimError::InvalidMeasurement(format!("group `{group_id}` missing from a report")));
    };
    if k0 == k1 {
        return Err(SimError::InvalidMeasurement("pool sizes are equal (delta K = 0)".into()));
    }
    let c0 = small.models.get(model_id).map(|m| m.mean_cached_tokens);
    let c1 = large.models.get(model_id).map(|m| m.mean_cached_tokens);
    let (Some(c0), Some(c1)) = (c0, c1) else {
        return Err(SimError::InvalidMeasurement(format!("model `{model_id}` missing from a report")));
    };
    Ok((c1 - c0) / (k1 as f64 - k0 as f64))
}

/// Least-squares slope of mean cached tokens against pool bytes.
pub fn mme_slope(points: &[(u64, f64)]) -> Result<f64, SimError> {
    if points.len() < 2 {
        return Err(SimError::InvalidMeasurement("need at least two pool sizes".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(SimError::InvalidMeasurement("pool sizes are all equal".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Block geometry of one engine.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    key: u64,
    tokens_per_block: u32,
    /// KV bytes of one token over all layers.
    token_bytes: u64,
    /// Quantization-parameter bytes per block over all layers.
    block_overhead: u64,
}

impl Geometry {
    fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(u64::from(self.tokens_per_block))
    }

    fn payload(&self, tokens_in_block: u64) -> u64 {
        if tokens_in_block == 0 {
            0
        } else {
            tokens_in_block * self.token_bytes + self.block_overhead
        }
    }
}

#[derive(Debug, Clone)]
struct Seq {
    req: Request,
    generated: u32,
    blocks: Vec<BlockHandle>,
    first_token: f64,
}

impl Seq {
    fn tokens(&self) -> u64 {
        u64::from(self.req.prompt_tokens) + u64::from(self.generated)
    }
}

#[derive(Debug, Default)]
struct EngineStats {
    arrivals: u64,
    completed: u64,
    dropped: u64,
    preempted: u64,
    slo_met: u64,
    decode_tokens: u64,
    ttfts: Vec<f64>,
    peak_queue: u64,
    cached_area: f64,
    block_area: f64,
}

struct Engine {
    id: String,
    profile: ModelProfile,
    pool: usize,
    geometry: Geometry,
    avg_blocks_per_request: u64,
    sched: LocalScheduler,
    running: Vec<Seq>,
    last_was_prefill: bool,
    stats: EngineStats,
}

impl Engine {
    fn cached_tokens(&self) -> u64 {
        self.running.iter().map(Seq::tokens).sum()
    }

    fn held_blocks(&self) -> u64 {
        self.running.iter().map(|s| s.blocks.len() as u64).sum()
    }
}

enum Op {
    Prefill { engine: usize, batch: Vec<Seq> },
    Decode { engine: usize, participants: Vec<usize> },
}

struct Device {
    group_id: String,
    engines: Vec<usize>,
    rr: usize,
    inflight: Option<(f64, Op)>,
}

struct Sim<'a> {
    opts: &'a SimOptions,
    engines: Vec<Engine>,
    devices: Vec<Device>,
    pools: Vec<SlabTable>,
    pool_names: Vec<String>,
    logs: Vec<RequestLog>,
    decisions: Vec<DecisionRecord>,
    anchor_violations: u64,
    admitted_batches: u64,
    frag_area: f64,
    samples: Vec<Sample>,
}

fn kv_pool_default(residents: &[&ModelProfile], total_memory: u64) -> u64 {
    let fixed: u64 = residents
        .iter()
        .map(|p| p.weight_bytes.div_ceil(u64::from(p.tp_degree.max(1))) + p.avg_activation_bytes)
        .sum();
    total_memory.saturating_sub(fixed)
}

fn make_pool(capacity: u64, keys: BTreeSet<u64>, sizing: SlabSizing) -> Result<SlabTable, SimError> {
    let config = match sizing {
        SlabSizing::AutoLcm { multiplier } => SlabPoolConfig::auto_lcm(capacity, keys, multiplier)?,
        SlabSizing::Explicit { bytes } => SlabPoolConfig {
            capacity_bytes: capacity,
            slab_size_bytes: bytes,
            registered_keys: keys,
        },
    };
    Ok(SlabTable::create(config)?)
}

impl<'a> Sim<'a> {
    fn build(plan: &PlacementPlan, opts: &'a SimOptions) -> Result<Self, SimError> {
        if !(opts.sample_interval > 0.0) {
            return Err(SimError::InvalidScenario("sample_interval must be > 0".into()));
        }
        let mut engines = Vec::new();
        let mut devices = Vec::new();
        let mut pools = Vec::new();
        let mut pool_names = Vec::new();

        for group in &plan.groups {
            let residents = plan.residents_of(&group.group_id);
            if residents.is_empty() {
                continue;
            }
            let mut natural = Vec::new();
            for p in &residents {
                p.validate()?;
                natural.push(p.kv_block_size()?);
            }
            let largest = natural.iter().copied().max().unwrap_or(0);
            let geometries: Vec<Geometry> = residents
                .iter()
                .zip(&natural)
                .map(|(p, &key)| {
                    let token_bytes = p.token_bytes_all_layers()?;
                    let overhead = p.quant_param_bytes_per_block * u64::from(p.num_layers);
                    Ok(match opts.block_sizing {
                        BlockSizing::PerModel => Geometry {
                            key,
                            tokens_per_block: p.tokens_per_block,
                            token_bytes,
                            block_overhead: overhead,
                        },
                        BlockSizing::ForceLargest => {
                            let tpb = (largest - overhead) / token_bytes;
                            if tpb == 0 {
                                return Err(SimError::InvalidScenario(format!(
                                    "{}: forced block of {largest} bytes holds no token",
                                    p.model_id
                                )));
                            }
                            Geometry {
                                key: largest,
                                tokens_per_block: tpb as u32,
                                token_bytes,
                                block_overhead: overhead,
                            }
                        }
                    })
                })
                .collect::<Result<_, SimError>>()?;

            let pool_bytes = opts
                .kv_pool_bytes
                .unwrap_or_else(|| kv_pool_default(&residents, group.total_memory));
            if pool_bytes == 0 {
                return Err(SimError::InvalidScenario(format!(
                    "group `{}` has no memory left for KV cache",
                    group.group_id
                )));
            }

            let mut engine_pools = Vec::new();
            match opts.mode {
                MemoryMode::DynamicSlab => {
                    let keys = geometries.iter().map(|g| g.key).collect();
                    pools.push(make_pool(pool_bytes, keys, opts.slab)?);
                    pool_names.push(group.group_id.clone());
                    engine_pools = vec![pools.len() - 1; residents.len()];
                }
                MemoryMode::StaticPartition => {
                    let footprints: Vec<u64> = residents
                        .iter()
                        .map(|p| plan.footprints.get(&p.model_id).copied().unwrap_or(1))
                        .collect();
                    let total: u128 = footprints.iter().map(|&f| u128::from(f)).sum();
                    for ((p, g), f) in residents.iter().zip(&geometries).zip(&footprints) {
                        let share = (u128::from(pool_bytes) * u128::from(*f) / total.max(1)) as u64;
                        pools.push(make_pool(share, BTreeSet::from([g.key]), opts.slab)?);
                        pool_names.push(format!("{}:{}", group.group_id, p.model_id));
                        engine_pools.push(pools.len() - 1);
                    }
                }
            }

            let mut members = Vec::new();
            for ((p, g), pool) in residents.iter().zip(geometries).zip(engine_pools) {
                let avg_tokens = u64::from(p.avg_prompt_tokens) + u64::from(p.avg_output_tokens);
                members.push(engines.len());
                engines.push(Engine {
                    id: p.model_id.clone(),
                    profile: (*p).clone(),
                    pool,
                    geometry: g,
                    avg_blocks_per_request: g.blocks_for(avg_tokens).max(1),
                    sched: LocalScheduler::new(),
                    running: Vec::new(),
                    last_was_prefill: false,
                    stats: EngineStats::default(),
                });
            }
            devices.push(Device {
                group_id: group.group_id.clone(),
                engines: members,
                rr: 0,
                inflight: None,
            });
        }
        if engines.is_empty() {
            return Err(SimError::InvalidScenario("placement has no model instances".into()));
        }
        if opts.record_slab_log {
            for p in &mut pools {
                p.enable_log();
            }
        }
        Ok(Self {
            opts,
            engines,
            devices,
            pools,
            pool_names,
            logs: Vec::new(),
            decisions: Vec::new(),
            anchor_violations: 0,
            admitted_batches: 0,
            frag_area: 0.0,
            samples: Vec::new(),
        })
    }

    fn log_request(&mut self, req: &Request, ttft: Option<f64>, outcome: Outcome) {
        let slo_met = ttft.is_some_and(|t| req.arrival_time + t <= req.deadline);
        self.logs.push(RequestLog {
            request_id: req.request_id,
            model_id: req.model_id.clone(),
            arrival_time: req.arrival_time,
            prompt_tokens: req.prompt_tokens,
            ttft,
            slo_met,
            outcome,
        });
    }

    fn free_seq(&mut self, engine: usize, seq: &Seq) -> Result<(), SimError> {
        let pool = self.engines[engine].pool;
        for h in &seq.blocks {
            self.pools[pool].free_block(*h)?;
        }
        Ok(())
    }

    /// Grows `seq` to hold `tokens` tokens and refreshes payloads of the
    /// blocks whose fill changed. On exhaustion nothing is changed.
    fn reserve(pool: &mut SlabTable, geometry: Geometry, seq: &mut Seq, tokens: u64) -> Result<bool, SimError> {
        let need = geometry.blocks_for(tokens) as usize;
        let have = seq.blocks.len();
        let mut fresh = Vec::new();
        while have + fresh.len() < need {
            match pool.alloc_block(geometry.key) {
                Ok(h) => fresh.push(h),
                Err(SlabError::PoolExhausted { .. }) => {
                    for h in fresh {
                        pool.free_block(h)?;
                    }
                    return Ok(false);
                }
                Err(e) => return Err(e.into()),
            }
        }
        seq.blocks.extend(fresh);
        let tpb = u64::from(geometry.tokens_per_block);
        let first_dirty = have.saturating_sub(1);
        for (i, h) in seq.blocks.iter().enumerate().skip(first_dirty) {
            let in_block = tokens.saturating_sub(i as u64 * tpb).min(tpb);
            pool.set_payload(h, geometry.payload(in_block))?;
        }
        Ok(true)
    }

    fn limits(&self, e: usize) -> Result<BatchLimits, SimError> {
        let engine = &self.engines[e];
        let g = engine.geometry;
        let avail = self.pools[engine.pool].available_blocks(g.key)?;
        let b = &engine.profile.batching;
        let slots = (b.max_running as usize).saturating_sub(engine.running.len());
        let mut by_memory = (avail / engine.avg_blocks_per_request) as usize;
        if engine.running.is_empty() {
            by_memory = by_memory.max(1);
        }
        let kv_tokens = avail.saturating_mul(u64::from(g.tokens_per_block));
        Ok(BatchLimits {
            n_max: slots.min(by_memory),
            t_max: u64::from(b.max_batched_tokens).min(kv_tokens),
            chunk_tokens: b.chunk_tokens,
        })
    }

    /// Tries to start a prefill on engine `e`.
    fn try_prefill(&mut self, e: usize, now: f64) -> Result<Option<Op>, SimError> {
        if self.engines[e].sched.is_empty() {
            return Ok(None);
        }
        let limits = self.limits(e)?;
        let adaptive = self.opts.policy == Policy::Adaptive;
        let cost = self.engines[e].profile.cost;
        let (decision, admitted, dropped) = self.engines[e].sched.tick(now, &cost, limits, adaptive);
        for r in &dropped {
            self.engines[e].stats.dropped += 1;
            self.log_request(r, None, Outcome::Dropped);
        }

        let pool_idx = self.engines[e].pool;
        let geometry = self.engines[e].geometry;
        let mut batch: Vec<Seq> = Vec::with_capacity(admitted.len());
        let mut rejected: Vec<Request> = Vec::new();
        for r in admitted {
            if !rejected.is_empty() {
                rejected.push(r);
                continue;
            }
            let mut seq = Seq {
                req: r,
                generated: 0,
                blocks: Vec::new(),
                first_token: f64::NAN,
            };
            let tokens = u64::from(seq.req.prompt_tokens) + 1;
            if Self::reserve(&mut self.pools[pool_idx], geometry, &mut seq, tokens)? {
                batch.push(seq);
            } else {
                rejected.push(seq.req);
            }
        }
        // Requests that did not get memory go back to the queue. Dropping the
        // EDF tail keeps the anchor and can only shorten the prefill.
        self.engines[e].sched.requeue(rejected);

        if self.opts.record_decisions && !(decision.admitted.is_empty() && decision.dropped.is_empty()) {
            self.decisions.push(DecisionRecord {
                time: now,
                model_id: self.engines[e].id.clone(),
                admitted: batch.iter().map(|s| s.req.request_id).collect(),
                dropped: decision.dropped.clone(),
                deferred: decision.deferred.clone(),
                predicted_ttft: decision.predicted_ttft,
                anchor_deadline: decision.anchor_deadline,
            });
        }
        if batch.is_empty() {
            return Ok(None);
        }
        self.admitted_batches += 1;
        if adaptive {
            let reqs: Vec<Request> = batch.iter().map(|s| s.req.clone()).collect();
            let ttft = predict_ttft(&reqs, &cost, limits.chunk_tokens);
            let anchor = reqs.iter().map(|r| r.deadline).fold(f64::INFINITY, f64::min);
            if !(now + ttft < anchor) {
                self.anchor_violations += 1;
            }
        }
        Ok(Some(Op::Prefill { engine: e, batch }))
    }

    fn try_decode(&mut self, e: usize) -> Result<Option<Op>, SimError> {
        let pool_idx = self.engines[e].pool;
        let geometry = self.engines[e].geometry;
        let engine = &mut self.engines[e];
        let mut participants = Vec::new();
        for (i, seq) in engine.running.iter_mut().enumerate() {
            let target = seq.tokens() + 1;
            if Self::reserve(&mut self.pools[pool_idx], geometry, seq, target)? {
                participants.push(i);
            }
        }
        if participants.is_empty() {
            return Ok(None);
        }
        Ok(Some(Op::Decode { engine: e, participants }))
    }

    fn op_duration(&self, op: &Op) -> f64 {
        match op {
            Op::Prefill { engine, batch } => {
                let p = &self.engines[*engine].profile;
                let reqs: Vec<Request> = batch.iter().map(|s| s.req.clone()).collect();
                predict_ttft(&reqs, &p.cost, p.batching.chunk_tokens)
            }
            Op::Decode { engine, participants } => {
                let eng = &self.engines[*engine];
                let cached: u64 = participants.iter().map(|&i| eng.running[i].tokens()).sum();
                eng.profile.cost.decode_step(participants.len(), cached)
            }
        }
    }

    /// Starts the next operation on an idle device, round-robin over engines.
    fn start_device(&mut self, d: usize, now: f64) -> Result<(), SimError> {
        if self.devices[d].inflight.is_some() {
            return Ok(());
        }
        loop {
            let members = self.devices[d].engines.clone();
            let n = members.len();
            let start = self.devices[d].rr;
            for step in 0..n {
                let slot = (start + step) % n;
                let e = members[slot];
                let decode_first = self.engines[e].last_was_prefill && !self.engines[e].running.is_empty();
                let mut op = None;
                if !decode_first {
                    op = self.try_prefill(e, now)?;
                }
                if op.is_none() {
                    op = self.try_decode(e)?;
                }
                if op.is_none() && decode_first {
                    op = self.try_prefill(e, now)?;
                }
                if let Some(op) = op {
                    self.engines[e].last_was_prefill = matches!(op, Op::Prefill { .. });
                    let end = now + self.op_duration(&op);
                    self.devices[d].rr = (slot + 1) % n;
                    self.devices[d].inflight = Some((end, op));
                    return Ok(());
                }
            }
            // Nothing can run. If sequences are stuck waiting for blocks that
            // only they could free, abort the youngest one and retry.
            if !self.break_deadlock(d)? {
                return Ok(());
            }
        }
    }

    fn break_deadlock(&mut self, d: usize) -> Result<bool, SimError> {
        let victim = self.devices[d]
            .engines
            .iter()
            .flat_map(|&e| {
                self.engines[e]
                    .running
                    .iter()
                    .enumerate()
                    .map(move |(i, s)| (e, i, s.first_token, s.req.request_id))
            })
            .max_by(|a, b| a.2.total_cmp(&b.2).then(a.3.cmp(&b.3)));
        let Some((e, i, _, _)) = victim else {
            return Ok(false);
        };
        let seq = self.engines[e].running.remove(i);
        self.free_seq(e, &seq)?;
        self.engines[e].stats.preempted += 1;
        let ttft = seq.first_token - seq.req.arrival_time;
        self.log_request(&seq.req, Some(ttft), Outcome::Preempted);
        Ok(true)
    }

    fn complete_device(&mut self, d: usize, now: f64) -> Result<(), SimError> {
        let Some((_, op)) = self.devices[d].inflight.take() else {
            return Ok(());
        };
        match op {
            Op::Prefill { engine, batch } => {
                for mut seq in batch {
                    seq.generated = 1;
                    seq.first_token = now;
                    let ttft = now - seq.req.arrival_time;
                    let met = seq.req.arrival_time + ttft <= seq.req.deadline;
                    let st = &mut self.engines[engine].stats;
                    st.ttfts.push(ttft);
                    if met {
                        st.slo_met += 1;
                    }
                    if seq.generated >= seq.req.output_tokens {
                        self.finish(engine, seq)?;
                    } else {
                        self.engines[engine].running.push(seq);
                    }
                }
            }
            Op::Decode { engine, participants } => {
                let mut done = Vec::new();
                for &i in &participants {
                    let seq = &mut self.engines[engine].running[i];
                    seq.generated += 1;
                    if seq.generated >= seq.req.output_tokens {
                        done.push(i);
                    }
                }
                self.engines[engine].stats.decode_tokens += participants.len() as u64;
                for i in done.into_iter().rev() {
                    let seq = self.engines[engine].running.remove(i);
                    self.finish(engine, seq)?;
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, engine: usize, seq: Seq) -> Result<(), SimError> {
        self.free_seq(engine, &seq)?;
        self.engines[engine].stats.completed += 1;
        let ttft = seq.first_token - seq.req.arrival_time;
        self.log_request(&seq.req, Some(ttft), Outcome::Completed);
        Ok(())
    }

    fn verify(&self) -> Result<(), SimError> {
        // Decode participants hold blocks for the token being generated.
        let mut ahead: BTreeSet<(usize, usize)> = BTreeSet::new();
        for d in &self.devices {
            if let Some((_, Op::Decode { engine, participants })) = &d.inflight {
                ahead.extend(participants.iter().map(|&i| (*engine, i)));
            }
        }
        for (i, pool) in self.pools.iter().enumerate() {
            pool.check_invariants().map_err(SimError::InvariantViolated)?;
            let mut held = 0u64;
            for (ei, e) in self.engines.iter().enumerate().filter(|(_, e)| e.pool == i) {
                held += e.held_blocks();
                for (si, s) in e.running.iter().enumerate() {
                    let tokens = s.tokens() + u64::from(ahead.contains(&(ei, si)));
                    if s.blocks.len() as u64 != e.geometry.blocks_for(tokens) {
                        return Err(SimError::InvariantViolated(format!(
                            "{}: request {} holds {} blocks for {} tokens",
                            e.id,
                            s.req.request_id,
                            s.blocks.len(),
                            s.tokens()
                        )));
                    }
                }
            }
            for d in &self.devices {
                if let Some((_, Op::Prefill { engine, batch })) = &d.inflight {
                    if self.engines[*engine].pool == i {
                        held += batch.iter().map(|s| s.blocks.len() as u64).sum::<u64>();
                    }
                }
            }
            let allocated: u64 = pool
                .config()
                .registered_keys
                .iter()
                .map(|&k| pool.allocated_blocks(k))
                .sum();
            if held != allocated {
                return Err(SimError::InvariantViolated(format!(
                    "pool {}: engines hold {held} blocks but {allocated} are allocated",
                    self.pool_names[i]
                )));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, from: f64, to: f64) {
        let (from, to) = match self.opts.measure_window {
            Some((a, b)) => (from.max(a), to.min(b)),
            None => (from, to),
        };
        let dt = to - from;
        if dt <= 0.0 {
            return;
        }
        for e in &mut self.engines {
            e.stats.cached_area += e.cached_tokens() as f64 * dt;
            e.stats.block_area += e.held_blocks() as f64 * dt;
        }
        let frag: u64 = self
            .pools
            .iter()
            .map(|p| p.snapshot_stats().internal_fragmentation_bytes())
            .sum();
        self.frag_area += frag as f64 * dt;
    }

    fn sample(&mut self, t: f64) {
        let mut s = Sample {
            time: t,
            queue: BTreeMap::new(),
            kv_blocks: BTreeMap::new(),
            cached_tokens: BTreeMap::new(),
            pools: BTreeMap::new(),
        };
        for e in &self.engines {
            s.queue.insert(e.id.clone(), e.sched.len() as u64);
            s.kv_blocks.insert(e.id.clone(), e.held_blocks());
            s.cached_tokens.insert(e.id.clone(), e.cached_tokens());
        }
        for (name, p) in self.pool_names.iter().zip(&self.pools) {
            let st: FragmentationStats = p.snapshot_stats();
            s.pools.insert(
                name.clone(),
                PoolSample {
                    allocated_bytes: st.allocated_bytes,
                    free_block_bytes: st.free_block_bytes,
                    slab_residue_bytes: st.slab_residue_bytes,
                    free_slab_bytes: st.free_slab_bytes,
                    internal_fragmentation_bytes: st.internal_fragmentation_bytes(),
                },
            );
        }
        self.samples.push(s);
    }

    fn run(mut self, requests: Vec<(usize, Request)>) -> Result<MetricsReport, SimError> {
        let mut arrivals = requests.into_iter().peekable();
        let mut now = 0.0f64;
        let mut next_sample = 0.0f64;
        loop {
            for d in 0..self.devices.len() {
                if self.devices[d].inflight.as_ref().is_some_and(|(end, _)| *end <= now) {
                    self.complete_device(d, now)?;
                }
            }
            while let Some((e, r)) = arrivals.next_if(|(_, r)| r.arrival_time <= now) {
                let eng = &mut self.engines[e];
                eng.stats.arrivals += 1;
                eng.sched.enqueue(r);
                eng.stats.peak_queue = eng.stats.peak_queue.max(eng.sched.len() as u64);
            }
            for d in 0..self.devices.len() {
                for p in &mut self.pools {
                    p.set_clock(now);
                }
                self.start_device(d, now)?;
            }
            if self.opts.check_invariants {
                self.verify()?;
            }

            let next_completion = self
                .devices
                .iter()
                .filter_map(|d| d.inflight.as_ref().map(|(end, _)| *end))
                .fold(f64::INFINITY, f64::min);
            let next_arrival = arrivals.peek().map_or(f64::INFINITY, |(_, r)| r.arrival_time);
            let next = next_completion.min(next_arrival);
            if !next.is_finite() {
                break;
            }
            while next_sample <= next {
                if next_sample >= now {
                    self.sample(next_sample);
                }
                next_sample += self.opts.sample_interval;
            }
            self.accumulate(now, next);
            now = next;
        }

        if self.opts.check_invariants {
            self.verify()?;
            if let Some(i) = self.pools.iter().position(|p| p.snapshot_stats().allocated_bytes != 0) {
                return Err(SimError::InvariantViolated(format!(
                    "pool {} still holds blocks at the end of the run",
                    self.pool_names[i]
                )));
            }
        }
        // Whatever is still queued can never be admitted.
        for e in 0..self.engines.len() {
            let left: Vec<Request> = self.engines[e].sched.waiting().cloned().collect();
            for r in left {
                self.log_request(&r, None, Outcome::Unserved);
            }
        }
        self.report(now)
    }

    fn report(self, makespan: f64) -> Result<MetricsReport, SimError> {
        let horizon = self.opts.duration.unwrap_or(makespan).max(f64::MIN_POSITIVE);
        let span = match self.opts.measure_window {
            Some((a, b)) => b.min(makespan) - a,
            None => makespan,
        }
        .max(f64::MIN_POSITIVE);
        let mut models = BTreeMap::new();
        let mut agg = ModelMetrics::default();
        let mut all_ttfts = Vec::new();
        let unserved: BTreeMap<&str, u64> = self
            .logs
            .iter()
            .filter(|l| l.outcome == Outcome::Unserved)
            .fold(BTreeMap::new(), |mut m, l| {
                *m.entry(l.model_id.as_str()).or_insert(0) += 1;
                m
            });
        for e in &self.engines {
            let st = &e.stats;
            let m = ModelMetrics {
                arrivals: st.arrivals,
                completed: st.completed,
                dropped: st.dropped,
                preempted: st.preempted,
                unserved: unserved.get(e.id.as_str()).copied().unwrap_or(0),
                slo_met: st.slo_met,
                ttft_slo_attainment: if st.arrivals == 0 { 1.0 } else { st.slo_met as f64 / st.arrivals as f64 },
                throughput: st.completed as f64 / horizon,
                slo_attained_throughput: st.slo_met as f64 / horizon,
                decode_tokens: st.decode_tokens,
                token_gen_throughput: st.decode_tokens as f64 / horizon,
                mean_ttft: mean(&st.ttfts),
                p95_ttft: percentile(&st.ttfts, 0.95),
                peak_queue: st.peak_queue,
                mean_cached_tokens: st.cached_area / span,
                mean_kv_blocks: st.block_area / span,
            };
            agg.arrivals += m.arrivals;
            agg.completed += m.completed;
            agg.dropped += m.dropped;
            agg.preempted += m.preempted;
            agg.unserved += m.unserved;
            agg.slo_met += m.slo_met;
            agg.decode_tokens += m.decode_tokens;
            agg.peak_queue = agg.peak_queue.max(m.peak_queue);
            agg.mean_cached_tokens += m.mean_cached_tokens;
            agg.mean_kv_blocks += m.mean_kv_blocks;
            all_ttfts.extend_from_slice(&st.ttfts);
            models.insert(e.id.clone(), m);
        }
        agg.ttft_slo_attainment = if agg.arrivals == 0 { 1.0 } else { agg.slo_met as f64 / agg.arrivals as f64 };
        agg.throughput = agg.completed as f64 / horizon;
        agg.slo_attained_throughput = agg.slo_met as f64 / horizon;
        agg.token_gen_throughput = agg.decode_tokens as f64 / horizon;
        agg.mean_ttft = mean(&all_ttfts);
        agg.p95_ttft = percentile(&all_ttfts, 0.95);

        let mut pool_bytes = BTreeMap::new();
        for d in &self.devices {
            let bytes = self
                .pool_names
                .iter()
                .zip(&self.pools)
                .filter(|(name, _)| *name == &d.group_id || name.starts_with(&format!("{}:", d.group_id)))
                .map(|(_, p)| p.config().capacity_bytes)
                .sum();
            pool_bytes.insert(d.group_id.clone(), bytes);
        }
        let mut slab_logs = BTreeMap::new();
        let mut pools = self.pools;
        if self.opts.record_slab_log {
            for (name, p) in self.pool_names.iter().zip(pools.iter_mut()) {
                slab_logs.insert(name.clone(), p.take_log());
            }
        }
        let mut requests = self.logs;
        requests.sort_by_key(|r| r.request_id);
        Ok(MetricsReport {
            mode: self.opts.mode,
            policy: self.opts.policy,
            block_sizing: self.opts.block_sizing,
            horizon,
            makespan,
            pool_bytes,
            models,
            aggregate: agg,
            mean_internal_fragmentation_bytes: self.frag_area / span,
            anchor_violations: self.anchor_violations,
            admitted_batches: self.admitted_batches,
            samples: self.samples,
            requests,
            decisions: self.decisions,
            slab_logs,
        })
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn percentile(v: &[f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let idx = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    Some(s[idx])
}

/// Runs the trace against the placement. Requests of a replicated model are
/// spread round-robin over its replicas.
pub fn run_simulation(
    plan: &PlacementPlan,
    trace: &[TraceRecord],
    opts: &SimOptions,
) -> Result<MetricsReport, SimError> {
    let sim = Sim::build(plan, opts)?;

    let mut replicas: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in sim.engines.iter().enumerate() {
        replicas.entry(base_model_id(&e.id)).or_default().push(i);
        if base_model_id(&e.id) != e.id {
            replicas.entry(e.id.as_str()).or_default().push(i);
        }
    }
    let mut cursor: BTreeMap<&str, usize> = BTreeMap::new();
    let mut requests = Vec::with_capacity(trace.len());
    for (id, rec) in trace.iter().enumerate() {
        let Some(targets) = replicas.get(rec.model_id.as_str()) else {
            return Err(SimError::InvalidScenario(format!(
                "trace references model `{}` that is not placed",
                rec.model_id
            )));
        };
        let c = cursor.entry(rec.model_id.as_str()).or_insert(0);
        let e = targets[*c % targets.len()];
        *c += 1;
        let eng = &sim.engines[e];
        requests.push((
            e,
            Request::new(
                id as u64,
                eng.id.clone(),
                rec.arrival_time,
                rec.prompt_tokens,
                rec.output_tokens,
                eng.profile.ttft_slo,
            ),
        ));
    }
    requests.sort_by(|a, b| a.1.arrival_time.total_cmp(&b.1.arrival_time).then(a.1.request_id.cmp(&b.1.request_id)));
    sim.run(requests)
}

/// Convenience: the admitted batch of a decision never violates its anchor.
pub fn decision_respects_anchor(decision: &BatchDecision, now: f64) -> bool {
    match decision.anchor_deadline {
        Some(d) => now + decision.predicted_ttft < d,
        None => true,
    }
}

/// Slab size `auto-lcm` would pick for a set of block sizes.
pub fn auto_slab_size(keys: &[u64], multiplier: u64) -> Option<u64> {
    lcm_of(keys.iter().copied())?.checked_mul(multiplier)
}
