//! Built-in scenarios: the mixed-precision placement case, the two-phase
//! load shift, a fragmentation mix and single-model pool sweeps.
//!
//! Model dimensions follow the Llama-3 8B and 70B architectures. Cost
//! coefficients are synthetic: prefill is compute bound, decode pays a fixed
//! weight-read cost per step plus a KV-read cost per cached token, both
//! scaled by the precision's byte width.

use crate::batching::CostModel;
use crate::config::{ClusterConfig, GpuSpec, OutputConfig, ScenarioConfig, SimulationConfig, WorkloadConfig};
use crate::precision::{BatchingConfig, MmeEstimator, ModelProfile, OperatingPoint, PrecisionSpec};
use crate::sim::{MemoryMode, Policy, SlabSizing};
use crate::workload::{LengthDist, ModelWorkload, RatePhase};

pub const GIB: u64 = 1 << 30;

fn table(points: &[(u32, f64)]) -> Vec<OperatingPoint> {
    points
        .iter()
        .map(|&(batch_size, throughput)| OperatingPoint {
            batch_size,
            throughput,
            activation_bytes: None,
            kv_bytes: None,
        })
        .collect()
}

/// Llama-3-8B shaped model at the given precision.
pub fn llama8b(model_id: &str, precision: PrecisionSpec) -> ModelProfile {
    let w = f64::from(precision.weight_bits) / 16.0;
    let kv = f64::from(precision.kv_bits) / 16.0;
    ModelProfile {
        model_id: model_id.to_string(),
        precision,
        num_kv_heads: 8,
        head_dim: 128,
        num_layers: 32,
        tp_degree: 1,
        tokens_per_block: 16,
        quant_param_bytes_per_block: 0,
        weight_bytes: (16.0 * w * GIB as f64) as u64,
        avg_activation_bytes: 2 * GIB,
        avg_kv_bytes: (8.0 * kv * GIB as f64) as u64,
        request_rate: 2.0,
        ttft_slo: 1.0,
        cost: CostModel {
            alpha: 0.004,
            beta: 6.0e-5 * w.max(0.5),
            gamma: 0.006 + 0.010 * w,
            delta: 1.0e-4,
            epsilon: 6.0e-8 * kv,
        },
        throughput_table: table(&[(1, 3.0), (8, 16.0), (32, 40.0), (64, 55.0)]),
        avg_prompt_tokens: 300,
        avg_output_tokens: 200,
        batching: BatchingConfig::default(),
    }
}

/// Llama-3-70B with 4-bit weights (AWQ-style), FP16 KV cache.
pub fn llama70b_awq(model_id: &str) -> ModelProfile {
    ModelProfile {
        model_id: model_id.to_string(),
        precision: PrecisionSpec::W4A16,
        num_kv_heads: 8,
        head_dim: 128,
        num_layers: 80,
        tp_degree: 1,
        tokens_per_block: 16,
        quant_param_bytes_per_block: 0,
        weight_bytes: 35 * GIB,
        avg_activation_bytes: 3 * GIB,
        avg_kv_bytes: 12 * GIB,
        request_rate: 1.0,
        ttft_slo: 2.0,
        cost: CostModel {
            alpha: 0.01,
            beta: 4.0e-4,
            gamma: 0.03,
            delta: 3.0e-4,
            epsilon: 1.5e-7,
        },
        throughput_table: table(&[(1, 1.0), (8, 6.0), (32, 14.0)]),
        avg_prompt_tokens: 300,
        avg_output_tokens: 200,
        batching: BatchingConfig::default(),
    }
}

fn uniform(min: u32, max: u32) -> LengthDist {
    LengthDist::Uniform { min, max }
}

fn const_rate(model_id: &str, rate: f64) -> ModelWorkload {
    ModelWorkload {
        model_id: model_id.to_string(),
        rate: Some(rate),
        phases: Vec::new(),
        rate_scale: 1.0,
        prompt: uniform(100, 500),
        output: uniform(100, 300),
    }
}

fn gpus(n: usize, memory: u64) -> ClusterConfig {
    ClusterConfig {
        gpus: (0..n)
            .map(|i| GpuSpec {
                id: format!("gpu{i}"),
                memory_bytes: memory,
            })
            .collect(),
        groups: Vec::new(),
    }
}

fn scenario(seed: u64, cluster: ClusterConfig, models: Vec<ModelProfile>, workload: WorkloadConfig) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        cluster,
        models,
        workload,
        slab: SlabSizing::AutoLcm { multiplier: 1 },
        simulation: SimulationConfig::default(),
        estimator: MmeEstimator::default(),
        output: OutputConfig::default(),
        base_dir: Default::default(),
    }
}

/// One 70B 4-bit model and two 8B variants (FP16, FP8) on two 80 GiB GPUs.
pub fn mixed_precision() -> ScenarioConfig {
    let models = vec![
        llama70b_awq("model-c"),
        llama8b("model-a", PrecisionSpec::FP16),
        llama8b("model-b", PrecisionSpec::FP8),
    ];
    let workload = WorkloadConfig {
        duration: 60.0,
        models: vec![const_rate("model-a", 2.0), const_rate("model-b", 2.0), const_rate("model-c", 1.0)],
        trace: None,
    };
    scenario(1, gpus(2, 80 * GIB), models, workload)
}

/// FP16 and FP8 8B models sharing one GPU. In phase T1 both are moderately
/// loaded; in phase T2 all load moves to the FP8 model. The KV pool is
/// capped so that memory, not compute, limits the FP8 model in T2.
pub fn two_phase() -> ScenarioConfig {
    let models = vec![
        llama8b("fp16", PrecisionSpec::FP16),
        llama8b("fp8", PrecisionSpec::FP8),
    ];
    let phased = |id: &str, t1: f64, t2: f64| ModelWorkload {
        phases: vec![
            RatePhase {
                start: 0.0,
                end: 60.0,
                rate: t1,
            },
            RatePhase {
                start: 60.0,
                end: 120.0,
                rate: t2,
            },
        ],
        rate: None,
        ..const_rate(id, 0.0)
    };
    let workload = WorkloadConfig {
        duration: 120.0,
        models: vec![phased("fp16", 2.0, 0.0), phased("fp8", 2.0, 12.0)],
        trace: None,
    };
    let mut cfg = scenario(7, gpus(1, 80 * GIB), models, workload);
    cfg.simulation.kv_pool_bytes = Some(3 * GIB / 2);
    cfg.simulation.sample_interval = 0.5;
    cfg
}

/// Phase boundaries of [`two_phase`].
pub const TWO_PHASE_T2: (f64, f64) = (60.0, 120.0);

/// Co-located FP16 and FP8 models at light load, FP8 carrying most traffic.
pub fn fragmentation_mix() -> ScenarioConfig {
    let models = vec![
        llama8b("fp16", PrecisionSpec::FP16),
        llama8b("fp8", PrecisionSpec::FP8),
    ];
    let workload = WorkloadConfig {
        duration: 60.0,
        models: vec![const_rate("fp16", 0.5), const_rate("fp8", 4.5)],
        trace: None,
    };
    let mut cfg = scenario(11, gpus(1, 80 * GIB), models, workload);
    cfg.simulation.kv_pool_bytes = Some(8 * GIB);
    cfg.simulation.sample_interval = 0.5;
    cfg
}

/// A single saturated model on one GPU, for pool-size sweeps.
pub fn saturated_single(precision: PrecisionSpec, rate: f64) -> ScenarioConfig {
    let models = vec![llama8b("m", precision)];
    let workload = WorkloadConfig {
        duration: 60.0,
        models: vec![const_rate("m", rate)],
        trace: None,
    };
    let mut cfg = scenario(3, gpus(1, 80 * GIB), models, workload);
    cfg.simulation.policy = Policy::Adaptive;
    cfg.simulation.mode = MemoryMode::DynamicSlab;
    cfg.simulation.sample_interval = 0.5;
    cfg.simulation.measure_window = Some((15.0, 60.0));
    cfg
}

/// Every built-in scenario with its file stem.
pub fn all() -> Vec<(&'static str, ScenarioConfig)> {
    vec![
        ("mixed_precision", mixed_precision()),
        ("two_phase", two_phase()),
        ("fragmentation_mix", fragmentation_mix()),
        ("saturated_fp16", saturated_single(PrecisionSpec::FP16, 30.0)),
    ]
}
