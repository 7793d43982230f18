//! End-to-end simulator checks on the bundled scenarios.

use crate::scenarios::{self, GIB};
use crate::{
    measure_mme, mme_slope, place_models, run_simulation, MetricsReport, PlacementPlan, PrecisionSpec,
    ScenarioConfig, SimError, TraceRecord,
};

fn plan(cfg: &ScenarioConfig) -> PlacementPlan {
    place_models(&cfg.models, &cfg.gpu_groups(), &cfg.estimator).unwrap()
}

fn run(cfg: &ScenarioConfig) -> MetricsReport {
    let mut opts = cfg.sim_options();
    // The full recheck scans every slab per event; skip it on uncapped pools.
    opts.check_invariants = cfg.simulation.kv_pool_bytes.is_some();
    run_simulation(&plan(cfg), &cfg.trace(None).unwrap(), &opts).unwrap()
}

fn run_with_pool(cfg: &ScenarioConfig, pool: u64) -> MetricsReport {
    let mut opts = cfg.sim_options();
    opts.kv_pool_bytes = Some(pool);
    run_simulation(&plan(cfg), &cfg.trace(None).unwrap(), &opts).unwrap()
}

#[test]
fn uncontended_load_meets_every_slo() {
    let cfg = scenarios::saturated_single(PrecisionSpec::FP16, 0.5);
    let r = run(&cfg);
    assert!(r.aggregate.arrivals > 10);
    assert_eq!(r.aggregate.ttft_slo_attainment, 1.0);
    assert_eq!(r.aggregate.completed, r.aggregate.arrivals);
}

#[test]
fn attainment_matches_the_request_log() {
    for (_, cfg) in scenarios::all() {
        let r = run(&cfg);
        let from_log = r.attainment_from_log(None);
        assert!((from_log - r.aggregate.ttft_slo_attainment).abs() < 1e-12);
        for (id, m) in &r.models {
            assert!((r.attainment_from_log(Some(id)) - m.ttft_slo_attainment).abs() < 1e-12);
            assert_eq!(m.arrivals, m.completed + m.dropped + m.preempted + m.unserved);
        }
        assert_eq!(r.requests.len() as u64, r.aggregate.arrivals);
    }
}

#[test]
fn pools_conserve_bytes_every_sample() {
    let r = run(&scenarios::two_phase());
    assert!(!r.samples.is_empty());
    for s in &r.samples {
        for (g, p) in &s.pools {
            let total = p.allocated_bytes + p.free_block_bytes + p.slab_residue_bytes + p.free_slab_bytes;
            assert!(total <= r.pool_bytes[g]);
            assert!(p.internal_fragmentation_bytes <= p.allocated_bytes);
        }
    }
    assert_eq!(r.anchor_violations, 0);
}

#[test]
fn one_block_of_memory_buys_one_block_of_tokens() {
    let cfg = scenarios::saturated_single(PrecisionSpec::FP16, 30.0);
    let m = &cfg.models[0];
    let block = m.kv_block_size().unwrap();
    let expected = f64::from(m.tokens_per_block) / block as f64;
    // Average several one-block steps to smooth out trajectory noise.
    let mut sum = 0.0;
    let steps = [GIB, GIB + GIB / 4, GIB + GIB / 2, 2 * GIB];
    for &k in &steps {
        let small = run_with_pool(&cfg, k);
        let large = run_with_pool(&cfg, k + block);
        sum += measure_mme(&small, &large, "m", "gpu0").unwrap();
    }
    let mu = sum / steps.len() as f64;
    assert!((mu / expected - 1.0).abs() <= 0.2, "measured {mu:e}, expected {expected:e}");
}

#[test]
fn unsaturated_model_has_flat_slope() {
    let cfg = scenarios::saturated_single(PrecisionSpec::FP16, 0.5);
    let points: Vec<(u64, f64)> = [GIB, 2 * GIB, 3 * GIB]
        .iter()
        .map(|&k| (k, run_with_pool(&cfg, k).models["m"].mean_cached_tokens))
        .collect();
    let slope = mme_slope(&points).unwrap();
    assert!(slope.abs() < 1e-8, "slope {slope:e}");
}

#[test]
fn equal_pools_are_rejected() {
    let cfg = scenarios::saturated_single(PrecisionSpec::FP16, 0.5);
    let r = run_with_pool(&cfg, GIB);
    assert!(matches!(measure_mme(&r, &r, "m", "gpu0"), Err(SimError::InvalidMeasurement(_))));
    assert!(mme_slope(&[(GIB, 1.0)]).is_err());
}

#[test]
fn unknown_model_in_trace_is_an_error() {
    let cfg = scenarios::two_phase();
    let trace = vec![TraceRecord {
        arrival_time: 0.0,
        model_id: "ghost".into(),
        prompt_tokens: 10,
        output_tokens: 10,
    }];
    let err = run_simulation(&plan(&cfg), &trace, &cfg.sim_options()).unwrap_err();
    assert!(err.to_string().contains("ghost"));
}
