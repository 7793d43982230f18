//! Property tests over the public API.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batching::serve_one_at_a_time;
use crate::oracle::ReferencePool;
use crate::scenarios::llama8b;
use crate::selftest::{batching_cost, batching_instance, placement_instance};
use crate::{
    exact_score, place_models, proxy_score, schedule_batch, BatchLimits, MmeEstimator, PrecisionSpec,
    SlabPoolConfig, SlabTable,
};

fn precision() -> impl Strategy<Value = PrecisionSpec> {
    let bits = prop::sample::select(vec![4u8, 8, 16]);
    (bits.clone(), bits.clone(), bits).prop_map(|(w, a, kv)| PrecisionSpec::new(w, a, kv).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn token_size_is_linear_in_heads_and_dim(p in precision(), heads in 1u32..16, dim in 1u32..9, k in 1u32..4) {
        let mut m = llama8b("m", p);
        m.num_kv_heads = heads;
        m.head_dim = dim * 16;
        let base = m.token_size().unwrap();
        m.num_kv_heads = heads * k;
        prop_assert_eq!(m.token_size().unwrap(), base * u64::from(k));
        m.num_kv_heads = heads;
        m.head_dim = dim * 16 * k;
        prop_assert_eq!(m.token_size().unwrap(), base * u64::from(k));
    }

    #[test]
    fn block_size_grows_with_kv_bits_and_tokens(p in precision(), tpb in 1u32..64) {
        let mut m = llama8b("m", p);
        m.tokens_per_block = tpb;
        let b = m.kv_block_size().unwrap();
        m.tokens_per_block = tpb + 1;
        prop_assert!(m.kv_block_size().unwrap() > b);
        if p.kv_bits < 16 {
            let wider = PrecisionSpec::new(p.weight_bits, p.activation_bits, p.kv_bits * 2).unwrap();
            let mut w = llama8b("m", wider);
            w.tokens_per_block = tpb;
            prop_assert_eq!(w.kv_block_size().unwrap(), 2 * b);
        }
    }

    #[test]
    fn footprint_grows_with_weights(p in precision(), extra in 1u64..(8 << 30)) {
        let m = llama8b("m", p);
        let mut heavier = m.clone();
        heavier.weight_bytes += extra;
        let (a, b) = (m.base_footprint().unwrap(), heavier.base_footprint().unwrap());
        prop_assert_eq!(b.bytes, a.bytes + extra);
    }

    #[test]
    fn narrower_kv_means_higher_efficiency(tpb in 1u32..64, seq in 1.0f64..4096.0) {
        let est = MmeEstimator::Analytical { mean_seq_tokens: Some(seq) };
        let mu = |kv: u8| {
            let mut m = llama8b("m", PrecisionSpec::new(16, 16, kv).unwrap());
            m.tokens_per_block = tpb;
            est.estimate(&m, "g").tokens_per_byte
        };
        prop_assert!(mu(4) > mu(8) && mu(8) > mu(16));
    }

    #[test]
    fn proxy_never_exceeds_exact(mus in prop::collection::vec(1e-6f64..1e-4, 1..5), units in 1u32..200) {
        let k_rem = f64::from(units) * 1e6;
        let p = proxy_score(&mus, k_rem);
        let e = exact_score(&mus, k_rem, k_rem / 100.0);
        prop_assert!(p <= e * (1.0 + 1e-9), "proxy {p} > exact {e}");
    }

    #[test]
    fn adding_a_weaker_model_tempers_the_mean(mus in prop::collection::vec(1e-6f64..1e-4, 1..5), frac in 0.0f64..1.0, k in 1e6f64..1e10) {
        let min = mus.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut more = mus.clone();
        more.push(min * frac);
        prop_assert!(proxy_score(&more, k) <= proxy_score(&mus, k));
        // Exact split: one more model that must receive memory can only lose.
        prop_assert!(exact_score(&more, k, k / 100.0) <= exact_score(&mus, k, k / 100.0) * (1.0 + 1e-9));
    }

    #[test]
    fn proxy_is_the_mean_times_memory(mu in 1e-6f64..1e-4, n in 1usize..6, k in 1e6f64..1e10) {
        let s = proxy_score(&vec![mu; n], k);
        prop_assert!((s - mu * k).abs() <= 1e-9 * mu * k);
    }

    #[test]
    fn slab_pool_is_deterministic_and_ids_unique(
        ops in prop::collection::vec((0usize..3, any::<bool>(), any::<prop::sample::Index>()), 1..400),
        slabs in 1u64..12,
    ) {
        let keys = [4096u64, 8192, 12288];
        let cfg = SlabPoolConfig::auto_lcm(slabs * 24576, keys, 1).unwrap();
        let mut a = SlabTable::create(cfg.clone()).unwrap();
        let mut b = SlabTable::create(cfg).unwrap();
        let mut reference = ReferencePool::new(24576, slabs);
        let mut live = Vec::new();
        for (k, alloc, idx) in ops {
            if alloc || live.is_empty() {
                let key = keys[k];
                let ra = a.alloc_block(key);
                let rb = b.alloc_block(key);
                prop_assert_eq!(ra.is_ok(), reference.can_alloc(key));
                match (ra, rb) {
                    (Ok(ha), Ok(hb)) => {
                        prop_assert_eq!(ha, hb);
                        let (s, l, g) = reference.alloc(key).unwrap();
                        prop_assert_eq!((ha.slab_id, ha.local_block_id, ha.global_block_id), (s, l, g));
                        live.push(ha);
                    }
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "identical pools diverged"),
                }
            } else {
                let h = live.swap_remove(idx.index(live.len()));
                a.free_block(h).unwrap();
                b.free_block(h).unwrap();
                prop_assert!(reference.free(h.slab_id, h.local_block_id));
            }
            let st = a.snapshot_stats();
            prop_assert_eq!(st.total(), a.config().usable_bytes());
            prop_assert_eq!(st.allocated_bytes, reference.allocated_bytes());
        }
        // (key, global id) names a live block uniquely, and maps back to its slab.
        let ids: BTreeSet<(u64, u64)> = live.iter().map(|h| (h.key, h.global_block_id)).collect();
        prop_assert_eq!(ids.len(), live.len());
        for h in &live {
            prop_assert_eq!(a.locate(h.key, h.global_block_id).unwrap(), (h.slab_id, h.local_block_id));
        }
        a.check_invariants().map_err(TestCaseError::fail)?;
    }

    #[test]
    fn batch_decisions_partition_and_keep_anchor(seed in any::<u64>(), n in 1usize..15, n_max in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reqs = batching_instance(&mut rng, n);
        let (cost, chunk) = batching_cost();
        let limits = BatchLimits { n_max, t_max: 8192, chunk_tokens: chunk };
        let d = schedule_batch(&reqs, 0.0, &cost, limits);
        let mut all: Vec<u64> = d.admitted.iter().chain(&d.dropped).chain(&d.deferred).copied().collect();
        all.sort_unstable();
        let mut ids: Vec<u64> = reqs.iter().map(|r| r.request_id).collect();
        ids.sort_unstable();
        prop_assert_eq!(all, ids);
        prop_assert!(d.admitted.len() <= n_max);
        if let Some(anchor) = d.anchor_deadline {
            prop_assert!(d.predicted_ttft < anchor);
        }
    }

    #[test]
    fn one_at_a_time_service_is_always_on_time(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reqs = batching_instance(&mut rng, n);
        let (cost, chunk) = batching_cost();
        let served = serve_one_at_a_time(&reqs, 0.0, &cost, chunk);
        let mut t = 0.0;
        for id in served {
            let r = reqs.iter().find(|r| r.request_id == id).unwrap();
            t += crate::predict_ttft(std::slice::from_ref(r), &cost, chunk);
            prop_assert!(t < r.deadline);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn placement_is_deterministic_and_respects_memory(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (models, groups) = placement_instance(&mut rng);
        let est = MmeEstimator::default();
        let a = place_models(&models, &groups, &est);
        let b = place_models(&models, &groups, &est);
        prop_assert_eq!(a.is_ok(), b.is_ok());
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(&a.assignments, &b.assignments);
            for g in &a.groups {
                prop_assert!(g.charged() <= g.total_memory);
            }
        }
    }
}
