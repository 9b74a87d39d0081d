//! Property tests over the numeric kernels and the partition/aggregation
//! invariants.

use proptest::prelude::*;

use dfrd_core::autodiff::{kl_div, softmax};
use dfrd_core::data::{dirichlet_partition, make_blobs};
use dfrd_core::heterofed::{aggregate, extract_submodel, ExtractionScheme, SubmodelUpdate};
use dfrd_core::models::ClassifierSpec;
use dfrd_core::seed::SeedNode;
use dfrd_core::tensor::Tensor;

fn finite_logits(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, len)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_shift_invariant(logits in finite_logits(6), shift in -50.0f64..50.0) {
        let t = Tensor::from_vec(logits.clone());
        let p = softmax(&t).unwrap();
        let total: f64 = p.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        // Open interval in exact arithmetic; saturated logits may round an
        // entry to exactly 0 or 1 in f64.
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let shifted = Tensor::from_vec(logits.iter().map(|v| v + shift).collect());
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in finite_logits(8), q in finite_logits(8)) {
        let pt = Tensor::new(vec![2, 4], p).unwrap();
        let qt = Tensor::new(vec![2, 4], q).unwrap();
        prop_assert!(kl_div(&pt, &qt).unwrap() >= -1e-12);
        prop_assert_eq!(kl_div(&pt, &pt.clone()).unwrap(), 0.0);
    }

    #[test]
    fn dirichlet_partition_conserves_samples(seed in 0u64..500, omega in 0.01f64..10.0, clients in 1usize..8) {
        let ds = make_blobs(3, 2, 20, 0.2, seed).unwrap();
        let p = dirichlet_partition(&ds, clients, omega, SeedNode::root(seed)).unwrap();
        let mut seen = vec![false; ds.len()];
        for shard in &p.client_indices {
            for &i in shard {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
        // Per-class totals conserved.
        let mut per_class = vec![0u64; 3];
        for shard in &p.client_indices {
            for (c, n) in ds.label_histogram(shard).iter().enumerate() {
                per_class[c] += n;
            }
        }
        prop_assert_eq!(per_class, vec![20, 20, 20]);
    }

    #[test]
    fn extraction_round_trips_through_aggregation(seed in 0u64..200, r in 0.1f64..1.0, round in 0u64..12) {
        let spec = ClassifierSpec::new(3, vec![5, 4], 3);
        let global = spec.init(SeedNode::root(seed));
        for scheme in [ExtractionScheme::Static, ExtractionScheme::Random, ExtractionScheme::Rolling] {
            let (sub, im) = extract_submodel(&global, &spec, r, scheme, round, SeedNode::root(seed ^ 0xabc)).unwrap();
            let merged = aggregate(
                &global,
                &spec,
                &[SubmodelUpdate { params: sub, index_map: im, weight: 2.5 }],
            ).unwrap();
            prop_assert!(merged.max_abs_diff(&global) <= 1e-12);
        }
    }
}
