//! Fast invariant suite behind `dfrd check`.
//!
//! A few seconds of spot checks over the numerics and the round loop; the
//! full statistical suite lives in the integration tests.

use crate::autodiff::{cross_entropy, kl_div, softmax};
use crate::data::make_blobs;
use crate::distill::{
    ema_update, transfer_gate, weighting_and_label_dist, EmaGenerator, GateVariant, LabelStats,
    WeightingVariant,
};
use crate::error::{Error, Result};
use crate::gradcheck::{central_diff, max_rel_err};
use crate::heterofed::{aggregate, assign_budgets, extract_submodel, ExtractionScheme, IndexMap, SubmodelUpdate};
use crate::models::{ClassifierSpec, GeneratorSpec, MergeOp};
use crate::orchestrator::{run_experiment, DataConfig, Distiller, ExperimentConfig, Scheme};
use crate::seed::SeedNode;
use crate::tensor::Tensor;

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::contract(msg.to_string()))
    }
}

fn check_budgets() -> Result<()> {
    let s = 1.0 / 16.0;
    ensure(
        assign_budgets(10, 4, 10).fractions == vec![0.5, 0.25, 0.125, s, s, s, s, s, s, s],
        "budget list for rho=10",
    )?;
    ensure(assign_budgets(10, 4, 40).fractions == vec![s; 10], "budget list for rho=40")?;
    ensure(
        assign_budgets(10, 4, 5).fractions
            == vec![1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125, s, s, s],
        "budget list for rho=5",
    )
}

fn check_losses() -> Result<()> {
    let sm = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]))?;
    ensure((sm.data()[2] - 0.6652409557748219).abs() < 1e-12, "softmax fixture")?;
    let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0])?;
    ensure(
        (cross_entropy(&logits, &[0])? - std::f64::consts::LN_2).abs() < 1e-12,
        "cross-entropy fixture",
    )?;
    let a = Tensor::new(vec![1, 2], vec![0.4, -0.3])?;
    ensure(kl_div(&a, &a.clone())? == 0.0, "KL identity")
}

fn check_gradients() -> Result<()> {
    let spec = ClassifierSpec::new(3, vec![4], 3);
    let params = spec.init(SeedNode::root(41));
    let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.8, -0.5, 0.1, 0.4])?;
    let labels = vec![0, 2];
    let base: Vec<f64> = params.layer("fc0").unwrap().weight.data().to_vec();
    let eval = |v: &[f64]| -> f64 {
        let mut probe = params.clone();
        probe.layer_mut("fc0").unwrap().weight.data_mut().copy_from_slice(v);
        let logits =
            crate::models::classifier_forward(&probe, &spec, &spec.hidden_widths, &x).unwrap();
        cross_entropy(&logits, &labels).unwrap()
    };
    let numeric = central_diff(eval, &base, 1e-4);

    let mut tape = crate::autodiff::Tape::new();
    let layers = crate::models::register_classifier(&mut tape, &params, true);
    let xv = tape.constant(x);
    let logits = crate::models::classifier_logits_on_tape(&mut tape, &layers, xv);
    let loss = tape.cross_entropy(logits, &labels)?;
    let grads = tape.backward(loss)?;
    let rel = max_rel_err(grads.get("fc0.w").unwrap().data(), &numeric);
    ensure(rel <= 1e-4, "classifier gradient vs finite differences")
}

fn check_gates() -> Result<()> {
    let rows = [[1.0, 0.0], [0.0, 1.0]];
    for g in &rows {
        for e in &rows {
            for y in 0..2 {
                let d = transfer_gate(g, e, y, GateVariant::Diamond);
                let t = transfer_gate(g, e, y, GateVariant::Triangle);
                let n = transfer_gate(g, e, y, GateVariant::Nabla);
                let ag = Tensor::argmax_row(g);
                let ae = Tensor::argmax_row(e);
                ensure(d == (ag != y && ae == y), "diamond predicate")?;
                ensure(t, "triangle predicate")?;
                ensure(n == (ag != ae), "nabla predicate")?;
                ensure(!d || (t && n), "diamond implies the other gates")?;
            }
        }
    }
    Ok(())
}

fn check_weighting() -> Result<()> {
    use rand::Rng;
    let mut rng = SeedNode::root(55).rng();
    for _ in 0..50 {
        let n = rng.random_range(1..5);
        let c = rng.random_range(2..6);
        let mut stats = LabelStats::zeros(n, c);
        for i in 0..n {
            stats.set_row(i, (0..c).map(|_| rng.random_range(0..4)).collect());
        }
        let active: Vec<usize> = (0..n).collect();
        let wt = weighting_and_label_dist(&stats, &active, WeightingVariant::Dynamic)?;
        for y in 0..c {
            let total: u64 = active.iter().map(|&i| stats.row(i)[y]).sum();
            let col: f64 = active.iter().map(|&i| wt.tau[i][y]).sum();
            if total > 0 {
                ensure((col - 1.0).abs() <= 1e-12, "tau column sums to one")?;
            }
        }
    }
    Ok(())
}

fn check_ema() -> Result<()> {
    let spec = GeneratorSpec {
        noise_dim: 2,
        hidden_widths: vec![3],
        output_dim: 2,
        num_classes: 2,
        merge: MergeOp::Mul,
    };
    let w = spec.init(SeedNode::root(3));
    let mut ema = EmaGenerator::sentinel(0.0);
    ema_update(&mut ema, &w, 0.0);
    ensure(ema.params.as_ref() == Some(&w), "momentum 0 copies the source")
}

fn check_aggregation() -> Result<()> {
    let spec = ClassifierSpec::new(2, vec![3], 2);
    let global = spec.init(SeedNode::root(6));
    let a = spec.init(SeedNode::root(7));
    let b = spec.init(SeedNode::root(8));
    let merged = aggregate(
        &global,
        &spec,
        &[
            SubmodelUpdate { params: a.clone(), index_map: IndexMap::full(&spec), weight: 2.0 },
            SubmodelUpdate { params: b.clone(), index_map: IndexMap::full(&spec), weight: 1.0 },
        ],
    )?;
    for ((name, layer), (_, la)) in merged.iter().zip(a.iter()) {
        let lb = b.layer(name).unwrap();
        for i in 0..layer.weight.numel() {
            let expect = (2.0 * la.weight.data()[i] + lb.weight.data()[i]) / 3.0;
            ensure((layer.weight.data()[i] - expect).abs() <= 1e-12, "full-width averaging")?;
        }
    }
    Ok(())
}

fn check_rolling_coverage() -> Result<()> {
    let spec = ClassifierSpec::new(2, vec![4], 2);
    let global = spec.init(SeedNode::root(9));
    let mut seen = [false; 4];
    for t in 0..4 {
        let (_, im) =
            extract_submodel(&global, &spec, 0.25, ExtractionScheme::Rolling, t, SeedNode::root(0))?;
        for &i in &im.layers[0] {
            seen[i] = true;
        }
    }
    ensure(seen.iter().all(|&s| s), "rolling covers all indices")
}

fn check_determinism() -> Result<()> {
    let cfg = ExperimentConfig {
        data: DataConfig::Blobs { classes: 3, dim: 4, per_class: 20, test_per_class: 8, spread: 0.2 },
        num_clients: 3,
        active_per_round: 3,
        rounds: 2,
        hidden_widths: vec![6],
        gen_hidden: vec![6],
        noise_dim: 4,
        client_steps: 3,
        batch_size: 8,
        iters: 1,
        gen_iters: 1,
        model_iters: 1,
        scheme: Scheme::Rolling,
        distiller: Distiller::Dfrd,
        seed: 23,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg)?;
    let b = run_experiment(&cfg)?;
    ensure(a.csv() == b.csv(), "rerun produces a byte-identical CSV")
}

fn check_blobs_partition() -> Result<()> {
    let ds = make_blobs(4, 3, 25, 0.2, 12)?;
    let p = crate::data::dirichlet_partition(&ds, 5, 0.3, SeedNode::root(4))?;
    let assigned: usize = p.client_indices.iter().map(Vec::len).sum();
    ensure(assigned == ds.len(), "partition conserves samples")
}

/// Runs every fast check, returning `(name, outcome)` pairs.
pub fn run_checks() -> Vec<(&'static str, Result<()>)> {
    vec![
        ("budget-formula", check_budgets()),
        ("loss-fixtures", check_losses()),
        ("gradients", check_gradients()),
        ("transfer-gates", check_gates()),
        ("weighting", check_weighting()),
        ("ema", check_ema()),
        ("selective-aggregation", check_aggregation()),
        ("rolling-coverage", check_rolling_coverage()),
        ("blobs-partition", check_blobs_partition()),
        ("determinism", check_determinism()),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_fast_checks_pass() {
        for (name, outcome) in super::run_checks() {
            assert!(outcome.is_ok(), "check {name} failed: {:?}", outcome.err());
        }
    }
}
