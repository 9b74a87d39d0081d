//! Local training of a received sub-model.
//!
//! A client runs a fixed number of SGD steps of cross-entropy on batches
//! drawn from its shard and reports, per label, how many *distinct* samples
//! its batches touched. The dedup cache makes the count insensitive to a
//! sample recurring across (or within) batches.

use rand::Rng;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{classifier_logits_on_tape, register_classifier, ClassifierSpec};
use crate::optim::sgd_step_named;
use crate::params::ParameterSet;
use crate::seed::SeedNode;

/// Per-label counts of distinct training samples touched this round.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCounter {
    pub counts: Vec<u64>,
}

impl LabelCounter {
    pub fn zeros(num_classes: usize) -> Self {
        LabelCounter { counts: vec![0; num_classes] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Outcome of one client's round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub params: ParameterSet,
    pub labels_touched: LabelCounter,
    /// Multiply-accumulate count of the local training, for cost reporting.
    pub macs: u64,
    pub mean_first_loss: f64,
    pub mean_last_loss: f64,
}

/// Hyperparameters of the local update.
#[derive(Debug, Clone, Copy)]
pub struct ClientConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Batch sampling with replacement (default) or without, per step.
    pub with_replacement: bool,
}

/// Runs `steps` SGD steps on the client's shard.
///
/// Returns `Ok(None)` when the shard is empty — the client contributes
/// nothing this round and the caller drops it from the active set.
pub fn client_update(
    mut params: ParameterSet,
    spec: &ClassifierSpec,
    widths: &[usize],
    data: &Dataset,
    shard: &[usize],
    cfg: &ClientConfig,
    seed: SeedNode,
) -> Result<Option<ClientUpdate>> {
    if shard.is_empty() {
        return Ok(None);
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    for (l, &w) in widths.iter().enumerate() {
        let layer = params
            .layer(&format!("fc{l}"))
            .ok_or_else(|| Error::shape(format!("missing layer fc{l}")))?;
        if layer.weight.rows() != w {
            return Err(Error::shape(format!("layer fc{l} width {} != {w}", layer.weight.rows())));
        }
    }
    if data.dim() != spec.input_dim {
        return Err(Error::shape(format!("data dim {} != input dim {}", data.dim(), spec.input_dim)));
    }
    let mut rng = seed.rng();
    let mut touched = vec![false; shard.len()];
    let mut counter = LabelCounter::zeros(data.num_classes);
    let mut macs = 0u64;
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;

    let mut scratch: Vec<usize> = (0..shard.len()).collect();
    for step in 0..cfg.steps {
        let batch_positions: Vec<usize> = if cfg.with_replacement {
            (0..cfg.batch_size).map(|_| rng.random_range(0..shard.len())).collect()
        } else {
            let take = cfg.batch_size.min(shard.len());
            // Partial Fisher-Yates over the scratch order.
            for i in 0..take {
                let j = rng.random_range(i..scratch.len());
                scratch.swap(i, j);
            }
            scratch[..take].to_vec()
        };
        let batch_indices: Vec<usize> = batch_positions.iter().map(|&p| shard[p]).collect();
        for &p in &batch_positions {
            if !touched[p] {
                touched[p] = true;
                counter.counts[data.labels[shard[p]]] += 1;
            }
        }

        let x = data.gather_features(&batch_indices);
        let y = data.gather_labels(&batch_indices);
        let mut tape = Tape::new();
        let layers = register_classifier(&mut tape, &params, true);
        let xv = tape.constant(x);
        let logits = classifier_logits_on_tape(&mut tape, &layers, xv);
        let loss = tape.cross_entropy(logits, &y)?;
        let loss_value = tape.value(loss).item();
        if step == 0 {
            first_loss = loss_value;
        }
        last_loss = loss_value;
        let grads = tape.backward(loss)?;
        macs += tape.macs();
        sgd_step_named(params.named_tensors_mut(), &grads.into_map(), cfg.lr)?;
    }

    Ok(Some(ClientUpdate {
        params,
        labels_touched: counter,
        macs,
        mean_first_loss: first_loss,
        mean_last_loss: last_loss,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::heterofed::{extract_submodel, ExtractionScheme};

    fn setup(seed: u64) -> (ClassifierSpec, ParameterSet, Dataset) {
        let spec = ClassifierSpec::new(2, vec![6], 3);
        let params = spec.init(SeedNode::root(seed));
        let data = make_blobs(3, 2, 20, 0.15, seed).unwrap();
        (spec, params, data)
    }

    fn cfg(steps: usize) -> ClientConfig {
        ClientConfig { lr: 0.05, steps, batch_size: 8, with_replacement: true }
    }

    #[test]
    fn zero_steps_is_a_noop() {
        let (spec, params, data) = setup(1);
        let shard: Vec<usize> = (0..10).collect();
        let out = client_update(params.clone(), &spec, &spec.hidden_widths, &data, &shard, &cfg(0), SeedNode::root(5))
            .unwrap()
            .unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.labels_touched.total(), 0);
    }

    #[test]
    fn empty_shard_signals_skip() {
        let (spec, params, data) = setup(2);
        let out =
            client_update(params, &spec, &spec.hidden_widths, &data, &[], &cfg(3), SeedNode::root(5)).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn duplicate_draws_count_once() {
        let (spec, params, data) = setup(3);
        // One-sample shard with batch size 4: every batch repeats the sample.
        let shard = vec![7];
        let out = client_update(params, &spec, &spec.hidden_widths, &data, &shard, &cfg(5), SeedNode::root(6))
            .unwrap()
            .unwrap();
        assert_eq!(out.labels_touched.total(), 1);
        assert_eq!(out.labels_touched.counts[data.labels[7]], 1);
    }

    #[test]
    fn long_training_touches_the_full_histogram() {
        let (spec, params, data) = setup(4);
        let shard: Vec<usize> = (0..15).collect();
        // 60 steps x 8 draws = 480 draws over 15 samples: the chance any
        // sample is missed is vanishing, and the seed is fixed anyway.
        let out = client_update(params, &spec, &spec.hidden_widths, &data, &shard, &cfg(60), SeedNode::root(7))
            .unwrap()
            .unwrap();
        let expect = data.label_histogram(&shard);
        assert_eq!(out.labels_touched.counts, expect);
    }

    #[test]
    fn touched_total_never_exceeds_shard_size() {
        let (spec, params, data) = setup(5);
        for steps in [1, 3, 10, 40] {
            let shard: Vec<usize> = (0..12).collect();
            let out = client_update(
                params.clone(),
                &spec,
                &spec.hidden_widths,
                &data,
                &shard,
                &cfg(steps),
                SeedNode::root(steps as u64),
            )
            .unwrap()
            .unwrap();
            assert!(out.labels_touched.total() <= shard.len() as u64);
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_blobs() {
        let mut improved = 0;
        for seed in 0..6 {
            let spec = ClassifierSpec::new(2, vec![8], 3);
            let params = spec.init(SeedNode::root(seed));
            let data = make_blobs(3, 2, 30, 0.05, seed).unwrap();
            let shard: Vec<usize> = (0..data.len()).collect();
            let out = client_update(
                params,
                &spec,
                &spec.hidden_widths,
                &data,
                &shard,
                &ClientConfig { lr: 0.2, steps: 40, batch_size: 16, with_replacement: true },
                SeedNode::root(seed + 100),
            )
            .unwrap()
            .unwrap();
            if out.mean_last_loss < out.mean_first_loss {
                improved += 1;
            }
        }
        assert!(improved >= 5, "{improved}/6 seeds improved");
    }

    #[test]
    fn deterministic_given_seed() {
        let (spec, params, data) = setup(6);
        let shard: Vec<usize> = (0..10).collect();
        let a = client_update(params.clone(), &spec, &spec.hidden_widths, &data, &shard, &cfg(7), SeedNode::root(9))
            .unwrap()
            .unwrap();
        let b = client_update(params, &spec, &spec.hidden_widths, &data, &shard, &cfg(7), SeedNode::root(9))
            .unwrap()
            .unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.labels_touched, b.labels_touched);
    }

    #[test]
    fn without_replacement_mode_also_counts_distinct() {
        let (spec, params, data) = setup(7);
        let shard: Vec<usize> = (0..5).collect();
        let out = client_update(
            params,
            &spec,
            &spec.hidden_widths,
            &data,
            &shard,
            &ClientConfig { lr: 0.05, steps: 2, batch_size: 8, with_replacement: false },
            SeedNode::root(3),
        )
        .unwrap()
        .unwrap();
        // Batch is capped at the shard size without replacement.
        assert_eq!(out.labels_touched.total(), 5);
    }

    #[test]
    fn trains_a_slimmed_submodel() {
        let (spec, global, data) = setup(8);
        let (sub, im) =
            extract_submodel(&global, &spec, 0.5, ExtractionScheme::Rolling, 2, SeedNode::root(4)).unwrap();
        let shard: Vec<usize> = (0..8).collect();
        let out = client_update(sub, &spec, &im.widths(), &data, &shard, &cfg(3), SeedNode::root(2))
            .unwrap()
            .unwrap();
        assert_eq!(out.params.layer("fc0").unwrap().weight.rows(), im.layers[0].len());
    }
}
