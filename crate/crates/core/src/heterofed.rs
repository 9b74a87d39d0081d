//! Width budgets, sub-model extraction, and selective aggregation.
//!
//! Each client is assigned a width fraction from an exponential budget
//! schedule. The server extracts a sub-model per client by selecting hidden
//! node indices (static prefix, seeded random, or rolling window), sends it
//! out, and merges returned parameters coordinate by coordinate: a
//! coordinate's new value is the weighted average over exactly the clients
//! whose index map contains it, and a coordinate nobody updated keeps its
//! previous value.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::ClassifierSpec;
use crate::params::{LayerParams, ParameterSet};
use crate::seed::SeedNode;
use crate::tensor::Tensor;

/// Per-client width fractions `R_i = (1/2)^min(sigma, floor(rho*i/N))` for
/// `i = 1..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub fractions: Vec<f64>,
    pub sigma: u32,
    pub rho: u32,
}

pub fn assign_budgets(n: usize, sigma: u32, rho: u32) -> BudgetPlan {
    assert!(n >= 1 && sigma >= 1 && rho >= 1);
    let fractions = (1..=n)
        .map(|i| {
            let exponent = ((rho as u64 * i as u64) / n as u64).min(sigma as u64);
            0.5f64.powi(exponent as i32)
        })
        .collect();
    BudgetPlan { fractions, sigma, rho }
}

/// How hidden node indices are chosen for a width-`R` sub-model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionScheme {
    /// Always the first `ceil(R*K)` nodes.
    Static,
    /// A fresh uniform sample without replacement per (round, client, layer).
    Random,
    /// A window of `ceil(R*K)` consecutive nodes starting at `t mod K`,
    /// wrapping around, so the window advances one node per round.
    Rolling,
}

impl FromStr for ExtractionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ExtractionScheme::Static),
            "random" => Ok(ExtractionScheme::Random),
            "rolling" => Ok(ExtractionScheme::Rolling),
            other => Err(Error::contract(format!("unknown extraction scheme `{other}`"))),
        }
    }
}

/// Selected node indices per hidden layer, sorted ascending and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub layers: Vec<Vec<usize>>,
}

impl IndexMap {
    /// Full-width map for a spec.
    pub fn full(spec: &ClassifierSpec) -> Self {
        IndexMap { layers: spec.hidden_widths.iter().map(|&k| (0..k).collect()).collect() }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// CSV export with header `layer,index`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,index\n");
        for (layer, indices) in self.layers.iter().enumerate() {
            for &idx in indices {
                out.push_str(&format!("{layer},{idx}\n"));
            }
        }
        out
    }

    fn validate(&self, spec: &ClassifierSpec) -> Result<()> {
        if self.layers.len() != spec.hidden_widths.len() {
            return Err(Error::IndexOutOfRange(format!(
                "index map covers {} layers, model has {}",
                self.layers.len(),
                spec.hidden_widths.len()
            )));
        }
        for (l, (indices, &k)) in self.layers.iter().zip(&spec.hidden_widths).enumerate() {
            if indices.is_empty() {
                return Err(Error::IndexOutOfRange(format!("layer {l} selects no nodes")));
            }
            for w in indices.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::IndexOutOfRange(format!(
                        "layer {l} indices not strictly ascending"
                    )));
                }
            }
            if *indices.last().unwrap() >= k {
                return Err(Error::IndexOutOfRange(format!(
                    "layer {l} index {} outside width {k}",
                    indices.last().unwrap()
                )));
            }
        }
        Ok(())
    }
}

fn select_indices(
    scheme: ExtractionScheme,
    k: usize,
    count: usize,
    round: u64,
    layer_seed: SeedNode,
) -> Vec<usize> {
    match scheme {
        ExtractionScheme::Static => (0..count).collect(),
        ExtractionScheme::Random => {
            let mut rng = layer_seed.rng();
            let mut picked = rand::seq::index::sample(&mut rng, k, count).into_vec();
            picked.sort_unstable();
            picked
        }
        ExtractionScheme::Rolling => {
            let start = (round % k as u64) as usize;
            let mut picked: Vec<usize> = (0..count).map(|j| (start + j) % k).collect();
            picked.sort_unstable();
            picked
        }
    }
}

/// Extracts the width-`r` sub-model for one client.
///
/// `seed` must be unique per (round, client); the per-layer stream is derived
/// from it, so random selections are independent across layers.
pub fn extract_submodel(
    global: &ParameterSet,
    spec: &ClassifierSpec,
    r: f64,
    scheme: ExtractionScheme,
    round: u64,
    seed: SeedNode,
) -> Result<(ParameterSet, IndexMap)> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::contract(format!("width fraction {r} outside (0, 1]")));
    }
    let counts = spec.slimmed_widths(r);
    let layers: Vec<Vec<usize>> = counts
        .iter()
        .zip(&spec.hidden_widths)
        .enumerate()
        .map(|(l, (&count, &k))| select_indices(scheme, k, count, round, seed.index(l as u64)))
        .collect();
    let index_map = IndexMap { layers };
    let sub = slice_submodel(global, spec, &index_map)?;
    Ok((sub, index_map))
}

/// Materializes the sub-model a given index map selects.
pub fn slice_submodel(
    global: &ParameterSet,
    spec: &ClassifierSpec,
    index_map: &IndexMap,
) -> Result<ParameterSet> {
    index_map.validate(spec)?;
    let mut sub = ParameterSet::new();
    let num_hidden = spec.hidden_widths.len();
    for l in 0..num_hidden {
        let name = format!("fc{l}");
        let layer = global
            .layer(&name)
            .ok_or_else(|| Error::shape(format!("global model missing {name}")))?;
        let rows = &index_map.layers[l];
        let in_dim = if l == 0 { spec.input_dim } else { index_map.layers[l - 1].len() };
        let mut weight = Tensor::zeros(vec![rows.len(), in_dim]);
        let mut bias = Tensor::zeros(vec![rows.len()]);
        for (ri, &gr) in rows.iter().enumerate() {
            if l == 0 {
                weight.row_mut(ri).copy_from_slice(layer.weight.row(gr));
            } else {
                for (ci, &gc) in index_map.layers[l - 1].iter().enumerate() {
                    weight.set2(ri, ci, layer.weight.get2(gr, gc));
                }
            }
            bias.data_mut()[ri] = layer.bias.data()[gr];
        }
        sub.push(name, LayerParams { weight, bias });
    }
    let out = global.layer("out").ok_or_else(|| Error::shape("global model missing out"))?;
    let last = &index_map.layers[num_hidden - 1];
    let mut weight = Tensor::zeros(vec![spec.num_classes, last.len()]);
    for c in 0..spec.num_classes {
        for (ci, &gc) in last.iter().enumerate() {
            weight.set2(c, ci, out.weight.get2(c, gc));
        }
    }
    sub.push("out", LayerParams { weight, bias: out.bias.clone() });
    Ok(sub)
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone)]
pub struct SubmodelUpdate {
    pub params: ParameterSet,
    pub index_map: IndexMap,
    /// Aggregation weight `p_i`, normally the client's training-set size.
    pub weight: f64,
}

struct Accumulator {
    num: Tensor,
    den: Tensor,
}

impl Accumulator {
    fn like(t: &Tensor) -> Self {
        Accumulator { num: Tensor::zeros_like(t), den: Tensor::zeros_like(t) }
    }

    fn add(&mut self, flat_idx: usize, value: f64, weight: f64) {
        self.num.data_mut()[flat_idx] += weight * value;
        self.den.data_mut()[flat_idx] += weight;
    }

    fn resolve(&self, old: &Tensor) -> Tensor {
        let mut out = old.clone();
        for i in 0..out.numel() {
            if self.den.data()[i] > 0.0 {
                out.data_mut()[i] = self.num.data()[i] / self.den.data()[i];
            }
        }
        out
    }
}

/// Selective per-coordinate weighted averaging of returned sub-models.
///
/// For every coordinate the denominator sums `p_i` over exactly the clients
/// whose index map contains that coordinate; untouched coordinates keep the
/// previous global value.
pub fn aggregate(
    global: &ParameterSet,
    spec: &ClassifierSpec,
    updates: &[SubmodelUpdate],
) -> Result<ParameterSet> {
    let num_hidden = spec.hidden_widths.len();
    let mut acc: Vec<(Accumulator, Accumulator)> = Vec::new();
    for (_, layer) in global.iter() {
        acc.push((Accumulator::like(&layer.weight), Accumulator::like(&layer.bias)));
    }

    for update in updates {
        update.index_map.validate(spec)?;
        let expected_widths = update.index_map.widths();
        for l in 0..num_hidden {
            let name = format!("fc{l}");
            let sub = update
                .params
                .layer(&name)
                .ok_or_else(|| Error::shape(format!("update missing {name}")))?;
            let rows = &update.index_map.layers[l];
            let in_dim = if l == 0 { spec.input_dim } else { expected_widths[l - 1] };
            if sub.weight.shape() != [rows.len(), in_dim] || sub.bias.shape() != [rows.len()] {
                return Err(Error::shape(format!(
                    "update layer {name} shaped {:?} does not match its index map",
                    sub.weight.shape()
                )));
            }
            let global_cols = global.layer(&name).expect("same layout").weight.cols();
            let (wacc, bacc) = &mut acc[l];
            for (ri, &gr) in rows.iter().enumerate() {
                if l == 0 {
                    for ci in 0..in_dim {
                        wacc.add(gr * global_cols + ci, sub.weight.get2(ri, ci), update.weight);
                    }
                } else {
                    for (ci, &gc) in update.index_map.layers[l - 1].iter().enumerate() {
                        wacc.add(gr * global_cols + gc, sub.weight.get2(ri, ci), update.weight);
                    }
                }
                bacc.add(gr, sub.bias.data()[ri], update.weight);
            }
        }
        let sub_out = update
            .params
            .layer("out")
            .ok_or_else(|| Error::shape("update missing out layer"))?;
        let last = &update.index_map.layers[num_hidden - 1];
        if sub_out.weight.shape() != [spec.num_classes, last.len()] {
            return Err(Error::shape("update output layer does not match its index map"));
        }
        let global_cols = global.layer("out").expect("same layout").weight.cols();
        let (wacc, bacc) = &mut acc[num_hidden];
        for c in 0..spec.num_classes {
            for (ci, &gc) in last.iter().enumerate() {
                wacc.add(c * global_cols + gc, sub_out.weight.get2(c, ci), update.weight);
            }
            bacc.add(c, sub_out.bias.data()[c], update.weight);
        }
    }

    let mut merged = ParameterSet::new();
    for (i, (name, layer)) in global.iter().enumerate() {
        let (wacc, bacc) = &acc[i];
        merged.push(
            name,
            LayerParams { weight: wacc.resolve(&layer.weight), bias: bacc.resolve(&layer.bias) },
        );
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::classifier_forward;

    #[test]
    fn budgets_match_published_lists() {
        let plan = assign_budgets(10, 4, 10);
        let s = 1.0 / 16.0;
        assert_eq!(plan.fractions, vec![0.5, 0.25, 0.125, s, s, s, s, s, s, s]);

        let plan = assign_budgets(10, 4, 40);
        assert_eq!(plan.fractions, vec![s; 10]);
    }

    #[test]
    fn budgets_rho_five_has_ten_entries_from_the_formula() {
        let plan = assign_budgets(10, 4, 5);
        let s = 1.0 / 16.0;
        assert_eq!(
            plan.fractions,
            vec![1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125, s, s, s]
        );
    }

    fn spec_and_global(seed: u64) -> (ClassifierSpec, ParameterSet) {
        let spec = ClassifierSpec::new(3, vec![4, 4], 3);
        let global = spec.init(SeedNode::root(seed));
        (spec, global)
    }

    #[test]
    fn full_width_extraction_is_identity() {
        let (spec, global) = spec_and_global(1);
        for scheme in [ExtractionScheme::Static, ExtractionScheme::Random, ExtractionScheme::Rolling] {
            let (sub, im) = extract_submodel(&global, &spec, 1.0, scheme, 5, SeedNode::root(2)).unwrap();
            assert_eq!(im, IndexMap::full(&spec));
            assert_eq!(sub, global);
        }
    }

    #[test]
    fn rolling_wraps_and_sorts() {
        let spec = ClassifierSpec::new(2, vec![4], 2);
        let global = spec.init(SeedNode::root(3));
        let (_, im) =
            extract_submodel(&global, &spec, 0.5, ExtractionScheme::Rolling, 3, SeedNode::root(0)).unwrap();
        assert_eq!(im.layers[0], vec![0, 3]);
    }

    #[test]
    fn static_takes_the_prefix() {
        let spec = ClassifierSpec::new(2, vec![8], 2);
        let global = spec.init(SeedNode::root(4));
        let (_, im) =
            extract_submodel(&global, &spec, 0.25, ExtractionScheme::Static, 9, SeedNode::root(0)).unwrap();
        assert_eq!(im.layers[0], vec![0, 1]);
    }

    #[test]
    fn random_selection_is_seed_deterministic() {
        let (spec, global) = spec_and_global(8);
        let a = extract_submodel(&global, &spec, 0.5, ExtractionScheme::Random, 2, SeedNode::root(7)).unwrap();
        let b = extract_submodel(&global, &spec, 0.5, ExtractionScheme::Random, 2, SeedNode::root(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extract_then_aggregate_round_trips() {
        let (spec, global) = spec_and_global(11);
        let (sub, im) =
            extract_submodel(&global, &spec, 0.5, ExtractionScheme::Rolling, 7, SeedNode::root(1)).unwrap();
        let merged = aggregate(
            &global,
            &spec,
            &[SubmodelUpdate { params: sub, index_map: im.clone(), weight: 3.0 }],
        )
        .unwrap();
        // Selected coordinates survive up to the w*v/w rounding; unselected
        // coordinates are carried over bitwise.
        assert!(merged.max_abs_diff(&global) <= 1e-12);
        let mut untouched = Vec::new();
        for (l, &k) in spec.hidden_widths.iter().enumerate() {
            for i in 0..k {
                if !im.layers[l].contains(&i) {
                    untouched.push((l, i));
                }
            }
        }
        assert!(!untouched.is_empty());
        for (l, node) in untouched {
            let name = format!("fc{l}");
            assert_eq!(
                merged.layer(&name).unwrap().bias.data()[node],
                global.layer(&name).unwrap().bias.data()[node]
            );
        }
    }

    #[test]
    fn untouched_coordinates_keep_their_value() {
        let (spec, global) = spec_and_global(12);
        let merged = aggregate(&global, &spec, &[]).unwrap();
        assert_eq!(merged, global);
    }

    #[test]
    fn two_clients_average_a_shared_coordinate() {
        let spec = ClassifierSpec::new(2, vec![2], 2);
        let mut a = spec.init(SeedNode::root(1));
        let mut b = a.clone();
        let global = a.clone();
        let im = IndexMap::full(&spec);
        a.layer_mut("fc0").unwrap().weight.set2(0, 0, 2.0);
        b.layer_mut("fc0").unwrap().weight.set2(0, 0, 4.0);
        let merged = aggregate(
            &global,
            &spec,
            &[
                SubmodelUpdate { params: a, index_map: im.clone(), weight: 1.0 },
                SubmodelUpdate { params: b, index_map: im, weight: 1.0 },
            ],
        )
        .unwrap();
        assert_eq!(merged.layer("fc0").unwrap().weight.get2(0, 0), 3.0);
    }

    #[test]
    fn full_width_aggregation_equals_direct_weighted_average() {
        let (spec, global) = spec_and_global(13);
        let weights = [3.0, 1.0, 2.0];
        let mut updates = Vec::new();
        let mut models = Vec::new();
        for (i, &w) in weights.iter().enumerate() {
            let m = spec.init(SeedNode::root(100 + i as u64));
            models.push(m.clone());
            updates.push(SubmodelUpdate { params: m, index_map: IndexMap::full(&spec), weight: w });
        }
        let merged = aggregate(&global, &spec, &updates).unwrap();

        // Independent oracle: plain weighted average of full models.
        let total: f64 = weights.iter().sum();
        for (name, layer) in merged.iter() {
            for i in 0..layer.weight.numel() {
                let mut acc = 0.0;
                for (m, &w) in models.iter().zip(&weights) {
                    acc += w * m.layer(name).unwrap().weight.data()[i];
                }
                assert!((layer.weight.data()[i] - acc / total).abs() <= 1e-12);
            }
            for i in 0..layer.bias.numel() {
                let mut acc = 0.0;
                for (m, &w) in models.iter().zip(&weights) {
                    acc += w * m.layer(name).unwrap().bias.data()[i];
                }
                assert!((layer.bias.data()[i] - acc / total).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn denominator_counts_exactly_the_holders() {
        // Client A holds node 0, client B holds nodes 0 and 1. Node 0 should
        // average over both weights, node 1 should come from B alone.
        let spec = ClassifierSpec::new(2, vec![2], 2);
        let global = spec.init(SeedNode::root(21));
        let im_a = IndexMap { layers: vec![vec![0]] };
        let im_b = IndexMap { layers: vec![vec![0, 1]] };
        let mut sub_a = slice_submodel(&global, &spec, &im_a).unwrap();
        let mut sub_b = slice_submodel(&global, &spec, &im_b).unwrap();
        sub_a.layer_mut("fc0").unwrap().bias.data_mut()[0] = 10.0;
        sub_b.layer_mut("fc0").unwrap().bias.data_mut()[0] = 40.0;
        sub_b.layer_mut("fc0").unwrap().bias.data_mut()[1] = 7.0;
        let merged = aggregate(
            &global,
            &spec,
            &[
                SubmodelUpdate { params: sub_a, index_map: im_a, weight: 1.0 },
                SubmodelUpdate { params: sub_b, index_map: im_b, weight: 3.0 },
            ],
        )
        .unwrap();
        let bias = &merged.layer("fc0").unwrap().bias;
        assert!((bias.data()[0] - (10.0 + 3.0 * 40.0) / 4.0).abs() < 1e-12);
        assert!((bias.data()[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_out_of_range_indices() {
        let (spec, global) = spec_and_global(14);
        let (sub, mut im) =
            extract_submodel(&global, &spec, 0.5, ExtractionScheme::Static, 0, SeedNode::root(1)).unwrap();
        im.layers[0] = vec![0, 99];
        let res = aggregate(
            &global,
            &spec,
            &[SubmodelUpdate { params: sub, index_map: im, weight: 1.0 }],
        );
        assert!(matches!(res, Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn index_map_csv_lists_layer_and_index() {
        let im = IndexMap { layers: vec![vec![0, 3], vec![1]] };
        assert_eq!(im.to_csv(), "layer,index\n0,0\n0,3\n1,1\n");
    }

    #[test]
    fn rolling_covers_every_index_over_k_rounds() {
        let spec = ClassifierSpec::new(2, vec![5, 3], 2);
        let global = spec.init(SeedNode::root(15));
        for (l, &k) in spec.hidden_widths.iter().enumerate() {
            let r = 1.0 / k as f64;
            let mut seen = vec![false; k];
            for t in 0..k as u64 {
                let (_, im) =
                    extract_submodel(&global, &spec, r, ExtractionScheme::Rolling, t, SeedNode::root(0))
                        .unwrap();
                for &idx in &im.layers[l] {
                    seen[idx] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "layer {l} missed an index");
        }
    }

    #[test]
    fn random_covers_every_index_over_many_rounds() {
        let spec = ClassifierSpec::new(2, vec![8], 2);
        let global = spec.init(SeedNode::root(16));
        let mut seen = [false; 8];
        let root = SeedNode::root(33);
        for t in 0..200u64 {
            let (_, im) =
                extract_submodel(&global, &spec, 0.25, ExtractionScheme::Random, t, root.index(t)).unwrap();
            for &idx in &im.layers[0] {
                seen[idx] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sub_forward_matches_zeroed_full_network() {
        // Structural equivalence: zero out every non-selected unit's incoming
        // and outgoing weights and its bias; the full network then computes
        // the sub-network's function.
        let spec = ClassifierSpec::new(3, vec![4, 5], 3);
        let global = spec.init(SeedNode::root(17));
        let (sub, im) =
            extract_submodel(&global, &spec, 0.5, ExtractionScheme::Random, 4, SeedNode::root(5)).unwrap();

        let mut zeroed = global.clone();
        for (l, &k) in spec.hidden_widths.iter().enumerate() {
            let selected = &im.layers[l];
            let name = format!("fc{l}");
            for node in 0..k {
                if selected.contains(&node) {
                    continue;
                }
                let layer = zeroed.layer_mut(&name).unwrap();
                let cols = layer.weight.cols();
                for c in 0..cols {
                    layer.weight.set2(node, c, 0.0);
                }
                layer.bias.data_mut()[node] = 0.0;
                // Outgoing edges live in the next layer's weight columns.
                let next = if l + 1 < spec.hidden_widths.len() {
                    format!("fc{}", l + 1)
                } else {
                    "out".to_string()
                };
                let next_layer = zeroed.layer_mut(&next).unwrap();
                for r in 0..next_layer.weight.rows() {
                    next_layer.weight.set2(r, node, 0.0);
                }
            }
        }

        let x = Tensor::new(vec![2, 3], vec![0.2, -0.4, 0.9, -0.8, 0.1, 0.3]).unwrap();
        let via_sub = classifier_forward(&sub, &spec, &im.widths(), &x).unwrap();
        let via_zeroed = classifier_forward(&zeroed, &spec, &spec.hidden_widths, &x).unwrap();
        for (a, b) in via_sub.data().iter().zip(via_zeroed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
