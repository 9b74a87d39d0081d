//! Server-side data-free distillation.
//!
//! Per round the server trains the conditional generator against the frozen
//! local models (fidelity + transferability + diversity), then distills the
//! locals' per-label weighted ensemble into the global model on synthetic
//! batches from the current generator and, once live, from its EMA copy.
//!
//! Weighting comes in three flavors: dynamic (counts of samples actually
//! touched this round), static (full-shard histograms), and flat averaging.
//! The transferability gate likewise has three variants: the
//! teacher-right/student-wrong indicator, always-on, and plain argmax
//! disagreement.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{
    classifier_logits_on_tape, generator_forward, generator_output_on_tape, register_classifier,
    register_generator, GeneratorParams, GeneratorSpec,
};
use crate::optim::{sgd_step_named, AdamState, BiasCorrection};
use crate::params::ParameterSet;
use crate::seed::SeedNode;
use crate::tensor::Tensor;

/// `N x C` per-client, per-label counts of samples involved in this round's
/// local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStats {
    counts: Vec<Vec<u64>>,
}

impl LabelStats {
    pub fn zeros(num_clients: usize, num_classes: usize) -> Self {
        LabelStats { counts: vec![vec![0; num_classes]; num_clients] }
    }

    pub fn set_row(&mut self, client: usize, row: Vec<u64>) {
        assert_eq!(row.len(), self.counts[client].len());
        self.counts[client] = row;
    }

    pub fn row(&self, client: usize) -> &[u64] {
        &self.counts[client]
    }

    pub fn num_classes(&self) -> usize {
        self.counts.first().map(Vec::len).unwrap_or(0)
    }

    pub fn reset(&mut self) {
        for row in &mut self.counts {
            row.iter_mut().for_each(|c| *c = 0);
        }
    }
}

/// Which counts feed the logit weights and the label distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingVariant {
    /// Counts of data actually involved in this round's training.
    Dynamic,
    /// Full-shard histograms, fixed for the whole run.
    Static,
    /// Flat `1/|S_t|` weights and a uniform label distribution.
    Average,
}

impl std::str::FromStr for WeightingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(WeightingVariant::Dynamic),
            "static" => Ok(WeightingVariant::Static),
            "average" => Ok(WeightingVariant::Average),
            other => Err(Error::contract(format!("unknown weighting variant `{other}`"))),
        }
    }
}

impl WeightingVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightingVariant::Dynamic => "dynamic",
            WeightingVariant::Static => "static",
            WeightingVariant::Average => "average",
        }
    }
}

/// Per-client, per-label logit weights and the label sampling distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    /// `N x C`; rows of clients outside the active set are zero.
    pub tau: Vec<Vec<f64>>,
    /// Length `C`, sums to one (or is all-zero when no label was touched).
    pub p: Vec<f64>,
    pub variant: WeightingVariant,
}

/// Builds the weight table from label statistics.
///
/// For the dynamic variant `stats` holds this round's touched-sample counts;
/// for the static variant the caller passes full-shard histograms instead.
/// The averaging variant ignores the counts.
pub fn weighting_and_label_dist(
    stats: &LabelStats,
    active: &[usize],
    variant: WeightingVariant,
) -> Result<WeightTable> {
    if active.is_empty() {
        return Err(Error::contract("active client set is empty"));
    }
    let n = stats.counts.len();
    let c = stats.num_classes();
    if let Some(&bad) = active.iter().find(|&&i| i >= n) {
        return Err(Error::contract(format!("active client {bad} outside [0, {n})")));
    }
    let mut tau = vec![vec![0.0; c]; n];
    let mut p = vec![0.0; c];
    match variant {
        WeightingVariant::Average => {
            let w = 1.0 / active.len() as f64;
            for &i in active {
                tau[i].iter_mut().for_each(|t| *t = w);
            }
            p.iter_mut().for_each(|q| *q = 1.0 / c as f64);
        }
        WeightingVariant::Dynamic | WeightingVariant::Static => {
            let mut totals = vec![0u64; c];
            for &i in active {
                for (y, &count) in stats.counts[i].iter().enumerate() {
                    totals[y] += count;
                }
            }
            for &i in active {
                for y in 0..c {
                    if totals[y] > 0 {
                        tau[i][y] = stats.counts[i][y] as f64 / totals[y] as f64;
                    }
                }
            }
            let grand: u64 = totals.iter().sum();
            if grand > 0 {
                for y in 0..c {
                    p[y] = totals[y] as f64 / grand as f64;
                }
            }
        }
    }
    Ok(WeightTable { tau, p, variant })
}

/// Draws `count` i.i.d. labels from the categorical distribution `p`.
pub fn sample_labels<R: Rng>(p: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let total: f64 = p.iter().sum();
    if !(total > 0.0) || !total.is_finite() || p.iter().any(|&q| q < 0.0) {
        return Err(Error::contract("label distribution is degenerate"));
    }
    let mut cumulative = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for &q in p {
        acc += q;
        cumulative.push(acc);
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random_range(0.0..total);
        let idx = cumulative.partition_point(|&cx| cx <= u).min(p.len() - 1);
        labels.push(idx);
    }
    Ok(labels)
}

/// `[rows, cols]` of standard-normal draws.
pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite normal draws")
}

/// Which synthetic samples feed the transferability term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateVariant {
    /// Open iff the ensemble classifies the sample as its label and the
    /// global model does not.
    Diamond,
    /// Always open.
    Triangle,
    /// Open iff the two argmax predictions disagree.
    Nabla,
}

impl std::str::FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diamond" => Ok(GateVariant::Diamond),
            "triangle" => Ok(GateVariant::Triangle),
            "nabla" => Ok(GateVariant::Nabla),
            other => Err(Error::contract(format!("unknown gate variant `{other}`"))),
        }
    }
}

impl GateVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateVariant::Diamond => "diamond",
            GateVariant::Triangle => "triangle",
            GateVariant::Nabla => "nabla",
        }
    }
}

/// Per-sample transferability gate. Gradients never flow through this
/// decision; it is recomputed from current model outputs at every step.
pub fn transfer_gate(
    global_logits: &[f64],
    ensemble_logits: &[f64],
    y: usize,
    variant: GateVariant,
) -> bool {
    let g = Tensor::argmax_row(global_logits);
    let e = Tensor::argmax_row(ensemble_logits);
    match variant {
        GateVariant::Diamond => g != y && e == y,
        GateVariant::Triangle => true,
        GateVariant::Nabla => g != e,
    }
}

/// Per-sample weighted sum of local logits: weight of client row `i` on
/// sample `b` is `tau[active[i]][labels[b]]`.
fn ensemble_on_tape(
    tape: &mut Tape,
    local_layers: &[Vec<crate::models::TapeLayer>],
    tau: &[Vec<f64>],
    active: &[usize],
    s: Var,
    labels: &[usize],
) -> Var {
    let mut total: Option<Var> = None;
    for (row, layers) in local_layers.iter().enumerate() {
        let logits = classifier_logits_on_tape(tape, layers, s);
        let weights: Vec<f64> = labels.iter().map(|&y| tau[active[row]][y]).collect();
        let scaled = tape.row_scale(logits, weights);
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    total.expect("at least one local model")
}

/// Plain (no-gradient) ensemble logits for evaluation and gating.
pub fn ensemble_logits(
    locals: &[&ParameterSet],
    tau: &[Vec<f64>],
    active: &[usize],
    s: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    if locals.len() != active.len() {
        return Err(Error::contract("one local model per active client required"));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let layers: Vec<_> = locals.iter().map(|p| register_classifier(&mut tape, p, false)).collect();
    let out = ensemble_on_tape(&mut tape, &layers, tau, active, sv, labels);
    Ok(tape.value(out).clone())
}

/// Mean cross-entropy of the ensemble logits against the sampled labels.
pub fn loss_fidelity(ensemble: &Tensor, labels: &[usize]) -> Result<f64> {
    crate::autodiff::cross_entropy(ensemble, labels)
}

/// `-(1/B) * sum_b gate_b * KL(ensemble_b, global_b)`; zero when every gate
/// is closed, never positive.
pub fn loss_transferability(
    global_logits: &Tensor,
    ensemble_logits: &Tensor,
    labels: &[usize],
    variant: GateVariant,
) -> Result<f64> {
    if global_logits.shape() != ensemble_logits.shape() {
        return Err(Error::shape("logit batches must agree"));
    }
    let gates: Vec<bool> = (0..labels.len())
        .map(|b| transfer_gate(global_logits.row(b), ensemble_logits.row(b), labels[b], variant))
        .collect();
    let mut tape = Tape::new();
    let g = tape.constant(global_logits.clone());
    let e = tape.constant(ensemble_logits.clone());
    let v = gated_kl_mean(&mut tape, e, g, &gates)?;
    Ok(tape.value(v).item())
}

/// `-(1/B) * sum_b gate_b * KL(P_b, Q_b)` on the tape.
fn gated_kl_mean(tape: &mut Tape, p_logits: Var, q_logits: Var, gates: &[bool]) -> Result<Var> {
    let rows = tape.kl_rows(p_logits, q_logits)?;
    let weights: Vec<f64> = gates.iter().map(|&open| if open { 1.0 } else { 0.0 }).collect();
    let gated = tape.row_scale(rows, weights);
    let total = tape.sum_all(gated);
    Ok(tape.scale(total, -1.0 / gates.len() as f64))
}

/// `exp(-sum_{j,k} |s_j - s_k| * |h_j - h_k| / B^2)` over ordered pairs.
pub fn loss_diversity(s: &Tensor, h: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let hv = tape.constant(h.clone());
    let v = diversity_on_tape(&mut tape, sv, hv)?;
    Ok(tape.value(v).item())
}

fn diversity_on_tape(tape: &mut Tape, s: Var, h: Var) -> Result<Var> {
    let b = tape.value(s).rows();
    if b < 2 {
        return Err(Error::contract("diversity loss needs a batch of at least two"));
    }
    if tape.value(h).rows() != b {
        return Err(Error::shape("diversity batches must align"));
    }
    let v = tape.pair_norm_prod_sum(s, h);
    let scaled = tape.scale(v, -1.0 / (b * b) as f64);
    Ok(tape.exp(scaled))
}

/// Weighted sum of the three generator objectives.
pub fn loss_generator(fid: f64, tran: f64, div: f64, beta_tran: f64, beta_div: f64) -> f64 {
    fid + beta_tran * tran + beta_div * div
}

/// Distillation loss `KL(global(s), ensemble(s)) + alpha * KL(global(s~),
/// ensemble(s~))`. Callers without a live EMA batch must pass `alpha = 0`.
pub fn loss_distill(
    global_on_s: &Tensor,
    ensemble_on_s: &Tensor,
    ema_pair: Option<(&Tensor, &Tensor)>,
    alpha: f64,
) -> Result<f64> {
    let kl = crate::autodiff::kl_div(global_on_s, ensemble_on_s)?;
    match ema_pair {
        Some((global_on_st, ensemble_on_st)) => {
            let kl_ema = crate::autodiff::kl_div(global_on_st, ensemble_on_st)?;
            Ok(kl + alpha * kl_ema)
        }
        None => {
            if alpha != 0.0 {
                return Err(Error::contract("alpha must be 0 without an EMA batch"));
            }
            Ok(kl)
        }
    }
}

/// Exponential-moving-average copy of the generator.
///
/// Starts as a zero sentinel: the copy is not usable until the first update,
/// and that first update blends against zeros exactly as written, accepting
/// the initial bias toward zero.
#[derive(Debug, Clone)]
pub struct EmaGenerator {
    pub params: Option<GeneratorParams>,
    pub momentum: f64,
}

impl EmaGenerator {
    pub fn sentinel(momentum: f64) -> Self {
        EmaGenerator { params: None, momentum }
    }

    pub fn is_live(&self) -> bool {
        self.params.is_some()
    }
}

/// `w~ <- lambda * w~ + (1 - lambda) * w`, treating the sentinel as zeros.
pub fn ema_update(ema: &mut EmaGenerator, current: &GeneratorParams, momentum: f64) {
    let mut target = match ema.params.take() {
        Some(p) => p,
        None => GeneratorParams::zeros_like(current),
    };
    for ((_, t), (_, w)) in target.named_tensors_mut().into_iter().zip(current.named_tensors()) {
        for (tv, &wv) in t.data_mut().iter_mut().zip(w.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * wv;
        }
    }
    ema.params = Some(target);
}

/// Output of building the generator objective on a tape.
pub struct GeneratorLossGraph {
    pub tape: Tape,
    pub total: Var,
    pub fid: Var,
    pub tran: Var,
    pub div: Var,
    pub gates: Vec<bool>,
    pub synthetic: Tensor,
}

/// Builds the full generator objective for one `(z, y)` batch. Gates are
/// computed from the current model outputs unless `gates_override` pins them
/// (the finite-difference oracle needs the gate held fixed).
#[allow(clippy::too_many_arguments)]
pub fn build_generator_loss(
    gen: &GeneratorParams,
    gen_spec: &GeneratorSpec,
    locals: &[&ParameterSet],
    global: &ParameterSet,
    wt: &WeightTable,
    active: &[usize],
    z: &Tensor,
    labels: &[usize],
    gate: GateVariant,
    beta_tran: f64,
    beta_div: f64,
    trainable: bool,
    gates_override: Option<&[bool]>,
) -> Result<GeneratorLossGraph> {
    if locals.len() != active.len() {
        return Err(Error::contract("one local model per active client required"));
    }
    let mut tape = Tape::new();
    let tgen = register_generator(&mut tape, gen, trainable);
    let zv = tape.constant(z.clone());
    let (s, h) = generator_output_on_tape(&mut tape, gen_spec, &tgen, zv, labels);

    let local_layers: Vec<_> =
        locals.iter().map(|p| register_classifier(&mut tape, p, false)).collect();
    let ensemble = ensemble_on_tape(&mut tape, &local_layers, &wt.tau, active, s, labels);
    let global_layers = register_classifier(&mut tape, global, false);
    let global_logits = classifier_logits_on_tape(&mut tape, &global_layers, s);

    let gates: Vec<bool> = match gates_override {
        Some(g) => {
            if g.len() != labels.len() {
                return Err(Error::contract("gate override length mismatch"));
            }
            g.to_vec()
        }
        None => {
            let gv = tape.value(global_logits).clone();
            let ev = tape.value(ensemble).clone();
            (0..labels.len())
                .map(|b| transfer_gate(gv.row(b), ev.row(b), labels[b], gate))
                .collect()
        }
    };

    let fid = tape.cross_entropy(ensemble, labels)?;
    let tran = gated_kl_mean(&mut tape, ensemble, global_logits, &gates)?;
    let div = diversity_on_tape(&mut tape, s, h)?;

    let tran_scaled = tape.scale(tran, beta_tran);
    let div_scaled = tape.scale(div, beta_div);
    let partial = tape.add(fid, tran_scaled);
    let total = tape.add(partial, div_scaled);
    let synthetic = tape.value(s).clone();
    Ok(GeneratorLossGraph { tape, total, fid, tran, div, gates, synthetic })
}

/// Output of building the distillation objective on a tape.
pub struct DistillLossGraph {
    pub tape: Tape,
    pub total: Var,
    pub kl: Var,
    pub kl_ema: Option<Var>,
}

/// Builds `KL(global(s), ensemble(s)) + alpha * KL(global(s~), ensemble(s~))`
/// with the global model's parameters trainable.
#[allow(clippy::too_many_arguments)]
pub fn build_distill_loss(
    global: &ParameterSet,
    locals: &[&ParameterSet],
    wt: &WeightTable,
    active: &[usize],
    s: &Tensor,
    labels: &[usize],
    ema_batch: Option<(&Tensor, &[usize])>,
    alpha: f64,
    trainable: bool,
) -> Result<DistillLossGraph> {
    if locals.len() != active.len() {
        return Err(Error::contract("one local model per active client required"));
    }
    if ema_batch.is_none() && alpha != 0.0 {
        return Err(Error::contract("alpha must be 0 while the EMA copy is the zero sentinel"));
    }
    let mut tape = Tape::new();
    let global_layers = register_classifier(&mut tape, global, trainable);
    let local_layers: Vec<_> =
        locals.iter().map(|p| register_classifier(&mut tape, p, false)).collect();

    let sv = tape.constant(s.clone());
    let global_s = classifier_logits_on_tape(&mut tape, &global_layers, sv);
    let ensemble_s = ensemble_on_tape(&mut tape, &local_layers, &wt.tau, active, sv, labels);
    let kl = tape.kl_div(global_s, ensemble_s)?;

    let (total, kl_ema) = match ema_batch {
        Some((s_tilde, labels_tilde)) => {
            let stv = tape.constant(s_tilde.clone());
            let global_st = classifier_logits_on_tape(&mut tape, &global_layers, stv);
            let ensemble_st =
                ensemble_on_tape(&mut tape, &local_layers, &wt.tau, active, stv, labels_tilde);
            let kl_ema = tape.kl_div(global_st, ensemble_st)?;
            let scaled = tape.scale(kl_ema, alpha);
            (tape.add(kl, scaled), Some(kl_ema))
        }
        None => (kl, None),
    };
    Ok(DistillLossGraph { tape, total, kl, kl_ema })
}

/// Knobs of the server phase.
#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    /// Outer iterations per round.
    pub iters: usize,
    /// Generator steps per outer iteration.
    pub gen_iters: usize,
    /// Global-model steps per outer iteration.
    pub model_iters: usize,
    pub gen_lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub model_lr: f64,
    pub beta_tran: f64,
    pub beta_div: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub gate: GateVariant,
    pub bias_correction: BiasCorrection,
    /// Keep the generated batches for a qualitative dump.
    pub collect_synthetic: bool,
}

/// Mean loss components over one server phase.
#[derive(Debug, Clone, Default)]
pub struct ServerStats {
    pub loss_fid: f64,
    pub loss_tran: f64,
    pub loss_div: f64,
    pub loss_kl: f64,
    pub loss_kl_ema: f64,
    pub macs: u64,
    pub synthetic: Vec<(Tensor, Vec<usize>)>,
}

/// One full server phase: alternate generator training and global-model
/// distillation for `iters` outer iterations. Local models stay frozen; the
/// optimizer moments are reset at the top of every outer iteration; the same
/// `(z, y)` batch serves all generator steps of an iteration, and fresh EMA
/// batches are drawn per distillation step once the EMA copy is live.
#[allow(clippy::too_many_arguments)]
pub fn server_update(
    locals: &[&ParameterSet],
    active: &[usize],
    global: &mut ParameterSet,
    gen: &mut GeneratorParams,
    ema: &EmaGenerator,
    gen_spec: &GeneratorSpec,
    wt: &WeightTable,
    cfg: &ServerConfig,
    seed: SeedNode,
) -> Result<ServerStats> {
    let mut stats = ServerStats::default();
    let mut gen_steps = 0u64;
    let mut distill_steps = 0u64;
    let mut ema_steps = 0u64;

    for outer in 0..cfg.iters {
        let outer_seed = seed.index(outer as u64);
        let labels =
            sample_labels(&wt.p, cfg.batch_size, &mut outer_seed.child("labels").rng())?;
        let z = standard_normal(
            cfg.batch_size,
            gen_spec.noise_dim,
            &mut outer_seed.child("noise").rng(),
        );

        let named: Vec<(String, &Tensor)> = gen.named_tensors();
        let mut adam =
            AdamState::for_tensors(&named, cfg.gen_lr, cfg.b1, cfg.b2, cfg.bias_correction);
        drop(named);

        for _ in 0..cfg.gen_iters {
            let mut graph = build_generator_loss(
                gen,
                gen_spec,
                locals,
                global,
                wt,
                active,
                &z,
                &labels,
                cfg.gate,
                cfg.beta_tran,
                cfg.beta_div,
                true,
                None,
            )?;
            stats.loss_fid += graph.tape.value(graph.fid).item();
            stats.loss_tran += graph.tape.value(graph.tran).item();
            stats.loss_div += graph.tape.value(graph.div).item();
            let grads = graph.tape.backward(graph.total)?;
            stats.macs += graph.tape.macs();
            adam.step(gen.named_tensors_mut(), &grads.into_map())?;
            gen_steps += 1;
        }

        for inner in 0..cfg.model_iters {
            let s = generator_forward(gen, gen_spec, &z, &labels)?;
            let ema_data = if let Some(ema_params) = ema.params.as_ref() {
                let node = outer_seed.child("ema").index(inner as u64);
                let labels_tilde =
                    sample_labels(&wt.p, cfg.batch_size, &mut node.child("labels").rng())?;
                let z_tilde = standard_normal(
                    cfg.batch_size,
                    gen_spec.noise_dim,
                    &mut node.child("noise").rng(),
                );
                let s_tilde = generator_forward(ema_params, gen_spec, &z_tilde, &labels_tilde)?;
                Some((s_tilde, labels_tilde))
            } else {
                None
            };
            let alpha = if ema_data.is_some() { cfg.alpha } else { 0.0 };
            let mut graph = build_distill_loss(
                global,
                locals,
                wt,
                active,
                &s,
                &labels,
                ema_data.as_ref().map(|(st, yt)| (st, yt.as_slice())),
                alpha,
                true,
            )?;
            stats.loss_kl += graph.tape.value(graph.kl).item();
            if let Some(kl_ema) = graph.kl_ema {
                stats.loss_kl_ema += graph.tape.value(kl_ema).item();
                ema_steps += 1;
            }
            let grads = graph.tape.backward(graph.total)?;
            stats.macs += graph.tape.macs();
            sgd_step_named(global.named_tensors_mut(), &grads.into_map(), cfg.model_lr)?;
            distill_steps += 1;
        }

        if cfg.collect_synthetic {
            let s = generator_forward(gen, gen_spec, &z, &labels)?;
            stats.synthetic.push((s, labels.clone()));
        }
    }

    if gen_steps > 0 {
        stats.loss_fid /= gen_steps as f64;
        stats.loss_tran /= gen_steps as f64;
        stats.loss_div /= gen_steps as f64;
    }
    if distill_steps > 0 {
        stats.loss_kl /= distill_steps as f64;
    }
    if ema_steps > 0 {
        stats.loss_kl_ema /= ema_steps as f64;
    }
    Ok(stats)
}
