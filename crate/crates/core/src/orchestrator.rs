//! The communication-round loop, metrics, and experiment management.
//!
//! One round: sample active clients, extract per-budget sub-models, run local
//! updates, selectively aggregate, rebuild the weighting table from the label
//! statistics, optionally run the server distillation phase, update the EMA
//! generator, evaluate, and reset the statistics.
//!
//! Every CSV a run emits is byte-reproducible from the master seed. The
//! `seconds` column therefore reports a deterministic simulated cost — the
//! round's multiply-accumulate count at a nominal 1 GMAC/s — while measured
//! wall time stays in [`RoundRecord::wall_secs`] and the run manifest.

use std::time::Instant;

use crate::client::{client_update, ClientConfig};
use crate::data::{
    dirichlet_partition, load_idx, make_blobs_split, split_local_test, Dataset, Partition,
};
use crate::distill::{
    ema_update, server_update, weighting_and_label_dist, EmaGenerator, GateVariant, LabelStats,
    ServerConfig, ServerStats, WeightTable, WeightingVariant,
};
use crate::error::{Error, Result};
use crate::heterofed::{aggregate, assign_budgets, extract_submodel, ExtractionScheme, SubmodelUpdate};
use crate::models::{ClassifierSpec, GeneratorParams, GeneratorSpec, MergeOp};
use crate::optim::BiasCorrection;
use crate::params::ParameterSet;
use crate::seed::SeedNode;
use crate::tensor::Tensor;

/// Sub-model selection scheme, including the homogeneous baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Every client trains the full model; aggregation reduces to a plain
    /// weighted average.
    FedAvg,
    Static,
    Random,
    Rolling,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Scheme::FedAvg),
            "static" => Ok(Scheme::Static),
            "random" => Ok(Scheme::Random),
            "rolling" => Ok(Scheme::Rolling),
            other => Err(Error::contract(format!("unknown scheme `{other}`"))),
        }
    }
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::FedAvg => "fedavg",
            Scheme::Static => "static",
            Scheme::Random => "random",
            Scheme::Rolling => "rolling",
        }
    }

    fn extraction(&self) -> ExtractionScheme {
        match self {
            Scheme::FedAvg | Scheme::Static => ExtractionScheme::Static,
            Scheme::Random => ExtractionScheme::Random,
            Scheme::Rolling => ExtractionScheme::Rolling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distiller {
    None,
    Dfrd,
}

impl std::str::FromStr for Distiller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Distiller::None),
            "dfrd" => Ok(Distiller::Dfrd),
            other => Err(Error::contract(format!("unknown distiller `{other}`"))),
        }
    }
}

impl Distiller {
    pub fn as_str(&self) -> &'static str {
        match self {
            Distiller::None => "none",
            Distiller::Dfrd => "dfrd",
        }
    }
}

/// Whether distillation fine-tunes the aggregated model or replaces
/// aggregation entirely, distilling into a randomly initialized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    FineTune,
    DataFree,
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(DistillMode::FineTune),
            "datafree" => Ok(DistillMode::DataFree),
            other => Err(Error::contract(format!("unknown distill mode `{other}`"))),
        }
    }
}

impl DistillMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMode::FineTune => "finetune",
            DistillMode::DataFree => "datafree",
        }
    }
}

/// When the data-free mode re-initializes the global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinitPolicy {
    PerRound,
    Once,
}

impl std::str::FromStr for ReinitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perround" => Ok(ReinitPolicy::PerRound),
            "once" => Ok(ReinitPolicy::Once),
            other => Err(Error::contract(format!("unknown reinit policy `{other}`"))),
        }
    }
}

impl ReinitPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReinitPolicy::PerRound => "perround",
            ReinitPolicy::Once => "once",
        }
    }
}

/// Dataset source.
#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Blobs { classes: usize, dim: usize, per_class: usize, test_per_class: usize, spread: f64 },
    Idx { images: String, labels: String, test_images: String, test_labels: String },
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub num_clients: usize,
    pub active_per_round: usize,
    pub rounds: usize,
    pub omega: f64,
    pub sigma: u32,
    pub rho: u32,
    pub scheme: Scheme,
    pub hidden_widths: Vec<usize>,
    pub client_lr: f64,
    pub client_steps: usize,
    pub batch_size: usize,
    pub with_replacement: bool,
    pub gen_hidden: Vec<usize>,
    pub noise_dim: usize,
    pub merge: MergeOp,
    pub distiller: Distiller,
    pub mode: DistillMode,
    pub reinit: ReinitPolicy,
    pub gate: GateVariant,
    pub weighting: WeightingVariant,
    pub ema_enabled: bool,
    pub lambda: f64,
    pub alpha: f64,
    pub beta_tran: f64,
    pub beta_div: f64,
    pub iters: usize,
    pub gen_iters: usize,
    pub model_iters: usize,
    pub gen_lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub model_lr: f64,
    pub textbook_adam: bool,
    pub dump_synthetic: bool,
    pub save_checkpoint: bool,
    pub save_partition: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::Blobs { classes: 8, dim: 16, per_class: 400, test_per_class: 200, spread: 0.22 },
            num_clients: 10,
            active_per_round: 10,
            rounds: 30,
            omega: 0.1,
            sigma: 4,
            rho: 10,
            scheme: Scheme::Rolling,
            hidden_widths: vec![32, 32],
            client_lr: 0.05,
            client_steps: 20,
            batch_size: 64,
            with_replacement: true,
            gen_hidden: vec![32, 32, 32, 32],
            noise_dim: 16,
            merge: MergeOp::Mul,
            distiller: Distiller::Dfrd,
            mode: DistillMode::FineTune,
            reinit: ReinitPolicy::PerRound,
            gate: GateVariant::Diamond,
            weighting: WeightingVariant::Dynamic,
            ema_enabled: true,
            lambda: 0.5,
            alpha: 0.5,
            beta_tran: 1.0,
            beta_div: 1.0,
            iters: 10,
            gen_iters: 5,
            model_iters: 2,
            gen_lr: 2e-4,
            b1: 0.5,
            b2: 0.999,
            model_lr: 0.07,
            textbook_adam: false,
            dump_synthetic: false,
            save_checkpoint: false,
            save_partition: false,
            seed: 17,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::contract("rounds must be >= 1"));
        }
        if self.num_clients < 1 {
            return Err(Error::contract("need at least one client"));
        }
        if self.active_per_round < 1 || self.active_per_round > self.num_clients {
            return Err(Error::contract(format!(
                "active clients per round must lie in [1, {}]",
                self.num_clients
            )));
        }
        if !(self.omega > 0.0) {
            return Err(Error::contract("omega must be positive"));
        }
        if self.sigma < 1 || self.rho < 1 {
            return Err(Error::contract("sigma and rho must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        if self.hidden_widths.is_empty() || self.gen_hidden.is_empty() {
            return Err(Error::contract("hidden widths must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.lambda) && self.lambda != 0.0 {
            return Err(Error::contract("lambda must lie in [0, 1)"));
        }
        if self.alpha < 0.0 {
            return Err(Error::contract("alpha must be non-negative"));
        }
        Ok(())
    }

    fn bias_correction(&self) -> BiasCorrection {
        if self.textbook_adam {
            BiasCorrection::Stepwise
        } else {
            BiasCorrection::Fixed
        }
    }
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub g_acc: f64,
    pub l_acc: f64,
    pub loss_fid: f64,
    pub loss_tran: f64,
    pub loss_div: f64,
    pub loss_kl: f64,
    pub loss_kl_ema: f64,
    /// Deterministic simulated cost: multiply-accumulates at 1 GMAC/s.
    pub seconds: f64,
    /// Measured wall time; reported in the manifest, never in the CSV.
    pub wall_secs: f64,
}

pub const CSV_HEADER: &str =
    "round,g_acc,l_acc,loss_fid,loss_tran,loss_div,loss_kl,loss_kl_ema,seconds";

/// Renders round records into the run CSV (deterministic for a fixed seed).
pub fn render_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.round,
            r.g_acc,
            r.l_acc,
            r.loss_fid,
            r.loss_tran,
            r.loss_div,
            r.loss_kl,
            r.loss_kl_ema,
            r.seconds
        ));
    }
    out
}

/// Best-round summary of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub top_round: u64,
    pub top_g_acc: f64,
    pub l_acc_at_top: f64,
}

impl RunSummary {
    /// Human-readable form; the local accuracy rides in round brackets.
    pub fn line(&self) -> String {
        format!(
            "seed={} top_round={} g_acc={:.4} ({:.4})",
            self.seed, self.top_round, self.top_g_acc, self.l_acc_at_top
        )
    }
}

/// Everything a finished run hands back to the caller.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub final_global: ParameterSet,
    /// Training partition, exported when `output.partition` is set.
    pub train_partition: Partition,
    /// Synthetic batches collected per round when dumping is enabled.
    pub synthetic: Vec<(u64, Tensor, Vec<usize>)>,
    pub wall_secs: f64,
}

impl RunOutput {
    pub fn csv(&self) -> String {
        render_csv(&self.records)
    }
}

/// Sample mean and (n-1)-normalized standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Fraction of `test` samples whose argmax logit (ties to the lowest class
/// id) matches the label.
pub fn evaluate_global(global: &ParameterSet, spec: &ClassifierSpec, test: &Dataset) -> Result<f64> {
    evaluate_on_indices(global, spec, test, None)
}

fn evaluate_on_indices(
    params: &ParameterSet,
    spec: &ClassifierSpec,
    test: &Dataset,
    indices: Option<&[usize]>,
) -> Result<f64> {
    let owned: Vec<usize>;
    let idx: &[usize] = match indices {
        Some(i) => i,
        None => {
            owned = (0..test.len()).collect();
            &owned
        }
    };
    if idx.is_empty() {
        return Ok(0.0);
    }
    let widths: Vec<usize> = (0..spec.hidden_widths.len())
        .map(|l| params.layer(&format!("fc{l}")).map(|p| p.weight.rows()).unwrap_or(0))
        .collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let x = test.gather_features(chunk);
        let logits = crate::models::classifier_forward(params, spec, &widths, &x)?;
        for (row, &i) in chunk.iter().enumerate() {
            if Tensor::argmax_row(logits.row(row)) == test.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Unweighted mean over clients of each local sub-model's accuracy on its
/// test shard.
pub fn evaluate_local(
    locals: &[(ParameterSet, Vec<usize>)],
    spec: &ClassifierSpec,
    test: &Dataset,
    partition: &Partition,
) -> Result<f64> {
    let mut total = 0.0;
    for (client, (params, _widths)) in locals.iter().enumerate() {
        total += evaluate_on_indices(params, spec, test, Some(partition.shard(client)))?;
    }
    Ok(total / locals.len() as f64)
}

/// Live state of one experiment.
pub struct Simulation {
    pub cfg: ExperimentConfig,
    pub cls_spec: ClassifierSpec,
    pub gen_spec: GeneratorSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub train_partition: Partition,
    pub test_partition: Partition,
    static_stats: LabelStats,
    budgets: Vec<f64>,
    pub global: ParameterSet,
    pub gen: GeneratorParams,
    pub ema: EmaGenerator,
    label_stats: LabelStats,
    root: SeedNode,
    round: u64,
    pub synthetic: Vec<(u64, Tensor, Vec<usize>)>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = SeedNode::root(cfg.seed);

        let (train, test) = match &cfg.data {
            DataConfig::Blobs { classes, dim, per_class, test_per_class, spread } => {
                let centers = root.child("data").child("centers");
                let train = make_blobs_split(
                    *classes,
                    *dim,
                    *per_class,
                    *spread,
                    centers,
                    root.child("data").child("train"),
                )?;
                let test = make_blobs_split(
                    *classes,
                    *dim,
                    *test_per_class,
                    *spread,
                    centers,
                    root.child("data").child("test"),
                )?;
                (train, test)
            }
            DataConfig::Idx { images, labels, test_images, test_labels } => {
                let train = load_idx(std::path::Path::new(images), std::path::Path::new(labels))?;
                let test =
                    load_idx(std::path::Path::new(test_images), std::path::Path::new(test_labels))?;
                if train.num_classes != test.num_classes || train.dim() != test.dim() {
                    return Err(Error::contract("train/test sets disagree on classes or dim"));
                }
                (train, test)
            }
        };

        if test.len() < cfg.num_clients {
            return Err(Error::contract("test set smaller than the client count"));
        }

        let cls_spec = ClassifierSpec::new(train.dim(), cfg.hidden_widths.clone(), train.num_classes);
        let gen_spec = GeneratorSpec {
            noise_dim: cfg.noise_dim,
            hidden_widths: cfg.gen_hidden.clone(),
            output_dim: train.dim(),
            num_classes: train.num_classes,
            merge: cfg.merge,
        };

        let train_partition =
            dirichlet_partition(&train, cfg.num_clients, cfg.omega, root.child("partition"))?;
        let test_partition = split_local_test(&test, cfg.num_clients, root.child("testsplit"))?;

        let mut static_stats = LabelStats::zeros(cfg.num_clients, train.num_classes);
        for i in 0..cfg.num_clients {
            static_stats.set_row(i, train.label_histogram(train_partition.shard(i)));
        }

        let budgets = if cfg.scheme == Scheme::FedAvg {
            vec![1.0; cfg.num_clients]
        } else {
            assign_budgets(cfg.num_clients, cfg.sigma, cfg.rho).fractions
        };

        let global = cls_spec.init(root.child("init").child("global"));
        let gen = gen_spec.init(root.child("init").child("generator"));
        let ema = EmaGenerator::sentinel(cfg.lambda);
        let label_stats = LabelStats::zeros(cfg.num_clients, train.num_classes);

        Ok(Simulation {
            cfg,
            cls_spec,
            gen_spec,
            train,
            test,
            train_partition,
            test_partition,
            static_stats,
            budgets,
            global,
            gen,
            ema,
            label_stats,
            root,
            round: 0,
            synthetic: Vec::new(),
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    fn round_seed(&self, t: u64) -> SeedNode {
        self.root.child("round").index(t)
    }

    /// Uniform sample without replacement of `count` clients from
    /// `eligible`, sorted ascending.
    fn sample_active(&self, t: u64, eligible: &[usize]) -> Vec<usize> {
        let count = self.cfg.active_per_round.min(eligible.len());
        let mut rng = self.round_seed(t).child("sample").rng();
        let picked = rand::seq::index::sample(&mut rng, eligible.len(), count);
        let mut active: Vec<usize> = picked.iter().map(|i| eligible[i]).collect();
        active.sort_unstable();
        active
    }

    /// Executes one communication round and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let t = self.round;
        let seed = self.round_seed(t);
        let mut macs: u64 = 0;

        let eligible: Vec<usize> = (0..self.cfg.num_clients)
            .filter(|&i| !self.train_partition.shard(i).is_empty())
            .collect();

        let mut stats = ServerStats::default();
        if eligible.is_empty() {
            log::warn!("round {t}: every sampled client holds an empty shard; skipping round");
        } else {
            let active = self.sample_active(t, &eligible);

            // Local phase.
            let client_cfg = ClientConfig {
                lr: self.cfg.client_lr,
                steps: self.cfg.client_steps,
                batch_size: self.cfg.batch_size,
                with_replacement: self.cfg.with_replacement,
            };
            let mut updates: Vec<SubmodelUpdate> = Vec::with_capacity(active.len());
            let mut locals: Vec<ParameterSet> = Vec::with_capacity(active.len());
            let mut kept: Vec<usize> = Vec::with_capacity(active.len());
            for &i in &active {
                let (sub, index_map) = extract_submodel(
                    &self.global,
                    &self.cls_spec,
                    self.budgets[i],
                    self.cfg.scheme.extraction(),
                    t,
                    seed.child("extract").index(i as u64),
                )?;
                let outcome = client_update(
                    sub,
                    &self.cls_spec,
                    &index_map.widths(),
                    &self.train,
                    self.train_partition.shard(i),
                    &client_cfg,
                    seed.child("client").index(i as u64),
                )?;
                let Some(update) = outcome else { continue };
                macs += update.macs;
                self.label_stats.set_row(i, update.labels_touched.counts.clone());
                locals.push(update.params.clone());
                kept.push(i);
                updates.push(SubmodelUpdate {
                    params: update.params,
                    index_map,
                    weight: self.train_partition.shard(i).len() as f64,
                });
            }

            // Server phase.
            let distilling = self.cfg.distiller == Distiller::Dfrd;
            match (distilling, self.cfg.mode) {
                (true, DistillMode::DataFree) => {
                    if self.cfg.reinit == ReinitPolicy::PerRound {
                        self.global = self.cls_spec.init(seed.child("reinit"));
                    }
                }
                _ => {
                    self.global = aggregate(&self.global, &self.cls_spec, &updates)?;
                }
            }

            if distilling && !kept.is_empty() {
                let wt = self.weight_table(&kept)?;
                if wt.p.iter().sum::<f64>() > 0.0 {
                    let refs: Vec<&ParameterSet> = locals.iter().collect();
                    let server_cfg = ServerConfig {
                        iters: self.cfg.iters,
                        gen_iters: self.cfg.gen_iters,
                        model_iters: self.cfg.model_iters,
                        gen_lr: self.cfg.gen_lr,
                        b1: self.cfg.b1,
                        b2: self.cfg.b2,
                        model_lr: self.cfg.model_lr,
                        beta_tran: self.cfg.beta_tran,
                        beta_div: self.cfg.beta_div,
                        alpha: self.cfg.alpha,
                        batch_size: self.cfg.batch_size,
                        gate: self.cfg.gate,
                        bias_correction: self.cfg.bias_correction(),
                        collect_synthetic: self.cfg.dump_synthetic,
                    };
                    stats = server_update(
                        &refs,
                        &kept,
                        &mut self.global,
                        &mut self.gen,
                        &self.ema,
                        &self.gen_spec,
                        &wt,
                        &server_cfg,
                        seed.child("server"),
                    )?;
                    macs += stats.macs;
                    for (s, y) in stats.synthetic.drain(..) {
                        self.synthetic.push((t, s, y));
                    }
                } else {
                    log::warn!("round {t}: no labels were touched; skipping distillation");
                }
                // With the EMA ablated the copy stays the zero sentinel and
                // every distillation pass runs with alpha = 0.
                if self.cfg.ema_enabled {
                    ema_update(&mut self.ema, &self.gen, self.cfg.lambda);
                }
            }
        }

        // Evaluation on the frozen post-server models.
        let g_acc = evaluate_global(&self.global, &self.cls_spec, &self.test)?;
        let mut locals_eval = Vec::with_capacity(self.cfg.num_clients);
        for i in 0..self.cfg.num_clients {
            let (sub, im) = extract_submodel(
                &self.global,
                &self.cls_spec,
                self.budgets[i],
                self.cfg.scheme.extraction(),
                t,
                seed.child("extract").index(i as u64),
            )?;
            locals_eval.push((sub, im.widths()));
        }
        let l_acc = evaluate_local(&locals_eval, &self.cls_spec, &self.test, &self.test_partition)?;

        self.label_stats.reset();
        self.round += 1;

        Ok(RoundRecord {
            round: t,
            g_acc,
            l_acc,
            loss_fid: stats.loss_fid,
            loss_tran: stats.loss_tran,
            loss_div: stats.loss_div,
            loss_kl: stats.loss_kl,
            loss_kl_ema: stats.loss_kl_ema,
            seconds: macs as f64 / 1e9,
            wall_secs: started.elapsed().as_secs_f64(),
        })
    }

    fn weight_table(&self, active: &[usize]) -> Result<WeightTable> {
        match self.cfg.weighting {
            WeightingVariant::Dynamic => {
                weighting_and_label_dist(&self.label_stats, active, WeightingVariant::Dynamic)
            }
            WeightingVariant::Static => {
                weighting_and_label_dist(&self.static_stats, active, WeightingVariant::Static)
            }
            WeightingVariant::Average => {
                weighting_and_label_dist(&self.static_stats, active, WeightingVariant::Average)
            }
        }
    }
}

/// Runs a full experiment for the config's seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut sim = Simulation::new(cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        records.push(sim.run_round()?);
    }
    let mut top = 0usize;
    for (i, r) in records.iter().enumerate() {
        if r.g_acc > records[top].g_acc {
            top = i;
        }
    }
    let summary = RunSummary {
        seed: cfg.seed,
        top_round: records[top].round,
        top_g_acc: records[top].g_acc,
        l_acc_at_top: records[top].l_acc,
    };
    Ok(RunOutput {
        records,
        summary,
        final_global: sim.global.clone(),
        train_partition: sim.train_partition.clone(),
        synthetic: std::mem::take(&mut sim.synthetic),
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    fn quick_cfg() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig::Blobs { classes: 4, dim: 4, per_class: 30, test_per_class: 10, spread: 0.15 },
            num_clients: 4,
            active_per_round: 4,
            rounds: 2,
            omega: 0.5,
            hidden_widths: vec![8],
            gen_hidden: vec![8],
            noise_dim: 4,
            client_steps: 4,
            batch_size: 8,
            iters: 2,
            gen_iters: 2,
            model_iters: 1,
            seed: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = quick_cfg();
        cfg.active_per_round = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.rounds = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.omega = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_round_runs_and_records() {
        let mut cfg = quick_cfg();
        cfg.rounds = 1;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert!(r.g_acc >= 0.0 && r.g_acc <= 1.0);
        assert!(r.l_acc >= 0.0 && r.l_acc <= 1.0);
        assert_eq!(out.summary.top_round, 0);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = quick_cfg();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.final_global, b.final_global);
        // The deterministic cost column must agree too.
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.seconds, y.seconds);
        }
    }

    #[test]
    fn full_participation_is_deterministic_in_membership() {
        let cfg = quick_cfg();
        let sim = Simulation::new(cfg).unwrap();
        let eligible: Vec<usize> = (0..4).collect();
        assert_eq!(sim.sample_active(3, &eligible), eligible);
    }

    #[test]
    fn fedavg_reduction_matches_plain_weighted_average_loop() {
        // distiller off, scheme fedavg: the orchestrator must coincide with a
        // hand-rolled FedAvg loop built from the same client updates.
        let mut cfg = quick_cfg();
        cfg.distiller = Distiller::None;
        cfg.scheme = Scheme::FedAvg;
        cfg.rounds = 2;
        let out = run_experiment(&cfg).unwrap();

        // Oracle loop.
        let root = SeedNode::root(cfg.seed);
        let (classes, dim, per_class, test_per_class, spread) = match cfg.data {
            DataConfig::Blobs { classes, dim, per_class, test_per_class, spread } => {
                (classes, dim, per_class, test_per_class, spread)
            }
            _ => unreachable!(),
        };
        let centers = root.child("data").child("centers");
        let train = crate::data::make_blobs_split(
            classes, dim, per_class, spread, centers, root.child("data").child("train"),
        )
        .unwrap();
        let _test = crate::data::make_blobs_split(
            classes, dim, test_per_class, spread, centers, root.child("data").child("test"),
        )
        .unwrap();
        let spec = ClassifierSpec::new(dim, cfg.hidden_widths.clone(), classes);
        let partition =
            crate::data::dirichlet_partition(&train, cfg.num_clients, cfg.omega, root.child("partition"))
                .unwrap();
        let mut global = spec.init(root.child("init").child("global"));
        let ccfg = ClientConfig {
            lr: cfg.client_lr,
            steps: cfg.client_steps,
            batch_size: cfg.batch_size,
            with_replacement: cfg.with_replacement,
        };
        for t in 0..cfg.rounds as u64 {
            let seed = root.child("round").index(t);
            let mut sum: Option<ParameterSet> = None;
            let mut total_weight = 0.0;
            for i in 0..cfg.num_clients {
                if partition.shard(i).is_empty() {
                    continue;
                }
                let update = client_update(
                    global.clone(),
                    &spec,
                    &spec.hidden_widths,
                    &train,
                    partition.shard(i),
                    &ccfg,
                    seed.child("client").index(i as u64),
                )
                .unwrap()
                .unwrap();
                let w = partition.shard(i).len() as f64;
                total_weight += w;
                sum = Some(match sum {
                    None => {
                        let mut acc = update.params.clone();
                        for (_, t) in acc.named_tensors_mut() {
                            t.data_mut().iter_mut().for_each(|v| *v *= w);
                        }
                        acc
                    }
                    Some(mut acc) => {
                        for ((_, a), (_, b)) in
                            acc.named_tensors_mut().into_iter().zip(update.params.named_tensors())
                        {
                            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += w * y;
                            }
                        }
                        acc
                    }
                });
            }
            global = sum.unwrap();
            for (_, t) in global.named_tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v /= total_weight);
            }
        }
        assert!(out.final_global.max_abs_diff(&global) <= 1e-12);
    }

    #[test]
    fn empty_weight_model_predicts_class_zero() {
        let spec = ClassifierSpec::new(2, vec![3], 3);
        let mut params = ParameterSet::new();
        params.push(
            "fc0",
            crate::params::LayerParams {
                weight: Tensor::zeros(vec![3, 2]),
                bias: Tensor::zeros(vec![3]),
            },
        );
        params.push(
            "out",
            crate::params::LayerParams {
                weight: Tensor::zeros(vec![3, 3]),
                bias: Tensor::zeros(vec![3]),
            },
        );
        let test = make_blobs(3, 2, 10, 0.1, 3).unwrap();
        let acc = evaluate_global(&params, &spec, &test).unwrap();
        let prevalence =
            test.labels.iter().filter(|&&y| y == 0).count() as f64 / test.len() as f64;
        assert_eq!(acc, prevalence);
    }

    #[test]
    fn random_classifier_scores_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..8 {
            let spec = ClassifierSpec::new(4, vec![16], 10);
            let params = spec.init(SeedNode::root(1000 + seed));
            let test = make_blobs(10, 4, 100, 0.3, 77).unwrap();
            accs.push(evaluate_global(&params, &spec, &test).unwrap());
        }
        let (mean, _) = mean_std(&accs);
        assert!((mean - 0.1).abs() < 0.05, "mean accuracy {mean}");
    }

    #[test]
    fn overfit_model_reaches_perfect_train_accuracy() {
        let spec = ClassifierSpec::new(2, vec![16], 3);
        let train = make_blobs(3, 2, 15, 0.05, 9).unwrap();
        let mut params = spec.init(SeedNode::root(8));
        let shard: Vec<usize> = (0..train.len()).collect();
        let ccfg = ClientConfig { lr: 0.3, steps: 300, batch_size: 32, with_replacement: true };
        let update = client_update(params.clone(), &spec, &spec.hidden_widths, &train, &shard, &ccfg, SeedNode::root(3))
            .unwrap()
            .unwrap();
        params = update.params;
        let acc = evaluate_global(&params, &spec, &train).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn mean_std_fixture() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn local_evaluation_mirrors_global_on_shards() {
        // A model that is perfect on the test set scores 1.0 on every shard;
        // an all-zero model scores each shard's class-0 prevalence.
        let spec = ClassifierSpec::new(2, vec![16], 3);
        let test = make_blobs(3, 2, 12, 0.05, 41).unwrap();
        let train_cfg = ClientConfig { lr: 0.3, steps: 300, batch_size: 32, with_replacement: true };
        let all: Vec<usize> = (0..test.len()).collect();
        let perfect = client_update(
            spec.init(SeedNode::root(4)),
            &spec,
            &spec.hidden_widths,
            &test,
            &all,
            &train_cfg,
            SeedNode::root(5),
        )
        .unwrap()
        .unwrap()
        .params;
        assert_eq!(evaluate_global(&perfect, &spec, &test).unwrap(), 1.0);

        let partition = crate::data::split_local_test(&test, 4, SeedNode::root(6)).unwrap();
        let locals: Vec<(ParameterSet, Vec<usize>)> =
            (0..4).map(|_| (perfect.clone(), spec.hidden_widths.clone())).collect();
        assert_eq!(evaluate_local(&locals, &spec, &test, &partition).unwrap(), 1.0);

        let mut zero = ParameterSet::new();
        zero.push(
            "fc0",
            crate::params::LayerParams {
                weight: Tensor::zeros(vec![16, 2]),
                bias: Tensor::zeros(vec![16]),
            },
        );
        zero.push(
            "out",
            crate::params::LayerParams {
                weight: Tensor::zeros(vec![3, 16]),
                bias: Tensor::zeros(vec![3]),
            },
        );
        let locals: Vec<(ParameterSet, Vec<usize>)> =
            (0..4).map(|_| (zero.clone(), spec.hidden_widths.clone())).collect();
        let expect: f64 = (0..4)
            .map(|i| {
                let shard = partition.shard(i);
                shard.iter().filter(|&&s| test.labels[s] == 0).count() as f64 / shard.len() as f64
            })
            .sum::<f64>()
            / 4.0;
        assert_eq!(evaluate_local(&locals, &spec, &test, &partition).unwrap(), expect);
    }

    #[test]
    fn partial_training_baseline_reduces_to_extract_train_aggregate() {
        // distiller off: a round is exactly extract -> local SGD -> selective
        // aggregation, nothing else.
        let mut cfg = quick_cfg();
        cfg.distiller = Distiller::None;
        cfg.scheme = Scheme::Rolling;
        cfg.sigma = 2;
        cfg.rho = 4;
        let out = run_experiment(&cfg).unwrap();

        let root = SeedNode::root(cfg.seed);
        let (classes, dim, per_class, test_per_class, spread) = match cfg.data {
            DataConfig::Blobs { classes, dim, per_class, test_per_class, spread } => {
                (classes, dim, per_class, test_per_class, spread)
            }
            _ => unreachable!(),
        };
        let centers = root.child("data").child("centers");
        let train = crate::data::make_blobs_split(
            classes, dim, per_class, spread, centers, root.child("data").child("train"),
        )
        .unwrap();
        let _ = test_per_class;
        let spec = ClassifierSpec::new(dim, cfg.hidden_widths.clone(), classes);
        let partition = crate::data::dirichlet_partition(
            &train,
            cfg.num_clients,
            cfg.omega,
            root.child("partition"),
        )
        .unwrap();
        let budgets = crate::heterofed::assign_budgets(cfg.num_clients, cfg.sigma, cfg.rho);
        let mut global = spec.init(root.child("init").child("global"));
        let ccfg = ClientConfig {
            lr: cfg.client_lr,
            steps: cfg.client_steps,
            batch_size: cfg.batch_size,
            with_replacement: cfg.with_replacement,
        };
        for t in 0..cfg.rounds as u64 {
            let seed = root.child("round").index(t);
            let mut updates = Vec::new();
            for i in 0..cfg.num_clients {
                if partition.shard(i).is_empty() {
                    continue;
                }
                let (sub, im) = crate::heterofed::extract_submodel(
                    &global,
                    &spec,
                    budgets.fractions[i],
                    crate::heterofed::ExtractionScheme::Rolling,
                    t,
                    seed.child("extract").index(i as u64),
                )
                .unwrap();
                let update = client_update(
                    sub,
                    &spec,
                    &im.widths(),
                    &train,
                    partition.shard(i),
                    &ccfg,
                    seed.child("client").index(i as u64),
                )
                .unwrap()
                .unwrap();
                updates.push(crate::heterofed::SubmodelUpdate {
                    params: update.params,
                    index_map: im,
                    weight: partition.shard(i).len() as f64,
                });
            }
            global = crate::heterofed::aggregate(&global, &spec, &updates).unwrap();
        }
        assert_eq!(out.final_global, global);
    }

    #[test]
    fn csv_has_t_rows_and_stable_header() {
        let cfg = quick_cfg();
        let out = run_experiment(&cfg).unwrap();
        let csv = out.csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + cfg.rounds);
    }

    #[test]
    fn datafree_mode_runs() {
        let mut cfg = quick_cfg();
        cfg.mode = DistillMode::DataFree;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.records.len(), 2);
    }

    #[test]
    fn synthetic_dump_collects_batches() {
        let mut cfg = quick_cfg();
        cfg.dump_synthetic = true;
        cfg.rounds = 1;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.synthetic.len(), cfg.iters);
        let (_, s, y) = &out.synthetic[0];
        assert_eq!(s.rows(), y.len());
    }
}
