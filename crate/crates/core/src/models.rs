//! Dense slimmable classifiers and the conditional generator.
//!
//! Classifiers are plain MLPs with ReLU hidden layers and raw logit outputs.
//! Width-restricted sub-models keep the input features and the class logits
//! intact and slim only the hidden layers. The generator maps a merged
//! noise/label input through an MLP onto a tanh output, so synthetic samples
//! always live in `[-1, 1]^D` — the same range the datasets are normalized to.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{LayerParams, ParameterSet};
use crate::seed::SeedNode;
use crate::tensor::{matmul_nt, Tensor};

/// Architecture of the global classifier at full width.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ClassifierSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Self {
        assert!(input_dim >= 1 && num_classes >= 2 && !hidden_widths.is_empty());
        ClassifierSpec { input_dim, hidden_widths, num_classes }
    }

    /// Hidden node counts at width fraction `r`: `ceil(r * K_l)`, at least 1.
    pub fn slimmed_widths(&self, r: f64) -> Vec<usize> {
        self.hidden_widths
            .iter()
            .map(|&k| (((r * k as f64).ceil()) as usize).clamp(1, k))
            .collect()
    }

    /// Layer names in forward order: `fc0..fcL-1`, then `out`.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            (0..self.hidden_widths.len()).map(|i| format!("fc{i}")).collect();
        names.push("out".to_string());
        names
    }

    /// Fresh full-width parameters, Xavier-uniform weights and zero biases.
    pub fn init(&self, seed: SeedNode) -> ParameterSet {
        init_mlp(&self.layer_dims(&self.hidden_widths), &self.layer_names(), seed)
    }

    fn layer_dims(&self, widths: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in widths {
            dims.push((w, prev));
            prev = w;
        }
        dims.push((self.num_classes, prev));
        dims
    }
}

fn init_mlp(dims: &[(usize, usize)], names: &[String], seed: SeedNode) -> ParameterSet {
    let mut set = ParameterSet::new();
    for (i, ((out, inp), name)) in dims.iter().zip(names).enumerate() {
        let mut rng = seed.index(i as u64).rng();
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let data: Vec<f64> = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
        set.push(
            name.clone(),
            LayerParams {
                weight: Tensor::new(vec![*out, *inp], data).expect("finite init"),
                bias: Tensor::zeros(vec![*out]),
            },
        );
    }
    set
}

/// Checks that `params` realizes this spec at the given hidden widths.
fn validate_classifier(params: &ParameterSet, spec: &ClassifierSpec, widths: &[usize], input_dim: usize) -> Result<()> {
    if widths.len() != spec.hidden_widths.len() {
        return Err(Error::shape("hidden width count mismatch"));
    }
    for (w, full) in widths.iter().zip(&spec.hidden_widths) {
        if *w == 0 || w > full {
            return Err(Error::shape(format!("width {w} outside (0, {full}]")));
        }
    }
    let mut prev = input_dim;
    for (i, &w) in widths.iter().enumerate() {
        let layer = params
            .layer(&format!("fc{i}"))
            .ok_or_else(|| Error::shape(format!("missing layer fc{i}")))?;
        if layer.weight.shape() != [w, prev] || layer.bias.shape() != [w] {
            return Err(Error::shape(format!("layer fc{i} shaped {:?}", layer.weight.shape())));
        }
        prev = w;
    }
    let out = params.layer("out").ok_or_else(|| Error::shape("missing layer out"))?;
    if out.weight.shape() != [spec.num_classes, prev] || out.bias.shape() != [spec.num_classes] {
        return Err(Error::shape("output layer shape mismatch"));
    }
    Ok(())
}

/// Forward pass producing raw logits `[B, C]`.
pub fn classifier_forward(
    params: &ParameterSet,
    spec: &ClassifierSpec,
    widths: &[usize],
    x: &Tensor,
) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != spec.input_dim {
        return Err(Error::shape(format!("input shaped {:?}", x.shape())));
    }
    validate_classifier(params, spec, widths, spec.input_dim)?;
    let mut act = x.clone();
    for i in 0..widths.len() {
        let layer = params.layer(&format!("fc{i}")).expect("validated");
        act = affine(&act, layer);
        for v in act.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    let out = params.layer("out").expect("validated");
    Ok(affine(&act, out))
}

fn affine(x: &Tensor, layer: &LayerParams) -> Tensor {
    let mut y = matmul_nt(x, &layer.weight);
    let cols = y.cols();
    for bi in 0..y.rows() {
        let row = y.row_mut(bi);
        for c in 0..cols {
            row[c] += layer.bias.data()[c];
        }
    }
    y
}

/// Tape-registered copy of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct TapeLayer {
    pub w: Var,
    pub b: Var,
}

/// Registers classifier parameters on a tape. When `trainable` is true, leaf
/// names follow the `<layer>.w` / `<layer>.b` convention so gradients line up
/// with [`ParameterSet::named_tensors`].
pub fn register_classifier(tape: &mut Tape, params: &ParameterSet, trainable: bool) -> Vec<TapeLayer> {
    params
        .iter()
        .map(|(name, layer)| {
            if trainable {
                TapeLayer {
                    w: tape.param(&crate::params::weight_key(name), layer.weight.clone()),
                    b: tape.param(&crate::params::bias_key(name), layer.bias.clone()),
                }
            } else {
                TapeLayer { w: tape.constant(layer.weight.clone()), b: tape.constant(layer.bias.clone()) }
            }
        })
        .collect()
}

/// Logits of a registered classifier on the tape.
pub fn classifier_logits_on_tape(tape: &mut Tape, layers: &[TapeLayer], x: Var) -> Var {
    let mut act = x;
    for (i, layer) in layers.iter().enumerate() {
        let z = tape.matmul_nt(act, layer.w);
        let zb = tape.add_row_vec(z, layer.b);
        act = if i + 1 < layers.len() { tape.relu(zb) } else { zb };
    }
    act
}

/// How noise and label information are combined into the generator input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOp {
    /// `z * E(y)` elementwise.
    Mul,
    /// `z + E(y)`.
    Add,
    /// `[z, E(y)]`.
    Cat,
    /// `[z, y]` with the raw label id appended.
    Ncat,
    /// `z` alone; the label is ignored.
    None,
}

impl FromStr for MergeOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(MergeOp::Mul),
            "add" => Ok(MergeOp::Add),
            "cat" => Ok(MergeOp::Cat),
            "ncat" => Ok(MergeOp::Ncat),
            "none" => Ok(MergeOp::None),
            other => Err(Error::contract(format!("unknown merge operator `{other}`"))),
        }
    }
}

impl MergeOp {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeOp::Mul => "mul",
            MergeOp::Add => "add",
            MergeOp::Cat => "cat",
            MergeOp::Ncat => "ncat",
            MergeOp::None => "none",
        }
    }
}

/// Architecture of the conditional generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub num_classes: usize,
    pub merge: MergeOp,
}

impl GeneratorSpec {
    /// Dimension of the merged input `h`.
    pub fn merged_dim(&self) -> usize {
        match self.merge {
            MergeOp::Mul | MergeOp::Add | MergeOp::None => self.noise_dim,
            MergeOp::Cat => 2 * self.noise_dim,
            MergeOp::Ncat => self.noise_dim + 1,
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            (0..self.hidden_widths.len()).map(|i| format!("fc{i}")).collect();
        names.push("out".to_string());
        names
    }

    /// Fresh parameters: Xavier-uniform net, standard-normal embedding rows.
    pub fn init(&self, seed: SeedNode) -> GeneratorParams {
        let mut dims = Vec::new();
        let mut prev = self.merged_dim();
        for &w in &self.hidden_widths {
            dims.push((w, prev));
            prev = w;
        }
        dims.push((self.output_dim, prev));
        let net = init_mlp(&dims, &self.layer_names(), seed.child("net"));
        let mut rng = seed.child("embed").rng();
        let data: Vec<f64> = (0..self.num_classes * self.noise_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let embed = Tensor::new(vec![self.num_classes, self.noise_dim], data).expect("finite embed");
        GeneratorParams { net, embed }
    }
}

/// Generator parameters: the MLP plus the trainable label-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub net: ParameterSet,
    pub embed: Tensor,
}

pub const EMBED_KEY: &str = "embed";

impl GeneratorParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.net.named_tensors();
        out.push((EMBED_KEY.to_string(), &self.embed));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.net.named_tensors_mut();
        out.push((EMBED_KEY.to_string(), &mut self.embed));
        out
    }

    pub fn zeros_like(other: &GeneratorParams) -> GeneratorParams {
        let mut net = ParameterSet::new();
        for (name, layer) in other.net.iter() {
            net.push(
                name,
                LayerParams {
                    weight: Tensor::zeros_like(&layer.weight),
                    bias: Tensor::zeros_like(&layer.bias),
                },
            );
        }
        GeneratorParams { net, embed: Tensor::zeros_like(&other.embed) }
    }

    pub fn max_abs_diff(&self, other: &GeneratorParams) -> f64 {
        let mut worst = self.net.max_abs_diff(&other.net);
        for (a, b) in self.embed.data().iter().zip(other.embed.data()) {
            worst = worst.max((a - b).abs());
        }
        worst
    }
}

/// Merges one noise row with one label.
pub fn merge(z: &[f64], y: usize, op: MergeOp, embed: &Tensor) -> Result<Vec<f64>> {
    if y >= embed.rows() {
        return Err(Error::contract(format!("label {y} outside embedding table")));
    }
    let e = embed.row(y);
    Ok(match op {
        MergeOp::Mul => z.iter().zip(e).map(|(a, b)| a * b).collect(),
        MergeOp::Add => z.iter().zip(e).map(|(a, b)| a + b).collect(),
        MergeOp::Cat => {
            let mut h = z.to_vec();
            h.extend_from_slice(e);
            h
        }
        MergeOp::Ncat => {
            let mut h = z.to_vec();
            h.push(y as f64);
            h
        }
        MergeOp::None => z.to_vec(),
    })
}

/// Batched merge producing `[B, merged_dim]`.
pub fn merge_batch(z: &Tensor, labels: &[usize], op: MergeOp, embed: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * z.cols());
    for (bi, &y) in labels.iter().enumerate() {
        data.extend(merge(z.row(bi), y, op, embed)?);
    }
    Tensor::new(vec![labels.len(), data.len() / labels.len().max(1)], data)
}

/// Forward pass `s = G(o(z, y))` without a tape.
pub fn generator_forward(
    gen: &GeneratorParams,
    spec: &GeneratorSpec,
    z: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let h = merge_batch(z, labels, spec.merge, &gen.embed)?;
    let mut act = h;
    let names = spec.layer_names();
    for (i, name) in names.iter().enumerate() {
        let layer = gen
            .net
            .layer(name)
            .ok_or_else(|| Error::shape(format!("generator missing layer {name}")))?;
        act = affine(&act, layer);
        if i + 1 < names.len() {
            for v in act.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        } else {
            for v in act.data_mut() {
                *v = v.tanh();
            }
        }
    }
    Ok(act)
}

/// Tape-registered generator.
pub struct TapeGenerator {
    pub layers: Vec<TapeLayer>,
    pub embed: Var,
}

pub fn register_generator(tape: &mut Tape, gen: &GeneratorParams, trainable: bool) -> TapeGenerator {
    let layers = register_classifier(tape, &gen.net, trainable);
    let embed = if trainable {
        tape.param(EMBED_KEY, gen.embed.clone())
    } else {
        tape.constant(gen.embed.clone())
    };
    TapeGenerator { layers, embed }
}

/// Merged input and tanh output of a registered generator; gradients flow into
/// the net and the embedding table.
pub fn generator_output_on_tape(
    tape: &mut Tape,
    spec: &GeneratorSpec,
    gen: &TapeGenerator,
    z: Var,
    labels: &[usize],
) -> (Var, Var) {
    let h = match spec.merge {
        MergeOp::Mul => {
            let rows = tape.gather_rows(gen.embed, labels);
            tape.mul(z, rows)
        }
        MergeOp::Add => {
            let rows = tape.gather_rows(gen.embed, labels);
            tape.add(z, rows)
        }
        MergeOp::Cat => {
            let rows = tape.gather_rows(gen.embed, labels);
            tape.concat_cols(z, rows)
        }
        MergeOp::Ncat => {
            let col = Tensor::new(vec![labels.len(), 1], labels.iter().map(|&y| y as f64).collect())
                .expect("finite label column");
            let col = tape.constant(col);
            tape.concat_cols(z, col)
        }
        MergeOp::None => z,
    };
    let mut act = h;
    for (i, layer) in gen.layers.iter().enumerate() {
        let lin = tape.matmul_nt(act, layer.w);
        let linb = tape.add_row_vec(lin, layer.b);
        act = if i + 1 < gen.layers.len() { tape.relu(linb) } else { tape.tanh(linb) };
    }
    (act, h)
}
