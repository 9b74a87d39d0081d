//! Datasets, non-IID partitioning, and IDX ingestion.
//!
//! Features are always normalized to `[-1, 1]` so real and synthetic samples
//! share a domain. Partitioning follows the per-class Dirichlet recipe:
//! each class's samples are split across clients by a `Dir(omega * 1_N)`
//! proportion vector, with largest-remainder rounding so every sample is
//! assigned exactly once.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::SeedNode;
use crate::tensor::Tensor;

/// A labeled dataset with features in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "features {:?} vs {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::contract("dataset must hold at least one sample"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {num_classes})")));
        }
        if features.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::contract("features must lie in [-1, 1]"));
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Features of the given sample indices as a `[n, dim]` batch.
    pub fn gather_features(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(vec![indices.len(), d], data).expect("finite gathered features")
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Per-label sample counts restricted to `indices`.
    pub fn label_histogram(&self, indices: &[usize]) -> Vec<u64> {
        let mut hist = vec![0u64; self.num_classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }
}

/// Disjoint client shards, each a list of sample indices into a parent
/// dataset. Empty shards are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.client_indices[client]
    }

    /// CSV export with header `client_id,sample_index`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,sample_index\n");
        for (client, shard) in self.client_indices.iter().enumerate() {
            for &idx in shard {
                out.push_str(&format!("{client},{idx}\n"));
            }
        }
        out
    }
}

/// Gaussian blobs: class `c` is an isotropic cloud around a per-class center,
/// clipped to `[-1, 1]`. Centers and noise come from separate seed branches so
/// a train/test pair can share centers.
pub fn make_blobs_split(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    centers_seed: SeedNode,
    noise_seed: SeedNode,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::contract("blobs need at least two classes"));
    }
    if dim < 2 {
        return Err(Error::contract("blobs need dimension >= 2"));
    }
    if n_per_class == 0 {
        return Err(Error::contract("blobs need at least one sample per class"));
    }
    let mut centers_rng = centers_seed.rng();
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| centers_rng.random_range(-0.8..0.8)).collect())
        .collect();

    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        let mut rng = noise_seed.index(c as u64).rng();
        for _ in 0..n_per_class {
            for &m in center {
                let eps: f64 = StandardNormal.sample(&mut rng);
                data.push((m + spread * eps).clamp(-1.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, num_classes)
}

/// Convenience wrapper deriving the centers/noise branches from one seed.
pub fn make_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let root = SeedNode::root(seed);
    make_blobs_split(num_classes, dim, n_per_class, spread, root.child("centers"), root.child("noise"))
}

/// Splits per-class sample lists across `n` clients with proportions drawn
/// from `Dir(omega * 1_N)`.
pub fn dirichlet_partition(ds: &Dataset, n: usize, omega: f64, seed: SeedNode) -> Result<Partition> {
    dirichlet_partition_labels(&ds.labels, ds.num_classes, n, omega, seed)
}

/// Label-driven core of [`dirichlet_partition`].
pub fn dirichlet_partition_labels(
    labels: &[usize],
    num_classes: usize,
    n: usize,
    omega: f64,
    seed: SeedNode,
) -> Result<Partition> {
    if n == 0 {
        return Err(Error::contract("need at least one client"));
    }
    if !(omega > 0.0) {
        return Err(Error::contract("Dirichlet concentration must be positive"));
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    for class in 0..num_classes {
        let mut members: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let node = seed.child("class").index(class as u64);
        let mut rng = node.rng();
        members.shuffle(&mut rng);

        // q ~ Dir(omega * 1_N) via normalized Gamma(omega, 1) draws.
        let gamma = Gamma::new(omega, 1.0)
            .map_err(|e| Error::contract(format!("invalid Dirichlet parameter: {e}")))?;
        let mut q: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = q.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            // Tiny omega can underflow every draw; fall back to a single owner.
            let owner = rng.random_range(0..n);
            q = vec![0.0; n];
            q[owner] = 1.0;
        } else {
            for v in &mut q {
                *v /= total;
            }
        }

        let counts = largest_remainder_counts(&q, members.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(Partition { client_indices: shards })
}

/// Integer allocation of `total` items proportional to `q`, exact by
/// construction: floor the targets, then hand the leftover items to the
/// largest fractional remainders (ties to the lower client id).
fn largest_remainder_counts(q: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(q.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(q.len());
    let mut assigned = 0usize;
    for (i, &share) in q.iter().enumerate() {
        let target = share * total as f64;
        let floor = target.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((target - floor as f64, i));
    }
    let mut leftover = total - assigned;
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (_, i) in remainders {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Shuffles the test set and deals it into `n` near-equal disjoint shards
/// (sizes differ by at most one).
pub fn split_local_test(test: &Dataset, n: usize, seed: SeedNode) -> Result<Partition> {
    if n == 0 || n > test.len() {
        return Err(Error::contract(format!("cannot split {} samples into {n} shards", test.len())));
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    let mut rng = seed.rng();
    order.shuffle(&mut rng);
    let base = test.len() / n;
    let extra = test.len() % n;
    let mut shards = Vec::with_capacity(n);
    let mut cursor = 0;
    for client in 0..n {
        let size = base + usize::from(client < extra);
        let mut shard = order[cursor..cursor + size].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        cursor += size;
    }
    Ok(Partition { client_indices: shards })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label file pair, scaling pixels from `[0, 255]` to
/// `[-1, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = std::fs::File::open(images_path)?;
    let magic = read_be_u32(&mut img)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let count = read_be_u32(&mut img)? as usize;
    let rows = read_be_u32(&mut img)? as usize;
    let cols = read_be_u32(&mut img)? as usize;
    let dim = rows * cols;
    let mut pixels = vec![0u8; count * dim];
    img.read_exact(&mut pixels)?;
    let mut probe = [0u8; 1];
    if img.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after image payload".into()));
    }

    let mut lab = std::fs::File::open(labels_path)?;
    let magic = read_be_u32(&mut lab)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let label_count = read_be_u32(&mut lab)? as usize;
    if label_count != count {
        return Err(Error::Format(format!("{count} images but {label_count} labels")));
    }
    let mut raw_labels = vec![0u8; label_count];
    lab.read_exact(&mut raw_labels)?;

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0 * 2.0 - 1.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Tensor::new(vec![count, dim], data)?, labels, num_classes.max(2))
}
