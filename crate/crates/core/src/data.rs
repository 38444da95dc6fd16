//! Datasets, file readers and the heterogeneity partitioners.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_normal, seeded_rng, tag, Matrix, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Config("dataset has no samples".into()));
        }
        if x.rows() != y.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} rows, {} labels", x.rows(), y.len()),
            ));
        }
        if let Some(&label) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        count_labels(self.y.iter().copied(), self.classes)
    }

    /// Indices of each class, in ascending order.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.classes];
        for (i, &l) in self.y.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    /// A seeded class-balanced subset with `per_class` samples of every
    /// class (fewer if a class is smaller).
    pub fn balanced_subset(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        let mut rng = seeded_rng(seed);
        let mut picked = Vec::new();
        for (c, mut pool) in self.class_pools().into_iter().enumerate() {
            if pool.is_empty() {
                return Err(Error::Config(format!("class {c} has no samples")));
            }
            pool.shuffle(&mut rng);
            pool.truncate(per_class);
            pool.sort_unstable();
            picked.extend(pool);
        }
        Ok(self.subset(&picked))
    }
}

fn count_labels(labels: impl Iterator<Item = usize>, classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for l in labels {
        counts[l] += 1;
    }
    counts
}

/// Gaussian class clusters. Class `c` is centred at `separation · e_c` and
/// has isotropic spread `within_std`. Samples are stored class by class.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    input_dim: usize,
    separation: f64,
    within_std: f64,
    rng: &mut SimRng,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if input_dim < classes {
        return Err(Error::Config(format!(
            "input dim {input_dim} is below class count {classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per-class sample count must be positive".into()));
    }
    if !(within_std >= 0.0) {
        return Err(Error::Config(format!("within_std must be >= 0, got {within_std}")));
    }
    let mut x = rng_normal(rng, classes * per_class, input_dim, 0.0, within_std);
    let mut y = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for j in 0..per_class {
            let row = c * per_class + j;
            x.row_mut(row)[c] += separation;
            y.push(c);
        }
    }
    Dataset::new(x, y, classes)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

struct IdxCursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl IdxCursor<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, "unexpected end of file in header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn body(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if self.bytes.len() < end {
            return Err(self.err(
                self.bytes.len(),
                format!(
                    "expected {len} data bytes, file ends after {}",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file (magic `0x00000803`) and its label file (magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`. When `classes` is `None`
/// the class count is the largest label plus one.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;

    let mut cur = IdxCursor {
        path: images,
        bytes: &img_bytes,
        pos: 0,
    };
    let magic = cur.u32()?;
    if magic != IDX_IMAGES {
        return Err(cur.err(0, format!("bad image magic {magic:#010x}")));
    }
    let n = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    if n == 0 {
        return Err(cur.err(4, "image file declares zero samples"));
    }
    let pixels: Vec<f64> = cur.body(n * rows * cols)?.iter().map(|&b| b as f64 / 255.0).collect();

    let mut cur = IdxCursor {
        path: labels,
        bytes: &lbl_bytes,
        pos: 0,
    };
    let magic = cur.u32()?;
    if magic != IDX_LABELS {
        return Err(cur.err(0, format!("bad label magic {magic:#010x}")));
    }
    let m = cur.u32()? as usize;
    if m != n {
        return Err(cur.err(4, format!("{m} labels for {n} images")));
    }
    let body_start = cur.pos;
    let y: Vec<usize> = cur.body(n)?.iter().map(|&b| b as usize).collect();
    let classes = classes.unwrap_or_else(|| y.iter().max().map_or(0, |m| m + 1));
    if let Some(pos) = y.iter().position(|&l| l >= classes) {
        return Err(Error::Parse {
            path: labels.to_path_buf(),
            offset: (body_start + pos) as u64,
            msg: format!("label {} out of range for {classes} classes", y[pos]),
        });
    }
    Dataset::new(Matrix::from_vec(n, rows * cols, pixels)?, y, classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvOptions {
    pub classes: Option<usize>,
    /// Multiplier applied to every feature value.
    pub scale: f64,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            classes: None,
            scale: 1.0 / 255.0,
        }
    }
}

/// Reads a CSV file whose first column is the label and whose remaining
/// columns are features. A first row that does not parse as numbers is taken
/// to be a header and skipped.
pub fn load_csv(path: &Path, opts: CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })?;
    let parse_err = |offset: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    };

    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut width: Option<usize> = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| {
            let off = e.position().map_or(0, |p| p.byte());
            parse_err(off, e.to_string())
        })?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let is_numeric = rec.iter().all(|f| f.parse::<f64>().is_ok());
        if line == 0 && !is_numeric {
            continue;
        }
        if rec.len() < 2 {
            return Err(parse_err(offset, "need a label and at least one feature".into()));
        }
        let label: usize = rec[0]
            .parse::<usize>()
            .map_err(|_| parse_err(offset, format!("label {:?} is not a non-negative integer", &rec[0])))?;
        let features = rec.len() - 1;
        match width {
            None => width = Some(features),
            Some(w) if w != features => {
                return Err(parse_err(offset, format!("row has {features} features, expected {w}")));
            }
            _ => {}
        }
        for f in rec.iter().skip(1) {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(offset, format!("feature {f:?} is not a number")))?;
            data.push(v * opts.scale);
        }
        if let Some(c) = opts.classes {
            if label >= c {
                return Err(parse_err(offset, format!("label {label} out of range for {c} classes")));
            }
        }
        y.push(label);
    }
    let Some(width) = width else {
        return Err(parse_err(0, "no data rows".into()));
    };
    let classes = opts.classes.unwrap_or_else(|| y.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Matrix::from_vec(y.len(), width, data)?, y, classes)
}

/// Per-group affine input transform `x ↦ R(x ⊙ scale + shift)`, where `R` is
/// an optional seeded random rotation. Labels are untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSkewTransform {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    #[serde(default)]
    pub rotation_seed: Option<u64>,
}

impl FeatureSkewTransform {
    pub fn identity(dim: usize) -> Self {
        FeatureSkewTransform {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            rotation_seed: None,
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, &s), &b) in out.row_mut(r).iter_mut().zip(&self.scale).zip(&self.shift) {
                *v = *v * s + b;
            }
        }
        match self.rotation_seed {
            Some(seed) => {
                let rot = random_rotation(x.cols(), seed);
                out.matmul_t(&rot).expect("rotation matches input width")
            }
            None => out,
        }
    }
}

/// Orthogonal matrix from Gram–Schmidt on a seeded Gaussian matrix.
fn random_rotation(dim: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    let mut q = rng_normal(&mut rng, dim, dim, 0.0, 1.0);
    for i in 0..dim {
        for j in 0..i {
            let proj = crate::numerics::dot(q.row(i), q.row(j));
            let prev = q.row(j).to_vec();
            for (v, p) in q.row_mut(i).iter_mut().zip(prev) {
                *v -= proj * p;
            }
        }
        let norm = crate::numerics::dot(q.row(i), q.row(i)).sqrt();
        q.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    q
}

/// The slice of a dataset held by one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub class_counts: Vec<usize>,
    #[serde(default)]
    pub transform: Option<FeatureSkewTransform>,
}

impl ClientPartition {
    pub fn new(client_id: usize, mut indices: Vec<usize>, dataset: &Dataset) -> Self {
        indices.sort_unstable();
        let class_counts = count_labels(indices.iter().map(|&i| dataset.y[i]), dataset.classes);
        ClientPartition {
            client_id,
            indices,
            class_counts,
            transform: None,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// This client's samples with its transform applied.
    pub fn materialize(&self, dataset: &Dataset) -> Dataset {
        let mut d = dataset.subset(&self.indices);
        if let Some(t) = &self.transform {
            d.x = t.apply(&d.x);
        }
        d
    }
}

/// Concatenates every client's (transformed) samples in client order.
pub fn union_of(partitions: &[ClientPartition], dataset: &Dataset) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for p in partitions {
        let d = p.materialize(dataset);
        rows.extend_from_slice(d.x.as_slice());
        y.extend(d.y);
    }
    Dataset::new(
        Matrix::from_vec(y.len(), dataset.input_dim(), rows)?,
        y,
        dataset.classes,
    )
}

/// Label-shard split: every client holds exactly `classes_per_client`
/// distinct labels and each label's shuffled pool is cut into contiguous,
/// near-equal chunks among its holders.
pub fn partition_shards(
    dataset: &Dataset,
    clients: usize,
    classes_per_client: usize,
    rng: &mut SimRng,
) -> Result<Vec<ClientPartition>> {
    let c = dataset.classes;
    if clients == 0 || classes_per_client == 0 || classes_per_client > c {
        return Err(Error::Config(format!(
            "cannot give {classes_per_client} of {c} classes to each of {clients} clients"
        )));
    }
    if !(clients * classes_per_client).is_multiple_of(c) {
        return Err(Error::Config(format!(
            "{clients} clients x {classes_per_client} classes does not spread evenly over {c} classes"
        )));
    }
    let holders_per_class = clients * classes_per_client / c;

    // Each client takes the labels with the most remaining holder slots;
    // ties are broken by a random key so label sets vary between clients.
    let mut remaining = vec![holders_per_class; c];
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
    for client in 0..clients {
        let keys: Vec<u64> = (0..c).map(|_| rng.random()).collect();
        let mut order: Vec<usize> = (0..c).filter(|&l| remaining[l] > 0).collect();
        order.sort_by(|&a, &b| remaining[b].cmp(&remaining[a]).then(keys[a].cmp(&keys[b])));
        if order.len() < classes_per_client {
            return Err(Error::Config("shard assignment ran out of labels".into()));
        }
        for &label in &order[..classes_per_client] {
            remaining[label] -= 1;
            holders[label].push(client);
        }
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (label, mut pool) in dataset.class_pools().into_iter().enumerate() {
        let k = holders[label].len();
        if pool.len() < k {
            return Err(Error::Config(format!(
                "class {label} has {} samples for {k} holders",
                pool.len()
            )));
        }
        pool.shuffle(rng);
        let (base, extra) = (pool.len() / k, pool.len() % k);
        let mut start = 0;
        for (j, &client) in holders[label].iter().enumerate() {
            let len = base + usize::from(j < extra);
            assigned[client].extend_from_slice(&pool[start..start + len]);
            start += len;
        }
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(id, idx)| ClientPartition::new(id, idx, dataset))
        .collect())
}

/// Integer counts summing to `total`, proportional to `weights`, by the
/// largest-remainder rule (ties to the lower index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// One draw from `Dir(alpha · 1_n)`, via normalized Gamma variates.
fn dirichlet(rng: &mut SimRng, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        // tiny alpha can underflow every variate to zero
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

pub const DIRICHLET_MAX_RETRIES: usize = 1000;

/// Dirichlet label skew: each class is split across clients in proportions
/// drawn from `Dir(alpha)`. If any client ends up empty the whole assignment
/// is redrawn, at most [`DIRICHLET_MAX_RETRIES`] times.
pub fn partition_dirichlet(
    dataset: &Dataset,
    clients: usize,
    alpha: f64,
    rng: &mut SimRng,
) -> Result<Vec<ClientPartition>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if clients == 0 || clients > dataset.len() {
        return Err(Error::Config(format!(
            "cannot split {} samples over {clients} clients",
            dataset.len()
        )));
    }
    let pools = dataset.class_pools();
    for _ in 0..DIRICHLET_MAX_RETRIES {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for pool in &pools {
            let props = dirichlet(rng, clients, alpha);
            let counts = largest_remainder(pool.len(), &props);
            let mut pool = pool.clone();
            pool.shuffle(rng);
            let mut start = 0;
            for (client, &k) in counts.iter().enumerate() {
                assigned[client].extend_from_slice(&pool[start..start + k]);
                start += k;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .enumerate()
                .map(|(id, idx)| ClientPartition::new(id, idx, dataset))
                .collect());
        }
    }
    Err(Error::Config(format!(
        "dirichlet split left a client empty after {DIRICHLET_MAX_RETRIES} draws"
    )))
}

/// Assigns clients round-robin to `groups` and gives each group a random
/// affine transform with per-dimension scale in `[1−s, 1+s]` and shift in
/// `[−s, s]`.
pub fn attach_feature_skew(
    partitions: &mut [ClientPartition],
    input_dim: usize,
    groups: usize,
    strength: f64,
    rotate: bool,
    rng: &mut SimRng,
) -> Result<()> {
    if groups == 0 || groups > partitions.len() {
        return Err(Error::Config(format!(
            "feature skew needs 1..={} groups, got {groups}",
            partitions.len()
        )));
    }
    if !(0.0..1.0).contains(&strength) {
        return Err(Error::Config(format!(
            "feature skew strength must be in [0, 1), got {strength}"
        )));
    }
    let transforms: Vec<FeatureSkewTransform> = (0..groups)
        .map(|_| {
            let scale = (0..input_dim)
                .map(|_| 1.0 + strength * rng.random_range(-1.0..=1.0))
                .collect();
            let shift = (0..input_dim)
                .map(|_| strength * rng.random_range(-1.0..=1.0))
                .collect();
            let rotation_seed = rotate.then(|| rng.random());
            FeatureSkewTransform {
                scale,
                shift,
                rotation_seed,
            }
        })
        .collect();
    for (i, p) in partitions.iter_mut().enumerate() {
        p.transform = Some(transforms[i % groups].clone());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

/// Mini-batches for one local epoch. The order is a shuffle seeded by
/// `(seed, client, epoch)`; the last batch may be short.
pub fn batch_iter(
    partition: &ClientPartition,
    dataset: &Dataset,
    batch_size: usize,
    epoch: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order = partition.indices.clone();
    let mut rng = seeded_rng(derive_seed(
        seed,
        &[tag::BATCHES, partition.client_id as u64, epoch as u64],
    ));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut x = dataset.x.select_rows(chunk);
            if let Some(t) = &partition.transform {
                x = t.apply(&x);
            }
            Batch {
                x,
                y: chunk.iter().map(|&i| dataset.y[i]).collect(),
            }
        })
        .collect()
}

/// Number of batches [`batch_iter`] will produce.
pub fn batch_count(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReportEntry {
    pub client: usize,
    pub samples: usize,
    pub class_counts: Vec<usize>,
}

/// Client → per-class counts, ready for JSON export.
pub fn partition_report(partitions: &[ClientPartition]) -> Vec<PartitionReportEntry> {
    partitions
        .iter()
        .map(|p| PartitionReportEntry {
            client: p.client_id,
            samples: p.len(),
            class_counts: p.class_counts.clone(),
        })
        .collect()
}
