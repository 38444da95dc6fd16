//! Experiment configuration: TOML schema, named presets and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_csv, load_idx, CsvOptions, Dataset};
use crate::error::{Error, Result};
use crate::metrics::Similarity;
use crate::model::Hyper;
use crate::numerics::{derive_seed, seeded_rng, tag};
use crate::strategies::{FedFaSpec, Strategy};

/// Name of the preset used when a file names none.
pub const DEFAULT_PRESET: &str = "desk";

pub const PRESETS: [&str; 2] = ["desk", "paper-fmnist-shards"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters; the test split is drawn from the same clusters.
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        input_dim: usize,
        separation: f64,
        within_std: f64,
    },
    /// IDX image/label file pairs, as shipped for MNIST-style datasets.
    Idx {
        classes: usize,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Label-first CSV files.
    Csv {
        classes: usize,
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_csv_scale")]
        scale: f64,
    },
}

fn default_csv_scale() -> f64 {
    1.0 / 255.0
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. }
            | DatasetSpec::Idx { classes, .. }
            | DatasetSpec::Csv { classes, .. } => *classes,
        }
    }

    fn files(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Synthetic { .. } => vec![],
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            DatasetSpec::Csv { train, test, .. } => vec![train, test],
        }
    }

    /// Loads or generates `(train, test)`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                test_per_class,
                input_dim,
                separation,
                within_std,
            } => {
                // both splits share the cluster centres, which depend only on the class
                let train = generate_synthetic(
                    *classes,
                    *per_class,
                    *input_dim,
                    *separation,
                    *within_std,
                    &mut seeded_rng(derive_seed(seed, &[tag::DATA_TRAIN])),
                )?;
                let test = generate_synthetic(
                    *classes,
                    *test_per_class,
                    *input_dim,
                    *separation,
                    *within_std,
                    &mut seeded_rng(derive_seed(seed, &[tag::DATA_TEST])),
                )?;
                Ok((train, test))
            }
            DatasetSpec::Idx {
                classes,
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_idx(train_images, train_labels, Some(*classes))?,
                load_idx(test_images, test_labels, Some(*classes))?,
            )),
            DatasetSpec::Csv {
                classes,
                train,
                test,
                scale,
            } => {
                let opts = CsvOptions {
                    classes: Some(*classes),
                    scale: *scale,
                };
                Ok((load_csv(train, opts)?, load_csv(test, opts)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden ReLU widths of the extractor.
    pub hidden: Vec<usize>,
    /// Width of the feature layer; raised to the class count when smaller,
    /// since orthogonal anchors need `d ≥ C`.
    pub feature_dim: usize,
}

impl ModelSpec {
    /// `[d_in, hidden…, d]`.
    pub fn dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim.max(classes));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Each client holds exactly `classes_per_client` labels.
    Shards,
    /// Per-class Dirichlet(`alpha`) proportions.
    Dirichlet,
    /// Balanced labels, per-group affine input transforms.
    FeatureSkew,
    /// `label_scheme` (shards or dirichlet) plus feature skew.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes_per_client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew_groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew_rotate: Option<bool>,
    /// Keep only this many training samples per class before splitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
}

impl PartitionSpec {
    pub fn shards(classes_per_client: usize) -> Self {
        PartitionSpec {
            scheme: Scheme::Shards,
            classes_per_client: Some(classes_per_client),
            alpha: None,
            label_scheme: None,
            skew_groups: None,
            skew_strength: None,
            skew_rotate: None,
            train_per_class: None,
        }
    }

    /// The label split in effect. `FeatureSkew` stands for a balanced split
    /// that gives every client every class.
    pub fn label_split(&self) -> Scheme {
        match self.scheme {
            Scheme::Combined => self.label_scheme.unwrap_or(Scheme::Shards),
            s => s,
        }
    }

    pub fn has_feature_skew(&self) -> bool {
        matches!(self.scheme, Scheme::FeatureSkew | Scheme::Combined)
    }

    fn validate(&self, clients: usize, classes: usize, problems: &mut Vec<String>) {
        let label = self.label_split();
        if self.scheme == Scheme::Combined && !matches!(self.label_scheme, Some(Scheme::Shards | Scheme::Dirichlet)) {
            problems.push("partition.label_scheme must be \"shards\" or \"dirichlet\" for scheme \"combined\"".into());
        }
        if self.scheme != Scheme::Combined && self.label_scheme.is_some() {
            problems.push("partition.label_scheme only applies to scheme \"combined\"".into());
        }
        match (label, self.classes_per_client) {
            (Scheme::Shards, Some(k)) => {
                if k == 0 || k > classes {
                    problems.push(format!(
                        "partition.classes_per_client must be in 1..={classes}, got {k}"
                    ));
                } else if !(clients * k).is_multiple_of(classes) {
                    problems.push(format!(
                        "partition: {clients} clients x {k} classes is not divisible by {classes} classes"
                    ));
                }
            }
            (Scheme::Shards, None) => problems.push("partition.classes_per_client is required for shards".into()),
            (Scheme::FeatureSkew, Some(_)) => {
                problems.push("partition.classes_per_client does not apply to scheme \"feature_skew\"".into())
            }
            (_, Some(_)) => problems.push("partition.classes_per_client only applies to shards".into()),
            _ => {}
        }
        match (label, self.alpha) {
            (Scheme::Dirichlet, Some(a)) if !(a > 0.0 && a.is_finite()) => {
                problems.push(format!("partition.alpha must be positive, got {a}"))
            }
            (Scheme::Dirichlet, None) => problems.push("partition.alpha is required for dirichlet".into()),
            (Scheme::Dirichlet, _) => {}
            (_, Some(_)) => problems.push("partition.alpha only applies to dirichlet".into()),
            _ => {}
        }
        let skew_fields = self.skew_groups.is_some() || self.skew_strength.is_some() || self.skew_rotate.is_some();
        if self.has_feature_skew() {
            match self.skew_groups {
                Some(g) if g >= 1 && g <= clients => {}
                Some(g) => problems.push(format!("partition.skew_groups must be in 1..={clients}, got {g}")),
                None => problems.push("partition.skew_groups is required for feature skew".into()),
            }
            match self.skew_strength {
                Some(s) if (0.0..1.0).contains(&s) => {}
                Some(s) => problems.push(format!("partition.skew_strength must be in [0, 1), got {s}")),
                None => problems.push("partition.skew_strength is required for feature skew".into()),
            }
        } else if skew_fields {
            problems.push("partition.skew_* fields need scheme \"feature_skew\" or \"combined\"".into());
        }
        if self.train_per_class == Some(0) {
            problems.push("partition.train_per_class must be positive".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    /// Probe samples per class for the cross-client feature distance.
    pub probe_per_class: usize,
    pub similarity: Similarity,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            probe_per_class: 20,
            similarity: Similarity::Cosine,
        }
    }
}

/// A complete, resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub sample_rate: f64,
    /// Evaluate test accuracy every this many rounds; the last round is
    /// always evaluated.
    pub eval_every: usize,
    /// Training threads; 0 means one per available core.
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Average models with weight `1/|S|` instead of `n_i/n_S`.
    pub uniform_model_weights: bool,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub strategy: Strategy,
    pub hyper: Hyper,
    pub metrics: MetricsSpec,
}

fn desk() -> ExperimentConfig {
    ExperimentConfig {
        seed: 1,
        rounds: 30,
        clients: 10,
        sample_rate: 1.0,
        eval_every: 1,
        workers: 0,
        out_dir: PathBuf::from("runs/desk"),
        uniform_model_weights: false,
        dataset: DatasetSpec::Synthetic {
            classes: 4,
            per_class: 100,
            test_per_class: 250,
            input_dim: 8,
            separation: 3.0,
            within_std: 1.0,
        },
        model: ModelSpec {
            hidden: vec![4],
            feature_dim: 4,
        },
        partition: PartitionSpec::shards(2),
        strategy: Strategy::FedFa(FedFaSpec::default()),
        hyper: Hyper {
            batch_size: 32,
            ..Hyper::default()
        },
        metrics: MetricsSpec::default(),
    }
}

fn paper_fmnist_shards() -> ExperimentConfig {
    ExperimentConfig {
        seed: 1,
        rounds: 200,
        clients: 100,
        sample_rate: 0.1,
        eval_every: 10,
        workers: 0,
        out_dir: PathBuf::from("runs/paper-fmnist-shards"),
        uniform_model_weights: false,
        dataset: DatasetSpec::Idx {
            classes: 10,
            train_images: PathBuf::from("data/fmnist/train-images-idx3-ubyte"),
            train_labels: PathBuf::from("data/fmnist/train-labels-idx1-ubyte"),
            test_images: PathBuf::from("data/fmnist/t10k-images-idx3-ubyte"),
            test_labels: PathBuf::from("data/fmnist/t10k-labels-idx1-ubyte"),
        },
        model: ModelSpec {
            hidden: vec![384],
            feature_dim: 192,
        },
        // 250 samples per class per client: 20 holders x 250 per class
        partition: PartitionSpec {
            train_per_class: Some(5000),
            ..PartitionSpec::shards(2)
        },
        strategy: Strategy::FedFa(FedFaSpec::default()),
        hyper: Hyper {
            lr: 0.01,
            weight_decay: 0.001,
            momentum: 0.0,
            batch_size: 64,
            local_epochs: 5,
        },
        metrics: MetricsSpec::default(),
    }
}

/// A named preset, fully populated.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "desk" => Ok(desk()),
        "paper-fmnist-shards" => Ok(paper_fmnist_shards()),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; available: {}",
            PRESETS.join(", ")
        ))),
    }
}

fn to_value(config: &ExperimentConfig) -> Result<toml::Value> {
    toml::Value::try_from(config).map_err(|e| Error::Serde(e.to_string()))
}

/// Deep merge of `over` into `base`. A table whose `kind` or `scheme`
/// differs from the base replaces it whole, so fields of another variant
/// never leak in.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() && same_variant(existing, &v) => {
                        merge(existing, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn same_variant(a: &toml::Value, b: &toml::Value) -> bool {
    ["kind", "scheme"].iter().all(|key| match b.get(key) {
        Some(v) => a.get(key) == Some(v),
        None => true,
    })
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        desk()
    }
}

impl ExperimentConfig {
    /// Parses TOML text. An optional top-level `preset = "<name>"` selects the
    /// base values (default: the desk preset); every other key overrides it.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let mut over: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: origin.into(),
            offset: e.span().map_or(0, |s| s.start as u64),
            msg: e.message().to_string(),
        })?;
        let name = match over.remove("preset") {
            None => DEFAULT_PRESET.to_string(),
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        let mut value = to_value(&preset(&name)?)?;
        merge(&mut value, toml::Value::Table(over));
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))
    }

    /// Reads a config file, or a preset when `source` is `preset:<name>`.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(name) = source.strip_prefix("preset:") {
            return preset(name);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, source)?;
        // relative data paths resolve against the config file's directory,
        // made absolute so a resolved snapshot can be loaded from anywhere
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let dir = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
        cfg.rebase_paths(&dir);
        Ok(cfg)
    }

    fn rebase_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Synthetic { .. } => {}
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetSpec::Csv { train, test, .. } => {
                fix(train);
                fix(test);
            }
        }
    }

    /// Every default materialized, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes()
    }

    /// Number of clients sampled per round.
    pub fn clients_per_round(&self) -> usize {
        crate::server::sampled_count(self.clients, self.sample_rate)
    }

    pub fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }

    /// Collects every problem, including missing data files, without doing
    /// any work.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.clients == 0 {
            problems.push("clients must be positive".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            problems.push(format!("sample_rate must be in (0, 1], got {}", self.sample_rate));
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be positive".into());
        }
        let classes = self.classes();
        if classes < 2 {
            problems.push(format!("dataset.classes must be at least 2, got {classes}"));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                per_class,
                test_per_class,
                input_dim,
                separation,
                within_std,
                ..
            } => {
                if *per_class == 0 || *test_per_class == 0 {
                    problems.push("dataset.per_class and dataset.test_per_class must be positive".into());
                }
                if *input_dim < classes {
                    problems.push(format!(
                        "dataset.input_dim {input_dim} is below the class count {classes}"
                    ));
                }
                if !separation.is_finite() || !(*within_std >= 0.0 && within_std.is_finite()) {
                    problems.push("dataset.separation must be finite and dataset.within_std >= 0".into());
                }
            }
            DatasetSpec::Csv { scale, .. } if !(*scale > 0.0 && scale.is_finite()) => {
                problems.push(format!("dataset.scale must be positive, got {scale}"));
            }
            _ => {}
        }
        for f in self.dataset.files() {
            if !f.is_file() {
                problems.push(format!("dataset file not found: {}", f.display()));
            }
        }
        if self.model.hidden.contains(&0) || self.model.feature_dim == 0 {
            problems.push("model widths must be positive".into());
        }
        self.partition.validate(self.clients, classes, &mut problems);
        self.strategy.validate(&mut problems);
        self.hyper.validate(&mut problems);
        if self.metrics.probe_per_class == 0 {
            problems.push("metrics.probe_per_class must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems))
        }
    }

    /// Referenced data files that do not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.dataset
            .files()
            .into_iter()
            .filter(|f| !f.is_file())
            .map(Path::to_path_buf)
            .collect()
    }
}
