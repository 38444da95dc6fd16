//! Round orchestration: client sampling, parallel local training, model and
//! anchor aggregation, per-round metrics and run output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::anchors::{aggregate_anchors, AnchorSet, ClientAnchors};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Scheme};
use crate::data::{attach_feature_skew, partition_dirichlet, partition_shards, union_of, ClientPartition, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    classifier_update_similarity, cross_client_feature_distance, top1_accuracy, ClientLoss, RoundRecord,
};
use crate::model::{forward_features, init_model, supervised_head, ModelParams};
use crate::numerics::{derive_seed, seeded_rng, tag};
use crate::strategies::{local_train, LocalContext, LocalReport, Strategy};

/// Server-side state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentState {
    pub global: ModelParams,
    /// Orthogonal at start; only FedFA with anchor updating changes it.
    pub anchors: AnchorSet,
    /// Completed rounds.
    pub round: usize,
    pub seed: u64,
}

/// `⌈rate·N⌉`, clamped to `1..=N`.
pub fn sampled_count(clients: usize, rate: f64) -> usize {
    let k = (rate * clients as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(clients)
}

/// Uniform sample without replacement, sorted, determined by
/// `(seed, round)`.
pub fn sample_clients(clients: usize, rate: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = sampled_count(clients, rate);
    if k == clients {
        return (0..clients).collect();
    }
    let mut rng = seeded_rng(derive_seed(seed, &[tag::SAMPLING, round as u64]));
    let mut ids = sample(&mut rng, clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Weighted mean of client models, summed in ascending client id. The
/// weights are normalized here. Computed as `w_ref + Σ_i ω_i (w_i − w_ref)`
/// with the lowest id as reference, so identical models aggregate exactly.
pub fn aggregate_models(models: &[(usize, &ModelParams, f64)]) -> Result<ModelParams> {
    let mut order: Vec<&(usize, &ModelParams, f64)> = models.iter().collect();
    order.sort_by_key(|m| m.0);
    let Some(first) = order.first() else {
        return Err(Error::Config("model aggregation needs at least one client".into()));
    };
    let total: f64 = order.iter().map(|m| m.2).sum();
    if !(total > 0.0) || order.iter().any(|m| !(m.2 >= 0.0)) {
        return Err(Error::Config(
            "aggregation weights must be non-negative with a positive sum".into(),
        ));
    }
    let reference = first.1;
    let mut out = reference.clone();
    for m in order.iter().skip(1) {
        if !m.1.congruent(reference) {
            return Err(Error::shape("aggregate_models", format!("client {} parameters", m.0)));
        }
        let w = m.2 / total;
        for (o, (p, r)) in out
            .tensors_mut()
            .into_iter()
            .zip(m.1.tensors().into_iter().zip(reference.tensors()))
        {
            for ((o, &p), &r) in o.iter_mut().zip(p).zip(r) {
                *o += w * (p - r);
            }
        }
    }
    Ok(out)
}

/// Datasets and partitions derived from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub partitions: Vec<ClientPartition>,
    /// Class-balanced subset of the test set for the feature distance.
    pub probe: Dataset,
    /// Every client's (transformed) samples.
    pub union: Dataset,
}

/// Loads the data and splits it among clients.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let seed = config.seed;
    let (mut train, test) = config.dataset.load(seed)?;
    let p = &config.partition;
    if let Some(k) = p.train_per_class {
        train = train.balanced_subset(k, derive_seed(seed, &[tag::PARTITION, 1]))?;
    }
    let mut rng = seeded_rng(derive_seed(seed, &[tag::PARTITION]));
    let mut partitions = match p.label_split() {
        Scheme::Shards => partition_shards(&train, config.clients, p.classes_per_client.unwrap_or(0), &mut rng)?,
        Scheme::Dirichlet => partition_dirichlet(&train, config.clients, p.alpha.unwrap_or(0.0), &mut rng)?,
        _ => partition_shards(&train, config.clients, train.classes, &mut rng)?,
    };
    if p.has_feature_skew() {
        attach_feature_skew(
            &mut partitions,
            train.input_dim(),
            p.skew_groups.unwrap_or(1),
            p.skew_strength.unwrap_or(0.0),
            p.skew_rotate.unwrap_or(false),
            &mut seeded_rng(derive_seed(seed, &[tag::FEATURE_SKEW])),
        )?;
    }
    let probe = test.balanced_subset(config.metrics.probe_per_class, derive_seed(seed, &[tag::PROBE]))?;
    let union = union_of(&partitions, &train)?;
    Ok(Prepared {
        train,
        test,
        partitions,
        probe,
        union,
    })
}

/// The initial global model and anchors.
pub fn initial_state(config: &ExperimentConfig, input_dim: usize) -> Result<ExperimentState> {
    let classes = config.classes();
    let dims = config.model.dims(input_dim, classes);
    let global = init_model(&dims, classes, &mut seeded_rng(derive_seed(config.seed, &[tag::INIT])))?;
    let anchors = AnchorSet::init_orthogonal(classes, global.feature_dim())?;
    Ok(ExperimentState {
        global,
        anchors,
        round: 0,
        seed: config.seed,
    })
}

/// A running experiment held in memory.
pub struct Simulation {
    pub config: ExperimentConfig,
    pub data: Prepared,
    pub state: ExperimentState,
    pool: rayon::ThreadPool,
}

/// Every record of a run plus the final server state.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub state: ExperimentState,
}

impl Simulation {
    /// Validates the config, loads data and builds the initial state.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = prepare(&config)?;
        let state = initial_state(&config, data.train.input_dim())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_count())
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Simulation {
            config,
            data,
            state,
            pool,
        })
    }

    fn anchor_mu(&self) -> f64 {
        self.config.strategy.fedfa().map_or(0.0, |s| s.mu)
    }

    /// Record for the current global model without any client activity.
    pub fn snapshot(&self) -> Result<RoundRecord> {
        let (per_class, total, train_loss) = global_diagnostics(&self.state, &self.data.union, self.anchor_mu())?;
        Ok(RoundRecord {
            round: self.state.round,
            accuracy: Some(top1_accuracy(&self.state.global, &self.data.test)?),
            cls_update_cosine: None,
            feat_dist: None,
            mean_feat_dist: None,
            grad_sq_norm: total,
            grad_sq_norm_per_class: per_class,
            client_losses: vec![],
            mean_local_loss: None,
            train_loss,
        })
    }

    /// Trains the sampled clients in parallel.
    pub fn train_clients(&self, clients: &[usize]) -> Result<Vec<LocalReport>> {
        let state = &self.state;
        let cfg = &self.config;
        let mut reports: Vec<LocalReport> = self.pool.install(|| {
            clients
                .par_iter()
                .map(|&id| {
                    let ctx = LocalContext {
                        dataset: &self.data.train,
                        partition: &self.data.partitions[id],
                        hyper: &cfg.hyper,
                        seed: state.seed,
                        round: state.round,
                    };
                    local_train(&cfg.strategy, &state.global, &state.anchors, &ctx).map_err(|e| Error::Client {
                        round: state.round,
                        client: id,
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        reports.sort_by_key(|r| r.client_id);
        Ok(reports)
    }

    /// One full round: sample, train, measure divergence, aggregate.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let cfg = &self.config;
        let clients = sample_clients(cfg.clients, cfg.sample_rate, self.state.round, self.state.seed);
        let reports = self.train_clients(&clients)?;

        let cls_update_cosine = classifier_update_similarity(&reports, cfg.metrics.similarity);
        let extractors: Vec<_> = reports.iter().map(|r| &r.params.extractor).collect();
        let feat_dist = if extractors.len() >= 2 {
            Some(cross_client_feature_distance(&extractors, &self.data.probe)?)
        } else {
            None
        };
        let mean_feat_dist = feat_dist.as_ref().map(|d| d.iter().sum::<f64>() / d.len() as f64);
        let client_losses: Vec<ClientLoss> = reports
            .iter()
            .map(|r| ClientLoss {
                client: r.client_id,
                mean_loss: r.mean_loss(),
            })
            .collect();
        let mean_local_loss = Some(client_losses.iter().map(|c| c.mean_loss).sum::<f64>() / client_losses.len() as f64);

        let weighted: Vec<(usize, &ModelParams, f64)> = reports
            .iter()
            .map(|r| {
                let w = if cfg.uniform_model_weights {
                    1.0
                } else {
                    r.samples as f64
                };
                (r.client_id, &r.params, w)
            })
            .collect();
        let global = aggregate_models(&weighted)?;

        let anchors = match &cfg.strategy {
            Strategy::FedFa(spec) if spec.update_anchors => {
                let estimates: Vec<ClientAnchors<'_>> = reports
                    .iter()
                    .filter_map(|r| {
                        r.anchor_estimate.as_ref().map(|e| ClientAnchors {
                            client_id: r.client_id,
                            estimate: e,
                            class_counts: &r.class_counts,
                            samples: r.samples,
                        })
                    })
                    .collect();
                aggregate_anchors(&self.state.anchors, &estimates, spec.anchor_weighting)?
            }
            _ => self.state.anchors.clone(),
        };

        self.state.global = global;
        self.state.anchors = anchors;
        self.state.round += 1;

        let round = self.state.round;
        let evaluate = round.is_multiple_of(cfg.eval_every) || round == cfg.rounds;
        let accuracy = if evaluate {
            Some(top1_accuracy(&self.state.global, &self.data.test)?)
        } else {
            None
        };
        let (per_class, total, train_loss) = global_diagnostics(&self.state, &self.data.union, self.anchor_mu())?;
        Ok(RoundRecord {
            round,
            accuracy,
            cls_update_cosine,
            feat_dist,
            mean_feat_dist,
            grad_sq_norm: total,
            grad_sq_norm_per_class: per_class,
            client_losses,
            mean_local_loss,
            train_loss,
        })
    }

    /// Runs all configured rounds, handing each record to `sink`.
    pub fn run_with(mut self, mut sink: impl FnMut(&RoundRecord, &ExperimentState) -> Result<()>) -> Result<RunOutput> {
        let first = self.snapshot()?;
        sink(&first, &self.state)?;
        let mut records = vec![first];
        while self.state.round < self.config.rounds {
            let rec = self.step()?;
            sink(&rec, &self.state)?;
            records.push(rec);
        }
        Ok(RunOutput {
            records,
            state: self.state,
        })
    }
}

/// Per-class and total classifier gradient norms of the global model on
/// `data`, and its `l_sup + μ·l_fa` against the current anchors.
fn global_diagnostics(state: &ExperimentState, data: &Dataset, mu: f64) -> Result<(Vec<f64>, f64, f64)> {
    let h = forward_features(&state.global.extractor, &data.x)?;
    let (sup, d_phi, _) = supervised_head(&state.global.classifier, &h, &data.y)?;
    let per_class: Vec<f64> = (0..d_phi.rows())
        .map(|c| d_phi.row(c).iter().map(|v| v * v).sum())
        .collect();
    let total = per_class.iter().sum();
    let mut loss = sup;
    if mu != 0.0 && !data.is_empty() {
        let mut fa = 0.0;
        for (j, &label) in data.y.iter().enumerate() {
            fa += h
                .row(j)
                .iter()
                .zip(state.anchors.anchors.row(label))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        loss += mu * fa / data.len() as f64;
    }
    Ok((per_class, total, loss))
}

/// Runs an experiment without touching the file system.
pub fn run_in_memory(config: &ExperimentConfig) -> Result<RunOutput> {
    Simulation::new(config.clone())?.run_with(|_, _| Ok(()))
}

#[derive(Serialize)]
struct AnchorRow<'a> {
    round: usize,
    class: usize,
    vector: &'a [f64],
}

/// File names inside the output directory.
pub mod files {
    pub const RESOLVED: &str = "config.resolved";
    pub const METRICS_JSONL: &str = "metrics.jsonl";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const CHECKPOINT: &str = "checkpoint.bin";
    pub const ANCHORS: &str = "anchors.jsonl";
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Runs an experiment and writes `config.resolved`, `metrics.jsonl`,
/// `metrics.csv`, `anchors.jsonl` and `checkpoint.bin` into `out_dir`.
/// Configuration and I/O problems surface before the first round.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_with(config, |_| {})
}

/// [`run_experiment`], calling `on_round` after each record is written.
pub fn run_experiment_with(config: &ExperimentConfig, mut on_round: impl FnMut(&RoundRecord)) -> Result<RunOutput> {
    let sim = Simulation::new(config.clone())?;
    let dir: PathBuf = config.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = dir.join(files::RESOLVED);
    std::fs::write(&resolved, config.to_toml()?).map_err(|e| Error::io(&resolved, e))?;

    let jsonl_path = dir.join(files::METRICS_JSONL);
    let csv_path = dir.join(files::METRICS_CSV);
    let anchors_path = dir.join(files::ANCHORS);
    let mut jsonl = create(&jsonl_path)?;
    let mut csv = csv::Writer::from_writer(create(&csv_path)?);
    let mut anchors_out = create(&anchors_path)?;
    let csv_err = |e: csv::Error| Error::Serde(format!("{}: {e}", csv_path.display()));
    csv.write_record(RoundRecord::CSV_HEADER).map_err(csv_err)?;
    let track_anchors = config.strategy.fedfa().is_some_and(|s| s.update_anchors);

    let out = sim.run_with(|rec, state| {
        let line = serde_json::to_string(rec).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(jsonl, "{line}").map_err(|e| Error::io(&jsonl_path, e))?;
        csv.write_record(rec.csv_row()).map_err(csv_err)?;
        if track_anchors {
            for class in 0..state.anchors.classes() {
                let row = AnchorRow {
                    round: state.round,
                    class,
                    vector: state.anchors.anchors.row(class),
                };
                let line = serde_json::to_string(&row).map_err(|e| Error::Serde(e.to_string()))?;
                writeln!(anchors_out, "{line}").map_err(|e| Error::io(&anchors_path, e))?;
            }
        }
        on_round(rec);
        Ok(())
    })?;
    jsonl.flush().map_err(|e| Error::io(&jsonl_path, e))?;
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    anchors_out.flush().map_err(|e| Error::io(&anchors_path, e))?;

    Checkpoint {
        round: out.state.round,
        model: out.state.global.clone(),
        anchors: config.strategy.fedfa().map(|_| out.state.anchors.clone()),
    }
    .save(&dir.join(files::CHECKPOINT))?;
    Ok(out)
}
