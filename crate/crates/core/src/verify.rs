//! Runtime oracle suites behind `fedfa verify`. Each suite checks analytic
//! code against an independent computation and reports pass or fail.

use std::time::Instant;

use crate::anchors::{aggregate_anchors, AnchorSet, AnchorWeighting, ClientAnchors};
use crate::config::{DatasetSpec, ExperimentConfig, PartitionSpec};
use crate::data::{batch_iter, generate_synthetic, partition_dirichlet, partition_shards, Dataset};
use crate::error::Result;
use crate::metrics::{feature_deviation_oracle, lemma1_deviation_oracle};
use crate::model::{
    anchor_loss_grads, calibration_loss_grad, init_model, local_loss_grads, sgd_step, supervised_loss_grads,
    Classifier, Extractor, Layer, ModelParams,
};
use crate::numerics::{rng_normal, seeded_rng, Matrix, SimRng};
use crate::server::{aggregate_models, run_in_memory};
use crate::strategies::{FedFaSpec, Strategy};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = (bool, String);

/// Every suite, in a fixed order.
pub const SUITES: [&str; 7] = [
    "finite-difference",
    "lemma1",
    "classifier-divergence",
    "feature-deviation",
    "degeneration",
    "aggregation",
    "partitions",
];

pub fn run_suite(name: &str) -> Option<SuiteResult> {
    let start = Instant::now();
    let (name, outcome): (&'static str, Result<Check>) = match name {
        "finite-difference" => ("finite-difference", finite_difference()),
        "lemma1" => ("lemma1", lemma1()),
        "classifier-divergence" => ("classifier-divergence", classifier_divergence()),
        "feature-deviation" => ("feature-deviation", feature_deviation()),
        "degeneration" => ("degeneration", degeneration()),
        "aggregation" => ("aggregation", aggregation()),
        "partitions" => ("partitions", partitions()),
        _ => return None,
    };
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    Some(SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all() -> Vec<SuiteResult> {
    SUITES.iter().filter_map(|s| run_suite(s)).collect()
}

fn random_batch(rng: &mut SimRng, n: usize, d_in: usize, classes: usize) -> (Matrix, Vec<usize>) {
    use rand::Rng;
    let x = rng_normal(rng, n, d_in, 0.0, 1.0);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

/// Central differences over every flattened parameter.
pub fn numeric_gradient(model: &ModelParams, eps: f64, f: impl Fn(&ModelParams) -> Result<f64>) -> Result<Vec<f64>> {
    let n = model.param_count();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = model.clone();
        let mut minus = model.clone();
        nudge(&mut plus, i, eps);
        nudge(&mut minus, i, -eps);
        out.push((f(&plus)? - f(&minus)?) / (2.0 * eps));
    }
    Ok(out)
}

fn nudge(model: &mut ModelParams, mut idx: usize, by: f64) {
    for t in model.tensors_mut() {
        if idx < t.len() {
            t[idx] += by;
            return;
        }
        idx -= t.len();
    }
}

/// Largest `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn finite_difference() -> Result<Check> {
    let mut worst = [0.0f64; 4];
    let instances = 20;
    for seed in 0..instances {
        let mut rng = seeded_rng(9000 + seed);
        let model = init_model(&[5, 6, 4], 3, &mut rng)?;
        let (x, y) = random_batch(&mut rng, 6, 5, 3);
        let anchors = rng_normal(&mut rng, 3, 4, 0.0, 1.0);
        let mu = 0.1;

        let (_, g) = supervised_loss_grads(&model, &x, &y)?;
        let num = numeric_gradient(&model, 1e-6, |m| Ok(supervised_loss_grads(m, &x, &y)?.0))?;
        worst[0] = worst[0].max(max_relative_error(&g.flatten(), &num));

        let (_, ga) = anchor_loss_grads(&model.extractor, &x, &y, &anchors)?;
        let mut ga_full = model.zeros_like();
        ga_full.extractor = ga;
        let num = numeric_gradient(&model, 1e-6, |m| {
            Ok(anchor_loss_grads(&m.extractor, &x, &y, &anchors)?.0)
        })?;
        worst[1] = worst[1].max(max_relative_error(&ga_full.flatten(), &num));

        let (_, gl) = local_loss_grads(&model, &x, &y, Some(&anchors), mu)?;
        let num = numeric_gradient(&model, 1e-6, |m| {
            Ok(local_loss_grads(m, &x, &y, Some(&anchors), mu)?.0.total)
        })?;
        worst[2] = worst[2].max(max_relative_error(&gl.flatten(), &num));

        let cal_anchors = rng_normal(&mut rng, 3, 4, 0.0, 1.0);
        let (_, gc) = calibration_loss_grad(&model.classifier, &cal_anchors)?;
        let mut gc_full = model.zeros_like();
        gc_full.classifier.proxies = gc;
        let num = numeric_gradient(&model, 1e-6, |m| {
            Ok(calibration_loss_grad(&m.classifier, &cal_anchors)?.0)
        })?;
        worst[3] = worst[3].max(max_relative_error(&gc_full.flatten(), &num));
    }
    let ok = worst.iter().all(|&w| w < 1e-5);
    Ok((
        ok,
        format!(
            "{instances} instances; max rel err sup {:.1e}, anchor {:.1e}, local {:.1e}, calibration {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

fn lemma1() -> Result<Check> {
    let mut worst = 0.0f64;
    let mut gap = 0.0f64;
    for seed in 0..50 {
        let mut rng = seeded_rng(7000 + seed);
        let model = init_model(&[6, 8, 5], 4, &mut rng)?;
        let (xa, ya) = random_batch(&mut rng, 12, 6, 4);
        let (xb, yb) = random_batch(&mut rng, 12, 6, 4);
        let r = lemma1_deviation_oracle(&model, (&xa, &ya), (&xb, &yb), 0.05)?;
        worst = worst.max(r.max_abs_err);
        gap = gap.max(r.approximation_gap);
    }
    let mut rng = seeded_rng(7999);
    let model = init_model(&[6, 8, 5], 4, &mut rng)?;
    let (x, y) = random_batch(&mut rng, 12, 6, 4);
    let same = lemma1_deviation_oracle(&model, (&x, &y), (&x, &y), 0.05)?;
    let zero = same
        .formula
        .as_slice()
        .iter()
        .chain(same.measured.as_slice())
        .all(|&v| v == 0.0);
    Ok((
        worst < 1e-10 && zero,
        format!("50 instances; max abs err {worst:.1e}; identical batches zero: {zero}; mean-feature gap {gap:.1e}"),
    ))
}

fn classifier_divergence() -> Result<Check> {
    let mut rng = seeded_rng(6100);
    let model = init_model(&[6, 8, 4], 4, &mut rng)?;
    let (xa, _) = random_batch(&mut rng, 8, 6, 4);
    let (xb, _) = random_batch(&mut rng, 8, 6, 4);
    let ya: Vec<usize> = (0..8).map(|j| j % 2).collect();
    let yb: Vec<usize> = (0..8).map(|j| 2 + j % 2).collect();
    let r = lemma1_deviation_oracle(&model, (&xa, &ya), (&xb, &yb), 0.05)?;
    let norms: Vec<f64> = (0..4).map(|c| r.formula.row(c).iter().map(|v| v * v).sum()).collect();
    let same = lemma1_deviation_oracle(&model, (&xa, &ya), (&xa, &ya), 0.05)?;
    let zero = same.formula.norm_sq() == 0.0;
    let ok = norms.iter().all(|&n| n > 0.0) && zero;
    Ok((
        ok,
        format!(
            "disjoint labels: min ||dphi_c||^2 {:.2e}; identical data zero: {zero}",
            norms.iter().cloned().fold(f64::INFINITY, f64::min)
        ),
    ))
}

fn feature_deviation() -> Result<Check> {
    let (n, d, classes, lr) = (9usize, 6usize, 3usize, 0.2);
    let mut worst = 0.0f64;
    let mut gap = 0.0f64;
    for seed in 0..10 {
        let mut rng = seeded_rng(5200 + seed);
        let mut w = rng_normal(&mut rng, d, n, 0.0, 1.0);
        for i in 3..d {
            w.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        let ex = Extractor::new(vec![Layer {
            weight: w,
            bias: vec![0.0; d],
        }])?;
        let phi_a = rng_normal(&mut rng, classes, d, 0.0, 1.0);
        let mut u = rng_normal(&mut rng, classes, d, 0.0, 1.0);
        for c in 0..classes {
            u.row_mut(c)[..3].iter_mut().for_each(|v| *v = 0.0);
        }
        let phi_b = phi_a.add(&u)?;
        let y: Vec<usize> = (0..n).map(|j| j % classes).collect();
        let r = feature_deviation_oracle(
            &ex,
            &Classifier { proxies: phi_a },
            &Classifier { proxies: phi_b },
            &Matrix::identity(n),
            &y,
            lr,
        )?;
        worst = worst.max(r.max_abs_err);
        gap = gap.max(r.prediction_gap);
    }
    Ok((
        worst < 1e-8 && gap < 1e-12,
        format!("10 instances; max abs err {worst:.1e}; prediction gap {gap:.1e}"),
    ))
}

fn tiny_config(strategy: Strategy, clients: usize, classes_per_client: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.rounds = 3;
    c.clients = clients;
    c.sample_rate = 1.0;
    c.workers = 2;
    c.dataset = DatasetSpec::Synthetic {
        classes: 4,
        per_class: 40,
        test_per_class: 20,
        input_dim: 8,
        separation: 1.5,
        within_std: 1.0,
    };
    c.partition = PartitionSpec::shards(classes_per_client);
    c.strategy = strategy;
    c
}

fn degeneration() -> Result<Check> {
    let avg = run_in_memory(&tiny_config(Strategy::FedAvg, 4, 2))?;
    let fa = run_in_memory(&tiny_config(Strategy::FedFa(FedFaSpec::degenerate()), 4, 2))?;
    let prox = run_in_memory(&tiny_config(Strategy::FedProx { prox_mu: 0.0 }, 4, 2))?;
    let fa_eq = fa.state.global == avg.state.global;
    let prox_eq = prox.state.global == avg.state.global;

    // one client holding everything versus plain minibatch SGD
    let cfg = tiny_config(Strategy::FedAvg, 1, 4);
    let sim = crate::server::Simulation::new(cfg.clone())?;
    let partition = sim.data.partitions[0].clone();
    let train = sim.data.train.clone();
    let mut model = sim.state.global.clone();
    let out = sim.run_with(|_, _| Ok(()))?;
    for round in 0..cfg.rounds {
        let mut velocity = None;
        for k in 0..cfg.hyper.local_epochs {
            let epoch = round * cfg.hyper.local_epochs + k;
            for b in batch_iter(&partition, &train, cfg.hyper.batch_size, epoch, cfg.seed) {
                let (_, g) = supervised_loss_grads(&model, &b.x, &b.y)?;
                sgd_step(&mut model, &g, &cfg.hyper, &mut velocity)?;
            }
        }
    }
    let central_eq = out.state.global == model;
    Ok((
        fa_eq && prox_eq && central_eq,
        format!("fedfa(off)==fedavg {fa_eq}; fedprox(0)==fedavg {prox_eq}; single client==centralized {central_eq}"),
    ))
}

fn aggregation() -> Result<Check> {
    let mut rng = seeded_rng(4400);
    let p = init_model(&[4, 5, 3], 3, &mut rng)?;
    let q = init_model(&[4, 5, 3], 3, &mut rng)?;
    let same = aggregate_models(&[(2, &p, 5.0), (0, &p, 1.0), (1, &p, 2.0)])? == p;
    let fwd = aggregate_models(&[(0, &p, 3.0), (1, &q, 1.0)])?;
    let rev = aggregate_models(&[(1, &q, 1.0), (0, &p, 3.0)])?;
    let order = fwd == rev;
    let weighted = fwd
        .flatten()
        .iter()
        .zip(p.flatten())
        .zip(q.flatten())
        .all(|((m, a), b)| (m - (0.75 * a + 0.25 * b)).abs() <= 1e-14 * (1.0 + m.abs()));

    let prev = AnchorSet::init_orthogonal(3, 3)?;
    let est = rng_normal(&mut rng, 3, 3, 0.0, 1.0);
    let counts_a = [4, 0, 2];
    let counts_b = [1, 0, 5];
    let clients = [
        ClientAnchors {
            client_id: 0,
            estimate: &est,
            class_counts: &counts_a,
            samples: 6,
        },
        ClientAnchors {
            client_id: 1,
            estimate: &est,
            class_counts: &counts_b,
            samples: 6,
        },
    ];
    let agg = aggregate_anchors(&prev, &clients, AnchorWeighting::ClientSize)?;
    let anchors_ok = agg.anchors.row(0) == est.row(0)
        && agg.anchors.row(2) == est.row(2)
        && agg.anchors.row(1) == prev.anchors.row(1);
    Ok((
        same && order && weighted && anchors_ok,
        format!("identical exact {same}; order-free {order}; n_i weighting {weighted}; anchors exact+carry-over {anchors_ok}"),
    ))
}

fn partitions() -> Result<Check> {
    let ds: Dataset = generate_synthetic(10, 100, 10, 1.0, 1.0, &mut seeded_rng(3300))?;
    let shards = partition_shards(&ds, 10, 2, &mut seeded_rng(1))?;
    let mut all: Vec<usize> = shards.iter().flat_map(|p| p.indices.iter().copied()).collect();
    all.sort_unstable();
    let exhaustive = all == (0..ds.len()).collect::<Vec<_>>();
    let exact_c = shards
        .iter()
        .all(|p| p.class_counts.iter().filter(|&&n| n > 0).count() == 2);

    let dir = partition_dirichlet(&ds, 10, 1e6, &mut seeded_rng(2))?;
    let mut max_share = 0.0f64;
    for c in 0..10 {
        let total: usize = dir.iter().map(|p| p.class_counts[c]).sum();
        for p in &dir {
            max_share = max_share.max(p.class_counts[c] as f64 / total as f64);
        }
    }
    let mut all: Vec<usize> = dir.iter().flat_map(|p| p.indices.iter().copied()).collect();
    all.sort_unstable();
    let dir_exhaustive = all == (0..ds.len()).collect::<Vec<_>>();
    Ok((
        exhaustive && exact_c && dir_exhaustive && max_share <= 0.1 + 0.05,
        format!("shards exhaustive {exhaustive}, #C exact {exact_c}; dirichlet exhaustive {dir_exhaustive}, max share {max_share:.3}"),
    ))
}
