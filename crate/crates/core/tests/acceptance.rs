//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Built with `harness = false`.

use std::process::ExitCode;
use std::time::Instant;

use fedfa_core::config::{ExperimentConfig, PartitionSpec};
use fedfa_core::data::{batch_iter, generate_synthetic, partition_dirichlet, partition_shards};
use fedfa_core::metrics::lemma1_deviation_oracle;
use fedfa_core::model::{
    anchor_loss_grads, calibration_loss_grad, init_model, local_loss_grads, sgd_step, supervised_loss_grads,
};
use fedfa_core::numerics::{rng_normal, seeded_rng};
use fedfa_core::server::{files, run_experiment, run_in_memory, Simulation};
use fedfa_core::verify::{max_relative_error, numeric_gradient};
use fedfa_core::{Calibration, FedFaSpec, Matrix, Result, RoundRecord, SimRng, Strategy};
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn failed(e: &fedfa_core::Error) -> Result<Outcome> {
    outcome(false, format!("error: {e}"))
}

fn batch(rng: &mut SimRng, n: usize, d_in: usize, classes: usize) -> (Matrix, Vec<usize>) {
    let x = rng_normal(rng, n, d_in, 0.0, 1.0);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

fn desk(strategy: Strategy, seed: u64, rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.rounds = rounds;
    c.strategy = strategy;
    c
}

fn fedfa(f: impl FnOnce(&mut FedFaSpec)) -> Strategy {
    let mut spec = FedFaSpec::default();
    f(&mut spec);
    Strategy::FedFa(spec)
}

fn final_accuracy(records: &[RoundRecord]) -> f64 {
    records
        .last()
        .and_then(|r| r.accuracy)
        .expect("last round is evaluated")
}

fn tail_mean(records: &[RoundRecord], n: usize, f: impl Fn(&RoundRecord) -> Option<f64>) -> f64 {
    let tail = &records[records.len() - n..];
    tail.iter()
        .map(|r| f(r).expect("metric present after round 0"))
        .sum::<f64>()
        / n as f64
}

/// Desk-sized gradient checks: d_in 8, hidden 4, feature dim 4, C = 4.
fn gradients() -> Result<Outcome> {
    let tol = 1e-5;
    let instances = 24;
    let mut worst = [0.0f64; 4];
    for seed in 0..instances {
        let mut rng = seeded_rng(11_000 + seed);
        let model = init_model(&[8, 4, 4], 4, &mut rng)?;
        let (x, y) = batch(&mut rng, 10, 8, 4);
        let anchors = rng_normal(&mut rng, 4, 4, 0.0, 1.0);

        let (_, g) = supervised_loss_grads(&model, &x, &y)?;
        let num = numeric_gradient(&model, 1e-6, |m| Ok(supervised_loss_grads(m, &x, &y)?.0))?;
        worst[0] = worst[0].max(max_relative_error(&g.flatten(), &num));

        let (_, ga) = anchor_loss_grads(&model.extractor, &x, &y, &anchors)?;
        let mut full = model.zeros_like();
        full.extractor = ga;
        let num = numeric_gradient(&model, 1e-6, |m| {
            Ok(anchor_loss_grads(&m.extractor, &x, &y, &anchors)?.0)
        })?;
        worst[1] = worst[1].max(max_relative_error(&full.flatten(), &num));

        let (_, gl) = local_loss_grads(&model, &x, &y, Some(&anchors), 0.1)?;
        let num = numeric_gradient(&model, 1e-6, |m| {
            Ok(local_loss_grads(m, &x, &y, Some(&anchors), 0.1)?.0.total)
        })?;
        worst[2] = worst[2].max(max_relative_error(&gl.flatten(), &num));

        let (_, gc) = calibration_loss_grad(&model.classifier, &anchors)?;
        let mut full = model.zeros_like();
        full.classifier.proxies = gc;
        let num = numeric_gradient(&model, 1e-6, |m| Ok(calibration_loss_grad(&m.classifier, &anchors)?.0))?;
        worst[3] = worst[3].max(max_relative_error(&full.flatten(), &num));
    }
    outcome(
        worst.iter().all(|&w| w < tol),
        format!(
            "{instances} instances, max rel err sup {:.1e} anchor {:.1e} local {:.1e} calibration {:.1e} (tol {tol:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn lemma1() -> Result<Outcome> {
    let tol = 1e-10;
    let mut worst = 0.0f64;
    for seed in 0..40 {
        let mut rng = seeded_rng(12_000 + seed);
        let model = init_model(&[8, 4, 4], 4, &mut rng)?;
        let a = batch(&mut rng, 16, 8, 4);
        let b = batch(&mut rng, 16, 8, 4);
        let r = lemma1_deviation_oracle(&model, (&a.0, &a.1), (&b.0, &b.1), 0.01)?;
        worst = worst.max(r.max_abs_err);
    }
    let mut rng = seeded_rng(12_999);
    let model = init_model(&[8, 4, 4], 4, &mut rng)?;
    let (x, y) = batch(&mut rng, 16, 8, 4);
    let same = lemma1_deviation_oracle(&model, (&x, &y), (&x, &y), 0.01)?;
    let zero = same
        .formula
        .as_slice()
        .iter()
        .chain(same.measured.as_slice())
        .all(|&v| v == 0.0);
    outcome(
        worst < tol && zero,
        format!("40 instances, max abs err {worst:.1e} (tol {tol:.0e}); identical batches exactly zero: {zero}"),
    )
}

fn divergence() -> Result<Outcome> {
    let mut rng = seeded_rng(13_000);
    let model = init_model(&[8, 4, 4], 4, &mut rng)?;
    let (xa, _) = batch(&mut rng, 12, 8, 4);
    let (xb, _) = batch(&mut rng, 12, 8, 4);
    let ya: Vec<usize> = (0..12).map(|j| j % 2).collect();
    let yb: Vec<usize> = (0..12).map(|j| 2 + j % 2).collect();
    let r = lemma1_deviation_oracle(&model, (&xa, &ya), (&xb, &yb), 0.01)?;
    let norms: Vec<f64> = (0..4).map(|c| r.formula.row(c).iter().map(|v| v * v).sum()).collect();
    let same = lemma1_deviation_oracle(&model, (&xa, &ya), (&xa, &ya), 0.01)?;
    let zero: Vec<f64> = (0..4)
        .map(|c| same.formula.row(c).iter().map(|v| v * v).sum())
        .collect();
    let shown: Vec<String> = norms.iter().map(|n| format!("{n:.2e}")).collect();
    outcome(
        norms.iter().all(|&n| n > 0.0) && zero.iter().all(|&n| n == 0.0),
        format!(
            "disjoint labels ||dphi_c||^2 = [{}]; identical data {zero:?}",
            shown.join(", ")
        ),
    )
}

fn degeneration() -> Result<Outcome> {
    let rounds = 10;
    let mut fa_eq = true;
    let mut prox_eq = true;
    for seed in SEEDS {
        let avg = run_in_memory(&desk(Strategy::FedAvg, seed, rounds))?;
        let fa = run_in_memory(&desk(Strategy::FedFa(FedFaSpec::degenerate()), seed, rounds))?;
        let prox = run_in_memory(&desk(Strategy::FedProx { prox_mu: 0.0 }, seed, rounds))?;
        fa_eq &= fa.state.global == avg.state.global && fa.records == avg.records;
        prox_eq &= prox.state.global == avg.state.global && prox.records == avg.records;
    }

    let mut central_eq = true;
    for seed in SEEDS {
        let mut cfg = desk(Strategy::FedAvg, seed, rounds);
        cfg.clients = 1;
        cfg.partition = PartitionSpec::shards(4);
        let sim = Simulation::new(cfg.clone())?;
        let partition = sim.data.partitions[0].clone();
        let train = sim.data.train.clone();
        let mut model = sim.state.global.clone();
        let out = sim.run_with(|_, _| Ok(()))?;
        for round in 0..rounds {
            let mut velocity = None;
            for k in 0..cfg.hyper.local_epochs {
                let epoch = round * cfg.hyper.local_epochs + k;
                for b in batch_iter(&partition, &train, cfg.hyper.batch_size, epoch, cfg.seed) {
                    let (_, g) = supervised_loss_grads(&model, &b.x, &b.y)?;
                    sgd_step(&mut model, &g, &cfg.hyper, &mut velocity)?;
                }
            }
        }
        central_eq &= out.state.global == model;
    }
    outcome(
        fa_eq && prox_eq && central_eq,
        format!("5 seeds x {rounds} rounds: fedfa(mu=0, no CC, no AU)==fedavg {fa_eq}; fedprox(0)==fedavg {prox_eq}; N=1==centralized SGD {central_eq}"),
    )
}

struct Pair {
    avg: Vec<RoundRecord>,
    fa: Vec<RoundRecord>,
}

fn pairs(rounds: usize) -> Result<Vec<Pair>> {
    SEEDS
        .iter()
        .map(|&seed| {
            Ok(Pair {
                avg: run_in_memory(&desk(Strategy::FedAvg, seed, rounds))?.records,
                fa: run_in_memory(&desk(fedfa(|_| {}), seed, rounds))?.records,
            })
        })
        .collect()
}

fn gradient_norm(runs: &[Pair]) -> Result<Outcome> {
    let mut lower = 0;
    let mut total = 0;
    let mut per_seed = Vec::new();
    for p in runs {
        let rounds: Vec<usize> = (6..p.fa.len()).collect();
        let n = rounds
            .iter()
            .filter(|&&r| p.fa[r].grad_sq_norm < p.avg[r].grad_sq_norm)
            .count();
        per_seed.push(format!("{n}/{}", rounds.len()));
        lower += n;
        total += rounds.len();
    }
    let frac = lower as f64 / total as f64;
    outcome(
        frac >= 0.8,
        format!(
            "fedfa below fedavg in {lower}/{total} rounds after round 5 ({:.0}%, need 80%); per seed {}",
            frac * 100.0,
            per_seed.join(" ")
        ),
    )
}

fn diagnostics(runs: &[Pair]) -> Result<Outcome> {
    let mut both = 0;
    let mut lines = Vec::new();
    for p in runs {
        let cos = (
            tail_mean(&p.avg, 10, |r| r.cls_update_cosine),
            tail_mean(&p.fa, 10, |r| r.cls_update_cosine),
        );
        let dist = (
            tail_mean(&p.avg, 10, |r| r.mean_feat_dist),
            tail_mean(&p.fa, 10, |r| r.mean_feat_dist),
        );
        if cos.1 > cos.0 && dist.1 < dist.0 {
            both += 1;
        }
        lines.push(format!(
            "cos {:.3}->{:.3} dist {:.3}->{:.3}",
            cos.0, cos.1, dist.0, dist.1
        ));
    }
    outcome(
        both >= 4,
        format!(
            "both trends hold in {both}/5 seeds (need 4); fedavg->fedfa over final 10 rounds: {}",
            lines.join("; ")
        ),
    )
}

fn accuracy_gap(runs: &[Pair]) -> Result<Outcome> {
    let gaps: Vec<f64> = runs
        .iter()
        .map(|p| final_accuracy(&p.fa) - final_accuracy(&p.avg))
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let avg = runs.iter().map(|p| final_accuracy(&p.avg)).sum::<f64>() / 5.0;
    let fa = runs.iter().map(|p| final_accuracy(&p.fa)).sum::<f64>() / 5.0;
    outcome(
        mean >= 0.03,
        format!(
            "60 rounds, mean accuracy fedavg {avg:.4} fedfa {fa:.4}, gap {:.2}pp (need 3pp)",
            mean * 100.0
        ),
    )
}

fn ablations(runs: &[Pair]) -> Result<Outcome> {
    let tol = 0.01;
    let mean_acc = |strategy: Strategy| -> Result<f64> {
        let mut sum = 0.0;
        for seed in SEEDS {
            sum += final_accuracy(&run_in_memory(&desk(strategy, seed, 60))?.records);
        }
        Ok(sum / SEEDS.len() as f64)
    };
    let full = runs.iter().map(|p| final_accuracy(&p.fa)).sum::<f64>() / runs.len() as f64;
    let no_au = mean_acc(fedfa(|s| s.update_anchors = false))?;
    let no_cc = mean_acc(fedfa(|s| s.calibrate = Calibration::Off))?;
    let epoch = mean_acc(fedfa(|s| s.calibrate = Calibration::PerEpoch))?;
    let after = mean_acc(fedfa(|s| s.calibrate = Calibration::AfterTraining))?;
    let checks = [
        ("full>=noAU", full, no_au),
        ("full>=noCC", full, no_cc),
        ("noAU>=noCC", no_au, no_cc),
        ("batch>=epoch", full, epoch),
        ("epoch>=after", epoch, after),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, a, b)| a + tol < *b)
        .map(|(n, _, _)| *n)
        .collect();
    outcome(
        failed.is_empty(),
        format!(
            "full {full:.4} noAU {no_au:.4} noCC {no_cc:.4}; per-batch {full:.4} per-epoch {epoch:.4} after {after:.4} (tol 1pp){}",
            if failed.is_empty() { String::new() } else { format!("; violated: {}", failed.join(", ")) }
        ),
    )
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| fedfa_core::Error::io(std::env::temp_dir(), e))?;
    let names = [
        files::METRICS_JSONL,
        files::METRICS_CSV,
        files::ANCHORS,
        files::CHECKPOINT,
    ];
    let run = |tag: &str, workers: usize| -> Result<Vec<Vec<u8>>> {
        let mut cfg = desk(fedfa(|_| {}), 7, 30);
        cfg.workers = workers;
        cfg.out_dir = dir.path().join(tag);
        run_experiment(&cfg)?;
        names
            .iter()
            .map(|n| {
                let p = cfg.out_dir.join(n);
                std::fs::read(&p).map_err(|e| fedfa_core::Error::io(&p, e))
            })
            .collect()
    };
    let a = run("a", 2)?;
    let b = run("b", 2)?;
    let c = run("c", 1)?;
    let same = a == b;
    let across_workers = a == c;
    outcome(
        same && across_workers,
        format!(
            "rerun byte-identical {same}; identical across worker counts {across_workers} ({})",
            names.join(", ")
        ),
    )
}

fn partitions() -> Result<Outcome> {
    let ds = generate_synthetic(10, 200, 10, 2.0, 1.0, &mut seeded_rng(14_000))?;
    let all_indices = (0..ds.len()).collect::<Vec<_>>();
    let mut ok = true;
    let mut worst_share = 0.0f64;
    for seed in SEEDS {
        for k in [1, 2, 3] {
            let parts = partition_shards(&ds, 10, k, &mut seeded_rng(seed))?;
            let mut all: Vec<usize> = parts.iter().flat_map(|p| p.indices.iter().copied()).collect();
            all.sort_unstable();
            ok &= all == all_indices;
            ok &= parts
                .iter()
                .all(|p| p.class_counts.iter().filter(|&&n| n > 0).count() == k);
        }
        let clients = 10;
        let parts = partition_dirichlet(&ds, clients, 1e6, &mut seeded_rng(seed))?;
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.indices.iter().copied()).collect();
        all.sort_unstable();
        ok &= all == all_indices;
        for c in 0..10 {
            let total: usize = parts.iter().map(|p| p.class_counts[c]).sum();
            for p in &parts {
                worst_share = worst_share.max(p.class_counts[c] as f64 / total as f64);
            }
        }
    }
    let bound = 1.0 / 10.0 + 0.05;
    outcome(
        ok && worst_share <= bound,
        format!("shards #C in {{1,2,3}} exact and exhaustive {ok}; dirichlet(1e6) max share {worst_share:.3} (bound {bound:.2})"),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, budget_s: f64, seconds: f64, r: Result<Outcome>| {
        let r = r.unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!("error: {e}"),
        });
        let in_time = seconds < budget_s;
        let passed = r.passed && in_time;
        if !passed {
            failures += 1;
        }
        println!(
            "[{}] {id:>2} {name}: {} [{seconds:.1}s, budget {budget_s}s{}]",
            if passed { "PASS" } else { "FAIL" },
            r.detail,
            if in_time { "" } else { ", exceeded" }
        );
    };
    macro_rules! timed {
        ($e:expr) => {{
            let t = Instant::now();
            let r = $e;
            (r, t.elapsed().as_secs_f64())
        }};
    }

    let (r, s) = timed!(gradients());
    report(1, "gradient correctness", 30.0, s, r);
    let (r, s) = timed!(lemma1());
    report(2, "classifier-update deviation oracle", 10.0, s, r);
    let (r, s) = timed!(divergence());
    report(3, "classifier divergence under disjoint labels", 10.0, s, r);
    let (r, s) = timed!(degeneration());
    report(4, "degeneration identities", 60.0, s, r);

    let (short, s30) = timed!(pairs(30));
    match short {
        Ok(runs) => {
            let (r, s) = timed!(gradient_norm(&runs));
            report(5, "classifier gradient norm trend", 300.0, s + s30, r);
            let (r, s) = timed!(diagnostics(&runs));
            report(6, "update similarity and feature distance trends", 300.0, s + s30, r);
        }
        Err(e) => {
            report(5, "classifier gradient norm trend", 300.0, s30, failed(&e));
            report(
                6,
                "update similarity and feature distance trends",
                300.0,
                s30,
                failed(&e),
            );
        }
    }
    let (long, s60) = timed!(pairs(60));
    match long {
        Ok(runs) => {
            let (r, s) = timed!(accuracy_gap(&runs));
            report(7, "accuracy gap", 600.0, s + s60, r);
            let (r, s) = timed!(ablations(&runs));
            report(8, "ablation ordering", 900.0, s + s60, r);
        }
        Err(e) => {
            report(7, "accuracy gap", 600.0, s60, failed(&e));
            report(8, "ablation ordering", 900.0, s60, failed(&e));
        }
    }

    let (r, s) = timed!(determinism());
    report(9, "determinism", 120.0, s, r);
    let (r, s) = timed!(partitions());
    report(10, "partitioner properties", 10.0, s, r);

    if failures == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 10 criteria failed");
        ExitCode::FAILURE
    }
}
