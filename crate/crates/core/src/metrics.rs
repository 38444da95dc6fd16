//! Accuracy, the cross-client divergence diagnostics, and exact oracles for
//! the classifier-update deviation and the feature-deviation relation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, forward_features, forward_logits, sgd_step, supervised_head, supervised_loss_grads, Classifier,
    Extractor, Hyper, ModelParams,
};
use crate::numerics::{softmax_in_place, Matrix};
use crate::strategies::LocalReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    pub mean_loss: f64,
}

/// Everything measured at the end of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Number of completed rounds; 0 is the initial model.
    pub round: usize,
    /// Top-1 test accuracy of the global model, when evaluated this round.
    pub accuracy: Option<f64>,
    /// Mean pairwise similarity of the clients' classifier updates.
    pub cls_update_cosine: Option<f64>,
    /// Per class, mean pairwise distance between the clients' class-mean
    /// probe features.
    pub feat_dist: Option<Vec<f64>>,
    pub mean_feat_dist: Option<f64>,
    /// `Σ_c ‖∇_φc l_sup‖²` of the global model on the union of client data.
    pub grad_sq_norm: f64,
    pub grad_sq_norm_per_class: Vec<f64>,
    pub client_losses: Vec<ClientLoss>,
    pub mean_local_loss: Option<f64>,
    /// `l_sup + μ·l_fa` of the global model on the union of client data
    /// (μ = 0 outside FedFA).
    pub train_loss: f64,
}

impl RoundRecord {
    pub const CSV_HEADER: [&'static str; 6] = [
        "round",
        "accuracy",
        "cls_update_cosine",
        "mean_feat_dist",
        "grad_sq_norm",
        "mean_local_loss",
    ];

    /// One CSV row in [`Self::CSV_HEADER`] order; missing values are empty.
    pub fn csv_row(&self) -> [String; 6] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.round.to_string(),
            opt(self.accuracy),
            opt(self.cls_update_cosine),
            opt(self.mean_feat_dist),
            self.grad_sq_norm.to_string(),
            opt(self.mean_local_loss),
        ]
    }
}

/// How classifier updates are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// Fraction of samples whose arg-max logit is the label. Ties go to the
/// lowest class index.
pub fn top1_accuracy(model: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let h = forward_features(&model.extractor, &dataset.x)?;
    let pred = argmax_rows(&forward_logits(&model.classifier, &h)?);
    let hits = pred.iter().zip(&dataset.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / dataset.len() as f64)
}

fn pair_similarity(a: &[f64], b: &[f64], kind: Similarity) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    match kind {
        Similarity::Dot => dot,
        Similarity::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        }
    }
}

/// Mean similarity over all unordered pairs of update matrices. `None` with
/// fewer than two.
pub fn update_similarity(updates: &[&Matrix], kind: Similarity) -> Option<f64> {
    if updates.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..updates.len() {
        for j in i + 1..updates.len() {
            sum += pair_similarity(updates[i].as_slice(), updates[j].as_slice(), kind);
            pairs += 1;
        }
    }
    Some(sum / pairs as f64)
}

/// [`update_similarity`] over the reports' classifier updates.
pub fn classifier_update_similarity(reports: &[LocalReport], kind: Similarity) -> Option<f64> {
    let updates: Vec<&Matrix> = reports.iter().map(|r| &r.classifier_update).collect();
    update_similarity(&updates, kind)
}

/// Per class: each model's mean feature over the probe samples of that
/// class, then the mean pairwise Euclidean distance between models.
pub fn cross_client_feature_distance(extractors: &[&Extractor], probe: &Dataset) -> Result<Vec<f64>> {
    let pools = probe.class_pools();
    if let Some(c) = pools.iter().position(|p| p.is_empty()) {
        return Err(Error::Config(format!("probe set has no samples of class {c}")));
    }
    let mut means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(extractors.len());
    for e in extractors {
        let h = forward_features(e, &probe.x)?;
        let per_class = pools
            .iter()
            .map(|pool| {
                let mut m = vec![0.0; h.cols()];
                for &j in pool {
                    for (o, &v) in m.iter_mut().zip(h.row(j)) {
                        *o += v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= pool.len() as f64);
                m
            })
            .collect();
        means.push(per_class);
    }
    let k = extractors.len();
    let pairs = k * k.saturating_sub(1) / 2;
    let mut out = vec![0.0; pools.len()];
    if pairs == 0 {
        return Ok(out);
    }
    for (c, o) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                let d2: f64 = means[i][c]
                    .iter()
                    .zip(&means[j][c])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sum += d2.sqrt();
            }
        }
        *o = sum / pairs as f64;
    }
    Ok(out)
}

/// Per-class `‖∇_φc l_sup‖²` of the model on the whole dataset, and their sum.
pub fn classifier_grad_sq_norm(model: &ModelParams, dataset: &Dataset) -> Result<(Vec<f64>, f64)> {
    let h = forward_features(&model.extractor, &dataset.x)?;
    let (_, d_phi, _) = supervised_head(&model.classifier, &h, &dataset.y)?;
    let per_class: Vec<f64> = (0..d_phi.rows())
        .map(|c| d_phi.row(c).iter().map(|v| v * v).sum())
        .collect();
    let total = per_class.iter().sum();
    Ok((per_class, total))
}

/// Result of [`lemma1_deviation_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationCheck {
    /// Closed-form `Δφ = Δφ_a − Δφ_b` from per-sample sums.
    pub formula: Matrix,
    /// Difference of two real SGD steps on the proxies.
    pub measured: Matrix,
    pub max_abs_err: f64,
    /// Largest elementwise gap between the mean-feature approximation and
    /// the exact per-sample form. Informational.
    pub approximation_gap: f64,
}

struct Stats {
    /// `p[j][c]`
    probs: Matrix,
    h: Matrix,
}

fn batch_stats(model: &ModelParams, x: &Matrix) -> Result<Stats> {
    let h = forward_features(&model.extractor, x)?;
    let mut probs = forward_logits(&model.classifier, &h)?;
    for j in 0..probs.rows() {
        softmax_in_place(probs.row_mut(j));
    }
    Ok(Stats { probs, h })
}

/// `η/n Σ_j (1[y_j = c] − p_c^(j)) h_j` for every class, by explicit loops.
fn exact_update(s: &Stats, y: &[usize], classes: usize, lr: f64) -> Matrix {
    let n = y.len() as f64;
    let mut out = Matrix::zeros(classes, s.h.cols());
    for c in 0..classes {
        let row = out.row_mut(c);
        for (j, &label) in y.iter().enumerate() {
            let coef = f64::from(u8::from(label == c)) - s.probs.get(j, c);
            for (o, &hv) in row.iter_mut().zip(s.h.row(j)) {
                *o += coef * hv;
            }
        }
        row.iter_mut().for_each(|v| *v *= lr / n);
    }
    out
}

/// Mean-feature form: `η/n [n_c (1 − p̄_c^(c)) h̄_c − Σ_{c̄≠c} n_c̄ p̄_c^(c̄) h̄_c̄]`.
fn mean_feature_update(s: &Stats, y: &[usize], classes: usize, lr: f64) -> Matrix {
    let n = y.len() as f64;
    let d = s.h.cols();
    let mut count = vec![0usize; classes];
    let mut h_bar = Matrix::zeros(classes, d);
    // p_bar[k][c]: mean over class-k samples of p_c
    let mut p_bar = Matrix::zeros(classes, classes);
    for (j, &label) in y.iter().enumerate() {
        count[label] += 1;
        for (o, &hv) in h_bar.row_mut(label).iter_mut().zip(s.h.row(j)) {
            *o += hv;
        }
        for (o, &p) in p_bar.row_mut(label).iter_mut().zip(s.probs.row(j)) {
            *o += p;
        }
    }
    for k in 0..classes {
        if count[k] > 0 {
            let inv = 1.0 / count[k] as f64;
            h_bar.row_mut(k).iter_mut().for_each(|v| *v *= inv);
            p_bar.row_mut(k).iter_mut().for_each(|v| *v *= inv);
        }
    }
    let mut out = Matrix::zeros(classes, d);
    for c in 0..classes {
        for k in 0..classes {
            let nk = count[k] as f64;
            let coef = if k == c {
                nk * (1.0 - p_bar.get(k, c))
            } else {
                -nk * p_bar.get(k, c)
            };
            let src = h_bar.row(k).to_vec();
            for (o, hv) in out.row_mut(c).iter_mut().zip(src) {
                *o += coef * hv;
            }
        }
        out.row_mut(c).iter_mut().for_each(|v| *v *= lr / n);
    }
    out
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Classifier-update deviation between two clients that share `model` and
/// take one plain SGD step (rate `lr`) on their own batch.
pub fn lemma1_deviation_oracle(
    model: &ModelParams,
    batch_a: (&Matrix, &[usize]),
    batch_b: (&Matrix, &[usize]),
    lr: f64,
) -> Result<DeviationCheck> {
    let (xa, ya) = batch_a;
    let (xb, yb) = batch_b;
    if ya.len() != yb.len() || ya.is_empty() {
        return Err(Error::shape(
            "lemma1_deviation_oracle",
            format!("batch sizes {} and {} must be equal and nonzero", ya.len(), yb.len()),
        ));
    }
    let classes = model.classes();
    let step = |x: &Matrix, y: &[usize]| -> Result<Matrix> {
        let (_, g) = supervised_loss_grads(model, x, y)?;
        let mut phi = model.classifier.proxies.clone();
        phi.axpy(-lr, &g.classifier.proxies)?;
        phi.sub(&model.classifier.proxies)
    };
    let measured = step(xa, ya)?.sub(&step(xb, yb)?)?;

    let sa = batch_stats(model, xa)?;
    let sb = batch_stats(model, xb)?;
    let formula = exact_update(&sa, ya, classes, lr).sub(&exact_update(&sb, yb, classes, lr))?;
    let approx = mean_feature_update(&sa, ya, classes, lr).sub(&mean_feature_update(&sb, yb, classes, lr))?;

    Ok(DeviationCheck {
        max_abs_err: max_abs_diff(&formula, &measured),
        approximation_gap: max_abs_diff(&approx, &formula),
        formula,
        measured,
    })
}

/// Result of [`feature_deviation_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDeviation {
    /// `η/n (Δφ_c − Σ_ĉ p̄_ĉ^(c) Δφ_ĉ)` per class `c`, with `p̄` from client a.
    pub formula: Matrix,
    /// Class-mean feature of client a minus client b after one step.
    pub measured: Matrix,
    pub max_abs_err: f64,
    /// Largest `|p̄_a − p̄_b|` over classes; the relation assumes zero.
    pub prediction_gap: f64,
}

fn class_mean_probs(classifier: &Classifier, h: &Matrix, y: &[usize]) -> Result<Matrix> {
    let c = classifier.classes();
    let mut logits = forward_logits(classifier, h)?;
    let mut out = Matrix::zeros(c, c);
    let mut count = vec![0usize; c];
    for (j, &label) in y.iter().enumerate() {
        let row = logits.row_mut(j);
        softmax_in_place(row);
        count[label] += 1;
        for (o, &p) in out.row_mut(label).iter_mut().zip(row.iter()) {
            *o += p;
        }
    }
    for k in 0..c {
        if count[k] > 0 {
            let inv = 1.0 / count[k] as f64;
            out.row_mut(k).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(out)
}

fn class_means(h: &Matrix, y: &[usize], classes: usize) -> Matrix {
    let mut out = Matrix::zeros(classes, h.cols());
    let mut count = vec![0usize; classes];
    for (j, &label) in y.iter().enumerate() {
        count[label] += 1;
        for (o, &v) in out.row_mut(label).iter_mut().zip(h.row(j)) {
            *o += v;
        }
    }
    for k in 0..classes {
        if count[k] > 0 {
            let inv = 1.0 / count[k] as f64;
            out.row_mut(k).iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

/// Two clients share `extractor` and data `(x, y)` but hold different
/// classifiers. Each takes one SGD step on the extractor weights only (the
/// classifier and biases stay put); the class-mean features then deviate by
/// `η/n (Δφ_c − Σ_ĉ p̄_ĉ^(c) Δφ_ĉ)` when the clients' mean predictions match.
///
/// The relation is exact for a single linear layer fed orthonormal inputs,
/// where each feature moves by its own gradient only.
pub fn feature_deviation_oracle(
    extractor: &Extractor,
    classifier_a: &Classifier,
    classifier_b: &Classifier,
    x: &Matrix,
    y: &[usize],
    lr: f64,
) -> Result<FeatureDeviation> {
    if classifier_a.proxies.shape() != classifier_b.proxies.shape() {
        return Err(Error::shape(
            "feature_deviation_oracle",
            "classifier shapes differ".to_string(),
        ));
    }
    let classes = classifier_a.classes();
    let hyper = Hyper {
        lr,
        weight_decay: 0.0,
        momentum: 0.0,
        ..Hyper::default()
    };
    let step = |cls: &Classifier| -> Result<Matrix> {
        let model = ModelParams::new(extractor.clone(), cls.clone())?;
        let (_, mut g) = supervised_loss_grads(&model, x, y)?;
        for layer in &mut g.extractor.layers {
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        g.classifier.proxies = Matrix::zeros(classes, cls.dim());
        let mut next = model;
        sgd_step(&mut next, &g, &hyper, &mut None)?;
        Ok(class_means(&forward_features(&next.extractor, x)?, y, classes))
    };
    let measured = step(classifier_a)?.sub(&step(classifier_b)?)?;

    let h = forward_features(extractor, x)?;
    let pa = class_mean_probs(classifier_a, &h, y)?;
    let pb = class_mean_probs(classifier_b, &h, y)?;
    let prediction_gap = max_abs_diff(&pa, &pb);
    let delta = classifier_a.proxies.sub(&classifier_b.proxies)?;
    let scale = lr / y.len() as f64;
    let mut formula = Matrix::zeros(classes, delta.cols());
    for c in 0..classes {
        let row = formula.row_mut(c);
        row.copy_from_slice(delta.row(c));
        for k in 0..classes {
            let p = pa.get(c, k);
            for (o, &d) in row.iter_mut().zip(delta.row(k)) {
                *o -= p * d;
            }
        }
        row.iter_mut().for_each(|v| *v *= scale);
    }
    // rows of absent classes carry no features
    let present: Vec<bool> = (0..classes).map(|c| y.contains(&c)).collect();
    for (c, &p) in present.iter().enumerate() {
        if !p {
            formula.row_mut(c).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(FeatureDeviation {
        max_abs_err: max_abs_diff(&formula, &measured),
        formula,
        measured,
        prediction_gap,
    })
}
