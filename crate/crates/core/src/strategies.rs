//! Client-side local training: FedAvg, FedProx and FedFA with its
//! anchor-updating and calibration switches.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, AnchorWeighting, MomentumState};
use crate::data::{batch_iter, ClientPartition, Dataset};
use crate::error::{Error, Result};
use crate::model::{calibration_loss_grad, forward_features, local_loss_grads, sgd_step, Hyper, ModelParams};
use crate::numerics::Matrix;

/// When classifier calibration on the anchors runs during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// After every mini-batch update.
    #[default]
    PerBatch,
    /// At the end of every local epoch.
    PerEpoch,
    /// Once, after the last local epoch.
    AfterTraining,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedFaSpec {
    /// Weight of the anchor loss in the local objective.
    #[serde(default = "FedFaSpec::default_mu")]
    pub mu: f64,
    /// Blend between the previous and current epoch momentum.
    #[serde(default = "FedFaSpec::default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub calibrate: Calibration,
    #[serde(default = "FedFaSpec::default_true")]
    pub update_anchors: bool,
    /// Calibration steps per call for `per_epoch` and `after_training`.
    #[serde(default = "FedFaSpec::default_steps")]
    pub calibration_steps: usize,
    #[serde(default)]
    pub anchor_weighting: AnchorWeighting,
}

impl FedFaSpec {
    fn default_mu() -> f64 {
        0.1
    }
    fn default_lambda() -> f64 {
        0.5
    }
    fn default_true() -> bool {
        true
    }
    fn default_steps() -> usize {
        1
    }

    /// Everything switched off: reduces to FedAvg.
    pub fn degenerate() -> Self {
        FedFaSpec {
            mu: 0.0,
            calibrate: Calibration::Off,
            update_anchors: false,
            ..FedFaSpec::default()
        }
    }
}

impl Default for FedFaSpec {
    fn default() -> Self {
        FedFaSpec {
            mu: 0.1,
            lambda: 0.5,
            calibrate: Calibration::PerBatch,
            update_anchors: true,
            calibration_steps: 1,
            anchor_weighting: AnchorWeighting::ClientSize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx {
        #[serde(default = "Strategy::default_prox_mu")]
        prox_mu: f64,
    },
    #[serde(rename = "fedfa")]
    FedFa(FedFaSpec),
}

impl Strategy {
    fn default_prox_mu() -> f64 {
        0.05
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::FedFa(_) => "fedfa",
        }
    }

    pub fn fedfa(&self) -> Option<&FedFaSpec> {
        match self {
            Strategy::FedFa(spec) => Some(spec),
            _ => None,
        }
    }

    pub fn validate(&self, problems: &mut Vec<String>) {
        match self {
            Strategy::FedAvg => {}
            Strategy::FedProx { prox_mu } => {
                if !(*prox_mu >= 0.0 && prox_mu.is_finite()) {
                    problems.push(format!("strategy.prox_mu must be >= 0, got {prox_mu}"));
                }
            }
            Strategy::FedFa(spec) => {
                if !(spec.mu >= 0.0 && spec.mu.is_finite()) {
                    problems.push(format!("strategy.mu must be >= 0, got {}", spec.mu));
                }
                if !(0.0..=1.0).contains(&spec.lambda) {
                    problems.push(format!("strategy.lambda must be in [0, 1], got {}", spec.lambda));
                }
                if spec.calibration_steps == 0
                    && matches!(spec.calibrate, Calibration::PerEpoch | Calibration::AfterTraining)
                {
                    problems.push("strategy.calibration_steps must be positive".into());
                }
            }
        }
    }
}

/// Before/after values of the calibration loss around one calibration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationStep {
    pub before: f64,
    pub after: f64,
}

/// What a client sends back to the server after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalReport {
    pub client_id: usize,
    pub params: ModelParams,
    /// Final `ā_{c,i}`; only produced when FedFA updates anchors.
    pub anchor_estimate: Option<Matrix>,
    pub class_counts: Vec<usize>,
    pub samples: usize,
    /// `φ_after − φ_before`.
    pub classifier_update: Matrix,
    /// Local objective of every mini-batch, before its update.
    pub loss_trace: Vec<f64>,
    pub calibration_trace: Vec<CalibrationStep>,
}

impl LocalReport {
    pub fn mean_loss(&self) -> f64 {
        if self.loss_trace.is_empty() {
            return 0.0;
        }
        self.loss_trace.iter().sum::<f64>() / self.loss_trace.len() as f64
    }
}

/// Inputs shared by every local procedure.
#[derive(Debug, Clone, Copy)]
pub struct LocalContext<'a> {
    pub dataset: &'a Dataset,
    pub partition: &'a ClientPartition,
    pub hyper: &'a Hyper,
    pub seed: u64,
    /// Zero-based round; batch shuffles use epoch `round · K + k`.
    pub round: usize,
}

/// `calibration_steps` plain gradient steps on the calibration loss,
/// touching the classifier only.
pub fn calibrate_after_training(
    model: &mut ModelParams,
    anchors: &Matrix,
    steps: usize,
    lr: f64,
) -> Result<Vec<CalibrationStep>> {
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (before, grad) = calibration_loss_grad(&model.classifier, anchors)?;
        model.classifier.proxies.axpy(-lr, &grad)?;
        let (after, _) = calibration_loss_grad(&model.classifier, anchors)?;
        trace.push(CalibrationStep { before, after });
    }
    Ok(trace)
}

enum Mode<'a> {
    Avg,
    Prox(f64),
    Fa(&'a FedFaSpec, &'a AnchorSet),
}

fn train_local(global: &ModelParams, ctx: &LocalContext<'_>, mode: Mode<'_>) -> Result<LocalReport> {
    let partition = ctx.partition;
    if partition.is_empty() {
        return Err(Error::Config(format!("client {} has no samples", partition.client_id)));
    }
    let hyper = ctx.hyper;
    let mut params = global.clone();
    let mut velocity = None;
    let mut loss_trace = Vec::new();
    let mut calibration_trace = Vec::new();

    let (spec, anchor_set) = match mode {
        Mode::Fa(spec, anchors) => (Some(spec), Some(anchors)),
        _ => (None, None),
    };
    let anchors = anchor_set.map(|a| &a.anchors);
    let mu = spec.map_or(0.0, |s| s.mu);
    let calibrate = spec.map_or(Calibration::Off, |s| s.calibrate);
    let mut momentum = match (spec, anchor_set) {
        (Some(s), Some(a)) if s.update_anchors => Some(MomentumState::new(a)),
        _ => None,
    };

    for k in 0..hyper.local_epochs {
        let epoch = ctx.round * hyper.local_epochs + k;
        let batches = batch_iter(partition, ctx.dataset, hyper.batch_size, epoch, ctx.seed);
        let total_batches = batches.len();
        for batch in &batches {
            let (loss, mut grads) = local_loss_grads(&params, &batch.x, &batch.y, anchors, mu)?;
            if let Mode::Prox(prox_mu) = mode {
                if prox_mu != 0.0 {
                    let mut drift = params.clone();
                    drift.axpy(-1.0, global)?;
                    grads.axpy(prox_mu, &drift)?;
                }
            }
            loss_trace.push(loss.total);
            sgd_step(&mut params, &grads, hyper, &mut velocity)?;

            if let (Calibration::PerBatch, Some(a)) = (calibrate, anchors) {
                calibration_trace.extend(calibrate_after_training(&mut params, a, 1, hyper.lr)?);
            }
            if let Some(m) = momentum.as_mut() {
                let h = forward_features(&params.extractor, &batch.x)?;
                m.accumulate_batch(&h, &batch.y, total_batches)?;
            }
        }
        if let (Calibration::PerEpoch, Some(s), Some(a)) = (calibrate, spec, anchors) {
            calibration_trace.extend(calibrate_after_training(&mut params, a, s.calibration_steps, hyper.lr)?);
        }
        if let (Some(m), Some(s)) = (momentum.as_mut(), spec) {
            m.epoch_estimate(s.lambda);
        }
    }
    if let (Calibration::AfterTraining, Some(s), Some(a)) = (calibrate, spec, anchors) {
        calibration_trace.extend(calibrate_after_training(&mut params, a, s.calibration_steps, hyper.lr)?);
    }

    let classifier_update = params.classifier.proxies.sub(&global.classifier.proxies)?;
    Ok(LocalReport {
        client_id: partition.client_id,
        params,
        anchor_estimate: momentum.map(|m| m.estimate),
        class_counts: partition.class_counts.clone(),
        samples: partition.len(),
        classifier_update,
        loss_trace,
        calibration_trace,
    })
}

/// `K` epochs of mini-batch SGD on the cross-entropy loss.
pub fn local_train_fedavg(global: &ModelParams, ctx: &LocalContext<'_>) -> Result<LocalReport> {
    train_local(global, ctx, Mode::Avg)
}

/// FedAvg plus the proximal gradient `prox_mu · (w − w_global)` each step.
pub fn local_train_fedprox(global: &ModelParams, ctx: &LocalContext<'_>, prox_mu: f64) -> Result<LocalReport> {
    train_local(global, ctx, Mode::Prox(prox_mu))
}

/// FedFA local training. Per mini-batch: a step on `l_sup + μ·l_fa`, an
/// optional calibration step on the classifier, then accumulation of the
/// batch's class features under the updated extractor. Anchors stay fixed
/// for the whole round.
pub fn local_train_fedfa(
    global: &ModelParams,
    anchors: &AnchorSet,
    ctx: &LocalContext<'_>,
    spec: &FedFaSpec,
) -> Result<LocalReport> {
    if anchors.anchors.shape() != global.classifier.proxies.shape() {
        return Err(Error::shape(
            "local_train_fedfa",
            format!(
                "anchors {}x{} vs classifier {}x{}",
                anchors.classes(),
                anchors.dim(),
                global.classes(),
                global.feature_dim()
            ),
        ));
    }
    train_local(global, ctx, Mode::Fa(spec, anchors))
}

/// Dispatches on the strategy kind.
pub fn local_train(
    strategy: &Strategy,
    global: &ModelParams,
    anchors: &AnchorSet,
    ctx: &LocalContext<'_>,
) -> Result<LocalReport> {
    match strategy {
        Strategy::FedAvg => local_train_fedavg(global, ctx),
        Strategy::FedProx { prox_mu } => local_train_fedprox(global, ctx, *prox_mu),
        Strategy::FedFa(spec) => local_train_fedfa(global, anchors, ctx, spec),
    }
}
