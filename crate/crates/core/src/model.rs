//! MLP feature extractor plus bias-free linear classifier, with hand-derived
//! gradients for the supervised, anchor and calibration losses.
//!
//! Shapes follow one convention throughout: samples are rows. A layer with
//! weight `W` (`d_out × d_in`) and bias `b` maps an `n × d_in` batch `A` to
//! `A Wᵀ + b`. Hidden layers apply a rectifier; the last extractor layer is
//! linear so features can reach any anchor coordinate. Classifier logits are
//! `H Φᵀ` where row `c` of `Φ` is the proxy of class `c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, rng_normal, softmax_in_place, Matrix, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `d_out × d_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Feature extractor `f_θ`: rectified hidden layers and a linear feature layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    pub layers: Vec<Layer>,
}

impl Extractor {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(
                    "extractor",
                    format!("layer {i}: bias length {} vs {} outputs", l.bias.len(), l.output_dim()),
                ));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(
                    "extractor",
                    format!(
                        "layer {i} emits {} values but layer {} expects {}",
                        pair[0].output_dim(),
                        i + 1,
                        pair[1].input_dim()
                    ),
                ));
            }
        }
        Ok(Extractor { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn zeros_like(&self) -> Extractor {
        Extractor {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }
}

/// Bias-free linear classifier `f_φ`. Row `c` of `proxies` is `φ_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub proxies: Matrix,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.proxies.rows()
    }

    pub fn dim(&self) -> usize {
        self.proxies.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: Extractor,
    pub classifier: Classifier,
}

/// Partial derivatives laid out exactly like the parameters they belong to.
pub type GradientSet = ModelParams;

impl ModelParams {
    pub fn new(extractor: Extractor, classifier: Classifier) -> Result<Self> {
        if extractor.feature_dim() != classifier.dim() {
            return Err(Error::shape(
                "model",
                format!(
                    "feature dim {} vs proxy dim {}",
                    extractor.feature_dim(),
                    classifier.dim()
                ),
            ));
        }
        Ok(ModelParams { extractor, classifier })
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            extractor: self.extractor.zeros_like(),
            classifier: Classifier {
                proxies: Matrix::zeros(self.classifier.proxies.rows(), self.classifier.proxies.cols()),
            },
        }
    }

    /// Every parameter tensor as a flat slice, in a fixed order: extractor
    /// layers (weight then bias) followed by the classifier.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.extractor.layers.len() + 1);
        for l in &self.extractor.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.classifier.proxies.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.extractor.layers.len() + 1);
        for l in &mut self.extractor.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.classifier.proxies.as_mut_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// True when both models have the same layer structure.
    pub fn congruent(&self, other: &ModelParams) -> bool {
        self.extractor.layers.len() == other.extractor.layers.len()
            && self
                .extractor
                .layers
                .iter()
                .zip(&other.extractor.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
            && self.classifier.proxies.shape() == other.classifier.proxies.shape()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        if !self.congruent(other) {
            return Err(Error::shape("axpy", "models are not congruent"));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Builds a model for layer widths `dims = [d_in, hidden.., d]` and `classes`
/// proxies. Weights are `Normal(0, 1/fan_in)`, biases zero.
pub fn init_model(dims: &[usize], classes: usize, rng: &mut SimRng) -> Result<ModelParams> {
    if dims.len() < 2 {
        return Err(Error::shape("init_model", "need an input width and a feature width"));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape("init_model", format!("width {i} is zero")));
    }
    if classes == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    let layers = dims
        .windows(2)
        .map(|w| Layer {
            weight: rng_normal(rng, w[1], w[0], 0.0, 1.0 / (w[0] as f64).sqrt()),
            bias: vec![0.0; w[1]],
        })
        .collect();
    let d = dims[dims.len() - 1];
    let proxies = rng_normal(rng, classes, d, 0.0, 1.0 / (d as f64).sqrt());
    ModelParams::new(Extractor::new(layers)?, Classifier { proxies })
}

fn affine(layer: &Layer, input: &Matrix) -> Result<Matrix> {
    let mut out = input.matmul_t(&layer.weight)?;
    for r in 0..out.rows() {
        for (v, &b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Activations of every layer: element 0 is the input, the last is `H`.
pub fn forward_trace(extractor: &Extractor, x: &Matrix) -> Result<Vec<Matrix>> {
    if x.cols() != extractor.input_dim() {
        return Err(Error::shape(
            "forward_features",
            format!(
                "input has {} columns, extractor expects {}",
                x.cols(),
                extractor.input_dim()
            ),
        ));
    }
    let last = extractor.layers.len() - 1;
    let mut acts = Vec::with_capacity(extractor.layers.len() + 1);
    acts.push(x.clone());
    for (i, layer) in extractor.layers.iter().enumerate() {
        let mut z = affine(layer, &acts[i])?;
        if i < last {
            z = z.map(|v| v.max(0.0));
        }
        acts.push(z);
    }
    Ok(acts)
}

/// `H = f_θ(X)`, one feature row per sample.
pub fn forward_features(extractor: &Extractor, x: &Matrix) -> Result<Matrix> {
    Ok(forward_trace(extractor, x)?.pop().expect("trace is non-empty"))
}

/// `z[j][c] = φ_c · h_j`.
pub fn forward_logits(classifier: &Classifier, h: &Matrix) -> Result<Matrix> {
    if h.cols() != classifier.dim() {
        return Err(Error::shape(
            "forward_logits",
            format!("features have {} columns, proxies {}", h.cols(), classifier.dim()),
        ));
    }
    h.matmul_t(&classifier.proxies)
}

/// Backpropagates `d_features` (gradient w.r.t. `H`) through the extractor.
fn backward_extractor(extractor: &Extractor, acts: &[Matrix], d_features: Matrix) -> Result<Extractor> {
    let mut grads = extractor.zeros_like();
    let mut delta = d_features;
    for l in (0..extractor.layers.len()).rev() {
        grads.layers[l].weight = delta.t_matmul(&acts[l])?;
        grads.layers[l].bias = delta.col_sums();
        if l > 0 {
            let mut prev = delta.matmul(&extractor.layers[l].weight)?;
            // acts[l] is the rectified output of layer l - 1
            for (d, &a) in prev.as_mut_slice().iter_mut().zip(acts[l].as_slice()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}

fn check_labels(y: &[usize], classes: usize) -> Result<()> {
    match y.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `logits` against `y`, with `(P − Y)/n` as the
/// gradient w.r.t. the logits.
fn cross_entropy(logits: &Matrix, y: &[usize]) -> (f64, Matrix) {
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut g = logits.clone();
    for (j, &label) in y.iter().enumerate() {
        let row = g.row_mut(j);
        loss += log_sum_exp(row) - row[label];
        softmax_in_place(row);
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (loss / n, g)
}

/// Mean cross-entropy of the classifier on fixed features `h`, with its
/// gradients w.r.t. `Φ` and `H` (in that order).
pub fn supervised_head(classifier: &Classifier, h: &Matrix, y: &[usize]) -> Result<(f64, Matrix, Matrix)> {
    check_labels(y, classifier.classes())?;
    if h.rows() != y.len() {
        return Err(Error::shape(
            "supervised_loss",
            format!("{} samples, {} labels", h.rows(), y.len()),
        ));
    }
    let logits = forward_logits(classifier, h)?;
    let (loss, g) = cross_entropy(&logits, y);
    let d_phi = g.t_matmul(h)?;
    let d_h = g.matmul(&classifier.proxies)?;
    Ok((loss, d_phi, d_h))
}

/// Mean cross-entropy over the batch and its exact gradient w.r.t. every
/// parameter.
pub fn supervised_loss_grads(model: &ModelParams, x: &Matrix, y: &[usize]) -> Result<(f64, GradientSet)> {
    let acts = forward_trace(&model.extractor, x)?;
    let h = &acts[acts.len() - 1];
    let (loss, d_phi, d_h) = supervised_head(&model.classifier, h, y)?;
    let extractor = backward_extractor(&model.extractor, &acts, d_h)?;
    Ok((
        loss,
        ModelParams {
            extractor,
            classifier: Classifier { proxies: d_phi },
        },
    ))
}

/// Mean squared distance between features and their class anchors, and its
/// gradient w.r.t. `H`.
fn anchor_head(h: &Matrix, y: &[usize], anchors: &Matrix) -> Result<(f64, Matrix)> {
    if h.rows() != y.len() {
        return Err(Error::shape(
            "anchor_loss",
            format!("{} samples, {} labels", h.rows(), y.len()),
        ));
    }
    if anchors.cols() != h.cols() {
        return Err(Error::shape(
            "anchor_loss",
            format!("anchor dim {} vs feature dim {}", anchors.cols(), h.cols()),
        ));
    }
    if let Some(&missing) = y.iter().find(|&&l| l >= anchors.rows()) {
        return Err(Error::MissingAnchor(missing));
    }
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut d_h = Matrix::zeros(h.rows(), h.cols());
    for (j, &label) in y.iter().enumerate() {
        let a = anchors.row(label);
        let out = d_h.row_mut(j);
        for ((o, &hv), &av) in out.iter_mut().zip(h.row(j)).zip(a) {
            let diff = hv - av;
            loss += diff * diff;
            *o = 2.0 * diff / n;
        }
    }
    Ok((loss / n, d_h))
}

/// Anchor loss `mean_j ‖h_j − a_{y_j}‖²`; gradients reach the extractor only.
pub fn anchor_loss_grads(extractor: &Extractor, x: &Matrix, y: &[usize], anchors: &Matrix) -> Result<(f64, Extractor)> {
    let acts = forward_trace(extractor, x)?;
    let (loss, d_h) = anchor_head(&acts[acts.len() - 1], y, anchors)?;
    Ok((loss, backward_extractor(extractor, &acts, d_h)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalLoss {
    pub supervised: f64,
    pub anchor: f64,
    pub total: f64,
}

/// `l_sup + μ·l_fa`. The classifier only sees the supervised part. With
/// `μ = 0` the anchor term is skipped entirely, so the result is bit-identical
/// to [`supervised_loss_grads`].
pub fn local_loss_grads(
    model: &ModelParams,
    x: &Matrix,
    y: &[usize],
    anchors: Option<&Matrix>,
    mu: f64,
) -> Result<(LocalLoss, GradientSet)> {
    let acts = forward_trace(&model.extractor, x)?;
    let h = &acts[acts.len() - 1];
    let (sup, d_phi, mut d_h) = supervised_head(&model.classifier, h, y)?;
    let mut anchor = 0.0;
    let mut total = sup;
    if mu != 0.0 {
        let anchors = anchors.ok_or(Error::MissingAnchor(y.first().copied().unwrap_or(0)))?;
        let (fa, d_fa) = anchor_head(h, y, anchors)?;
        d_h.axpy(mu, &d_fa)?;
        anchor = fa;
        total = sup + mu * fa;
    }
    let extractor = backward_extractor(&model.extractor, &acts, d_h)?;
    Ok((
        LocalLoss {
            supervised: sup,
            anchor,
            total,
        },
        ModelParams {
            extractor,
            classifier: Classifier { proxies: d_phi },
        },
    ))
}

/// Cross-entropy of the classifier on the anchors, each anchor labelled with
/// its own class. Returns the loss and its gradient w.r.t. the proxies.
pub fn calibration_loss_grad(classifier: &Classifier, anchors: &Matrix) -> Result<(f64, Matrix)> {
    if anchors.shape() != classifier.proxies.shape() {
        return Err(Error::shape(
            "calibration_loss",
            format!(
                "anchors {}x{} vs proxies {}x{}",
                anchors.rows(),
                anchors.cols(),
                classifier.classes(),
                classifier.dim()
            ),
        ));
    }
    let labels: Vec<usize> = (0..classifier.classes()).collect();
    let logits = forward_logits(classifier, anchors)?;
    let (loss, g) = cross_entropy(&logits, &labels);
    Ok((loss, g.t_matmul(anchors)?))
}

/// Plain SGD settings shared by every local procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 0.01,
            weight_decay: 0.001,
            momentum: 0.0,
            batch_size: 64,
            local_epochs: 5,
        }
    }
}

impl Hyper {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            problems.push(format!("hyper.lr must be a non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push(format!("hyper.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("hyper.momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            problems.push("hyper.batch_size must be positive".into());
        }
        if self.local_epochs == 0 {
            problems.push("hyper.local_epochs must be positive".into());
        }
    }
}

/// One SGD step: `w ← w − η(g + wd·w)`, or with heavy-ball momentum
/// `v ← m·v + (g + wd·w); w ← w − η·v`. The velocity is allocated on first
/// use. With zero momentum the velocity is never touched.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    hyper: &Hyper,
    velocity: &mut Option<GradientSet>,
) -> Result<()> {
    if !params.congruent(grads) {
        return Err(Error::shape("sgd_step", "gradients do not match parameters"));
    }
    let (lr, wd, m) = (hyper.lr, hyper.weight_decay, hyper.momentum);
    if m == 0.0 {
        for (w, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (wv, &gv) in w.iter_mut().zip(g) {
                *wv -= lr * (gv + wd * *wv);
            }
        }
        return Ok(());
    }
    let vel = velocity.get_or_insert_with(|| params.zeros_like());
    for ((w, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(vel.tensors_mut())
    {
        for ((wv, &gv), vv) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = m * *vv + (gv + wd * *wv);
            *wv -= lr * *vv;
        }
    }
    Ok(())
}

/// Index of the largest logit per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn rand_batch(rng: &mut SimRng, n: usize, d_in: usize, classes: usize) -> (Matrix, Vec<usize>) {
        use rand::Rng;
        let x = rng_normal(rng, n, d_in, 0.0, 1.0);
        let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (x, y)
    }

    /// Central differences of `f` over every parameter of `model`.
    fn numeric_grad(model: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        let base = model.flatten();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            set_flat(&mut plus, i, base[i] + eps);
            set_flat(&mut minus, i, base[i] - eps);
            out.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        out
    }

    fn set_flat(model: &mut ModelParams, mut idx: usize, v: f64) {
        for t in model.tensors_mut() {
            if idx < t.len() {
                t[idx] = v;
                return;
            }
            idx -= t.len();
        }
        panic!("index out of range");
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs() / (a.abs().max(n.abs()).max(1e-3));
            assert!(err < 1e-5, "{what}[{i}]: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = init_model(&[4, 8, 3], 3, &mut seeded_rng(1)).unwrap();
        assert_eq!(m.extractor.layers.len(), 2);
        assert_eq!(m.extractor.layers[0].weight.shape(), (8, 4));
        assert_eq!(m.extractor.layers[1].weight.shape(), (3, 8));
        assert_eq!(m.classifier.proxies.shape(), (3, 3));
        assert!(m.extractor.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(m, init_model(&[4, 8, 3], 3, &mut seeded_rng(1)).unwrap());
        assert!(init_model(&[4], 3, &mut seeded_rng(1)).is_err());
        assert!(init_model(&[4, 0, 3], 3, &mut seeded_rng(1)).is_err());
    }

    #[test]
    fn init_fan_in_scaling() {
        let mut all = Vec::new();
        for seed in 0..10 {
            let m = init_model(&[4, 8, 3], 3, &mut seeded_rng(seed)).unwrap();
            all.extend_from_slice(m.extractor.layers[0].weight.as_slice());
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.5).abs() < 0.05, "std {std}");
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut m = init_model(&[3, 5, 2], 2, &mut seeded_rng(2)).unwrap();
        for l in &mut m.extractor.layers {
            l.weight = Matrix::zeros(l.weight.rows(), l.weight.cols());
        }
        let x = rng_normal(&mut seeded_rng(3), 4, 3, 0.0, 1.0);
        let h = forward_features(&m.extractor, &x).unwrap();
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let ex = Extractor::new(vec![Layer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = rng_normal(&mut seeded_rng(4), 5, 3, 0.0, 1.0);
        assert_eq!(forward_features(&ex, &x).unwrap(), x);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let m = init_model(&[3, 4, 2], 2, &mut seeded_rng(5)).unwrap();
        let mut m = m;
        m.extractor.layers[0].bias = vec![0.1, -0.2, 0.3, 0.05];
        m.extractor.layers[1].bias = vec![0.5, -0.5];
        let x = rng_normal(&mut seeded_rng(6), 3, 3, 0.0, 1.0);
        let h = forward_features(&m.extractor, &x).unwrap();
        let (l0, l1) = (&m.extractor.layers[0], &m.extractor.layers[1]);
        for j in 0..3 {
            let mut hidden = [0.0; 4];
            for (o, hv) in hidden.iter_mut().enumerate() {
                let mut s = l0.bias[o];
                for i in 0..3 {
                    s += l0.weight.get(o, i) * x.get(j, i);
                }
                *hv = if s > 0.0 { s } else { 0.0 };
            }
            for o in 0..2 {
                let mut s = l1.bias[o];
                for (i, &hv) in hidden.iter().enumerate() {
                    s += l1.weight.get(o, i) * hv;
                }
                assert!((h.get(j, o) - s).abs() < 1e-12);
            }
        }
        assert!(forward_features(&m.extractor, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn logits_examples() {
        let cls = Classifier {
            proxies: Matrix::identity(3),
        };
        let h = Matrix::from_rows(&[[0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(forward_logits(&cls, &h).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
        let zero = forward_logits(&cls, &Matrix::zeros(2, 3)).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));

        let mut rng = seeded_rng(7);
        let cls = Classifier {
            proxies: rng_normal(&mut rng, 4, 3, 0.0, 1.0),
        };
        let h = rng_normal(&mut rng, 5, 3, 0.0, 1.0);
        let z = forward_logits(&cls, &h).unwrap();
        let oracle = h.matmul(&cls.proxies.transpose()).unwrap();
        for (a, b) in z.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut m = init_model(&[3, 4], 4, &mut seeded_rng(8)).unwrap();
        m.classifier.proxies = Matrix::zeros(4, 4);
        let x = rng_normal(&mut seeded_rng(9), 6, 3, 0.0, 1.0);
        let (loss, _) = supervised_loss_grads(&m, &x, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let ex = Extractor::new(vec![Layer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let m = ModelParams::new(
            ex,
            Classifier {
                proxies: Matrix::identity(3).scale(50.0),
            },
        )
        .unwrap();
        let x = Matrix::identity(3);
        let (loss, _) = supervised_loss_grads(&m, &x, &[0, 1, 2]).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn label_out_of_range() {
        let m = init_model(&[3, 2], 2, &mut seeded_rng(1)).unwrap();
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            supervised_loss_grads(&m, &x, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = seeded_rng(100 + seed);
            let m = init_model(&[4, 5, 3], 3, &mut rng).unwrap();
            let (x, y) = rand_batch(&mut rng, 3, 4, 3);
            let (_, g) = supervised_loss_grads(&m, &x, &y).unwrap();
            let num = numeric_grad(&m, |p| supervised_loss_grads(p, &x, &y).unwrap().0);
            assert_close(&g.flatten(), &num, "supervised");
        }
    }

    #[test]
    fn classifier_gradient_matches_per_sample_form() {
        let mut rng = seeded_rng(12);
        let m = init_model(&[4, 6, 3], 5, &mut rng).unwrap();
        let (x, y) = rand_batch(&mut rng, 7, 4, 5);
        let (_, g) = supervised_loss_grads(&m, &x, &y).unwrap();
        let h = forward_features(&m.extractor, &x).unwrap();
        let p = forward_logits(&m.classifier, &h).unwrap().softmax_rows();
        for c in 0..5 {
            for k in 0..3 {
                let mut s = 0.0;
                for j in 0..7 {
                    let onehot = if y[j] == c { 1.0 } else { 0.0 };
                    s += (p.get(j, c) - onehot) * h.get(j, k);
                }
                assert!((g.classifier.proxies.get(c, k) - s / 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn supervised_loss_shift_invariant() {
        // adding t·u to every proxy shifts every logit of h by t·(u·h); with a
        // single sample this is a constant shift of its logits
        let mut rng = seeded_rng(13);
        let m = init_model(&[3, 4, 3], 4, &mut rng).unwrap();
        let (x, y) = rand_batch(&mut rng, 1, 3, 4);
        let (base, _) = supervised_loss_grads(&m, &x, &y).unwrap();
        let u = rng_normal(&mut rng, 1, 3, 0.0, 1.0);
        let mut shifted = m.clone();
        for c in 0..4 {
            for (p, &uv) in shifted.classifier.proxies.row_mut(c).iter_mut().zip(u.as_slice()) {
                *p += 3.0 * uv;
            }
        }
        let (moved, _) = supervised_loss_grads(&shifted, &x, &y).unwrap();
        assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn anchor_loss_examples() {
        let ex = Extractor::new(vec![Layer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let anchors = Matrix::identity(3);
        let (loss, g) = anchor_loss_grads(&ex, &anchors, &[0, 1, 2], &anchors).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.layers.iter().all(|l| l.weight.as_slice().iter().all(|&v| v == 0.0)));

        let x = Matrix::from_rows(&[[1.0, 0.0, 1.0]]).unwrap();
        let (loss, _) = anchor_loss_grads(&ex, &x, &[2], &anchors).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);

        let short = Matrix::identity(3).select_rows(&[0, 1]);
        assert!(matches!(
            anchor_loss_grads(&ex, &x, &[2], &short),
            Err(Error::MissingAnchor(2))
        ));
    }

    #[test]
    fn anchor_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = seeded_rng(200 + seed);
            let m = init_model(&[4, 5, 3], 3, &mut rng).unwrap();
            let anchors = rng_normal(&mut rng, 3, 3, 0.0, 1.0);
            let (x, y) = rand_batch(&mut rng, 4, 4, 3);
            let (_, g) = anchor_loss_grads(&m.extractor, &x, &y, &anchors).unwrap();
            let num = numeric_grad(&m, |p| anchor_loss_grads(&p.extractor, &x, &y, &anchors).unwrap().0);
            let analytic = ModelParams {
                extractor: g,
                classifier: m.classifier.clone(),
            };
            let mut flat = analytic.flatten();
            let cls_len = m.classifier.proxies.as_slice().len();
            let n = flat.len();
            flat[n - cls_len..].iter_mut().for_each(|v| *v = 0.0);
            assert_close(&flat, &num, "anchor");
        }
    }

    #[test]
    fn local_loss_degenerates_and_is_linear() {
        let mut rng = seeded_rng(14);
        let m = init_model(&[4, 6, 3], 3, &mut rng).unwrap();
        let anchors = Matrix::identity(3);
        let (x, y) = rand_batch(&mut rng, 5, 4, 3);

        let (sup, gs) = supervised_loss_grads(&m, &x, &y).unwrap();
        let (l0, g0) = local_loss_grads(&m, &x, &y, Some(&anchors), 0.0).unwrap();
        assert_eq!(l0.total.to_bits(), sup.to_bits());
        assert_eq!(g0, gs);

        let mu = 0.1;
        let (l, g) = local_loss_grads(&m, &x, &y, Some(&anchors), mu).unwrap();
        let (fa, gfa) = anchor_loss_grads(&m.extractor, &x, &y, &anchors).unwrap();
        assert!((l.total - (sup + mu * fa)).abs() < 1e-12);
        let mut expect = gs.clone();
        for (layer, extra) in expect.extractor.layers.iter_mut().zip(&gfa.layers) {
            layer.weight.axpy(mu, &extra.weight).unwrap();
            for (b, &e) in layer.bias.iter_mut().zip(&extra.bias) {
                *b += mu * e;
            }
        }
        for (a, b) in g.flatten().iter().zip(expect.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = seeded_rng(300 + seed);
            let m = init_model(&[4, 5, 4, 3], 3, &mut rng).unwrap();
            let anchors = rng_normal(&mut rng, 3, 3, 0.0, 1.0);
            let (x, y) = rand_batch(&mut rng, 5, 4, 3);
            let (_, g) = local_loss_grads(&m, &x, &y, Some(&anchors), 0.1).unwrap();
            let num = numeric_grad(&m, |p| {
                local_loss_grads(p, &x, &y, Some(&anchors), 0.1).unwrap().0.total
            });
            assert_close(&g.flatten(), &num, "local");
        }
    }

    #[test]
    fn calibration_examples() {
        let cls = Classifier {
            proxies: Matrix::identity(3),
        };
        let (loss, _) = calibration_loss_grad(&cls, &Matrix::identity(3)).unwrap();
        let e = std::f64::consts::E;
        assert!((loss - (1.0 + 2.0 / e).ln()).abs() < 1e-12);
        assert!((loss - 0.551444).abs() < 1e-6);

        let cls = Classifier {
            proxies: Matrix::zeros(4, 4),
        };
        let (loss, _) = calibration_loss_grad(&cls, &Matrix::identity(4)).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        assert!(calibration_loss_grad(&cls, &Matrix::identity(3)).is_err());
    }

    #[test]
    fn calibration_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = seeded_rng(400 + seed);
            let cls = Classifier {
                proxies: rng_normal(&mut rng, 4, 5, 0.0, 1.0),
            };
            let anchors = rng_normal(&mut rng, 4, 5, 0.0, 1.0);
            let (_, g) = calibration_loss_grad(&cls, &anchors).unwrap();
            let eps = 1e-6;
            let mut num = Vec::new();
            for i in 0..20 {
                let mut p = cls.clone();
                let mut q = cls.clone();
                p.proxies.as_mut_slice()[i] += eps;
                q.proxies.as_mut_slice()[i] -= eps;
                let lp = calibration_loss_grad(&p, &anchors).unwrap().0;
                let lq = calibration_loss_grad(&q, &anchors).unwrap().0;
                num.push((lp - lq) / (2.0 * eps));
            }
            assert_close(g.as_slice(), &num, "calibration");
        }
    }

    #[test]
    fn sgd_zero_gradient_no_decay_is_noop() {
        let mut m = init_model(&[3, 4, 2], 2, &mut seeded_rng(15)).unwrap();
        let before = m.clone();
        let g = m.zeros_like();
        let hyper = Hyper {
            weight_decay: 0.0,
            ..Hyper::default()
        };
        sgd_step(&mut m, &g, &hyper, &mut None).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn sgd_plain_step_with_decay() {
        let mut m = init_model(&[3, 2], 2, &mut seeded_rng(16)).unwrap();
        let before = m.flatten();
        let mut g = m.zeros_like();
        g.tensors_mut().into_iter().flatten().for_each(|v| *v = 1.0);
        let hyper = Hyper::default();
        assert_eq!((hyper.lr, hyper.weight_decay, hyper.momentum), (0.01, 0.001, 0.0));
        sgd_step(&mut m, &g, &hyper, &mut None).unwrap();
        for (a, w) in m.flatten().iter().zip(before) {
            assert_eq!(*a, w - 0.01 * (1.0 + 0.001 * w));
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut m = init_model(&[2, 2], 2, &mut seeded_rng(17)).unwrap();
        let w0 = m.flatten();
        let mut g1 = m.zeros_like();
        let mut g2 = m.zeros_like();
        for (i, v) in g1.tensors_mut().into_iter().flatten().enumerate() {
            *v = 0.1 * i as f64 - 0.3;
        }
        for (i, v) in g2.tensors_mut().into_iter().flatten().enumerate() {
            *v = 0.2 - 0.05 * i as f64;
        }
        let hyper = Hyper {
            lr: 0.1,
            weight_decay: 0.01,
            momentum: 0.9,
            ..Hyper::default()
        };
        let mut vel = None;
        sgd_step(&mut m, &g1, &hyper, &mut vel).unwrap();
        sgd_step(&mut m, &g2, &hyper, &mut vel).unwrap();
        let (f1, f2) = (g1.flatten(), g2.flatten());
        for (i, &w) in m.flatten().iter().enumerate() {
            let v1 = f1[i] + 0.01 * w0[i];
            let w1 = w0[i] - 0.1 * v1;
            let v2 = 0.9 * v1 + f2[i] + 0.01 * w1;
            let w2 = w1 - 0.1 * v2;
            assert!((w - w2).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let z = Matrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&z), vec![0, 1]);
    }
}
