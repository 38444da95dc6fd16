//! Feature anchors: orthogonal initialization, per-client momentum of class
//! features across an epoch, the epoch-level estimate, and server-side
//! aggregation of client estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One anchor per class (row `c` is `a_c`) and the round it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Matrix,
    pub round: usize,
}

impl AnchorSet {
    /// `a_c = e_c` in `ℝ^dim`.
    pub fn init_orthogonal(classes: usize, dim: usize) -> Result<Self> {
        if dim < classes {
            return Err(Error::Config(format!(
                "orthogonal anchors need dim >= classes, got dim {dim} for {classes} classes"
            )));
        }
        let mut anchors = Matrix::zeros(classes, dim);
        for c in 0..classes {
            anchors.set(c, c, 1.0);
        }
        Ok(AnchorSet { anchors, round: 0 })
    }

    pub fn classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }
}

/// Per-client accumulator for one local training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    /// Running sum `m_c` for the current epoch.
    pub sum: Matrix,
    /// Batches in the current epoch that contained class `c`.
    pub presence: Vec<usize>,
    /// `m_c` of the previous epoch.
    pub previous: Matrix,
    /// Latest estimate `ā_c`.
    pub estimate: Matrix,
}

impl MomentumState {
    /// Starts a round. The previous-epoch snapshot is seeded with the
    /// incoming round anchors so the first estimate blends toward them.
    pub fn new(incoming: &AnchorSet) -> Self {
        let (c, d) = incoming.anchors.shape();
        MomentumState {
            sum: Matrix::zeros(c, d),
            presence: vec![0; c],
            previous: incoming.anchors.clone(),
            estimate: incoming.anchors.clone(),
        }
    }

    /// Adds `1/(B·|batch_c|) · Σ_{j: y_j = c} h_j` to `m_c` for every class
    /// present in the batch.
    pub fn accumulate_batch(&mut self, features: &Matrix, labels: &[usize], total_batches: usize) -> Result<()> {
        if total_batches == 0 {
            return Err(Error::Config("an epoch needs at least one batch".into()));
        }
        if features.rows() != labels.len() || features.cols() != self.sum.cols() {
            return Err(Error::shape(
                "accumulate_batch",
                format!(
                    "{}x{} features, {} labels, anchor dim {}",
                    features.rows(),
                    features.cols(),
                    labels.len(),
                    self.sum.cols()
                ),
            ));
        }
        let classes = self.sum.rows();
        let mut batch_sum = Matrix::zeros(classes, self.sum.cols());
        let mut counts = vec![0usize; classes];
        for (j, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::MissingAnchor(label));
            }
            counts[label] += 1;
            for (s, &h) in batch_sum.row_mut(label).iter_mut().zip(features.row(j)) {
                *s += h;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let w = 1.0 / (total_batches as f64 * count as f64);
            let src = batch_sum.row(c).to_vec();
            for (m, s) in self.sum.row_mut(c).iter_mut().zip(src) {
                *m += w * s;
            }
            self.presence[c] += 1;
        }
        Ok(())
    }

    /// `ā_c ← λ·m_prev + (1−λ)·m_curr`, then rolls the snapshot and clears
    /// the running sum.
    pub fn epoch_estimate(&mut self, lambda: f64) {
        let (c, d) = self.sum.shape();
        let mut est = Matrix::zeros(c, d);
        for ((e, &p), &m) in est
            .as_mut_slice()
            .iter_mut()
            .zip(self.previous.as_slice())
            .zip(self.sum.as_slice())
        {
            *e = lambda * p + (1.0 - lambda) * m;
        }
        self.estimate = est;
        self.previous = std::mem::replace(&mut self.sum, Matrix::zeros(c, d));
        self.presence.iter_mut().for_each(|p| *p = 0);
    }
}

/// How client anchor estimates are weighted on the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorWeighting {
    /// `n_i`, renormalized over clients that hold the class.
    #[default]
    ClientSize,
    /// `n_{i,c}`.
    ClassCount,
}

/// A client's final anchor estimate together with what it trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAnchors<'a> {
    pub client_id: usize,
    pub estimate: &'a Matrix,
    pub class_counts: &'a [usize],
    pub samples: usize,
}

/// Weighted average of client estimates per class, over clients that hold
/// that class. Classes no participating client holds keep their previous
/// anchor. Clients are summed in ascending id order.
pub fn aggregate_anchors(
    previous: &AnchorSet,
    clients: &[ClientAnchors<'_>],
    weighting: AnchorWeighting,
) -> Result<AnchorSet> {
    if clients.is_empty() {
        return Err(Error::Config("anchor aggregation needs at least one client".into()));
    }
    let (classes, dim) = previous.anchors.shape();
    for c in clients {
        if c.estimate.shape() != (classes, dim) || c.class_counts.len() != classes {
            return Err(Error::shape(
                "aggregate_anchors",
                format!("client {} estimate shape", c.client_id),
            ));
        }
    }
    let mut order: Vec<&ClientAnchors<'_>> = clients.iter().collect();
    order.sort_by_key(|c| c.client_id);

    let mut out = previous.anchors.clone();
    for class in 0..classes {
        let weight = |c: &ClientAnchors<'_>| match weighting {
            AnchorWeighting::ClientSize => c.samples as f64,
            AnchorWeighting::ClassCount => c.class_counts[class] as f64,
        };
        let holders: Vec<&&ClientAnchors<'_>> = order.iter().filter(|c| c.class_counts[class] > 0).collect();
        let total: f64 = holders.iter().map(|c| weight(c)).sum();
        if holders.is_empty() || total <= 0.0 {
            continue;
        }
        // a_ref + Σ w_i (e_i − a_ref): identical estimates aggregate exactly
        let reference = holders[0].estimate.row(class);
        let row = out.row_mut(class);
        row.copy_from_slice(reference);
        for c in holders.iter().skip(1) {
            let w = weight(c) / total;
            for ((o, &e), &r) in row.iter_mut().zip(c.estimate.row(class)).zip(reference) {
                *o += w * (e - r);
            }
        }
    }
    Ok(AnchorSet {
        anchors: out,
        round: previous.round + 1,
    })
}
