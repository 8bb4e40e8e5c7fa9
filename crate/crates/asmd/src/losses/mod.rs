//! The four training loss terms and their weighted combination.
//!
//! Two faces per term. The report functions here take plain numbers and
//! produce the logged scalar values; the differentiable versions are
//! composed on a [`Graph`] from engine ops (softmax/sigmoid cross-entropy,
//! the cross-correlation penalty) and combined with [`combine_on_graph`].
//!
//! The per-domain tracking loss is kept in two flavors on purpose. The
//! logged metric sums only the positive-label terms with the 1/(n*T_k)
//! normalization; the heads themselves are trained with full two-class
//! softmax cross-entropy. [`LossReport`] carries both so neither reading
//! is silently rewritten into the other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{kernels, EngineError, Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("score {value} at index {index} outside (0,1)")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("domain indicator row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("bad loss weights: {0}")]
    BadWeights(String),
    #[error("no loss terms present")]
    Empty,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

// ---------------------------------------------------------------- weights --

/// Term weights for the combined objective
/// `total = l_dom + lambda1*l_adv + lambda2*l_dif + lambda3*l_aot`,
/// plus the per-domain weights used inside l_dom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: Vec<f64>,
}

impl LossWeights {
    pub fn new(
        lambda1: f64,
        lambda2: f64,
        lambda3: f64,
        alpha: Vec<f64>,
    ) -> Result<Self, LossError> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LossError::BadWeights(format!("{name} = {v}, want >= 0")));
            }
        }
        if alpha.is_empty() {
            return Err(LossError::BadWeights("alpha is empty".into()));
        }
        if alpha.iter().any(|&a| !(a >= 0.0)) {
            return Err(LossError::BadWeights("negative alpha".into()));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LossError::BadWeights(format!("alpha sums to {sum}, want 1")));
        }
        Ok(Self { lambda1, lambda2, lambda3, alpha })
    }

    /// Equal domain weights alpha_k = 1/K.
    pub fn equal_alpha(
        k_domains: usize,
        lambda1: f64,
        lambda2: f64,
        lambda3: f64,
    ) -> Result<Self, LossError> {
        if k_domains == 0 {
            return Err(LossError::BadWeights("k_domains = 0".into()));
        }
        Self::new(lambda1, lambda2, lambda3, vec![1.0 / k_domains as f64; k_domains])
    }
}

// ----------------------------------------------------------------- report --

/// Both readings of one domain's tracking loss: the positive-label-only
/// logged metric and the two-class cross-entropy the head is trained on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackLosses {
    pub literal: f64,
    pub trained: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_dom: f64,
    /// Alpha-weighted trained cross-entropy; what the optimizer saw.
    pub l_dom_trained: f64,
    pub l_adv: f64,
    pub l_dif: f64,
    pub l_aot: f64,
    /// l_dom + lambda1*l_adv + lambda2*l_dif + lambda3*l_aot.
    pub total: f64,
    pub per_domain: Vec<TrackLosses>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Supervised,
    Unsupervised,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Supervised => "supervised",
            Phase::Unsupervised => "unsupervised",
        }
    }
}

pub const LOG_HEADER: &str = "iteration,phase,l_dom,l_adv,l_dif,l_aot,total";

/// One training-log CSV row. Floats use shortest-roundtrip formatting, so
/// parsing the row back reproduces the exact values.
pub fn log_row(iteration: u64, phase: Phase, r: &LossReport) -> String {
    format!(
        "{iteration},{},{},{},{},{},{}",
        phase.as_str(),
        r.l_dom,
        r.l_adv,
        r.l_dif,
        r.l_aot,
        r.total
    )
}

// ------------------------------------------------------------ loss values --

/// Logged per-domain tracking loss: -(1/(n*T)) sum of y*ln(score) over all
/// T frames with n samples each. Only positive-label terms contribute, so
/// an all-negative batch scores exactly 0.
pub fn l_track(
    scores: &[f64],
    labels: &[bool],
    samples_per_frame: usize,
    frames: usize,
) -> Result<f64, LossError> {
    let n = samples_per_frame * frames;
    if scores.len() != n || labels.len() != n || n == 0 {
        return Err(LossError::LengthMismatch(format!(
            "want {samples_per_frame} samples x {frames} frames, got {} scores / {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        if !(s > 0.0 && s < 1.0) {
            return Err(LossError::ScoreOutOfRange { index: i, value: s });
        }
        if y {
            sum += s.ln();
        }
    }
    Ok(-sum / n as f64)
}

/// Alpha-weighted sum of per-domain tracking losses.
pub fn l_dom(track: &[f64], alpha: &[f64]) -> Result<f64, LossError> {
    if track.len() != alpha.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} domain losses vs {} weights",
            track.len(),
            alpha.len()
        )));
    }
    Ok(track.iter().zip(alpha).map(|(l, a)| a * l).sum())
}

/// Discriminator loss: mean negative log-softmax of the true domain.
/// `logits` and `indicators` are both [B, K]; each indicator row must be
/// exactly one-hot. Ignores sample labels by construction, which is what
/// lets unsupervised iterations train the shared trunk through it.
pub fn l_adv(logits: &Tensor, indicators: &Tensor) -> Result<f64, LossError> {
    if logits.shape().len() != 2 || logits.shape() != indicators.shape() {
        return Err(LossError::LengthMismatch(format!(
            "logits {:?} vs indicators {:?}",
            logits.shape(),
            indicators.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for i in 0..b {
        let row = &indicators.data()[i * k..(i + 1) * k];
        let mut hot = None;
        for (j, &v) in row.iter().enumerate() {
            if v == 1.0 && hot.is_none() {
                hot = Some(j);
            } else if v != 0.0 {
                return Err(LossError::NotOneHot { row: i });
            }
        }
        let Some(hot) = hot else {
            return Err(LossError::NotOneHot { row: i });
        };
        let z = &logits.data()[i * k..(i + 1) * k];
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[hot];
    }
    Ok(total / b as f64)
}

/// Co-activation penalty summed over domains. `per_sample` switches
/// between the batch cross-correlation reading ||F_s^T F_k||_F^2 and the
/// per-sample outer-product reading sum_i ||f_s,i||^2 ||f_k,i||^2.
pub fn l_dif(shared: &Tensor, privates: &[&Tensor], per_sample: bool) -> Result<f64, LossError> {
    let mut total = 0.0;
    for fk in privates {
        total += kernels::frobenius_sq_of_product(shared, fk, per_sample)?;
    }
    Ok(total)
}

/// Direction loss: mean binary cross-entropy of sigmoid(logit) against the
/// forward/backward label, in the overflow-safe form.
pub fn l_aot(logits: &[f64], forward: &[bool]) -> Result<f64, LossError> {
    if logits.len() != forward.len() || logits.is_empty() {
        return Err(LossError::LengthMismatch(format!(
            "{} logits vs {} labels",
            logits.len(),
            forward.len()
        )));
    }
    let mut total = 0.0;
    for (&z, &f) in logits.iter().zip(forward) {
        let t = if f { 1.0 } else { 0.0 };
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    Ok(total / logits.len() as f64)
}

/// Assembles the report. `per_domain` may be empty (unsupervised
/// iterations have no tracking term); otherwise its length must match
/// `alpha`. Absent terms are passed as 0.
pub fn total_loss(
    per_domain: &[TrackLosses],
    l_adv: f64,
    l_dif: f64,
    l_aot: f64,
    w: &LossWeights,
) -> Result<LossReport, LossError> {
    let (dom, dom_trained) = if per_domain.is_empty() {
        (0.0, 0.0)
    } else {
        let lit: Vec<f64> = per_domain.iter().map(|t| t.literal).collect();
        let tr: Vec<f64> = per_domain.iter().map(|t| t.trained).collect();
        (l_dom(&lit, &w.alpha)?, l_dom(&tr, &w.alpha)?)
    };
    for (term, value) in [
        ("l_dom", dom),
        ("l_dom_trained", dom_trained),
        ("l_adv", l_adv),
        ("l_dif", l_dif),
        ("l_aot", l_aot),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { term, value });
        }
    }
    Ok(LossReport {
        l_dom: dom,
        l_dom_trained: dom_trained,
        l_adv,
        l_dif,
        l_aot,
        total: dom + w.lambda1 * l_adv + w.lambda2 * l_dif + w.lambda3 * l_aot,
        per_domain: per_domain.to_vec(),
    })
}

// ------------------------------------------------------------- graph side --

/// Weighted sum of scalar nodes, built as scale-and-add.
pub fn weighted_sum_on_graph(
    g: &mut Graph,
    nodes: &[NodeId],
    weights: &[f64],
) -> Result<NodeId, LossError> {
    if nodes.len() != weights.len() || nodes.is_empty() {
        return Err(LossError::LengthMismatch(format!(
            "{} nodes vs {} weights",
            nodes.len(),
            weights.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for (&n, &w) in nodes.iter().zip(weights) {
        let term = if w == 1.0 { n } else { g.scale(n, w) };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.unwrap())
}

/// The combined objective on the graph. Absent terms are skipped, as are
/// terms whose weight is 0, so a zero lambda contributes neither value nor
/// gradient. Errors if nothing is present.
pub fn combine_on_graph(
    g: &mut Graph,
    dom: Option<NodeId>,
    adv: Option<NodeId>,
    dif: Option<NodeId>,
    aot: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId, LossError> {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for (node, weight) in [(dom, 1.0), (adv, w.lambda1), (dif, w.lambda2), (aot, w.lambda3)] {
        if let (Some(n), true) = (node, weight != 0.0) {
            nodes.push(n);
            weights.push(weight);
        }
    }
    if nodes.is_empty() {
        return Err(LossError::Empty);
    }
    weighted_sum_on_graph(g, &nodes, &weights)
}
