//! Training objectives with closed-form gradients.
//!
//! * masked-token prediction (`irr_loss`), normalised by `|M|·|V|`;
//! * cross-modal projection matching (`cmpm_loss`): for each row `i`,
//!   `p_i = softmax_j(cos(a_i, b_j) / τ)` and the row loss is
//!   `Σ_j p_ij · log(p_ij / (q_ij + ε))` with `q` the row-normalised identity
//!   labels; rows are averaged and both directions summed;
//! * identity classification (`id_loss`);
//! * the two inversion-network objectives (`tinet_loss`), which reuse the
//!   matching loss with the inversion embedding substituted in;
//! * symmetric InfoNCE (`itc_loss`), kept as an ablation comparator.
//!
//! Every function returns the scalar and the gradient with respect to each
//! input matrix so the values can be chained on an [`crate::autodiff::Tape`].

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::MatchLabelMatrix;
use crate::linalg::{dot, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IrrNorm {
    /// Divide by `|M|·|V|`.
    #[default]
    Paper,
    /// Divide by `|M|` only (conventional masked-LM averaging).
    MaskedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub irr_norm: IrrNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            epsilon: 1e-8,
            irr_norm: IrrNorm::Paper,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-4) {
            return Err(Error::InvalidConfig(alloc::format!(
                "epsilon must lie in (0, 1e-4), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Scalar loss over two embedding matrices and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

struct CosineSims {
    a_hat: Matrix,
    b_hat: Matrix,
    a_norm: Vec<f64>,
    b_norm: Vec<f64>,
    sims: Matrix,
}

fn unit_rows(m: &Matrix, context: &'static str) -> Result<(Matrix, Vec<f64>)> {
    let mut hat = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = hat.row_mut(i);
        let n = libm::sqrt(dot(row, row));
        if n == 0.0 {
            return Err(Error::ZeroNorm { context, row: i });
        }
        if !n.is_finite() {
            return Err(Error::NonFinite(alloc::format!("{context} row {i}")));
        }
        for x in row.iter_mut() {
            *x /= n;
        }
        norms.push(n);
    }
    Ok((hat, norms))
}

fn cosine_sims(a: &Matrix, b: &Matrix) -> Result<CosineSims> {
    if a.cols() != b.cols() {
        return Err(Error::shape("embedding width", a.cols(), b.cols()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Empty("embedding batch"));
    }
    let (a_hat, a_norm) = unit_rows(a, "lhs embeddings")?;
    let (b_hat, b_norm) = unit_rows(b, "rhs embeddings")?;
    let sims = a_hat.matmul_transposed(&b_hat)?;
    Ok(CosineSims {
        a_hat,
        b_hat,
        a_norm,
        b_norm,
        sims,
    })
}

/// Pulls `dL/dS` back through `S = â·b̂ᵀ` to the raw rows of `a` and `b`.
fn cosine_backward(cs: &CosineSims, d_sims: &Matrix) -> Result<(Matrix, Matrix)> {
    let project = |d_hat: Matrix, hat: &Matrix, norms: &[f64]| {
        let mut out = d_hat;
        for (i, &norm) in norms.iter().enumerate() {
            let h = hat.row(i);
            let along = dot(out.row(i), h);
            for (o, &u) in out.row_mut(i).iter_mut().zip(h) {
                *o = (*o - along * u) / norm;
            }
        }
        out
    };
    let da_hat = d_sims.matmul(&cs.b_hat)?;
    let db_hat = d_sims.transposed_matmul(&cs.a_hat)?;
    Ok((
        project(da_hat, &cs.a_hat, &cs.a_norm),
        project(db_hat, &cs.b_hat, &cs.b_norm),
    ))
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(z.iter().map(|x| libm::exp(x - max)).sum::<f64>());
    z.iter().map(|x| x - lse).collect()
}

/// Cosine similarity matrix `S[i][j] = cos(a_i, b_j)`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(cosine_sims(a, b)?.sims)
}

/// Row-wise softmax of `cos(a_i, b_j) / τ`.
pub fn matching_probabilities(a: &Matrix, b: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    let sims = cosine_similarity_matrix(a, b)?;
    let mut p = Matrix::zeros(sims.rows(), sims.cols());
    for i in 0..sims.rows() {
        let z: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
        for (o, lp) in p.row_mut(i).iter_mut().zip(log_softmax_row(&z)) {
            *o = libm::exp(lp);
        }
    }
    Ok(p)
}

/// One direction of the projection-matching loss:
/// `(1/N) Σ_i Σ_j p_ij · log(p_ij / (q_ij + ε))`.
pub fn matching_kl(a: &Matrix, b: &Matrix, true_match: &Matrix, cfg: &LossConfig) -> Result<PairLoss> {
    cfg.validate()?;
    let cs = cosine_sims(a, b)?;
    if true_match.shape() != cs.sims.shape() {
        return Err(Error::shape(
            "true-match matrix",
            alloc::format!("{:?}", cs.sims.shape()),
            alloc::format!("{:?}", true_match.shape()),
        ));
    }
    let n = cs.sims.rows();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_sims = Matrix::zeros(n, cs.sims.cols());
    for i in 0..n {
        let z: Vec<f64> = cs.sims.row(i).iter().map(|s| s / cfg.tau).collect();
        let logp = log_softmax_row(&z);
        let log_q: Vec<f64> = true_match.row(i).iter().map(|q| libm::log(q + cfg.epsilon)).collect();
        let p: Vec<f64> = logp.iter().map(|&l| libm::exp(l)).collect();
        let row_loss: f64 = p.iter().zip(&logp).zip(&log_q).map(|((p, lp), lq)| p * (lp - lq)).sum();
        total += row_loss;
        for (k, d) in d_sims.row_mut(i).iter_mut().enumerate() {
            *d = p[k] * (logp[k] - log_q[k] - row_loss) * inv_n / cfg.tau;
        }
    }
    let (grad_a, grad_b) = cosine_backward(&cs, &d_sims)?;
    Ok(PairLoss {
        value: total * inv_n,
        grad_a,
        grad_b,
    })
}

/// Both matching directions between `a` and `b`. `labels` indexes
/// `(a row, b row)`; the reverse direction uses its transpose.
pub fn bidirectional_matching(
    a: &Matrix,
    b: &Matrix,
    labels: &MatchLabelMatrix,
    cfg: &LossConfig,
) -> Result<PairLoss> {
    let forward = matching_kl(a, b, labels.true_match(), cfg)?;
    let reverse = matching_kl(b, a, labels.transposed()?.true_match(), cfg)?;
    let mut grad_a = forward.grad_a;
    grad_a.add_assign(&reverse.grad_b)?;
    let mut grad_b = forward.grad_b;
    grad_b.add_assign(&reverse.grad_a)?;
    Ok(PairLoss {
        value: forward.value + reverse.value,
        grad_a,
        grad_b,
    })
}

/// Aligned global embeddings of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub f_v: Option<Matrix>,
    pub f_t: Option<Matrix>,
    pub f_c: Option<Matrix>,
    pub identity_ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.identity_ids.len();
        let mut dim = None;
        for (name, m) in [("f_v", &self.f_v), ("f_t", &self.f_t), ("f_c", &self.f_c)] {
            let Some(m) = m else { continue };
            if m.rows() != n {
                return Err(Error::shape("embedding batch rows", n, m.rows()));
            }
            if *dim.get_or_insert(m.cols()) != m.cols() {
                return Err(Error::shape("embedding batch width", dim.unwrap_or(0), m.cols()));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }

    fn require(&self, which: &'static str) -> Result<&Matrix> {
        let m = match which {
            "f_v" => &self.f_v,
            "f_t" => &self.f_t,
            _ => &self.f_c,
        };
        m.as_ref().ok_or(Error::MissingInput(which))
    }
}

/// Image-text projection matching loss; gradients are `(f_v, f_t)`.
pub fn cmpm_loss(batch: &EmbeddingBatch, labels: &MatchLabelMatrix, cfg: &LossConfig) -> Result<PairLoss> {
    batch.validate()?;
    bidirectional_matching(batch.require("f_v")?, batch.require("f_t")?, labels, cfg)
}

/// Symmetric InfoNCE with each pair its own class: the mean of the
/// image-to-text and text-to-image cross-entropies. Gradients are `(f_v, f_t)`.
pub fn itc_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<PairLoss> {
    batch.validate()?;
    cfg.validate()?;
    let (a, b) = (batch.require("f_v")?, batch.require("f_t")?);
    let cs = cosine_sims(a, b)?;
    let n = cs.sims.rows();
    if cs.sims.cols() != n {
        return Err(Error::shape("itc batch", n, cs.sims.cols()));
    }
    let scale = 0.5 / n as f64;
    let mut total = 0.0;
    let mut d_sims = Matrix::zeros(n, n);
    for i in 0..n {
        let z: Vec<f64> = cs.sims.row(i).iter().map(|s| s / cfg.tau).collect();
        let logp = log_softmax_row(&z);
        total -= logp[i];
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            d_sims[(i, j)] += (libm::exp(logp[j]) - target) * scale / cfg.tau;
        }
    }
    for j in 0..n {
        let z: Vec<f64> = (0..n).map(|i| cs.sims[(i, j)] / cfg.tau).collect();
        let logp = log_softmax_row(&z);
        total -= logp[j];
        for i in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            d_sims[(i, j)] += (libm::exp(logp[i]) - target) * scale / cfg.tau;
        }
    }
    let (grad_a, grad_b) = cosine_backward(&cs, &d_sims)?;
    Ok(PairLoss {
        value: total * scale,
        grad_a,
        grad_b,
    })
}

/// Masked positions of a batch of captions and the head's logits there.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPrediction {
    /// `(sequence, position)` of every masked token.
    pub masked_positions: Vec<(usize, usize)>,
    /// `|M| × |V|`.
    pub logits: Matrix,
    /// Index of the one-hot target of each row.
    pub targets: Vec<usize>,
}

/// Masked-token cross-entropy. Returns the loss and `dL/dlogits`.
pub fn irr_loss(pred: &MaskedPrediction, norm: IrrNorm) -> Result<(f64, Matrix)> {
    let m = pred.logits.rows();
    let v = pred.logits.cols();
    if m == 0 {
        return Err(Error::Empty("masked positions"));
    }
    if pred.targets.len() != m {
        return Err(Error::shape("masked targets", m, pred.targets.len()));
    }
    let denom = match norm {
        IrrNorm::Paper => (m * v) as f64,
        IrrNorm::MaskedOnly => m as f64,
    };
    let mut total = 0.0;
    let mut grad = Matrix::zeros(m, v);
    for (i, &t) in pred.targets.iter().enumerate() {
        if t >= v {
            return Err(Error::OutOfRange {
                what: "masked target",
                detail: alloc::format!("{t} of {v}"),
            });
        }
        let logp = log_softmax_row(pred.logits.row(i));
        total -= logp[t];
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (libm::exp(logp[k]) - if k == t { 1.0 } else { 0.0 }) / denom;
        }
    }
    Ok((total / denom, grad))
}

/// Identity cross-entropy averaged over both modalities. Gradients are
/// `(logits_v, logits_t)`.
pub fn id_loss(logits_v: &Matrix, logits_t: &Matrix, class_ids: &[usize]) -> Result<PairLoss> {
    let n = class_ids.len();
    if n == 0 {
        return Err(Error::Empty("identity batch"));
    }
    if logits_v.shape() != logits_t.shape() || logits_v.rows() != n {
        return Err(Error::shape(
            "identity logits",
            alloc::format!("{n} rows, equal shapes"),
            alloc::format!("{:?} / {:?}", logits_v.shape(), logits_t.shape()),
        ));
    }
    let c = logits_v.cols();
    let scale = 0.5 / n as f64;
    let mut total = 0.0;
    let mut grads = [Matrix::zeros(n, c), Matrix::zeros(n, c)];
    for (logits, grad) in [logits_v, logits_t].into_iter().zip(grads.iter_mut()) {
        for (i, &cls) in class_ids.iter().enumerate() {
            if cls >= c {
                return Err(Error::OutOfRange {
                    what: "class id",
                    detail: alloc::format!("{cls} of {c}"),
                });
            }
            let logp = log_softmax_row(logits.row(i));
            total -= logp[cls];
            for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
                *g = (libm::exp(logp[k]) - if k == cls { 1.0 } else { 0.0 }) * scale;
            }
        }
    }
    let [grad_a, grad_b] = grads;
    Ok(PairLoss {
        value: total * scale,
        grad_a,
        grad_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Supervision {
    /// Inversion embedding matched against image embeddings.
    Vis,
    /// Inversion embedding matched against caption embeddings.
    Text,
}

impl core::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vis" => Ok(Self::Vis),
            "text" => Ok(Self::Text),
            other => Err(Error::InvalidConfig(alloc::format!("unknown supervision `{other}`"))),
        }
    }
}

impl core::fmt::Display for Supervision {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Vis => "Vis",
            Self::Text => "Text",
        })
    }
}

/// Inversion-network loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TinetLoss {
    pub value: f64,
    /// Gradient with respect to `f_c`.
    pub grad_c: Matrix,
    /// Gradient with respect to the anchor (`f_v` for Vis, `f_t` for Text).
    pub grad_anchor: Matrix,
}

/// `Vis`: image→inversion plus inversion→image matching.
/// `Text`: text→inversion plus inversion→text matching.
pub fn tinet_loss(
    batch: &EmbeddingBatch,
    labels: &MatchLabelMatrix,
    cfg: &LossConfig,
    mode: Supervision,
) -> Result<TinetLoss> {
    batch.validate()?;
    let anchor = match mode {
        Supervision::Vis => batch.require("f_v")?,
        Supervision::Text => batch.require("f_t")?,
    };
    let f_c = batch.require("f_c")?;
    let pair = bidirectional_matching(anchor, f_c, labels, cfg)?;
    Ok(TinetLoss {
        value: pair.value,
        grad_c: pair.grad_b,
        grad_anchor: pair.grad_a,
    })
}

/// Unweighted sum of the three fine-tuning objectives.
pub fn stage1_objective(irr: f64, cmpm: f64, id: f64) -> Result<f64> {
    for (name, v) in [("irr", irr), ("cmpm", cmpm), ("id", id)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(alloc::format!("{name} loss")));
        }
    }
    Ok(irr + cmpm + id)
}
