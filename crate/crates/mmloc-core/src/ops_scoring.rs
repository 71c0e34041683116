//! Orthogonal-projection based proposal scoring: build the query subspace
//! from the sketch/gloss (and optionally class) vectors, project each
//! proposal feature onto it, score the pair with the one-layer head (or
//! cosine), and compute the hinge + margin-ranking training loss.
//!
//! The projection is parameter-free: `P = B (B^T B + ridge I)^-1 B^T`. With
//! ridge 0 and a well-conditioned Gram matrix this is the exact orthogonal
//! projector onto the column span of `B`, so `P r` is the closest point of
//! the query subspace to `r`.

use ndarray::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::config::{ModelConfig, ScoreHead};
use crate::encoders::QueryVector;
use crate::error::{Error, Result};
use crate::linalg;
use crate::params::ParamSet;
use crate::proposals::Proposal;
use rand_chacha::ChaCha8Rng;

/// Query basis `B in R^{d x k}` (columns are query vectors) plus the ridge
/// used to stabilize its Gram matrix.
#[derive(Clone, Debug)]
pub struct QueryBasis {
    pub b: Array2<f64>,
    pub ridge: f64,
}

impl QueryBasis {
    /// Builds the basis from 1..=d query vectors; a zero column is a
    /// degenerate-query error. With `normalize` each column is scaled to
    /// unit length (ablation switch; the projection itself is scale
    /// invariant column-wise).
    pub fn from_queries(queries: &[QueryVector], ridge: f64, normalize: bool) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::InvalidArgument("query basis needs at least one vector".into()));
        }
        let d = queries[0].len();
        if queries.len() > d {
            return Err(Error::InvalidArgument(format!(
                "basis rank {} exceeds dimension {d}",
                queries.len()
            )));
        }
        if ridge < 0.0 {
            return Err(Error::InvalidArgument("ridge must be non-negative".into()));
        }
        let mut b = Array2::<f64>::zeros((d, queries.len()));
        for (j, q) in queries.iter().enumerate() {
            if q.len() != d {
                return Err(Error::shape(
                    "QueryBasis",
                    format!("length {d}"),
                    format!("length {}", q.len()),
                ));
            }
            let norm = q.data.dot(&q.data).sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateQuery { index: j, norm });
            }
            let scale = if normalize { 1.0 / norm } else { 1.0 };
            for i in 0..d {
                b[(i, j)] = q.data[i] * scale;
            }
        }
        Ok(Self { b, ridge })
    }

    pub fn k(&self) -> usize {
        self.b.dim().1
    }

    pub fn d(&self) -> usize {
        self.b.dim().0
    }
}

/// Explicit `d x d` projection matrix onto the basis span.
#[derive(Clone, Debug)]
pub struct ProjectionOperator {
    pub p: Array2<f64>,
}

impl ProjectionOperator {
    pub fn dim(&self) -> usize {
        self.p.dim().0
    }
}

/// Eq. 7: `P = B (B^T B + ridge I)^-1 B^T`, falling back to the
/// rank-revealing pseudo-inverse when ridge is zero and the Gram matrix is
/// ill-conditioned (condition number above 1e8).
pub fn build_projection(queries: &[QueryVector], ridge: f64) -> Result<ProjectionOperator> {
    let basis = QueryBasis::from_queries(queries, ridge, false)?;
    build_projection_from_basis(&basis)
}

pub fn build_projection_from_basis(basis: &QueryBasis) -> Result<ProjectionOperator> {
    let gram_inv = linalg::gram_inverse(&basis.b.view(), basis.ridge)?;
    let p = basis.b.dot(&gram_inv).dot(&basis.b.t());
    Ok(ProjectionOperator { p })
}

/// Eq. 8: `q = P r`.
pub fn project(op: &ProjectionOperator, r: &QueryVector) -> Result<QueryVector> {
    if r.len() != op.dim() {
        return Err(Error::shape(
            "project",
            format!("length {}", op.dim()),
            format!("length {}", r.len()),
        ));
    }
    QueryVector::new(op.p.dot(&r.data), r.modality)
}

/// One-layer scoring head over the concatenated `[r; q]` vector.
#[derive(Clone, Debug)]
pub struct ScoringHead {
    pub w: Array1<f64>,
    pub bias: f64,
    pub kind: ScoreHead,
}

impl ScoringHead {
    pub fn from_params(params: &ParamSet, kind: ScoreHead) -> Self {
        let w = params
            .get("score.w")
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let bias = params.get("score.b")[[0]];
        Self { w, bias, kind }
    }
}

/// Registers the scoring head.
///
/// The bias starts at -2 so every score begins near 0.12: with the loose
/// paper margins (m+ = 0.3 < m- = 0.7) the hinge terms are inactive at 0.5
/// and the pairwise terms are sign-blind, which makes the fg/bg orientation
/// of the trained scores a coin flip. Starting below m+ keeps the foreground
/// hinge active from the first step and pins the orientation.
pub fn init_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    params.init_uniform("score.w", &[2 * cfg.d], 2 * cfg.d, rng);
    params.insert("score.b", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), -2.0));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Foreground probability of a proposal vector `r` against its fused query
/// vector `q`: `sigmoid(theta([r; q]))`, or `(cos(r, q) + 1) / 2` for the
/// cosine head.
pub fn score(r: &QueryVector, q: &QueryVector, head: &ScoringHead) -> Result<f64> {
    if r.len() != q.len() {
        return Err(Error::shape("score", format!("length {}", r.len()), format!("length {}", q.len())));
    }
    match head.kind {
        ScoreHead::Neural => {
            if head.w.len() != 2 * r.len() {
                return Err(Error::shape(
                    "score",
                    format!("head of length {}", 2 * r.len()),
                    format!("length {}", head.w.len()),
                ));
            }
            let d = r.len();
            let mut z = head.bias;
            for i in 0..d {
                z += head.w[i] * r.data[i] + head.w[d + i] * q.data[i];
            }
            Ok(sigmoid(z))
        }
        ScoreHead::Cosine => {
            let nr = r.data.dot(&r.data).sqrt();
            let nq = q.data.dot(&q.data).sqrt();
            if nr < 1e-12 || nq < 1e-12 {
                return Err(Error::InvalidArgument(
                    "cosine score undefined for zero vectors".into(),
                ));
            }
            Ok((r.data.dot(&q.data) / (nr * nq) + 1.0) / 2.0)
        }
    }
}

/// Eq. 9 per-proposal term: `y max(m+ - a, 0) + (1 - y) max(a - m-, 0)`.
pub fn hinge_loss(a: f64, y: u8, m_plus: f64, m_minus: f64) -> f64 {
    if y == 1 {
        (m_plus - a).max(0.0)
    } else {
        (a - m_minus).max(0.0)
    }
}

/// Eq. 10 summed over all unordered pairs: same-label pairs are pushed
/// within `m-` of each other, different-label pairs at least `m+` apart.
pub fn margin_rank_loss(scores: &[f64], labels: &[u8], m_plus: f64, m_minus: f64) -> f64 {
    assert_eq!(scores.len(), labels.len(), "margin_rank_loss: misaligned inputs");
    let n = scores.len();
    let mut total = 0.0;
    for k in 0..n {
        for l in k + 1..n {
            let gap = (scores[k] - scores[l]).abs();
            if labels[k] == labels[l] {
                total += (gap - m_minus).max(0.0);
            } else {
                total += (m_plus - gap).max(0.0);
            }
        }
    }
    total
}

/// Eq. 9 in full: hinge terms plus the margin-ranking sum, unit-weighted.
pub fn total_query_loss(scores: &[f64], labels: &[u8], m_plus: f64, m_minus: f64) -> f64 {
    assert_eq!(scores.len(), labels.len(), "total_query_loss: misaligned inputs");
    let hinge: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&a, &y)| hinge_loss(a, y, m_plus, m_minus))
        .sum();
    hinge + margin_rank_loss(scores, labels, m_plus, m_minus)
}

/// Value and gradient of [`total_query_loss`] with respect to the scores.
/// Subgradient 0 is used exactly at hinge kinks.
pub fn total_query_loss_grad(
    scores: &[f64],
    labels: &[u8],
    m_plus: f64,
    m_minus: f64,
) -> (f64, Vec<f64>) {
    let n = scores.len();
    let mut grad = vec![0.0; n];
    for k in 0..n {
        if labels[k] == 1 {
            if m_plus - scores[k] > 0.0 {
                grad[k] -= 1.0;
            }
        } else if scores[k] - m_minus > 0.0 {
            grad[k] += 1.0;
        }
    }
    for k in 0..n {
        for l in k + 1..n {
            let diff = scores[k] - scores[l];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            if labels[k] == labels[l] {
                if diff.abs() - m_minus > 0.0 {
                    grad[k] += sign;
                    grad[l] -= sign;
                }
            } else if m_plus - diff.abs() > 0.0 {
                grad[k] -= sign;
                grad[l] += sign;
            }
        }
    }
    (total_query_loss(scores, labels, m_plus, m_minus), grad)
}

// ---- graph builders ----

/// Score nodes: probabilities in [0,1] plus, for the neural head, the
/// pre-sigmoid logits (used by the numerically stable classification loss).
pub struct ScoreNodes {
    pub probs: NodeId,
    pub logits: Option<NodeId>,
}

/// Projects proposal rows onto the basis and scores them; returns the
/// `(n)` score node in [0,1].
pub fn score_rows_node(
    g: &mut Graph,
    params: &ParamSet,
    r_rows: NodeId,
    q_rows: NodeId,
    kind: ScoreHead,
) -> ScoreNodes {
    match kind {
        ScoreHead::Neural => {
            let cat = g.concat(r_rows, q_rows, 1); // (n, 2d)
            let w = g.param("score.w", params.get("score.w").clone());
            let two_d = g.value(w).len();
            let wcol = g.reshape(w, &[two_d, 1]);
            let z2 = g.matmul(cat, wcol); // (n, 1)
            let n = g.value(z2).shape()[0];
            let z = g.reshape(z2, &[n]);
            let b = g.param("score.b", params.get("score.b").clone());
            let zb = g.add_broadcast_scalar(z, b);
            ScoreNodes { probs: g.sigmoid(zb), logits: Some(zb) }
        }
        ScoreHead::Cosine => {
            let cos = g.cosine_rows(r_rows, q_rows);
            let half = g.scale(cos, 0.5);
            ScoreNodes { probs: g.add_scalar(half, 0.5), logits: None }
        }
    }
}

/// Mean binary cross-entropy over the scored proposals (the paper's
/// classification loss on labeled proposal features). Uses the logits when
/// available, otherwise clamped probabilities.
pub fn proposal_bce_node(g: &mut Graph, scores: &ScoreNodes, labels: &[u8]) -> NodeId {
    let n = labels.len().max(1) as f64;
    match scores.logits {
        Some(z_node) => {
            let z: Vec<f64> = g.value(z_node).iter().copied().collect();
            let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            let value = z
                .iter()
                .zip(&y)
                .map(|(&zi, &yi)| crate::proposals::bce_with_logits(zi, yi))
                .sum::<f64>()
                / n;
            g.scalar_from(
                z_node,
                value,
                Box::new(move |gs| {
                    Array1::from_iter(
                        z.iter()
                            .zip(&y)
                            .map(|(&zi, &yi)| gs * (1.0 / (1.0 + (-zi).exp()) - yi) / n),
                    )
                    .into_dyn()
                }),
            )
        }
        None => {
            let a: Vec<f64> = g.value(scores.probs).iter().copied().collect();
            let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            const EPS: f64 = 1e-7;
            let value = a
                .iter()
                .zip(&y)
                .map(|(&ai, &yi)| {
                    let ac = ai.clamp(EPS, 1.0 - EPS);
                    -(yi * ac.ln() + (1.0 - yi) * (1.0 - ac).ln())
                })
                .sum::<f64>()
                / n;
            g.scalar_from(
                scores.probs,
                value,
                Box::new(move |gs| {
                    Array1::from_iter(a.iter().zip(&y).map(|(&ai, &yi)| {
                        let ac = ai.clamp(EPS, 1.0 - EPS);
                        gs * (ac - yi) / (ac * (1.0 - ac)) / n
                    }))
                    .into_dyn()
                }),
            )
        }
    }
}

/// Training form of Eq. 9 + Eq. 10: the hinge part averaged over proposals
/// and the margin-ranking part averaged over pairs, summed with unit
/// weights. The raw sums grow as n and n^2 respectively, so only the
/// normalized parts can be "equally weighted" against each other and the
/// other loss components. [`total_query_loss`] keeps the literal summed
/// value.
pub fn query_loss_node(
    g: &mut Graph,
    scores: NodeId,
    labels: &[u8],
    m_plus: f64,
    m_minus: f64,
) -> NodeId {
    let s: Vec<f64> = g.value(scores).iter().copied().collect();
    let n = s.len();
    let n_pairs = n * n.saturating_sub(1) / 2;
    let hinge_scale = 1.0 / n.max(1) as f64;
    let pair_scale = 1.0 / n_pairs.max(1) as f64;

    let hinge_value: f64 = s
        .iter()
        .zip(labels)
        .map(|(&a, &y)| hinge_loss(a, y, m_plus, m_minus))
        .sum::<f64>()
        * hinge_scale;
    let pair_value = margin_rank_loss(&s, labels, m_plus, m_minus) * pair_scale;

    // analytic gradient with the same normalization
    let mut grad = vec![0.0; n];
    for k in 0..n {
        if labels[k] == 1 {
            if m_plus - s[k] > 0.0 {
                grad[k] -= hinge_scale;
            }
        } else if s[k] - m_minus > 0.0 {
            grad[k] += hinge_scale;
        }
    }
    for k in 0..n {
        for l in k + 1..n {
            let diff = s[k] - s[l];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            if labels[k] == labels[l] {
                if diff.abs() - m_minus > 0.0 {
                    grad[k] += sign * pair_scale;
                    grad[l] -= sign * pair_scale;
                }
            } else if m_plus - diff.abs() > 0.0 {
                grad[k] -= sign * pair_scale;
                grad[l] += sign * pair_scale;
            }
        }
    }
    g.scalar_from(
        scores,
        hinge_value + pair_value,
        Box::new(move |gs| Array1::from_iter(grad.iter().map(|&v| v * gs)).into_dyn()),
    )
}

/// A proposal with its query-conditioned score and projected feature.
#[derive(Clone, Debug)]
pub struct ScoredProposal {
    pub proposal: Proposal,
    /// Foreground probability in [0,1].
    pub a: f64,
    /// Projection of the proposal feature onto the query subspace.
    pub q: Array1<f64>,
}
