//! Learned decoding orders.
//!
//! A tiny parameter head scores the T output positions; ranking the scores
//! descending yields an adaptive decoding order. Training covers a set of
//! four orders: the canonical left-to-right pair (forward and reversed)
//! plus the adaptive pair, so every batch always sees the canonical
//! baseline next to the learned one.
//!
//! Ranking is discrete, so the training gradient reaches the score head
//! through a temperature-controlled soft relaxation of the sort, swapped in
//! behind the hard masks by straight-through substitution.

use crate::mask::{mask_from_permutation, MaskKind, Permutation};
use crate::real::Real;
use crate::tensor::{
    content_stream_gate, eye, normal_init, query_stream_gate, soft_sort, straight_through,
    Tensor,
};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IpnError {
    #[error("score parameters contain non-finite values")]
    NonFiniteParams,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
}

/// Parameters of the order-scoring head. The base ordering matrix is the
/// identity (left-to-right), so scores start near the strictly decreasing
/// value row and the initial adaptive order tracks the canonical one.
pub struct IpnParams<R: Real> {
    pub p_query: Tensor<R>,
    pub p_weight: Tensor<R>,
    pub p_value: Tensor<R>,
}

impl<R: Real> IpnParams<R> {
    /// Identity-plus-noise square factors; value row T, T-1, .., 1.
    pub fn init(t: usize, rng: &mut ChaCha8Rng) -> Self {
        let p_query = Tensor::param(eye::<R>(t) + normal_init::<R>(t, t, 0.02, rng));
        let p_weight = Tensor::param(eye::<R>(t) + normal_init::<R>(t, t, 0.02, rng));
        let p_value = Tensor::param(Array2::from_shape_fn((1, t), |(_, j)| {
            R::from_f64((t - j) as f64)
        }));
        IpnParams { p_query, p_weight, p_value }
    }

    pub fn t(&self) -> usize {
        self.p_value.shape().1
    }

    /// Position scores as a 1xT graph node: the base ordering matrix
    /// (identity, transposed) times the query and weight factors, applied
    /// to the value row.
    pub fn score(&self) -> Result<Tensor<R>, IpnError> {
        for t in [&self.p_query, &self.p_weight, &self.p_value] {
            if !t.value().iter().all(|v| v.is_finite()) {
                return Err(IpnError::NonFiniteParams);
            }
        }
        let t = self.t();
        let base = Tensor::constant(Array2::from_shape_fn((t, t), |(i, j)| {
            if i == j {
                R::one()
            } else {
                R::zero()
            }
        }));
        let mixed = base.transpose().matmul(&self.p_query).matmul(&self.p_weight);
        Ok(mixed.matmul(&self.p_value.transpose()).transpose())
    }

    pub fn score_values(&self) -> Result<Vec<R>, IpnError> {
        let s = self.score()?;
        let v = s.to_owned_value();
        Ok(v.row(0).to_vec())
    }
}

/// Positions sorted by descending score; ties broken by ascending position.
pub fn rank<R: Real>(scores: &[R]) -> Permutation {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    Permutation::new(idx.into_iter().map(|i| i + 1).collect()).unwrap()
}

/// The four training orders: canonical pair then adaptive pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    members: Vec<Permutation>,
}

impl PermutationSet {
    pub fn members(&self) -> &[Permutation] {
        &self.members
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// Canonical order, its reverse, the score ranking, and its reverse.
pub fn permutation_set<R: Real>(scores: &[R]) -> PermutationSet {
    let t = scores.len();
    let canonical = Permutation::canonical(t);
    let adaptive = rank(scores);
    let members = vec![
        canonical.clone(),
        canonical.reversed(),
        adaptive.clone(),
        adaptive.reversed(),
    ];
    PermutationSet { members }
}

/// Differentiable stand-in for the hard ranking: a row-stochastic TxT
/// matrix whose row k peaks at the position ranked k-th, converging to the
/// hard permutation matrix as temperature goes to zero.
pub fn soft_rank_grad_path<R: Real>(
    scores: &[R],
    temperature: R,
) -> Result<Array2<R>, IpnError> {
    if temperature <= R::zero() {
        return Err(IpnError::NonPositiveTemperature(temperature.to_f64()));
    }
    let row = Array2::from_shape_fn((1, scores.len()), |(_, j)| scores[j]);
    let t = Tensor::constant(row);
    Ok(soft_sort(&t, temperature).to_owned_value())
}

/// Hard permutation matrix of an order: row k marks the position decoded
/// at step k+1.
pub fn permutation_matrix<R: Real>(perm: &Permutation) -> Array2<R> {
    let t = perm.t();
    let mut m = Array2::zeros((t, t));
    for (k, &pos) in perm.order().iter().enumerate() {
        m[[k, pos - 1]] = R::one();
    }
    m
}

/// Attention gates for one decoding order where the forward pass uses the
/// hard bits and the backward pass flows through a soft relaxation.
pub struct AdaptiveGates<R: Real> {
    pub perm: Permutation,
    pub content: Tensor<R>,
    pub query: Tensor<R>,
}

/// Build straight-through gates for the adaptive order and its reverse.
/// `score` must be the graph node from [`IpnParams::score`] so gradients
/// reach the score head.
pub fn adaptive_gate_pair<R: Real>(
    score: &Tensor<R>,
    temperature: R,
) -> Result<[AdaptiveGates<R>; 2], IpnError> {
    if temperature <= R::zero() {
        return Err(IpnError::NonPositiveTemperature(temperature.to_f64()));
    }
    let values = score.to_owned_value().row(0).to_vec();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(IpnError::NonFiniteParams);
    }
    let perm = rank(&values);
    let soft = soft_sort(score, temperature);
    let rev_soft = soft.flip_rows();
    let fwd = adaptive_gates_for(&soft, perm);
    let rev = adaptive_gates_for(&rev_soft, fwd.perm.reversed());
    Ok([fwd, rev])
}

fn adaptive_gates_for<R: Real>(soft_perm: &Tensor<R>, perm: Permutation) -> AdaptiveGates<R> {
    let t = perm.t();
    // Strictly-before comparison as a bilinear form over the permutation
    // matrix; soft rows give a soft precedence matrix.
    let upper_t = Tensor::constant(Array2::from_shape_fn((t, t), |(k, l)| {
        if k > l {
            R::one()
        } else {
            R::zero()
        }
    }));
    let prec_soft = soft_perm.transpose().matmul(&upper_t).matmul(soft_perm);
    let content_soft = content_stream_gate(&prec_soft);
    let query_soft = query_stream_gate(&prec_soft);
    let content_hard = mask_from_permutation(&perm, MaskKind::Content).content_self_gate::<R>();
    let query_hard = mask_from_permutation(&perm, MaskKind::Query).query_gate::<R>();
    AdaptiveGates {
        perm,
        content: straight_through(content_hard, &content_soft),
        query: straight_through(query_hard, &query_soft),
    }
}
