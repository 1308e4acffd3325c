//! Per-anchor similarity thresholds.
//!
//! Each anchor `i` owns a threshold `λᵢ ∈ [-1, 1]` meant to sit at the
//! `(1 − α)`-quantile of its negative similarities, so that the top `α`
//! fraction of negatives lies strictly above it. The threshold minimizes the
//! convex objective
//!
//! ```text
//! φ(ν) = ν·α + (1/|R|) Σ_{r ∈ R} max(r − ν, 0),   ν ∈ [-1, 1]
//! ```
//!
//! and is tracked online by projected stochastic subgradient steps computed
//! from mini-batch negatives only. [`solve_quantile_exact`] gives the exact
//! minimizer set for a fixed score set and serves as the oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Mask, SimilarityBlock};

/// Adam epsilon for threshold updates.
pub const ADAM_EPS: f64 = 1e-8;

/// Tolerance used to decide that `α·N` is an integer.
const INTEGER_SNAP: f64 = 1e-9;

/// How a threshold step is taken from its stochastic subgradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaOptimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for LambdaOptimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::BadConfig(format!("unknown lambda optimizer `{other}`"))),
        }
    }
}

/// Thresholds for every anchor in the dataset plus Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub step_count: Vec<u64>,
}

impl ThresholdState {
    /// All thresholds start at 1.0: nothing is flagged as a false negative.
    pub fn new(n: usize, alpha: f64, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let state = Self {
            alpha,
            lr,
            beta1,
            beta2,
            lambda: vec![1.0; n],
            m1: vec![0.0; n],
            m2: vec![0.0; n],
            step_count: vec![0; n],
        };
        state.validate()?;
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadConfig(format!("threshold lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::BadConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        let n = self.lambda.len();
        if self.m1.len() != n || self.m2.len() != n || self.step_count.len() != n {
            return Err(Error::ShapeMismatch("threshold state arrays differ in length".into()));
        }
        if self.lambda.iter().any(|l| !(-1.0..=1.0).contains(l)) {
            return Err(Error::BadConfig("lambda values must lie in [-1, 1]".into()));
        }
        if self.m2.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::BadConfig("second moments must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(s)?;
        state.validate()?;
        Ok(state)
    }

    /// One projected step on anchor `id` given its subgradient estimate.
    pub fn step_anchor(&mut self, id: usize, grad: f64, mode: LambdaOptimizer) -> Result<()> {
        let n = self.len();
        if id >= n {
            return Err(Error::IndexOutOfRange { index: id, len: n });
        }
        self.step_count[id] += 1;
        let delta = match mode {
            LambdaOptimizer::Sgd => self.lr * grad,
            LambdaOptimizer::Adam => {
                let t = self.step_count[id] as i32;
                self.m1[id] = self.beta1 * self.m1[id] + (1.0 - self.beta1) * grad;
                self.m2[id] = self.beta2 * self.m2[id] + (1.0 - self.beta2) * grad * grad;
                let m_hat = self.m1[id] / (1.0 - self.beta1.powi(t));
                let v_hat = self.m2[id] / (1.0 - self.beta2.powi(t));
                self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
            }
        };
        self.lambda[id] = (self.lambda[id] - delta).clamp(-1.0, 1.0);
        Ok(())
    }

    /// Updates the listed anchors, treating every column of `sim` as a negative
    /// of the corresponding row. Anchors not listed are left untouched.
    pub fn update(&mut self, anchor_ids: &[usize], sim: &SimilarityBlock, mode: LambdaOptimizer) -> Result<()> {
        self.check_rows(anchor_ids, sim)?;
        for (row, &id) in anchor_ids.iter().enumerate() {
            if id >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: self.len(),
                });
            }
            let g = lambda_subgradient(sim.row(row), self.lambda[id], self.alpha)?;
            self.step_anchor(id, g, mode)?;
        }
        Ok(())
    }

    /// Like [`update`](Self::update), but only columns set in `negatives`
    /// count as negatives of the row.
    pub fn update_masked(
        &mut self,
        anchor_ids: &[usize],
        sim: &SimilarityBlock,
        negatives: &Mask,
        mode: LambdaOptimizer,
    ) -> Result<()> {
        self.check_rows(anchor_ids, sim)?;
        if negatives.rows() != sim.anchors() || negatives.cols() != sim.negatives() {
            return Err(Error::ShapeMismatch(
                "negative mask does not match similarity block".into(),
            ));
        }
        let mut scratch = Vec::with_capacity(sim.negatives());
        for (row, &id) in anchor_ids.iter().enumerate() {
            if id >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: self.len(),
                });
            }
            scratch.clear();
            scratch.extend(
                sim.row(row)
                    .iter()
                    .zip(negatives.row(row))
                    .filter_map(|(&s, &keep)| keep.then_some(s)),
            );
            let g = lambda_subgradient(&scratch, self.lambda[id], self.alpha)?;
            self.step_anchor(id, g, mode)?;
        }
        Ok(())
    }

    fn check_rows(&self, anchor_ids: &[usize], sim: &SimilarityBlock) -> Result<()> {
        if sim.anchors() != anchor_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} similarity rows for {} anchors",
                sim.anchors(),
                anchor_ids.len()
            )));
        }
        Ok(())
    }
}

/// The quantile objective `ν·α + mean(max(r − ν, 0))`.
pub fn quantile_objective(nu: f64, scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let hinge: f64 = scores.iter().map(|&r| (r - nu).max(0.0)).sum();
    Ok(nu * alpha + hinge / scores.len() as f64)
}

/// Exact minimizer set of [`quantile_objective`] over a fixed score set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSolution {
    pub lo: f64,
    pub hi: f64,
    pub kth_value: f64,
    pub k: usize,
}

impl QuantileSolution {
    pub fn contains(&self, nu: f64) -> bool {
        self.lo <= nu && nu <= self.hi
    }

    /// Distance from `nu` to the optimal interval (zero inside).
    pub fn distance(&self, nu: f64) -> f64 {
        if nu < self.lo {
            self.lo - nu
        } else if nu > self.hi {
            nu - self.hi
        } else {
            0.0
        }
    }
}

/// `k = ⌈α·N⌉`, plus whether `α·N` is (numerically) an integer.
pub fn quantile_rank(alpha: f64, n: usize) -> (usize, bool) {
    let an = alpha * n as f64;
    let rounded = an.round();
    if rounded >= 1.0 && (an - rounded).abs() <= INTEGER_SNAP * n.max(1) as f64 {
        (rounded as usize, true)
    } else {
        ((an.ceil() as usize).clamp(1, n), false)
    }
}

/// Solves the quantile problem exactly by sorting.
///
/// With scores sorted as `s₁ ≥ s₂ ≥ … ≥ s_N` and `k = ⌈α·N⌉`, the minimizer is
/// `s_k` when `α·N` is fractional, and the whole interval `[s_{k+1}, s_k]`
/// when it is an integer (taking `s_{N+1} = −1`).
pub fn solve_quantile_exact(scores: &[f64], alpha: f64) -> Result<QuantileSolution> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let (k, integral) = quantile_rank(alpha, n);
    let kth_value = sorted[k - 1];
    let lo = if integral {
        sorted.get(k).copied().unwrap_or(-1.0)
    } else {
        kth_value
    };
    Ok(QuantileSolution {
        lo,
        hi: kth_value,
        kth_value,
        k,
    })
}

/// Stochastic subgradient `α − (1/|B|) Σ 𝟙(s > λ)`; ties are not above.
pub fn lambda_subgradient(sim_row: &[f64], lambda_i: f64, alpha: f64) -> Result<f64> {
    if sim_row.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    let above = sim_row.iter().filter(|&&s| s > lambda_i).count();
    Ok(alpha - above as f64 / sim_row.len() as f64)
}
