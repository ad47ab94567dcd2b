//! Scaling-matrix machinery for circle-shaped cost graphs.
//!
//! For a circle graph on `k` marginals with potentials `f_0..f_{k-1}` and
//! cyclic edge cost matrices `C_0..C_{k-1}` (edge `i` joins marginal `i` to
//! `(i+1) mod k`), the scaling matrices are
//!
//! ```text
//! L_i[a,b] = exp(( (f_i[a] + f_{i+1}[b]) / 2 - eta * C_i[a,b] ) / epsilon)
//! ```
//!
//! with `eta` the tuple-cost normalization. Splitting each potential evenly
//! between its two incident edges makes the cyclic product encode the
//! unnormalized plan: the mass of the tuple `(a_0, ..., a_{k-1})` is
//! `prod_i L_i[a_i, a_{i+1}]`, so
//!
//! * `Tr(L_0 L_1 ... L_{k-1})` is the total mass over all `n^k` tuples,
//! * partial products marginalize the plan onto index pairs,
//! * the diagonal of the rotated product `L_i ... L_{i-1}` is the one-way
//!   marginal of index `i`.
//!
//! Everything is computed through [`ScaledMat`] chains, so exponent
//! magnitudes far beyond `f64` range are handled exactly as shifted products.

use rayon::prelude::*;

use crate::error::{MmotError, Result};
use crate::model::{CostGraph, CostMatrixSet};
use crate::numerics::{logsumexp, Mat, ScaledMat};

/// The `k` scaling matrices of a circle instance, with the epsilon and
/// normalization they were built from.
#[derive(Debug, Clone)]
pub struct CircleScalingMatrices {
    mats: Vec<ScaledMat>,
    n: usize,
    epsilon: f64,
    normalization: f64,
}

impl CircleScalingMatrices {
    /// Builds the scaling matrices from per-marginal potential vectors and
    /// the edge cost matrices of a circle-shaped graph.
    ///
    /// `potentials[i]` has length `n`; `costs` must hold the graph's edges.
    /// The wrap edge, stored as `(0, k-1)`, is transposed into its cyclic
    /// orientation `(k-1) -> 0` internally.
    pub fn build(
        potentials: &[Vec<f64>],
        costs: &CostMatrixSet,
        graph: &CostGraph,
        normalization: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(MmotError::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let k = graph.k();
        let cyclic = graph.circle_edge_order()?;
        if potentials.len() != k {
            return Err(MmotError::InvalidArgument(format!(
                "{} potential vectors for k={k}",
                potentials.len()
            )));
        }
        let n = costs.n();
        for (i, p) in potentials.iter().enumerate() {
            if p.len() != n {
                return Err(MmotError::InvalidArgument(format!(
                    "potential {i} has length {}, expected {n}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(MmotError::InvalidArgument(format!(
                    "potential {i} contains non-finite entries"
                )));
            }
        }
        let mut mats = Vec::with_capacity(k);
        for (i, &(src, dst)) in cyclic.iter().enumerate() {
            debug_assert_eq!(src, i);
            let c = costs.mat_for(src, dst).ok_or_else(|| {
                MmotError::InvalidArgument(format!(
                    "cost matrices do not cover the circle edge ({src},{dst})"
                ))
            })?;
            let fi = &potentials[src];
            let fj = &potentials[dst];
            let log = Mat::from_fn(n, n, |a, b| {
                (0.5 * (fi[a] + fj[b]) - normalization * c[(a, b)]) / epsilon
            });
            mats.push(ScaledMat::from_log(&log));
        }
        Ok(CircleScalingMatrices {
            mats,
            n,
            epsilon,
            normalization,
        })
    }

    /// Number of marginals.
    pub fn k(&self) -> usize {
        self.mats.len()
    }

    /// Sample count.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// The `i`-th scaling matrix (edge `i -> i+1 mod k`).
    pub fn scaled(&self, i: usize) -> &ScaledMat {
        &self.mats[i]
    }

    /// Chain product of `L_range` for a cyclic index range `[from, to)`
    /// taken modulo `k`; `None` for an empty range.
    fn chain(&self, from: usize, len: usize) -> Option<ScaledMat> {
        if len == 0 {
            return None;
        }
        let k = self.k();
        let mut acc = self.mats[from % k].clone();
        for step in 1..len {
            acc = acc.matmul(&self.mats[(from + step) % k]);
        }
        Some(acc)
    }

    /// `log Tr(L_0 L_1 ... L_{k-1})` — the log of the total plan mass.
    pub fn log_trace(&self) -> f64 {
        self.chain(0, self.k()).unwrap().log_trace()
    }

    /// `log((1/n^k) Tr(prod L_i))`: the log of the product-measure mean of
    /// the exponential dual term.
    pub fn log_z(&self) -> f64 {
        self.log_trace() - self.k() as f64 * (self.n as f64).ln()
    }

    /// Log diagonal of the rotated product `L_i L_{i+1} ... L_{i-1}`: entry
    /// `a` is the log of the unnormalized one-way marginal mass of index `i`
    /// at sample `a`. Summing the exponentials over `a` recovers the trace.
    pub fn rotated_log_diag(&self, i: usize) -> Vec<f64> {
        let k = self.k();
        if k == 1 {
            let m = &self.mats[0];
            return (0..self.n).map(|a| m.log_entry(a, a)).collect();
        }
        // diag(L_i * R) where R = L_{i+1} ... L_{i-1}: the diagonal needs
        // only the elementwise product of L_i with R^T row-aligned.
        let rest = self.chain(i + 1, k - 1).unwrap();
        let li = &self.mats[i];
        (0..self.n)
            .into_par_iter()
            .map(|a| {
                let terms: Vec<f64> = (0..self.n)
                    .map(|b| li.log_entry(a, b) + rest.log_entry(b, a))
                    .collect();
                logsumexp(&terms)
            })
            .collect()
    }

    fn pairwise_chains(&self, u: usize, v: usize) -> Result<(ScaledMat, ScaledMat)> {
        let k = self.k();
        if u >= v || v >= k {
            return Err(MmotError::InvalidArgument(format!(
                "pairwise marginal needs 0 <= u < v < k, got u={u}, v={v}, k={k}"
            )));
        }
        // Forward chain u -> v and the complementary chain v -> u (through
        // the wrap); the marginal is forward (entrywise*) complement^T.
        let forward = self.chain(u, v - u).unwrap();
        let complement = self.chain(v, k - (v - u)).unwrap();
        Ok((forward, complement))
    }

    /// Normalized pairwise plan marginal between indices `u < v`: entry
    /// `(a, b)` is the probability that index `u` takes sample `a` and index
    /// `v` takes sample `b`. Rows and columns sum to the one-way marginals.
    pub fn pairwise_marginal(&self, u: usize, v: usize) -> Result<Mat> {
        let (forward, complement) = self.pairwise_chains(u, v)?;
        let log_mass = self.log_trace();
        let n = self.n;
        let mut out = Mat::zeros(n, n);
        out.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(a, row)| {
                for (b, slot) in row.iter_mut().enumerate() {
                    let l = forward.log_entry(a, b) + complement.log_entry(b, a) - log_mass;
                    *slot = l.exp();
                }
            });
        Ok(out)
    }

    /// Unnormalized pairwise marginal: entry `(a, b)` is the total plan mass
    /// of tuples with index `u` at sample `a` and index `v` at sample `b`.
    /// Dividing by the trace (total mass) recovers
    /// [`Self::pairwise_marginal`]; entries can overflow to infinity for
    /// extreme potentials, so prefer the normalized form for large inputs.
    pub fn pairwise_marginal_unnormalized(&self, u: usize, v: usize) -> Result<Mat> {
        let (forward, complement) = self.pairwise_chains(u, v)?;
        let n = self.n;
        let mut out = Mat::zeros(n, n);
        out.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(a, row)| {
                for (b, slot) in row.iter_mut().enumerate() {
                    let l = forward.log_entry(a, b) + complement.log_entry(b, a);
                    *slot = l.exp();
                }
            });
        Ok(out)
    }

    /// Transport cost of the normalized plan (no entropic term): the
    /// normalization times the sum over cyclic edges of
    /// `<C_i, pairwise marginal of edge i>`.
    pub fn unregularized_cost(&self, costs: &CostMatrixSet) -> Result<f64> {
        let k = self.k();
        let mut total = 0.0;
        for i in 0..k {
            let j = (i + 1) % k;
            let (u, v) = if i < j { (i, j) } else { (j, i) };
            let m = self.pairwise_marginal(u, v)?;
            let c = costs.mat_for(u, v).ok_or_else(|| {
                MmotError::InvalidArgument(format!(
                    "cost matrices do not cover the circle edge ({i},{j})"
                ))
            })?;
            let mut edge = 0.0;
            for a in 0..self.n {
                for b in 0..self.n {
                    edge += c[(a, b)] * m[(a, b)];
                }
            }
            total += edge;
        }
        Ok(self.normalization * total)
    }
}
