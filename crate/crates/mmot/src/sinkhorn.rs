//! Multimarginal Sinkhorn solvers in the log domain.
//!
//! Both solvers perform cyclic block-coordinate ascent on the concave dual
//! of entropy-regularized multimarginal transport over the uniform empirical
//! marginals: holding all but one potential fixed, the closed-form update
//!
//! ```text
//! phi_i(a) <- epsilon * ((k-1) ln n - s_i(a))
//! ```
//!
//! enforces the `i`-th marginal constraint exactly, where `s_i(a)` is the
//! log-sum-exp marginalization of the kernel over all other indices.
//!
//! * [`sinkhorn_full`] works for any cost graph by dense marginalization.
//!   It refuses instances whose `n^k` tuple count exceeds a configurable
//!   budget, and internally picks between exact tuple enumeration and
//!   matrix-product elimination (available for full graphs with k = 3, 4).
//! * [`sinkhorn_circle`] handles circle-shaped graphs of any size without
//!   ever touching `n^k` objects, by message passing through the scaling
//!   matrices of [`CircleScalingMatrices`]; cost is `O(n^3 k^2)` per sweep.
//!
//! Both return the same fixed point (dual value within 1e-8) where both run.

use rayon::prelude::*;

use crate::circle::CircleScalingMatrices;
use crate::error::{MmotError, Result};
use crate::model::{
    pairwise_cost_matrices, CostGraph, CostMatrixSet, GraphKind, MarginalDataset, PairwiseCost,
};
use crate::numerics::{logsumexp, Mat, ScaledMat};

/// Default cap on the dense tuple count `n^k` accepted by the dense solver
/// and by dense plan materialization.
pub const DEFAULT_DENSE_BUDGET_ENTRIES: f64 = 1e8;

/// Converged (or best-effort) dual potentials: one vector per marginal plus
/// the regularization strength they were computed at.
#[derive(Debug, Clone)]
pub struct DiscretePotentials {
    /// `phis[i][a]` is the potential of marginal `i` at sample `a`.
    pub phis: Vec<Vec<f64>>,
    pub epsilon: f64,
}

/// Outcome summary of a Sinkhorn solve.
#[derive(Debug, Clone)]
pub struct SolverReport {
    /// Dual objective value on the empirical marginals.
    pub value: f64,
    /// Number of full sweeps performed.
    pub iterations: usize,
    /// Max over marginals of the l1 distance between the plan marginal and
    /// the uniform empirical marginal, measured on the returned potentials.
    pub marginal_violation: f64,
    pub converged: bool,
}

/// Tuning knobs for the dense solver.
#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    /// Refuse instances with more than this many dense tuples (`n^k`).
    pub budget_entries: f64,
    /// Force exact tuple enumeration even where a matrix-product elimination
    /// path exists; used to cross-check the elimination paths.
    pub prefer_enumeration: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            budget_entries: DEFAULT_DENSE_BUDGET_ENTRIES,
            prefer_enumeration: false,
        }
    }
}

/// `n^k` as a float (exact for every in-budget size, no integer overflow).
pub fn tuple_count(n: usize, k: usize) -> f64 {
    (n as f64).powi(k as i32)
}

fn validate_solver_args(epsilon: f64, tol: f64) -> Result<()> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(MmotError::InvalidArgument(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if tol < 0.0 || !tol.is_finite() {
        return Err(MmotError::InvalidArgument(format!(
            "tol must be nonnegative and finite, got {tol}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense marginalization kernel
// ---------------------------------------------------------------------------

/// Streaming log-sum-exp accumulator with a fixed left-to-right order.
#[derive(Clone, Copy)]
struct StreamLse {
    max: f64,
    sum: f64,
}

impl StreamLse {
    fn new() -> Self {
        StreamLse {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn log_total(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Dense-path marginalization engine. Holds the raw pairwise cost matrices
/// and answers message queries `s_i(a)` for the current potentials.
struct DenseKernel {
    costs: CostMatrixSet,
    edges: Vec<(usize, usize)>,
    n: usize,
    k: usize,
    eta: f64,
    epsilon: f64,
    path: DensePath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DensePath {
    Enumerate,
    TriangleElim,
    QuadElim,
}

/// Smallest n at which the elimination paths beat plain enumeration.
const ELIMINATION_MIN_N: usize = 32;

impl DenseKernel {
    fn new(
        data: &MarginalDataset,
        graph: &CostGraph,
        cost: &PairwiseCost,
        epsilon: f64,
        options: &SinkhornOptions,
    ) -> Result<Self> {
        let n = data.n();
        let k = data.k();
        let entries = tuple_count(n, k);
        if entries > options.budget_entries {
            return Err(MmotError::ResourceLimit(format!(
                "dense solve needs n^k = {n}^{k} = {entries:.3e} tuples, above the budget of \
                 {:.3e} entries",
                options.budget_entries
            )));
        }
        let costs = pairwise_cost_matrices(data, graph, cost)?;
        let full = graph.kind() == GraphKind::Full;
        let path = if options.prefer_enumeration || n < ELIMINATION_MIN_N {
            DensePath::Enumerate
        } else if full && k == 3 {
            DensePath::TriangleElim
        } else if full && k == 4 {
            DensePath::QuadElim
        } else {
            DensePath::Enumerate
        };
        Ok(DenseKernel {
            costs,
            edges: graph.edges().to_vec(),
            n,
            k,
            eta: cost.normalization,
            epsilon,
            path,
        })
    }

    /// Message vector for marginal `i`: `s_i(a)` is the log-sum-exp over all
    /// tuples of the remaining indices of `(sum_{j != i} phi_j - eta*c)/eps`.
    fn messages(&self, i: usize, phis: &[Vec<f64>]) -> Vec<f64> {
        match self.path {
            DensePath::Enumerate => self.messages_enumerate(i, phis),
            DensePath::TriangleElim => self.messages_triangle(i, phis),
            DensePath::QuadElim => self.messages_quad(i, phis),
        }
    }

    fn messages_enumerate(&self, i: usize, phis: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n;
        let k = self.k;
        let others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        let inv_eps = 1.0 / self.epsilon;
        let scale = self.eta * inv_eps;
        (0..n)
            .into_par_iter()
            .map(|a| {
                let mut idx = vec![0usize; k];
                idx[i] = a;
                let mut digits = vec![0usize; k - 1];
                let mut lse = StreamLse::new();
                loop {
                    for (slot, &j) in digits.iter().zip(others.iter()) {
                        idx[j] = *slot;
                    }
                    let mut e = 0.0;
                    for &j in &others {
                        e += phis[j][idx[j]] * inv_eps;
                    }
                    for (e_idx, &(u, v)) in self.edges.iter().enumerate() {
                        e -= scale * self.costs.mat(e_idx)[(idx[u], idx[v])];
                    }
                    lse.push(e);
                    // Odometer increment over the k-1 free digits.
                    let mut pos = 0;
                    loop {
                        if pos == digits.len() {
                            return lse.log_total();
                        }
                        digits[pos] += 1;
                        if digits[pos] < n {
                            break;
                        }
                        digits[pos] = 0;
                        pos += 1;
                    }
                }
            })
            .collect()
    }

    /// Full k=3: eliminate the two free indices with one matrix product.
    fn messages_triangle(&self, i: usize, phis: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n;
        let inv_eps = 1.0 / self.epsilon;
        let scale = self.eta * inv_eps;
        let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
        let (j, l) = (others[0], others[1]);
        let c_ij = self.costs.mat_for(i, j).unwrap();
        let c_il = self.costs.mat_for(i, l).unwrap();
        let c_jl = self.costs.mat_for(j, l).unwrap();
        // s_i(a) = LSE_{b,c} A[a,b] + G[b,c] + Bt[c,a]
        let a_log = Mat::from_fn(n, n, |a, b| phis[j][b] * inv_eps - scale * c_ij[(a, b)]);
        let g_log = Mat::from_fn(n, n, |b, c| -scale * c_jl[(b, c)]);
        let bt_log = Mat::from_fn(n, n, |c, a| phis[l][c] * inv_eps - scale * c_il[(a, c)]);
        let h = ScaledMat::from_log(&g_log).matmul(&ScaledMat::from_log(&bt_log));
        (0..n)
            .into_par_iter()
            .map(|a| {
                let mut lse = StreamLse::new();
                for b in 0..n {
                    lse.push(a_log[(a, b)] + h.log_entry(b, a));
                }
                lse.log_total()
            })
            .collect()
    }

    /// Full k=4: eliminate the first free index by a matrix product against
    /// the pair-merged kernel of the other two, then reduce the remaining
    /// n^2 block per output row.
    fn messages_quad(&self, i: usize, phis: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n;
        let inv_eps = 1.0 / self.epsilon;
        let scale = self.eta * inv_eps;
        let others: Vec<usize> = (0..4).filter(|&j| j != i).collect();
        let (j, l, m) = (others[0], others[1], others[2]);
        let c_ij = self.costs.mat_for(i, j).unwrap();
        let c_il = self.costs.mat_for(i, l).unwrap();
        let c_im = self.costs.mat_for(i, m).unwrap();
        let c_jl = self.costs.mat_for(j, l).unwrap();
        let c_jm = self.costs.mat_for(j, m).unwrap();
        let c_lm = self.costs.mat_for(l, m).unwrap();

        // f[a,b] carries phi_j; the merged kernel w[b,(c,d)] is potential-free
        // for index b but carries no potentials at all (phi_l, phi_m live in
        // the final reduction).
        let f_log = Mat::from_fn(n, n, |a, b| phis[j][b] * inv_eps - scale * c_ij[(a, b)]);
        let mut w_log = Mat::zeros(n, n * n);
        {
            let w = w_log.as_mut_slice();
            w.par_chunks_mut(n * n).enumerate().for_each(|(b, row)| {
                for c in 0..n {
                    let base = -scale * c_jl[(b, c)];
                    for d in 0..n {
                        row[c * n + d] = base - scale * c_jm[(b, d)];
                    }
                }
            });
        }
        let x = ScaledMat::from_log(&f_log).matmul(&ScaledMat::from_log(&w_log));
        (0..n)
            .into_par_iter()
            .map(|a| {
                let mut lse = StreamLse::new();
                for c in 0..n {
                    let col_c = phis[l][c] * inv_eps - scale * c_il[(a, c)];
                    for d in 0..n {
                        let rest = phis[m][d] * inv_eps - scale * c_im[(a, d)]
                            - scale * c_lm[(c, d)];
                        lse.push(col_c + rest + x.log_entry(a, c * n + d));
                    }
                }
                lse.log_total()
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Shared sweep driver
// ---------------------------------------------------------------------------

/// Everything a cyclic-sweep driver needs from a marginalization backend.
trait MessageBackend {
    fn messages(&mut self, i: usize, phis: &[Vec<f64>]) -> Vec<f64>;
    /// Called after `phis[i]` changed, before the next message query.
    fn potentials_updated(&mut self, i: usize, phis: &[Vec<f64>]) -> Result<()>;
}

struct DenseBackend<'a> {
    kernel: &'a DenseKernel,
}

impl MessageBackend for DenseBackend<'_> {
    fn messages(&mut self, i: usize, phis: &[Vec<f64>]) -> Vec<f64> {
        self.kernel.messages(i, phis)
    }

    fn potentials_updated(&mut self, _i: usize, _phis: &[Vec<f64>]) -> Result<()> {
        Ok(())
    }
}

struct CircleBackend<'a> {
    costs: &'a CostMatrixSet,
    graph: &'a CostGraph,
    eta: f64,
    epsilon: f64,
    mats: CircleScalingMatrices,
}

impl CircleBackend<'_> {
    fn rebuild(&mut self, phis: &[Vec<f64>]) -> Result<()> {
        self.mats =
            CircleScalingMatrices::build(phis, self.costs, self.graph, self.eta, self.epsilon)?;
        Ok(())
    }
}

impl MessageBackend for CircleBackend<'_> {
    fn messages(&mut self, i: usize, phis: &[Vec<f64>]) -> Vec<f64> {
        let diag = self.mats.rotated_log_diag(i);
        let inv_eps = 1.0 / self.epsilon;
        diag.iter()
            .zip(phis[i].iter())
            .map(|(mu, phi)| mu - phi * inv_eps)
            .collect()
    }

    fn potentials_updated(&mut self, _i: usize, phis: &[Vec<f64>]) -> Result<()> {
        self.rebuild(phis)
    }
}

/// Caps an exponent so `exp` stays finite while the iteration is still far
/// from feasibility; used only for violation bookkeeping mid-run.
fn safe_exp(x: f64) -> f64 {
    x.min(700.0).exp()
}

struct SweepOutcome {
    phis: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
}

fn run_sweeps<B: MessageBackend>(
    backend: &mut B,
    n: usize,
    k: usize,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SweepOutcome> {
    let ln_n = (n as f64).ln();
    let mut phis = vec![vec![0.0; n]; k];
    let mut converged = false;
    let mut iterations = 0;
    for sweep in 1..=max_iter {
        let mut sweep_viol: f64 = 0.0;
        for i in 0..k {
            let s = backend.messages(i, &phis);
            let mut viol = 0.0;
            for a in 0..n {
                let new = epsilon * ((k - 1) as f64 * ln_n - s[a]);
                viol += (safe_exp((phis[i][a] - new) / epsilon) - 1.0).abs();
                phis[i][a] = new;
            }
            viol /= n as f64;
            sweep_viol = sweep_viol.max(viol);
            backend.potentials_updated(i, &phis)?;
        }
        iterations = sweep;
        if sweep_viol <= tol {
            converged = true;
            break;
        }
    }
    Ok(SweepOutcome {
        phis,
        iterations,
        converged,
    })
}

/// Verification pass on the final potentials: honest per-marginal violations
/// plus the log of the kernel's product-measure mean (`log Z`).
fn verify<B: MessageBackend>(
    backend: &mut B,
    phis: &[Vec<f64>],
    n: usize,
    k: usize,
    epsilon: f64,
) -> (f64, f64) {
    let ln_n = (n as f64).ln();
    let uniform = 1.0 / n as f64;
    let mut worst: f64 = 0.0;
    let mut log_z = f64::NEG_INFINITY;
    for i in 0..k {
        let s = backend.messages(i, phis);
        let terms: Vec<f64> = (0..n).map(|a| phis[i][a] / epsilon + s[a]).collect();
        if i == 0 {
            log_z = logsumexp(&terms) - k as f64 * ln_n;
        }
        let viol: f64 = terms
            .iter()
            .map(|&t| (safe_exp(t - k as f64 * ln_n) - uniform).abs())
            .sum();
        worst = worst.max(viol);
    }
    (worst, log_z)
}

fn dual_value_from_parts(phis: &[Vec<f64>], epsilon: f64, log_z: f64) -> Result<f64> {
    if log_z > 700.0 {
        return Err(MmotError::Numerical(format!(
            "dual exponential term overflows: log of the tuple mean is {log_z:.3e}"
        )));
    }
    let mean_sum: f64 = phis
        .iter()
        .map(|p| p.iter().sum::<f64>() / p.len() as f64)
        .sum();
    Ok(mean_sum - epsilon * log_z.exp() + epsilon)
}

/// Shifts the potentials to the canonical gauge: `mean(phi_i) = value / k`
/// for every marginal except the last, which absorbs the matching opposite
/// shift so the plan and the dual value are unchanged.
fn fix_gauge(phis: &mut [Vec<f64>], value: f64) {
    let k = phis.len();
    if k < 2 {
        return;
    }
    let target = value / k as f64;
    let mut carried = 0.0;
    for phi in phis.iter_mut().take(k - 1) {
        let mean = phi.iter().sum::<f64>() / phi.len() as f64;
        let shift = target - mean;
        for v in phi.iter_mut() {
            *v += shift;
        }
        carried += shift;
    }
    for v in phis[k - 1].iter_mut() {
        *v -= carried;
    }
}

fn finish<B: MessageBackend>(
    backend: &mut B,
    outcome: SweepOutcome,
    n: usize,
    k: usize,
    epsilon: f64,
) -> Result<(DiscretePotentials, SolverReport)> {
    let SweepOutcome {
        mut phis,
        iterations,
        converged,
    } = outcome;
    let (violation, log_z) = verify(backend, &phis, n, k, epsilon);
    let value = dual_value_from_parts(&phis, epsilon, log_z)?;
    fix_gauge(&mut phis, value);
    Ok((
        DiscretePotentials { phis, epsilon },
        SolverReport {
            value,
            iterations,
            marginal_violation: violation,
            converged,
        },
    ))
}

// ---------------------------------------------------------------------------
// Public solvers
// ---------------------------------------------------------------------------

/// Dense multimarginal Sinkhorn for any cost graph, subject to the `n^k`
/// budget in [`SinkhornOptions`].
pub fn sinkhorn_full(
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(DiscretePotentials, SolverReport)> {
    sinkhorn_full_with_options(data, graph, cost, epsilon, tol, max_iter, &SinkhornOptions::default())
}

/// [`sinkhorn_full`] with explicit budget / path options.
pub fn sinkhorn_full_with_options(
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
    options: &SinkhornOptions,
) -> Result<(DiscretePotentials, SolverReport)> {
    validate_solver_args(epsilon, tol)?;
    if graph.k() != data.k() {
        return Err(MmotError::InvalidArgument(format!(
            "graph has k={} but dataset has k={}",
            graph.k(),
            data.k()
        )));
    }
    let kernel = DenseKernel::new(data, graph, cost, epsilon, options)?;
    let mut backend = DenseBackend { kernel: &kernel };
    let outcome = run_sweeps(&mut backend, data.n(), data.k(), epsilon, tol, max_iter)?;
    finish(&mut backend, outcome, data.n(), data.k(), epsilon)
}

/// Circle Sinkhorn: message passing through scaling-matrix products, never
/// materializing anything larger than n x n. The circle graph over the
/// dataset's `k` marginals is implied.
pub fn sinkhorn_circle(
    data: &MarginalDataset,
    cost: &PairwiseCost,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(DiscretePotentials, SolverReport)> {
    validate_solver_args(epsilon, tol)?;
    let k = data.k();
    let graph = CostGraph::build(GraphKind::Circle, k)?;
    let costs = pairwise_cost_matrices(data, &graph, cost)?;
    let n = data.n();
    let zero = vec![vec![0.0; n]; k];
    let mats = CircleScalingMatrices::build(&zero, &costs, &graph, cost.normalization, epsilon)?;
    let mut backend = CircleBackend {
        costs: &costs,
        graph: &graph,
        eta: cost.normalization,
        epsilon,
        mats,
    };
    let outcome = run_sweeps(&mut backend, n, k, epsilon, tol, max_iter)?;
    finish(&mut backend, outcome, n, k, epsilon)
}

/// Dual objective at the given potentials: the sum of potential means minus
/// `epsilon` times the mean over all `n^k` tuples of the exponentiated
/// residual, plus `epsilon`. Computed in the log domain; circle-shaped
/// graphs use the scaling-matrix trace instead of tuple enumeration.
pub fn emot_dual_value(
    pots: &DiscretePotentials,
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
    epsilon: f64,
) -> Result<f64> {
    validate_solver_args(epsilon, 0.0)?;
    let n = data.n();
    let k = data.k();
    if pots.phis.len() != k || pots.phis.iter().any(|p| p.len() != n) {
        return Err(MmotError::InvalidArgument(
            "potential shapes do not match the dataset".into(),
        ));
    }
    let log_z = if graph.is_circle_shaped() {
        let costs = pairwise_cost_matrices(data, graph, cost)?;
        let mats =
            CircleScalingMatrices::build(&pots.phis, &costs, graph, cost.normalization, epsilon)?;
        mats.log_z()
    } else {
        let entries = tuple_count(n, k);
        if entries > DEFAULT_DENSE_BUDGET_ENTRIES {
            return Err(MmotError::ResourceLimit(format!(
                "dual evaluation on a non-circle graph enumerates n^k = {entries:.3e} tuples, \
                 above the budget of {DEFAULT_DENSE_BUDGET_ENTRIES:.3e}"
            )));
        }
        let kernel = DenseKernel::new(
            data,
            graph,
            cost,
            epsilon,
            &SinkhornOptions {
                prefer_enumeration: true,
                ..SinkhornOptions::default()
            },
        )?;
        let s = kernel.messages(0, &pots.phis);
        let terms: Vec<f64> = (0..n)
            .map(|a| pots.phis[0][a] / epsilon + s[a])
            .collect();
        logsumexp(&terms) - k as f64 * (n as f64).ln()
    };
    dual_value_from_parts(&pots.phis, epsilon, log_z)
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

/// A transport plan, either as an explicit normalized tensor or factored
/// through circle scaling matrices.
#[derive(Debug, Clone)]
pub enum PlanRepresentation {
    Dense(DensePlan),
    FactoredCircle(CircleScalingMatrices),
}

/// Explicit plan tensor over all `n^k` tuples, normalized to sum to one.
#[derive(Debug, Clone)]
pub struct DensePlan {
    /// One entry per marginal; all equal to `n` for empirical datasets.
    pub dims: Vec<usize>,
    /// Row-major tensor values (last index fastest), summing to 1.
    pub values: Vec<f64>,
    /// Total mass before normalization; approximately 1 at convergence.
    pub pre_normalization_mass: f64,
}

impl DensePlan {
    pub fn k(&self) -> usize {
        self.dims.len()
    }

    /// Flat offset of a tuple index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        let mut off = 0;
        for (d, &i) in self.dims.iter().zip(idx.iter()) {
            off = off * d + i;
        }
        off
    }

    /// Marginal distribution of index `i` (sums to 1).
    pub fn one_way_marginal(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims[i]];
        let mut idx = vec![0usize; self.dims.len()];
        for &v in &self.values {
            out[idx[i]] += v;
            increment_index(&mut idx, &self.dims);
        }
        out
    }

    /// Pairwise marginal of indices `u < v` (entries sum to 1).
    pub fn pairwise_marginal(&self, u: usize, v: usize) -> Result<Mat> {
        if u >= v || v >= self.dims.len() {
            return Err(MmotError::InvalidArgument(format!(
                "pairwise marginal needs u < v < k, got u={u}, v={v}"
            )));
        }
        let mut out = Mat::zeros(self.dims[u], self.dims[v]);
        let mut idx = vec![0usize; self.dims.len()];
        for &val in &self.values {
            out[(idx[u], idx[v])] += val;
            increment_index(&mut idx, &self.dims);
        }
        Ok(out)
    }
}

/// Advances a mixed-radix tuple index in row-major order (last digit fastest).
pub fn increment_index(idx: &mut [usize], dims: &[usize]) -> bool {
    for pos in (0..idx.len()).rev() {
        idx[pos] += 1;
        if idx[pos] < dims[pos] {
            return true;
        }
        idx[pos] = 0;
    }
    false
}

/// Materializes the plan encoded by converged potentials. Circle-shaped
/// graphs get the factored representation (no `n^k` objects); everything
/// else is materialized densely under the default budget.
pub fn plan_from_potentials(
    pots: &DiscretePotentials,
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
) -> Result<PlanRepresentation> {
    plan_from_potentials_with_budget(pots, data, graph, cost, DEFAULT_DENSE_BUDGET_ENTRIES)
}

/// [`plan_from_potentials`] with an explicit dense budget.
pub fn plan_from_potentials_with_budget(
    pots: &DiscretePotentials,
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
    budget_entries: f64,
) -> Result<PlanRepresentation> {
    if graph.is_circle_shaped() {
        let costs = pairwise_cost_matrices(data, graph, cost)?;
        let mats = CircleScalingMatrices::build(
            &pots.phis,
            &costs,
            graph,
            cost.normalization,
            pots.epsilon,
        )?;
        return Ok(PlanRepresentation::FactoredCircle(mats));
    }
    Ok(PlanRepresentation::Dense(dense_plan_from_potentials(
        pots,
        data,
        graph,
        cost,
        budget_entries,
    )?))
}

/// Explicit dense plan for any graph under the budget: entry at a tuple is
/// `(1/n^k) exp((sum_i phi_i - c)/epsilon)`, renormalized to sum to one.
pub fn dense_plan_from_potentials(
    pots: &DiscretePotentials,
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
    budget_entries: f64,
) -> Result<DensePlan> {
    let n = data.n();
    let k = data.k();
    if pots.phis.len() != k || pots.phis.iter().any(|p| p.len() != n) {
        return Err(MmotError::InvalidArgument(
            "potential shapes do not match the dataset".into(),
        ));
    }
    let entries = tuple_count(n, k);
    if entries > budget_entries {
        return Err(MmotError::ResourceLimit(format!(
            "dense plan needs n^k = {n}^{k} = {entries:.3e} entries, above the budget of \
             {budget_entries:.3e}"
        )));
    }
    let costs = pairwise_cost_matrices(data, graph, cost)?;
    let eta = cost.normalization;
    let eps = pots.epsilon;
    let ln_n = (n as f64).ln();
    let total = entries as usize;
    let mut log_vals = Vec::with_capacity(total);
    let dims = vec![n; k];
    let mut idx = vec![0usize; k];
    loop {
        let mut e = 0.0;
        for (j, phi) in pots.phis.iter().enumerate() {
            e += phi[idx[j]];
        }
        e -= eta * costs.tuple_cost_raw(&idx);
        log_vals.push(e / eps - k as f64 * ln_n);
        if !increment_index(&mut idx, &dims) {
            break;
        }
    }
    let log_mass = logsumexp(&log_vals);
    if !log_mass.is_finite() {
        return Err(MmotError::Numerical(format!(
            "plan mass is not finite in the log domain (log mass = {log_mass})"
        )));
    }
    let mut values: Vec<f64> = log_vals.iter().map(|&l| (l - log_mass).exp()).collect();
    // Exact renormalization after the log-domain pass.
    let s: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= s;
    }
    Ok(DensePlan {
        dims,
        values,
        pre_normalization_mass: log_mass.exp(),
    })
}

/// KL divergence between two dense plans over the same index space, with the
/// convention `0 ln(0/q) = 0`. Infinite when `p` charges a tuple `q` misses.
pub fn kl_divergence_dense(p: &DensePlan, q: &DensePlan) -> Result<f64> {
    if p.dims != q.dims {
        return Err(MmotError::InvalidArgument(
            "plans have different shapes".into(),
        ));
    }
    let mut kl = 0.0;
    for (&pv, &qv) in p.values.iter().zip(q.values.iter()) {
        if pv > 0.0 {
            kl += pv * (pv.ln() - qv.ln());
        }
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CostKind;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn random_dataset(n: usize, k: usize, d: usize, seed: u64) -> MarginalDataset {
        let mut rng = derive_rng(seed, "sinkhorn-test", 0);
        MarginalDataset::new(
            (0..k)
                .map(|_| Mat::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0))
                .collect(),
        )
        .unwrap()
    }

    fn sq_cost(k: usize) -> PairwiseCost {
        PairwiseCost::squared_euclidean(k)
    }

    #[test]
    fn n2_k2_matches_scalar_search_oracle() {
        // Two samples per marginal placed so the raw pairwise costs are
        // [[0,1],[1,0]]; with k=2 the default normalization is 1/2, so use
        // an explicit normalization of 1 to make the cost matrix literal.
        let data = MarginalDataset::new(vec![
            Mat::from_vec(2, 1, vec![0.0, 1.0]),
            Mat::from_vec(2, 1, vec![0.0, 1.0]),
        ])
        .unwrap();
        let graph = CostGraph::build(GraphKind::Full, 2).unwrap();
        let cost = PairwiseCost {
            kind: CostKind::SquaredEuclidean,
            normalization: 1.0,
        };
        let eps = 1.0;
        let (pots, report) = sinkhorn_full(&data, &graph, &cost, eps, 1e-12, 10_000).unwrap();
        assert!(report.converged);

        // Brute force over the single free entry t of the coupling
        // [[t, 1/2 - t], [1/2 - t, t]]: objective <C, pi> + eps*KL(pi || unif).
        let objective = |t: f64| -> f64 {
            let o = 0.5 - t;
            let kl = 2.0 * t * (4.0 * t).ln() + 2.0 * o * (4.0 * o).ln();
            2.0 * o + eps * kl
        };
        let mut lo = 1e-9;
        let mut hi = 0.5 - 1e-9;
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if objective(m1) < objective(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let best = objective(0.5 * (lo + hi));
        assert!(
            (report.value - best).abs() < 1e-6,
            "sinkhorn {} vs search {}",
            report.value,
            best
        );

        // The plan matches the optimizer's coupling entrywise.
        let t_star = 0.5 * (lo + hi);
        let plan = dense_plan_from_potentials(&pots, &data, &graph, &cost, 1e6).unwrap();
        let expect = [t_star, 0.5 - t_star, 0.5 - t_star, t_star];
        for (got, want) in plan.values.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        assert!((plan.pre_normalization_mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn coincident_samples_give_zero_value() {
        let data = MarginalDataset::new(
            (0..3)
                .map(|_| Mat::from_fn(4, 2, |_, _| 0.7))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let graph = CostGraph::build(GraphKind::Full, 3).unwrap();
        let (_, report) = sinkhorn_full(&data, &graph, &sq_cost(3), 0.5, 1e-10, 100).unwrap();
        assert!(report.converged);
        assert!(report.value.abs() < 1e-12);
        assert!(report.marginal_violation < 1e-10);
    }

    #[test]
    fn single_atom_value_is_the_tuple_cost() {
        let data = MarginalDataset::new(
            (0..3)
                .map(|i| Mat::from_vec(1, 1, vec![i as f64]))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let graph = CostGraph::build(GraphKind::Full, 3).unwrap();
        let cost = sq_cost(3);
        // Tuple cost: (1 + 4 + 1)/3 = 2.
        let (_, full) = sinkhorn_full(&data, &graph, &cost, 0.3, 1e-10, 50).unwrap();
        assert!((full.value - 2.0).abs() < 1e-10);
        assert!(full.marginal_violation < 1e-12);
        let (_, circ) = sinkhorn_circle(&data, &cost, 0.3, 1e-10, 50).unwrap();
        assert!((circ.value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn circle_matches_full_on_k3_and_k4() {
        for (n, k, seed) in [(4usize, 3usize, 11u64), (5, 4, 12)] {
            let data = random_dataset(n, k, 2, seed);
            let graph = CostGraph::build(GraphKind::Circle, k).unwrap();
            let cost = sq_cost(k);
            for eps in [0.1, 1.0] {
                let (_, full) =
                    sinkhorn_full(&data, &graph, &cost, eps, 1e-11, 20_000).unwrap();
                let (_, circ) = sinkhorn_circle(&data, &cost, eps, 1e-11, 20_000).unwrap();
                assert!(full.converged && circ.converged);
                assert!(
                    (full.value - circ.value).abs() < 1e-8,
                    "n={n} k={k} eps={eps}: {} vs {}",
                    full.value,
                    circ.value
                );
            }
        }
    }

    #[test]
    fn elimination_paths_match_enumeration() {
        // Fixed sweep count, tol 0: compare the per-path iterates exactly.
        for (k, n) in [(3usize, 40usize), (4, 33)] {
            let data = random_dataset(n, k, 2, 31 + k as u64);
            let graph = CostGraph::build(GraphKind::Full, k).unwrap();
            let cost = sq_cost(k);
            let fast = SinkhornOptions::default();
            let slow = SinkhornOptions {
                prefer_enumeration: true,
                ..SinkhornOptions::default()
            };
            let (_, a) =
                sinkhorn_full_with_options(&data, &graph, &cost, 0.5, 0.0, 3, &fast).unwrap();
            let (_, b) =
                sinkhorn_full_with_options(&data, &graph, &cost, 0.5, 0.0, 3, &slow).unwrap();
            assert!(
                (a.value - b.value).abs() < 1e-9,
                "k={k}: elimination {} vs enumeration {}",
                a.value,
                b.value
            );
            assert!((a.marginal_violation - b.marginal_violation).abs() < 1e-9);
        }
    }

    #[test]
    fn budget_refusal_names_the_tuple_count() {
        let data = random_dataset(4, 4, 1, 3);
        // Pretend the dataset had n=1000 by shrinking the budget instead.
        let graph = CostGraph::build(GraphKind::Full, 4).unwrap();
        let opts = SinkhornOptions {
            budget_entries: 100.0,
            ..SinkhornOptions::default()
        };
        let err = sinkhorn_full_with_options(&data, &graph, &sq_cost(4), 1.0, 1e-6, 10, &opts)
            .unwrap_err();
        match &err {
            MmotError::ResourceLimit(msg) => {
                assert!(msg.contains("4^4"), "message: {msg}");
                assert!(msg.contains("budget"), "message: {msg}");
            }
            other => panic!("expected resource error, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn huge_epsilon_approaches_independent_coupling_cost() {
        let data = random_dataset(5, 3, 1, 77);
        let cost = sq_cost(3);
        let (_, report) = sinkhorn_circle(&data, &cost, 1e3, 1e-10, 10_000).unwrap();
        // Independent-coupling cost over the circle graph.
        let graph = CostGraph::build(GraphKind::Circle, 3).unwrap();
        let costs = pairwise_cost_matrices(&data, &graph, &cost).unwrap();
        let n = data.n() as f64;
        let mut indep = 0.0;
        for e in 0..3 {
            let m = costs.mat(e);
            indep += m.as_slice().iter().sum::<f64>() / (n * n);
        }
        indep *= cost.normalization;
        assert!(
            (report.value - indep).abs() < 1e-3,
            "value {} vs independent {}",
            report.value,
            indep
        );
    }

    #[test]
    fn gauge_invariance_of_dual_value() {
        let data = random_dataset(4, 3, 2, 5);
        let graph = CostGraph::build(GraphKind::Circle, 3).unwrap();
        let cost = sq_cost(3);
        let eps = 0.7;
        let (pots, report) = sinkhorn_full(&data, &graph, &cost, eps, 1e-9, 5_000).unwrap();
        let base = emot_dual_value(&pots, &data, &graph, &cost, eps).unwrap();
        assert!((base - report.value).abs() < 1e-9);
        let mut shifted = pots.clone();
        let shifts = [0.4, -1.1, 0.7];
        for (phi, s) in shifted.phis.iter_mut().zip(shifts.iter()) {
            for v in phi.iter_mut() {
                *v += s;
            }
        }
        let moved = emot_dual_value(&shifted, &data, &graph, &cost, eps).unwrap();
        assert!((moved - base).abs() < 1e-10, "{moved} vs {base}");
    }

    #[test]
    fn gauge_normalizes_potential_means() {
        let data = random_dataset(5, 3, 1, 40);
        let graph = CostGraph::build(GraphKind::Circle, 3).unwrap();
        let (pots, report) = sinkhorn_full(&data, &graph, &sq_cost(3), 0.8, 1e-9, 5_000).unwrap();
        for phi in pots.phis.iter().take(2) {
            let mean = phi.iter().sum::<f64>() / phi.len() as f64;
            assert!((mean - report.value / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_value_matches_bruteforce_enumeration() {
        let data = random_dataset(3, 3, 2, 9);
        let graph = CostGraph::build(GraphKind::Full, 3).unwrap();
        let cost = sq_cost(3);
        let eps = 0.4;
        let pots = DiscretePotentials {
            phis: vec![
                vec![0.1, -0.2, 0.05],
                vec![0.0, 0.3, -0.1],
                vec![-0.25, 0.15, 0.2],
            ],
            epsilon: eps,
        };
        let fast = emot_dual_value(&pots, &data, &graph, &cost, eps).unwrap();
        // Direct tuple sum.
        let costs = pairwise_cost_matrices(&data, &graph, &cost).unwrap();
        let n = data.n();
        let mut z = 0.0;
        let dims = vec![n; 3];
        let mut idx = vec![0usize; 3];
        loop {
            let mut e = 0.0;
            for (j, phi) in pots.phis.iter().enumerate() {
                e += phi[idx[j]];
            }
            e -= cost.normalization * costs.tuple_cost_raw(&idx);
            z += (e / eps).exp();
            if !increment_index(&mut idx, &dims) {
                break;
            }
        }
        z /= (n as f64).powi(3);
        let mean_sum: f64 = pots
            .phis
            .iter()
            .map(|p| p.iter().sum::<f64>() / n as f64)
            .sum();
        let slow = mean_sum - eps * z + eps;
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
    }

    #[test]
    fn dual_value_nondecreasing_across_sweeps() {
        let data = random_dataset(4, 3, 2, 23);
        let graph = CostGraph::build(GraphKind::Full, 3).unwrap();
        let cost = sq_cost(3);
        let mut last = f64::NEG_INFINITY;
        for sweeps in 1..=6 {
            let (_, report) = sinkhorn_full(&data, &graph, &cost, 0.2, 0.0, sweeps).unwrap();
            assert!(
                report.value >= last - 1e-12,
                "value decreased: {} after {} sweeps, previous {}",
                report.value,
                sweeps,
                last
            );
            last = report.value;
        }
    }

    #[test]
    fn primal_value_nondecreasing_in_epsilon() {
        let data = random_dataset(4, 3, 1, 64);
        let graph = CostGraph::build(GraphKind::Full, 3).unwrap();
        let cost = sq_cost(3);
        let costs = pairwise_cost_matrices(&data, &graph, &cost).unwrap();
        let mut last = f64::NEG_INFINITY;
        for eps in [0.1, 0.5, 2.0] {
            let (pots, _) = sinkhorn_full(&data, &graph, &cost, eps, 1e-10, 20_000).unwrap();
            let plan = dense_plan_from_potentials(&pots, &data, &graph, &cost, 1e6).unwrap();
            // Primal objective: <c, pi> + eps * KL(pi || uniform product).
            let mut idx = vec![0usize; 3];
            let mut transport = 0.0;
            let mut kl = 0.0;
            let n3 = (data.n() as f64).powi(3);
            for &v in &plan.values {
                transport += v * cost.normalization * costs.tuple_cost_raw(&idx);
                if v > 0.0 {
                    kl += v * (v * n3).ln();
                }
                increment_index(&mut idx, &plan.dims);
            }
            let primal = transport + eps * kl;
            assert!(
                primal >= last - 1e-8,
                "primal decreased: {primal} at eps={eps}, previous {last}"
            );
            last = primal;
        }
    }

    #[test]
    fn converged_plan_marginals_are_uniform() {
        let data = random_dataset(4, 3, 2, 17);
        let graph = CostGraph::build(GraphKind::Full, 3).unwrap();
        let cost = sq_cost(3);
        let (pots, report) = sinkhorn_full(&data, &graph, &cost, 0.5, 1e-8, 10_000).unwrap();
        assert!(report.converged);
        let plan = dense_plan_from_potentials(&pots, &data, &graph, &cost, 1e6).unwrap();
        let total: f64 = plan.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for i in 0..3 {
            for p in plan.one_way_marginal(i) {
                assert!((p - 0.25).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_potentials_zero_cost_plan_is_uniform() {
        let data = MarginalDataset::new(
            (0..2)
                .map(|_| Mat::zeros(3, 1))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let graph = CostGraph::build(GraphKind::Full, 2).unwrap();
        let pots = DiscretePotentials {
            phis: vec![vec![0.0; 3]; 2],
            epsilon: 1.0,
        };
        let plan =
            dense_plan_from_potentials(&pots, &data, &graph, &sq_cost(2), 1e6).unwrap();
        for &v in &plan.values {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
        assert!((plan.pre_normalization_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plan_representation_follows_graph_shape() {
        let data = random_dataset(3, 3, 1, 2);
        let cost = sq_cost(3);
        let circle = CostGraph::build(GraphKind::Circle, 3).unwrap();
        let pots = DiscretePotentials {
            phis: vec![vec![0.0; 3]; 3],
            epsilon: 1.0,
        };
        match plan_from_potentials(&pots, &data, &circle, &cost).unwrap() {
            PlanRepresentation::FactoredCircle(m) => assert_eq!(m.k(), 3),
            PlanRepresentation::Dense(_) => panic!("expected factored representation"),
        }
        let tree = CostGraph::build(GraphKind::Tree, 3).unwrap();
        match plan_from_potentials(&pots, &data, &tree, &cost).unwrap() {
            PlanRepresentation::Dense(p) => assert_eq!(p.values.len(), 27),
            PlanRepresentation::FactoredCircle(_) => panic!("expected dense representation"),
        }
    }

    #[test]
    fn tree_graph_solves_through_dense_path() {
        let data = random_dataset(4, 3, 1, 91);
        let tree = CostGraph::build(GraphKind::Tree, 3).unwrap();
        let cost = sq_cost(3);
        let (pots, report) = sinkhorn_full(&data, &tree, &cost, 0.5, 1e-9, 10_000).unwrap();
        assert!(report.converged);
        assert!(report.marginal_violation <= 1e-9);
        let v = emot_dual_value(&pots, &data, &tree, &cost, 0.5).unwrap();
        assert!((v - report.value).abs() < 1e-9);
    }

    #[test]
    fn kl_divergence_basics() {
        let uniform = DensePlan {
            dims: vec![2, 2],
            values: vec![0.25; 4],
            pre_normalization_mass: 1.0,
        };
        let skewed = DensePlan {
            dims: vec![2, 2],
            values: vec![0.4, 0.1, 0.1, 0.4],
            pre_normalization_mass: 1.0,
        };
        assert_eq!(kl_divergence_dense(&uniform, &uniform).unwrap(), 0.0);
        let kl = kl_divergence_dense(&skewed, &uniform).unwrap();
        let by_hand = 2.0 * 0.4 * (0.4f64 / 0.25).ln() + 2.0 * 0.1 * (0.1f64 / 0.25).ln();
        assert!((kl - by_hand).abs() < 1e-14);
        assert!(kl > 0.0);
    }
}
