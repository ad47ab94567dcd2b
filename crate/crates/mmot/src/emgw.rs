//! Entropic multimarginal Gromov-Wasserstein over Euclidean sample spaces.
//!
//! For centered marginals the quartic distortion objective splits into a
//! coupling-independent part `S1` (fourth moments and second-moment cross
//! products) and a coupling-dependent part `S2`. The latter has a
//! variational form over auxiliary alignment matrices `A_ij` (one per edge):
//!
//! ```text
//! S2 = inf_A  32 * sum_ij ||A_ij||_F^2  +  EMOT with cost
//!      c_A(x^k) = sum_ij ( -4 ||x_i||^2 ||x_j||^2 - 32 x_i' A_ij x_j )
//! ```
//!
//! which is quadratic in `A` at a fixed plan, with gradient
//! `64 A_ij - 32 X_i P_ij X_j'` (`P_ij` the pairwise plan marginal, `X_i`
//! the `d_i x n` sample matrix). The alternating solver interleaves inner
//! transport solves with exact alignment steps; a step of `1/64` lands on
//! the per-round minimizer `A_ij = (1/2) X_i P_ij X_j'`, projected onto the
//! balls `||A_ij||_F <= sqrt(M2_i M2_j)/2` that are known to contain the
//! optimum.

use crate::error::{MmotError, Result};
use crate::model::{
    pairwise_cost_matrices, CostGraph, CostKind, GraphKind, MarginalDataset, PairwiseCost,
};
use crate::nemot::{build_l_matrices, neural_plan_discrete, train_nemot, NemotModel};
use crate::neural::TrainConfig;
use crate::numerics::Mat;
use crate::sinkhorn::{
    increment_index, plan_from_potentials_with_budget, sinkhorn_circle, sinkhorn_full_with_options,
    DensePlan, PlanRepresentation, SinkhornOptions, DEFAULT_DENSE_BUDGET_ENTRIES,
};

/// Exact alignment-step size: the objective is `32||A||^2` plus a linear
/// term, so a gradient step of `1/64` reaches the per-round minimizer.
pub const EXACT_A_STEP: f64 = 1.0 / 64.0;

/// Tolerance on pairwise-marginal feasibility (uniform row/column sums).
pub const MARGINAL_FEASIBILITY_TOL: f64 = 1e-6;

/// A [`MarginalDataset`] read as `k` metric-measure spaces with Euclidean
/// metrics, tracking whether the empirical means have been removed.
#[derive(Debug, Clone)]
pub struct MmSpaceDataset {
    pub data: MarginalDataset,
    pub centered: bool,
}

impl MmSpaceDataset {
    /// Wraps a dataset without centering it.
    pub fn raw(data: MarginalDataset) -> Self {
        MmSpaceDataset {
            data,
            centered: false,
        }
    }

    fn require_centered(&self) -> Result<()> {
        if !self.centered {
            return Err(MmotError::InvalidArgument(
                "operation requires a centered dataset; apply center_dataset first".into(),
            ));
        }
        Ok(())
    }
}

/// Removes each marginal's empirical mean and marks the result centered.
pub fn center_dataset(data: &MarginalDataset) -> Result<MmSpaceDataset> {
    let mut centered = Vec::with_capacity(data.k());
    for i in 0..data.k() {
        let m = data.marginal(i);
        let (n, d) = (m.rows(), m.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (c, slot) in mean.iter_mut().enumerate() {
                *slot += m[(r, c)];
            }
        }
        for slot in mean.iter_mut() {
            *slot /= n as f64;
        }
        centered.push(Mat::from_fn(n, d, |r, c| m[(r, c)] - mean[c]));
    }
    Ok(MmSpaceDataset {
        data: MarginalDataset::new(centered)?,
        centered: true,
    })
}

/// Per-marginal empirical second moments `M2_i = mean ||x||^2`.
pub fn second_moments(data: &MarginalDataset) -> Vec<f64> {
    (0..data.k())
        .map(|i| {
            let m = data.marginal(i);
            m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.rows() as f64
        })
        .collect()
}

fn squared_norms(m: &Mat) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v * v).sum())
        .collect()
}

/// Coupling-independent part of the objective: per edge `(i, j)`, the mean
/// over all ordered sample pairs of the fourth-power distances of each
/// endpoint space, minus `4 M2_i M2_j`.
pub fn s1_estimate(d: &MmSpaceDataset, graph: &CostGraph) -> Result<f64> {
    d.require_centered()?;
    let data = &d.data;
    if graph.k() != data.k() {
        return Err(MmotError::InvalidArgument(format!(
            "graph has k={} but dataset has k={}",
            graph.k(),
            data.k()
        )));
    }
    let n = data.n();
    // Per-marginal mean fourth-power pair distance and second moment,
    // computed once and shared across edges.
    let mut fourth = Vec::with_capacity(data.k());
    for i in 0..data.k() {
        let m = data.marginal(i);
        let mut total = 0.0;
        for s in 0..n {
            let xs = m.row(s);
            for t in 0..n {
                let xt = m.row(t);
                let sq: f64 = xs
                    .iter()
                    .zip(xt.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += sq * sq;
            }
        }
        fourth.push(total / (n * n) as f64);
    }
    let m2 = second_moments(data);
    let mut s1 = 0.0;
    for &(i, j) in graph.edges() {
        s1 += fourth[i] + fourth[j] - 4.0 * m2[i] * m2[j];
    }
    Ok(s1)
}

/// One alignment matrix `A_ij` (shape `d_i x d_j`) per cost-graph edge.
#[derive(Debug, Clone)]
pub struct AlignmentMatrices {
    edges: Vec<(usize, usize)>,
    mats: Vec<Mat>,
}

impl AlignmentMatrices {
    /// All-zero matrices shaped for the dataset and graph.
    pub fn zeros(data: &MarginalDataset, graph: &CostGraph) -> Self {
        let dims = data.dims();
        AlignmentMatrices {
            edges: graph.edges().to_vec(),
            mats: graph
                .edges()
                .iter()
                .map(|&(i, j)| Mat::zeros(dims[i], dims[j]))
                .collect(),
        }
    }

    /// Builds from explicit per-edge matrices.
    pub fn from_mats(
        data: &MarginalDataset,
        graph: &CostGraph,
        mats: Vec<Mat>,
    ) -> Result<Self> {
        if mats.len() != graph.edges().len() {
            return Err(MmotError::InvalidArgument(format!(
                "{} alignment matrices for {} edges",
                mats.len(),
                graph.edges().len()
            )));
        }
        let dims = data.dims();
        for (m, &(i, j)) in mats.iter().zip(graph.edges()) {
            if m.rows() != dims[i] || m.cols() != dims[j] {
                return Err(MmotError::InvalidArgument(format!(
                    "alignment matrix for edge ({i},{j}) has shape {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    dims[i],
                    dims[j]
                )));
            }
            if !m.all_finite() {
                return Err(MmotError::InvalidArgument(format!(
                    "alignment matrix for edge ({i},{j}) contains non-finite entries"
                )));
            }
        }
        Ok(AlignmentMatrices {
            edges: graph.edges().to_vec(),
            mats,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    /// Per-edge Frobenius norms.
    pub fn frobenius_norms(&self) -> Vec<f64> {
        self.mats
            .iter()
            .map(|m| m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Sum of squared Frobenius norms across edges.
    pub fn sq_norm(&self) -> f64 {
        self.mats
            .iter()
            .map(|m| m.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Projects each matrix onto the Frobenius ball of the paired radius.
    pub fn project(&mut self, radii: &[f64]) -> Result<()> {
        if radii.len() != self.mats.len() {
            return Err(MmotError::InvalidArgument(format!(
                "{} projection radii for {} edges",
                radii.len(),
                self.mats.len()
            )));
        }
        for (m, &r) in self.mats.iter_mut().zip(radii.iter()) {
            let norm = m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > r {
                let f = r / norm;
                m.map_inplace(|v| v * f);
            }
        }
        Ok(())
    }
}

/// Projection radii from empirical second moments:
/// `sqrt(M2_i M2_j) / 2` per edge. The per-round minimizer always lies
/// inside these balls.
pub fn projection_radii(data: &MarginalDataset, graph: &CostGraph) -> Vec<f64> {
    let m2 = second_moments(data);
    graph
        .edges()
        .iter()
        .map(|&(i, j)| (m2[i] * m2[j]).sqrt() / 2.0)
        .collect()
}

/// The pairwise alignment cost at two points:
/// `-4 ||x||^2 ||y||^2 - 32 x' A y`.
pub fn alignment_pair_cost(a: &Mat, x: &[f64], y: &[f64]) -> Result<f64> {
    if a.rows() != x.len() || a.cols() != y.len() {
        return Err(MmotError::InvalidArgument(format!(
            "alignment matrix is {}x{} but points have dims {} and {}",
            a.rows(),
            a.cols(),
            x.len(),
            y.len()
        )));
    }
    let qx: f64 = x.iter().map(|v| v * v).sum();
    let qy: f64 = y.iter().map(|v| v * v).sum();
    let mut bilinear = 0.0;
    for (p, &xv) in x.iter().enumerate() {
        let row = a.row(p);
        let dot: f64 = row.iter().zip(y.iter()).map(|(w, v)| w * v).sum();
        bilinear += xv * dot;
    }
    Ok(-4.0 * qx * qy - 32.0 * bilinear)
}

/// Materializes the alignment cost on the dataset as precomputed per-edge
/// matrices with unit normalization, pluggable into any solver.
pub fn cost_from_a(a: &AlignmentMatrices, data: &MarginalDataset) -> Result<PairwiseCost> {
    let dims = data.dims();
    let norms: Vec<Vec<f64>> = (0..data.k()).map(|i| squared_norms(data.marginal(i))).collect();
    let mut mats = Vec::with_capacity(a.edges.len());
    for (am, &(i, j)) in a.mats.iter().zip(a.edges.iter()) {
        if am.rows() != dims[i] || am.cols() != dims[j] {
            return Err(MmotError::InvalidArgument(format!(
                "alignment matrix for edge ({i},{j}) has shape {}x{}, expected {}x{}",
                am.rows(),
                am.cols(),
                dims[i],
                dims[j]
            )));
        }
        // C = -4 q_i q_j' - 32 M_i A M_j'  with M_i the n x d_i sample block.
        let t = data.marginal(i).matmul(am);
        let bilinear = t.matmul_nt(data.marginal(j));
        let qi = &norms[i];
        let qj = &norms[j];
        let n = data.n();
        let mut c = Mat::zeros(n, n);
        for r in 0..n {
            let row = c.row_mut(r);
            for (s, slot) in row.iter_mut().enumerate() {
                *slot = -4.0 * qi[r] * qj[s] - 32.0 * bilinear[(r, s)];
            }
        }
        mats.push(c);
    }
    Ok(PairwiseCost {
        kind: CostKind::Precomputed(mats),
        normalization: 1.0,
    })
}

fn check_pairwise_feasible(p: &Mat, n: usize) -> Result<()> {
    if p.rows() != n || p.cols() != n {
        return Err(MmotError::InvalidArgument(format!(
            "pairwise marginal has shape {}x{}, expected {n}x{n}",
            p.rows(),
            p.cols()
        )));
    }
    let want = 1.0 / n as f64;
    for r in 0..n {
        let s: f64 = p.row(r).iter().sum();
        if (s - want).abs() > MARGINAL_FEASIBILITY_TOL {
            return Err(MmotError::InvalidArgument(format!(
                "pairwise marginal row {r} sums to {s:.9}, expected {want:.9}: plan infeasible"
            )));
        }
    }
    for c in 0..n {
        let mut s = 0.0;
        for r in 0..n {
            s += p[(r, c)];
        }
        if (s - want).abs() > MARGINAL_FEASIBILITY_TOL {
            return Err(MmotError::InvalidArgument(format!(
                "pairwise marginal column {c} sums to {s:.9}, expected {want:.9}: plan infeasible"
            )));
        }
    }
    Ok(())
}

/// Gradient of the alignment objective at fixed plan marginals:
/// `64 A_ij - 32 X_i P_ij X_j'` per edge. Marginals must be uniform-feasible
/// within [`MARGINAL_FEASIBILITY_TOL`].
pub fn phi_gradient(
    a: &AlignmentMatrices,
    marginals: &[Mat],
    data: &MarginalDataset,
) -> Result<Vec<Mat>> {
    if marginals.len() != a.edges.len() {
        return Err(MmotError::InvalidArgument(format!(
            "{} pairwise marginals for {} edges",
            marginals.len(),
            a.edges.len()
        )));
    }
    let n = data.n();
    let mut grads = Vec::with_capacity(a.edges.len());
    for ((am, &(i, j)), p) in a.mats.iter().zip(a.edges.iter()).zip(marginals.iter()) {
        check_pairwise_feasible(p, n)?;
        // X_i P X_j' in sample-block form: M_i' (P M_j), with M_i `n x d_i`.
        let pm = p.matmul(data.marginal(j));
        let cross = data.marginal(i).matmul_tn(&pm);
        if cross.rows() != am.rows() || cross.cols() != am.cols() {
            return Err(MmotError::InvalidArgument(format!(
                "marginal for edge ({i},{j}) is inconsistent with the alignment shape"
            )));
        }
        grads.push(Mat::from_fn(am.rows(), am.cols(), |r, c| {
            64.0 * am[(r, c)] - 32.0 * cross[(r, c)]
        }));
    }
    Ok(grads)
}

/// The per-round minimizers `A_ij = (1/2) X_i P_ij X_j'` in closed form.
pub fn closed_form_a(
    marginals: &[Mat],
    data: &MarginalDataset,
    graph: &CostGraph,
) -> Result<AlignmentMatrices> {
    let zero = AlignmentMatrices::zeros(data, graph);
    let grads = phi_gradient(&zero, marginals, data)?;
    let mats = grads
        .into_iter()
        .map(|g| {
            // At A = 0 the gradient is -32 X P X', so the minimizer is
            // -(1/64) of it.
            let mut m = g;
            m.map_inplace(|v| v * (-1.0 / 64.0));
            m
        })
        .collect();
    AlignmentMatrices::from_mats(data, graph, mats)
}

/// Full alignment objective at an explicit dense plan:
/// `32 sum ||A||_F^2 + <c_A, plan> + epsilon * KL(plan || uniform product)`.
pub fn emgw_objective_at(
    a: &AlignmentMatrices,
    plan: &DensePlan,
    data: &MarginalDataset,
    epsilon: f64,
    graph: &CostGraph,
) -> Result<f64> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(MmotError::InvalidArgument(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    let n = data.n();
    let k = data.k();
    if plan.dims != vec![n; k] {
        return Err(MmotError::InvalidArgument(
            "plan dimensions do not match the dataset".into(),
        ));
    }
    let want = 1.0 / n as f64;
    for i in 0..k {
        let m = plan.one_way_marginal(i);
        for (aidx, &v) in m.iter().enumerate() {
            if (v - want).abs() > MARGINAL_FEASIBILITY_TOL {
                return Err(MmotError::InvalidArgument(format!(
                    "plan marginal {i} has mass {v:.9} at atom {aidx}, expected {want:.9}: \
                     plan infeasible"
                )));
            }
        }
    }
    let cost = cost_from_a(a, data)?;
    let costs = pairwise_cost_matrices(data, graph, &cost)?;
    let mut transport = 0.0;
    let mut neg_entropy = 0.0;
    let mut idx = vec![0usize; k];
    for &p in &plan.values {
        transport += p * costs.tuple_cost_raw(&idx);
        if p > 0.0 {
            neg_entropy += p * p.ln();
        }
        increment_index(&mut idx, &plan.dims);
    }
    let kl = neg_entropy + k as f64 * (n as f64).ln();
    Ok(32.0 * a.sq_norm() + transport + epsilon * kl)
}

/// Where the alternating solver gets its inner plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanSource {
    /// Block-ascent solve each round (exact inner optimum).
    Sinkhorn,
    /// Neural dual training, warm-started across rounds.
    Nemot,
}

/// Alternating-solver configuration.
#[derive(Debug, Clone)]
pub struct EmgwConfig {
    pub epsilon: f64,
    pub graph: CostGraph,
    /// Maximum alignment steps (outer rounds).
    pub outer_iters: usize,
    /// Alignment step size; [`EXACT_A_STEP`] makes each round's step exact.
    pub a_step_lr: f64,
    /// Stop when the alignment step's joint Frobenius norm falls below this.
    pub step_tol: f64,
    pub plan_source: PlanSource,
    /// Inner transport convergence tolerance (Sinkhorn source).
    pub inner_tol: f64,
    /// Inner transport iteration cap (Sinkhorn source).
    pub inner_max_iter: usize,
    /// Neural training configuration (Nemot source), reused every round on
    /// the persistent networks.
    pub inner_train: TrainConfig,
    /// Budget on `n^k` for dense plans and enumerated objectives.
    pub budget_entries: f64,
}

impl EmgwConfig {
    /// Defaults for the given regularization and graph.
    pub fn new(epsilon: f64, graph: CostGraph) -> Self {
        EmgwConfig {
            epsilon,
            graph,
            outer_iters: 20,
            a_step_lr: EXACT_A_STEP,
            step_tol: 1e-9,
            plan_source: PlanSource::Sinkhorn,
            inner_tol: 1e-9,
            inner_max_iter: 100_000,
            inner_train: TrainConfig::default(),
            budget_entries: DEFAULT_DENSE_BUDGET_ENTRIES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(MmotError::InvalidArgument(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.outer_iters == 0 {
            return Err(MmotError::InvalidArgument(
                "need at least one outer round".into(),
            ));
        }
        if self.a_step_lr <= 0.0 || !self.a_step_lr.is_finite() {
            return Err(MmotError::InvalidArgument(format!(
                "alignment step size must be positive and finite, got {}",
                self.a_step_lr
            )));
        }
        if self.step_tol.is_nan() || self.step_tol < 0.0 {
            return Err(MmotError::InvalidArgument(
                "step tolerance must be nonnegative".into(),
            ));
        }
        if self.inner_tol <= 0.0 || self.inner_tol.is_nan() || self.inner_max_iter == 0 {
            return Err(MmotError::InvalidArgument(
                "inner solver needs a positive tolerance and iteration cap".into(),
            ));
        }
        if self.plan_source == PlanSource::Nemot {
            self.inner_train.validate()?;
        }
        Ok(())
    }
}

/// One outer round's record.
#[derive(Debug, Clone)]
pub struct EmgwRound {
    /// `32 sum ||A||^2` at the solved alignment.
    pub penalty: f64,
    /// Inner transport value at that alignment.
    pub inner_value: f64,
    /// Frobenius norm of the alignment step taken after this solve
    /// (0 for the final round).
    pub step_norm: f64,
}

impl EmgwRound {
    /// Alternation objective for the round.
    pub fn objective(&self) -> f64 {
        self.penalty + self.inner_value
    }
}

/// Result of the alternating solver.
#[derive(Debug, Clone)]
pub struct EmgwEstimate {
    /// `s1 + penalty + inner_value`.
    pub total: f64,
    pub s1: f64,
    /// `32 sum ||A||^2` at the final alignment.
    pub penalty: f64,
    /// Inner transport value at the final alignment.
    pub inner_value: f64,
    pub rounds: Vec<EmgwRound>,
    pub alignment: AlignmentMatrices,
    /// Final per-edge Frobenius norms.
    pub a_norms: Vec<f64>,
}

struct InnerSolver<'a> {
    data: &'a MarginalDataset,
    graph: CostGraph,
    epsilon: f64,
    config: &'a EmgwConfig,
    model: Option<NemotModel>,
}

struct InnerSolve {
    value: f64,
    marginals: Vec<Mat>,
}

impl<'a> InnerSolver<'a> {
    fn solve(&mut self, cost: &PairwiseCost, round: usize) -> Result<InnerSolve> {
        match self.config.plan_source {
            PlanSource::Sinkhorn => self.solve_sinkhorn(cost),
            PlanSource::Nemot => self.solve_nemot(cost),
        }
        .map_err(|e| match e {
            MmotError::Training {
                epoch,
                batch,
                message,
            } => MmotError::Training {
                epoch,
                batch,
                message: format!("outer round {round}: {message}"),
            },
            MmotError::Numerical(m) => {
                MmotError::Numerical(format!("outer round {round}: {m}"))
            }
            other => other,
        })
    }

    fn marginals_from_plan(&self, plan: &PlanRepresentation) -> Result<Vec<Mat>> {
        let mut out = Vec::with_capacity(self.graph.edges().len());
        for &(u, v) in self.graph.edges() {
            let m = match plan {
                PlanRepresentation::Dense(p) => p.pairwise_marginal(u, v)?,
                PlanRepresentation::FactoredCircle(mats) => mats.pairwise_marginal(u, v)?,
            };
            out.push(m);
        }
        Ok(out)
    }

    fn solve_sinkhorn(&mut self, cost: &PairwiseCost) -> Result<InnerSolve> {
        let (pots, report) = if self.graph.is_circle_shaped() {
            sinkhorn_circle(
                self.data,
                cost,
                self.epsilon,
                self.config.inner_tol,
                self.config.inner_max_iter,
            )?
        } else {
            let options = SinkhornOptions {
                budget_entries: self.config.budget_entries,
                ..SinkhornOptions::default()
            };
            sinkhorn_full_with_options(
                self.data,
                &self.graph,
                cost,
                self.epsilon,
                self.config.inner_tol,
                self.config.inner_max_iter,
                &options,
            )?
        };
        let plan = plan_from_potentials_with_budget(
            &pots,
            self.data,
            &self.graph,
            cost,
            self.config.budget_entries,
        )?;
        Ok(InnerSolve {
            value: report.value,
            marginals: self.marginals_from_plan(&plan)?,
        })
    }

    fn solve_nemot(&mut self, cost: &PairwiseCost) -> Result<InnerSolve> {
        let model = match self.model.as_mut() {
            Some(m) => {
                // Warm start: keep the trained networks, swap in the new
                // alignment cost.
                m.cost = cost.clone();
                m
            }
            None => {
                let fresh = NemotModel::new(
                    self.data.dims(),
                    self.epsilon,
                    self.graph.clone(),
                    cost.clone(),
                    self.config.inner_train.clone(),
                )?;
                self.model = Some(fresh);
                self.model.as_mut().unwrap()
            }
        };
        let est = train_nemot(model, self.data)?;
        let marginals = if self.graph.is_circle_shaped() {
            let mats = build_l_matrices(model, self.data, self.epsilon)?;
            let mut out = Vec::with_capacity(self.graph.edges().len());
            for &(u, v) in self.graph.edges() {
                out.push(mats.pairwise_marginal(u, v)?);
            }
            out
        } else {
            let plan = neural_plan_discrete(model, self.data, self.config.budget_entries)?;
            let mut out = Vec::with_capacity(self.graph.edges().len());
            for &(u, v) in self.graph.edges() {
                out.push(plan.pairwise_marginal(u, v)?);
            }
            out
        };
        Ok(InnerSolve {
            value: est.value,
            marginals,
        })
    }
}

/// Alternating solver: from `A = 0`, repeat inner transport solves and
/// projected alignment steps until the step norm drops below tolerance or
/// the round budget is spent. Returns the decomposition total
/// `s1 + 32 sum ||A||^2 + inner value` with a per-round trace.
pub fn nemgw_alternating(d: &MmSpaceDataset, config: &EmgwConfig) -> Result<EmgwEstimate> {
    d.require_centered()?;
    config.validate()?;
    let data = &d.data;
    if config.graph.k() != data.k() {
        return Err(MmotError::InvalidArgument(format!(
            "graph has k={} but dataset has k={}",
            config.graph.k(),
            data.k()
        )));
    }
    // Canonicalize circle-shaped graphs so every consumer (including the
    // circle solver, which implies its own edge order) agrees on the edge
    // list ordering of precomputed matrices.
    let graph = if config.graph.is_circle_shaped() {
        CostGraph::build(GraphKind::Circle, data.k())?
    } else {
        config.graph.clone()
    };
    let s1 = s1_estimate(d, &graph)?;
    let radii = projection_radii(data, &graph);
    let mut a = AlignmentMatrices::zeros(data, &graph);
    let mut solver = InnerSolver {
        data,
        graph: graph.clone(),
        epsilon: config.epsilon,
        config,
        model: None,
    };
    let mut rounds: Vec<EmgwRound> = Vec::new();
    let mut last: Option<InnerSolve> = None;
    for round in 0..=config.outer_iters {
        let cost = cost_from_a(&a, data)?;
        let solve = solver.solve(&cost, round)?;
        rounds.push(EmgwRound {
            penalty: 32.0 * a.sq_norm(),
            inner_value: solve.value,
            step_norm: 0.0,
        });
        if round == config.outer_iters {
            last = Some(solve);
            break;
        }
        let grads = phi_gradient(&a, &solve.marginals, data)?;
        let mut next_mats = Vec::with_capacity(grads.len());
        for (m, g) in a.mats.iter().zip(grads.iter()) {
            next_mats.push(Mat::from_fn(m.rows(), m.cols(), |r, c| {
                m[(r, c)] - config.a_step_lr * g[(r, c)]
            }));
        }
        let mut next = AlignmentMatrices {
            edges: a.edges.clone(),
            mats: next_mats,
        };
        next.project(&radii)?;
        let step_sq: f64 = next
            .mats
            .iter()
            .zip(a.mats.iter())
            .map(|(nm, om)| {
                nm.as_slice()
                    .iter()
                    .zip(om.as_slice().iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum();
        let step_norm = step_sq.sqrt();
        rounds.last_mut().unwrap().step_norm = step_norm;
        if step_norm < config.step_tol {
            last = Some(solve);
            break;
        }
        a = next;
    }
    // The final round always ends with a solve at the final alignment.
    let final_solve = match last {
        Some(s) => s,
        None => unreachable!("loop always sets the final solve"),
    };
    let penalty = 32.0 * a.sq_norm();
    Ok(EmgwEstimate {
        total: s1 + penalty + final_solve.value,
        s1,
        penalty,
        inner_value: final_solve.value,
        rounds,
        alignment: a.clone(),
        a_norms: a.frobenius_norms(),
    })
}

// ---------------------------------------------------------------------------
// Permutation-restricted distortion baseline
// ---------------------------------------------------------------------------

fn squared_distance_matrix(m: &Mat) -> Mat {
    let n = m.rows();
    Mat::from_fn(n, n, |a, b| {
        m.row(a)
            .iter()
            .zip(m.row(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    fn heap(k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(cur.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, cur, out);
            if k.is_multiple_of(2) {
                cur.swap(i, k - 1);
            } else {
                cur.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut cur, &mut out);
    out.sort();
    out
}

/// Exhaustive distortion minimum over diagonal permutation couplings: the
/// first marginal keeps identity order and every other marginal ranges over
/// all `n!` permutations. An upper bound on the unregularized distortion
/// minimum over all couplings; exact when some permutation coupling is
/// optimal. Refuses when `(n!)^(k-1)` exceeds `budget`.
pub fn restricted_mgw(d: &MmSpaceDataset, graph: &CostGraph, budget: f64) -> Result<f64> {
    d.require_centered()?;
    let data = &d.data;
    if graph.k() != data.k() {
        return Err(MmotError::InvalidArgument(format!(
            "graph has k={} but dataset has k={}",
            graph.k(),
            data.k()
        )));
    }
    let n = data.n();
    let k = data.k();
    let mut fact = 1.0f64;
    for i in 2..=n {
        fact *= i as f64;
    }
    let combos = fact.powi(k as i32 - 1);
    if combos > budget {
        return Err(MmotError::ResourceLimit(format!(
            "restricted distortion search needs (n!)^(k-1) = ({n}!)^{} = {combos:.3e} \
             permutation tuples, above the budget of {budget:.3e}",
            k - 1
        )));
    }
    let dists: Vec<Mat> = (0..k).map(|i| squared_distance_matrix(data.marginal(i))).collect();
    let perms = permutations(n);
    let id: Vec<usize> = (0..n).collect();
    // Odometer over one permutation choice per non-first marginal.
    let mut choice = vec![0usize; k - 1];
    let dims = vec![perms.len(); k - 1];
    let mut best = f64::INFINITY;
    loop {
        let mut total = 0.0;
        for &(u, v) in graph.edges() {
            let su = if u == 0 { &id } else { &perms[choice[u - 1]] };
            let sv = if v == 0 { &id } else { &perms[choice[v - 1]] };
            let du = &dists[u];
            let dv = &dists[v];
            let mut edge = 0.0;
            for s in 0..n {
                for t in 0..n {
                    let diff = du[(su[s], su[t])] - dv[(sv[s], sv[t])];
                    edge += diff * diff;
                }
            }
            total += edge / (n * n) as f64;
        }
        if total < best {
            best = total;
        }
        if !increment_index(&mut choice, &dims) {
            break;
        }
    }
    Ok(best)
}
