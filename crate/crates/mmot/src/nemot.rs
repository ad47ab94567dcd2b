//! Neural estimation of entropic multimarginal transport.
//!
//! One ReLU network per marginal parameterizes the dual potentials. The
//! mini-batch objective on `b` aligned tuples is
//!
//! ```text
//! (1/b) sum_r sum_j f_j(x_{j,r}) - (eps/b) sum_r exp((sum_j f_j(x_{j,r}) - c_r)/eps) + eps
//! ```
//!
//! maximized by Adam with global gradient clipping and a stepped
//! learning-rate decay. The exponential term has two interchangeable
//! estimators:
//!
//! * **aligned** (default): the mean over the `b` sampled tuples, as above;
//! * **u-statistic over circle graphs**: the mean over all `b^k` cross
//!   tuples of the batch, which for circle costs collapses to the trace of
//!   the cyclic scaling-matrix product ([`CircleScalingMatrices`]) and costs
//!   only matrix products. It is the estimator of choice for small `eps`,
//!   where the aligned mean is noisy.
//!
//! The trained networks induce a plan density `exp((sum_j f_j - c)/eps)`
//! with respect to the product of marginals; a discrete mode materializes
//! and normalizes it over all `n^k` tuples of a small dataset.

use std::path::Path;
use std::time::Instant;

pub use crate::circle::CircleScalingMatrices;
use crate::error::{MmotError, Result};
use crate::model::{
    cost_tuple, pairwise_cost_matrices, CostGraph, CostKind, CostMatrixSet, MarginalDataset,
    PairwiseCost,
};
use crate::neural::{clip_global_norm, AdamState, Estimator, Mlp, MlpGrads, TrainConfig};
use crate::numerics::{logsumexp, Mat};
use crate::rng::derive_rng;
use rand::Rng;
use crate::sinkhorn::{
    dense_plan_from_potentials, tuple_count, DensePlan, DiscretePotentials,
};

/// Exponents are capped here inside training objectives; crossing the cap is
/// counted and reported, not fatal.
pub const EXPONENT_SOFT_CAP: f64 = 80.0;

/// Exponents beyond this are unrecoverable divergence: `exp` would overflow,
/// so evaluation paths fail with a numerical error instead.
pub const EXPONENT_HARD_CAP: f64 = 700.0;

/// Default cap on `n^k` for brute-force tuple enumeration (u-statistic
/// oracle and discrete plan mode).
pub const DEFAULT_ENUMERATION_BUDGET: f64 = 1e7;

/// The neural dual model: one network per marginal plus the transport
/// problem it is trained against.
#[derive(Debug, Clone)]
pub struct NemotModel {
    pub nets: Vec<Mlp>,
    pub epsilon: f64,
    pub graph: CostGraph,
    pub cost: PairwiseCost,
    pub config: TrainConfig,
}

impl NemotModel {
    /// Fresh model with seed-derived He initialization; network `i` gets
    /// input width `dims[i]` and the width rule's hidden sizes.
    pub fn new(
        dims: &[usize],
        epsilon: f64,
        graph: CostGraph,
        cost: PairwiseCost,
        config: TrainConfig,
    ) -> Result<Self> {
        if epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(MmotError::InvalidArgument(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if dims.len() != graph.k() {
            return Err(MmotError::InvalidArgument(format!(
                "{} marginal dims for a graph with k={}",
                dims.len(),
                graph.k()
            )));
        }
        config.validate()?;
        let nets = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut rng = derive_rng(config.seed, "nemot-init", i as u64);
                Mlp::init(&TrainConfig::layer_sizes(d), &mut rng)
            })
            .collect();
        Ok(NemotModel {
            nets,
            epsilon,
            graph,
            cost,
            config,
        })
    }

    pub fn k(&self) -> usize {
        self.nets.len()
    }

    fn check_dims(&self, data: &MarginalDataset) -> Result<()> {
        if data.k() != self.k() {
            return Err(MmotError::InvalidArgument(format!(
                "model has k={} networks but dataset has k={} marginals",
                self.k(),
                data.k()
            )));
        }
        for (i, net) in self.nets.iter().enumerate() {
            if net.input_dim() != data.dims()[i] {
                return Err(MmotError::InvalidArgument(format!(
                    "network {i} expects input width {} but marginal {i} has d={}",
                    net.input_dim(),
                    data.dims()[i]
                )));
            }
        }
        Ok(())
    }

    /// Network outputs over every sample of every marginal, evaluated in
    /// fixed-size chunks (row results do not depend on the chunking).
    pub fn potentials_on(&self, data: &MarginalDataset) -> Result<DiscretePotentials> {
        self.check_dims(data)?;
        let chunk = self.config.eval_chunk.max(1);
        let mut phis = Vec::with_capacity(self.k());
        for (i, net) in self.nets.iter().enumerate() {
            let m = data.marginal(i);
            let mut out = Vec::with_capacity(m.rows());
            let mut start = 0;
            while start < m.rows() {
                let stop = (start + chunk).min(m.rows());
                let block = Mat::from_fn(stop - start, m.cols(), |r, c| m[(start + r, c)]);
                let (vals, _) = net.forward(&block)?;
                out.extend_from_slice(&vals);
                start = stop;
            }
            phis.push(out);
        }
        Ok(DiscretePotentials {
            phis,
            epsilon: self.epsilon,
        })
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    /// Mean mini-batch objective across the epoch.
    pub mean_objective: f64,
    /// Median mini-batch objective across the epoch.
    pub median_objective: f64,
    /// Wall-clock seconds for the epoch.
    pub secs: f64,
    /// Part of the epoch spent evaluating objectives (forward passes and
    /// exponential terms).
    pub eval_secs: f64,
    /// Part of the epoch spent on gradients (backward passes, clipping, and
    /// optimizer updates).
    pub backprop_secs: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct NemotEstimate {
    /// Objective evaluated on the full dataset after the last epoch, using
    /// the same exponential-term estimator that was trained.
    pub value: f64,
    pub epochs: Vec<EpochStats>,
    /// Number of exponent soft-cap events seen during training.
    pub overflow_events: u64,
    /// Snapshot of the configuration that produced this estimate.
    pub config: TrainConfig,
}

/// Objective and exact gradients of one mini-batch.
#[derive(Debug)]
pub struct BatchObjective {
    pub value: f64,
    /// One gradient set per network, for gradient ASCENT (they point uphill).
    pub grads: Vec<MlpGrads>,
    /// Exponent soft-cap events in this batch.
    pub overflow_events: u64,
}

fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), m.cols(), |r, c| m[(rows[r], c)])
}

/// Cost of the aligned tuple made of row `row` of every marginal.
fn aligned_tuple_cost(
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
    row: usize,
) -> Result<f64> {
    if let CostKind::Precomputed(mats) = &cost.kind {
        let edges = graph.edges();
        if mats.len() != edges.len() {
            return Err(MmotError::InvalidArgument(format!(
                "{} precomputed matrices for {} edges",
                mats.len(),
                edges.len()
            )));
        }
        let mut total = 0.0;
        for m in mats {
            total += m[(row, row)];
        }
        return Ok(cost.normalization * total);
    }
    let points: Vec<&[f64]> = (0..data.k()).map(|i| data.point(i, row)).collect();
    cost_tuple(&points, graph, cost)
}

/// Pairwise cost matrices restricted to the given batch rows.
fn batch_cost_matrices(
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
    rows: &[usize],
) -> Result<CostMatrixSet> {
    if let CostKind::Precomputed(_) = &cost.kind {
        let full = pairwise_cost_matrices(data, graph, cost)?;
        return Ok(full.gather(rows));
    }
    let sub = MarginalDataset::new(
        (0..data.k())
            .map(|i| gather_rows(data.marginal(i), rows))
            .collect(),
    )?;
    pairwise_cost_matrices(&sub, graph, cost)
}

struct ForwardPass {
    outputs: Vec<Vec<f64>>,
    caches: Vec<crate::neural::ForwardCache>,
}

fn forward_batch(model: &NemotModel, data: &MarginalDataset, rows: &[usize]) -> Result<ForwardPass> {
    let mut outputs = Vec::with_capacity(model.k());
    let mut caches = Vec::with_capacity(model.k());
    for (i, net) in model.nets.iter().enumerate() {
        let x = gather_rows(data.marginal(i), rows);
        let (out, cache) = net.forward(&x)?;
        outputs.push(out);
        caches.push(cache);
    }
    Ok(ForwardPass { outputs, caches })
}

/// Capped exponent bookkeeping shared by the training objectives.
fn guarded_exp(z: f64, overflows: &mut u64) -> Result<f64> {
    if !z.is_finite() || z > EXPONENT_HARD_CAP {
        return Err(MmotError::Numerical(format!(
            "dual exponent {z:.6e} exceeds the overflow guard"
        )));
    }
    if z > EXPONENT_SOFT_CAP {
        *overflows += 1;
        Ok(EXPONENT_SOFT_CAP.exp())
    } else {
        Ok(z.exp())
    }
}

/// Mini-batch objective with exact ascent gradients, aligned-tuple
/// estimator. `rows` are the shared sample indices of the batch.
pub fn nemot_batch_objective(
    model: &NemotModel,
    data: &MarginalDataset,
    rows: &[usize],
) -> Result<BatchObjective> {
    model.check_dims(data)?;
    if rows.is_empty() {
        return Err(MmotError::InvalidArgument("empty batch".into()));
    }
    let b = rows.len();
    let eps = model.epsilon;
    let pass = forward_batch(model, data, rows)?;
    let mut overflow_events = 0u64;
    let mut value = 0.0;
    // Output gradient is shared across networks: 1/b from the mean term,
    // minus exp(z_r)/b from the exponential term.
    let mut out_grads = vec![0.0; b];
    for (r, &row) in rows.iter().enumerate() {
        let f_sum: f64 = pass.outputs.iter().map(|o| o[r]).sum();
        let c = aligned_tuple_cost(data, model.graph(), &model.cost, row)?;
        let z = (f_sum - c) / eps;
        let e = guarded_exp(z, &mut overflow_events)?;
        value += f_sum / b as f64 - eps * e / b as f64;
        out_grads[r] = (1.0 - e) / b as f64;
    }
    value += eps;
    let grads = model
        .nets
        .iter()
        .zip(pass.caches.iter())
        .map(|(net, cache)| net.backward(cache, &out_grads))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchObjective {
        value,
        grads,
        overflow_events,
    })
}

/// Mini-batch objective with exact ascent gradients, u-statistic estimator
/// over all `b^k` cross tuples of the batch via the circle trace formula.
pub fn nemot_batch_objective_ustat(
    model: &NemotModel,
    data: &MarginalDataset,
    rows: &[usize],
) -> Result<BatchObjective> {
    model.check_dims(data)?;
    if rows.is_empty() {
        return Err(MmotError::InvalidArgument("empty batch".into()));
    }
    if !model.graph().is_circle_shaped() {
        return Err(MmotError::InvalidArgument(
            "the u-statistic trace estimator requires a circle-shaped cost graph".into(),
        ));
    }
    let b = rows.len();
    let eps = model.epsilon;
    let k = model.k();
    let pass = forward_batch(model, data, rows)?;
    let costs = batch_cost_matrices(data, model.graph(), &model.cost, rows)?;
    let mats = CircleScalingMatrices::build(
        &pass.outputs,
        &costs,
        model.graph(),
        model.cost.normalization,
        eps,
    )?;
    let ln_b = (b as f64).ln();
    let mut overflow_events = 0u64;
    let log_z = mats.log_trace() - k as f64 * ln_b;
    let z_mean = guarded_exp(log_z, &mut overflow_events)?;
    let mean_sum: f64 = pass
        .outputs
        .iter()
        .map(|o| o.iter().sum::<f64>() / b as f64)
        .sum();
    let value = mean_sum - eps * z_mean + eps;
    let mut grads = Vec::with_capacity(k);
    for (i, (net, cache)) in model.nets.iter().zip(pass.caches.iter()).enumerate() {
        // d(exp term)/df_i(r) is the one-way marginal mass of the batch plan
        // at (i, r): the diagonal of the rotated scaling-matrix product.
        let diag = mats.rotated_log_diag(i);
        let mut out_grads = Vec::with_capacity(b);
        for &d in diag.iter() {
            let mass = guarded_exp(d - k as f64 * ln_b, &mut overflow_events)?;
            out_grads.push(1.0 / b as f64 - mass);
        }
        grads.push(net.backward(cache, &out_grads)?);
    }
    Ok(BatchObjective {
        value,
        grads,
        overflow_events,
    })
}

impl NemotModel {
    fn graph(&self) -> &CostGraph {
        &self.graph
    }
}

/// Full-dataset objective with the aligned estimator, streamed in fixed
/// chunks; the result is independent of the chunk size.
pub fn evaluate_nemot(model: &NemotModel, data: &MarginalDataset) -> Result<f64> {
    model.check_dims(data)?;
    let n = data.n();
    let eps = model.epsilon;
    let chunk = model.config.eval_chunk.max(1);
    let mut f_sum_total = 0.0;
    let mut exp_total = 0.0;
    let mut overflow_events = 0u64;
    let mut start = 0;
    while start < n {
        let stop = (start + chunk).min(n);
        let rows: Vec<usize> = (start..stop).collect();
        let pass = forward_batch(model, data, &rows)?;
        for (r, &row) in rows.iter().enumerate() {
            let f_sum: f64 = pass.outputs.iter().map(|o| o[r]).sum();
            let c = aligned_tuple_cost(data, model.graph(), &model.cost, row)?;
            let z = (f_sum - c) / eps;
            exp_total += guarded_exp(z, &mut overflow_events)?;
            f_sum_total += f_sum;
        }
        start = stop;
    }
    Ok((f_sum_total - eps * exp_total) / n as f64 + eps)
}

/// Full-dataset objective with the u-statistic estimator: the exponential
/// term is the normalized trace of the scaling-matrix product over the whole
/// dataset.
pub fn evaluate_nemot_ustat(model: &NemotModel, data: &MarginalDataset) -> Result<f64> {
    model.check_dims(data)?;
    if !model.graph().is_circle_shaped() {
        return Err(MmotError::InvalidArgument(
            "the u-statistic trace estimator requires a circle-shaped cost graph".into(),
        ));
    }
    let pots = model.potentials_on(data)?;
    let costs = pairwise_cost_matrices(data, model.graph(), &model.cost)?;
    let mats = CircleScalingMatrices::build(
        &pots.phis,
        &costs,
        model.graph(),
        model.cost.normalization,
        model.epsilon,
    )?;
    let mut overflow_events = 0u64;
    let z_mean = guarded_exp(mats.log_z(), &mut overflow_events)?;
    let mean_sum: f64 = pots
        .phis
        .iter()
        .map(|p| p.iter().sum::<f64>() / p.len() as f64)
        .sum();
    Ok(mean_sum - model.epsilon * z_mean + model.epsilon)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Trains the model in place by mini-batch gradient ascent and returns the
/// full-dataset estimate with per-epoch statistics.
///
/// Each epoch shuffles the row indices with a seed derived from
/// `(config.seed, epoch)` and walks them in batches (the last batch may be
/// short; the batch size is clamped to `n`). All `k` networks are updated
/// simultaneously per batch under a single global clip. Any non-finite
/// objective or hard exponent overflow aborts with a training error naming
/// the epoch and batch.
pub fn train_nemot(model: &mut NemotModel, data: &MarginalDataset) -> Result<NemotEstimate> {
    model.check_dims(data)?;
    model.config.validate()?;
    let n = data.n();
    let b = model.config.batch_size.min(n).max(1);
    let config = model.config.clone();
    let ustat = match config.estimator {
        Estimator::Aligned => false,
        Estimator::UstatCircle => {
            if !model.graph().is_circle_shaped() {
                return Err(MmotError::InvalidArgument(
                    "the u-statistic trace estimator requires a circle-shaped cost graph".into(),
                ));
            }
            true
        }
    };
    let mut adam: Vec<AdamState> = model.nets.iter().map(AdamState::new).collect();
    let mut overflow_events = 0u64;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let mut eval_secs = 0.0;
        let mut backprop_secs = 0.0;
        let lr = config.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(config.seed, "nemot-shuffle", epoch as u64);
        // Fisher-Yates, fixed walk order for determinism.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut batch_values = Vec::new();
        for (batch_idx, rows) in order.chunks(b).enumerate() {
            let t0 = Instant::now();
            let batch = if ustat {
                nemot_batch_objective_ustat(model, data, rows)
            } else {
                nemot_batch_objective(model, data, rows)
            }
            .map_err(|e| match e {
                MmotError::Numerical(message) => MmotError::Training {
                    epoch,
                    batch: batch_idx,
                    message,
                },
                other => other,
            })?;
            eval_secs += t0.elapsed().as_secs_f64();
            if !batch.value.is_finite() {
                return Err(MmotError::Training {
                    epoch,
                    batch: batch_idx,
                    message: format!("objective diverged to {}", batch.value),
                });
            }
            overflow_events += batch.overflow_events;
            batch_values.push(batch.value);
            let t1 = Instant::now();
            // Ascent as descent on the negated gradients.
            let mut grads = batch.grads;
            for g in grads.iter_mut() {
                g.scale(-1.0);
            }
            clip_global_norm(&mut grads, config.clip_norm);
            for ((net, state), g) in model.nets.iter_mut().zip(adam.iter_mut()).zip(grads.iter()) {
                state.advance();
                state.apply(net, g, lr);
            }
            backprop_secs += t1.elapsed().as_secs_f64();
        }
        epochs.push(EpochStats {
            mean_objective: batch_values.iter().sum::<f64>() / batch_values.len() as f64,
            median_objective: median(&batch_values),
            secs: epoch_start.elapsed().as_secs_f64(),
            eval_secs,
            backprop_secs,
        });
    }
    let value = if ustat {
        evaluate_nemot_ustat(model, data)?
    } else {
        evaluate_nemot(model, data)?
    };
    Ok(NemotEstimate {
        value,
        epochs,
        overflow_events,
        config,
    })
}

// ---------------------------------------------------------------------------
// Plan extraction
// ---------------------------------------------------------------------------

/// Density of the neural plan with respect to the product of the empirical
/// marginals at one tuple of points (one point per marginal).
pub fn neural_plan_density(model: &NemotModel, points: &[&[f64]]) -> Result<f64> {
    if points.len() != model.k() {
        return Err(MmotError::InvalidArgument(format!(
            "{} points for k={}",
            points.len(),
            model.k()
        )));
    }
    let mut f_sum = 0.0;
    for (net, &p) in model.nets.iter().zip(points.iter()) {
        if p.len() != net.input_dim() {
            return Err(MmotError::InvalidArgument(format!(
                "point width {} does not match network input width {}",
                p.len(),
                net.input_dim()
            )));
        }
        let x = Mat::from_vec(1, p.len(), p.to_vec());
        let (out, _) = net.forward(&x)?;
        f_sum += out[0];
    }
    let c = cost_tuple(points, model.graph(), &model.cost)?;
    let z = (f_sum - c) / model.epsilon;
    if !z.is_finite() || z > EXPONENT_HARD_CAP {
        return Err(MmotError::Numerical(format!(
            "plan-density exponent {z:.6e} exceeds the overflow guard"
        )));
    }
    Ok(z.exp())
}

/// Discrete mode: the neural plan over all `n^k` tuples of the dataset,
/// normalized to a proper probability tensor. Subject to the enumeration
/// budget.
pub fn neural_plan_discrete(
    model: &NemotModel,
    data: &MarginalDataset,
    budget_entries: f64,
) -> Result<DensePlan> {
    let pots = model.potentials_on(data)?;
    dense_plan_from_potentials(&pots, data, model.graph(), &model.cost, budget_entries)
}

// ---------------------------------------------------------------------------
// U-statistic surfaces
// ---------------------------------------------------------------------------

/// Builds the circle scaling matrices of the model's potentials evaluated on
/// the dataset samples.
pub fn build_l_matrices(
    model: &NemotModel,
    data: &MarginalDataset,
    epsilon: f64,
) -> Result<CircleScalingMatrices> {
    if !model.graph().is_circle_shaped() {
        return Err(MmotError::InvalidArgument(
            "scaling matrices require a circle-shaped cost graph".into(),
        ));
    }
    let pots = model.potentials_on(data)?;
    let costs = pairwise_cost_matrices(data, model.graph(), &model.cost)?;
    CircleScalingMatrices::build(
        &pots.phis,
        &costs,
        model.graph(),
        model.cost.normalization,
        epsilon,
    )
}

/// U-statistic exponential term from the trace of the cyclic product:
/// `(1/n^k) Tr(L_0 ... L_{k-1}) + epsilon`.
pub fn ustat_exponential_circle(mats: &CircleScalingMatrices) -> Result<f64> {
    let log_z = mats.log_z();
    if log_z > EXPONENT_HARD_CAP {
        return Err(MmotError::Numerical(format!(
            "normalized trace exponent {log_z:.6e} exceeds the overflow guard"
        )));
    }
    Ok(log_z.exp() + mats.epsilon())
}

/// Brute-force oracle for the u-statistic exponential term: the exact mean
/// over all `n^k` cross tuples of `exp((sum_j f_j - c)/eps)`, plus `eps`.
/// Works for any cost graph; refuses above the enumeration budget.
pub fn ustat_exponential_bruteforce(
    model: &NemotModel,
    data: &MarginalDataset,
    epsilon: f64,
    budget_entries: f64,
) -> Result<f64> {
    let n = data.n();
    let k = data.k();
    let entries = tuple_count(n, k);
    if entries > budget_entries {
        return Err(MmotError::ResourceLimit(format!(
            "brute-force enumeration needs n^k = {n}^{k} = {entries:.3e} tuples, above the \
             budget of {budget_entries:.3e}"
        )));
    }
    let pots = model.potentials_on(data)?;
    let costs = pairwise_cost_matrices(data, model.graph(), &model.cost)?;
    let eta = model.cost.normalization;
    let dims = vec![n; k];
    let mut idx = vec![0usize; k];
    let mut logs = Vec::with_capacity(entries as usize);
    loop {
        let mut e = 0.0;
        for (j, phi) in pots.phis.iter().enumerate() {
            e += phi[idx[j]];
        }
        e -= eta * costs.tuple_cost_raw(&idx);
        logs.push(e / epsilon);
        if !crate::sinkhorn::increment_index(&mut idx, &dims) {
            break;
        }
    }
    let log_mean = logsumexp(&logs) - k as f64 * (n as f64).ln();
    if log_mean > EXPONENT_HARD_CAP {
        return Err(MmotError::Numerical(format!(
            "mean exponent {log_mean:.6e} exceeds the overflow guard"
        )));
    }
    Ok(log_mean.exp() + epsilon)
}

/// Unnormalized pairwise plan marginal between marginals `u < v` (0-based)
/// from the scaling matrices; divide by the trace for probabilities.
pub fn pairwise_plan_marginal_circle(
    mats: &CircleScalingMatrices,
    u: usize,
    v: usize,
) -> Result<Mat> {
    mats.pairwise_marginal_unnormalized(u, v)
}

/// Transport cost (no entropic term) of the normalized plan encoded by the
/// scaling matrices.
pub fn unregularized_cost_circle(
    costs: &CostMatrixSet,
    mats: &CircleScalingMatrices,
) -> Result<f64> {
    mats.unregularized_cost(costs)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelCheckpoint {
    format_version: u32,
    epsilon: f64,
    graph_kind: String,
    k: usize,
    edges: Vec<(usize, usize)>,
    cost_kind: String,
    normalization: f64,
    dataset_sha256: Vec<String>,
    config: TrainConfig,
    nets: Vec<Mlp>,
}

/// Serializes the model plus a manifest (regularization, graph, cost kind,
/// normalization, dataset fingerprint) as JSON. Precomputed cost matrices
/// are not checkpointable.
pub fn save_model(model: &NemotModel, data: &MarginalDataset, path: &Path) -> Result<()> {
    let cost_kind = match &model.cost.kind {
        CostKind::SquaredEuclidean => "squared-euclidean".to_string(),
        CostKind::CosineDistance => "cosine-distance".to_string(),
        CostKind::Precomputed(_) => {
            return Err(MmotError::InvalidArgument(
                "models over precomputed cost matrices cannot be checkpointed".into(),
            ))
        }
    };
    let ckpt = ModelCheckpoint {
        format_version: crate::neural::CHECKPOINT_FORMAT_VERSION,
        epsilon: model.epsilon,
        graph_kind: model.graph.kind_name().to_string(),
        k: model.k(),
        edges: model.graph.edges().to_vec(),
        cost_kind,
        normalization: model.cost.normalization,
        dataset_sha256: crate::datagen::dataset_fingerprint(data),
        config: model.config.clone(),
        nets: model.nets.clone(),
    };
    let text = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| MmotError::Format(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a model checkpoint. When `expect_data` is given, the stored dataset
/// fingerprint must match it.
pub fn load_model(path: &Path, expect_data: Option<&MarginalDataset>) -> Result<NemotModel> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: ModelCheckpoint = serde_json::from_str(&text)
        .map_err(|e| MmotError::Format(format!("malformed checkpoint: {e}")))?;
    if ckpt.format_version != crate::neural::CHECKPOINT_FORMAT_VERSION {
        return Err(MmotError::Format(format!(
            "unsupported checkpoint format version {}",
            ckpt.format_version
        )));
    }
    let graph = match ckpt.graph_kind.as_str() {
        "custom" => CostGraph::custom(ckpt.k, ckpt.edges.clone())?,
        name => {
            let kind = crate::model::GraphKind::parse(name)?;
            let g = CostGraph::build(kind, ckpt.k)?;
            if g.edges() != ckpt.edges.as_slice() {
                return Err(MmotError::Format(
                    "checkpoint edge list does not match its graph kind".into(),
                ));
            }
            g
        }
    };
    let kind = match ckpt.cost_kind.as_str() {
        "squared-euclidean" => CostKind::SquaredEuclidean,
        "cosine-distance" => CostKind::CosineDistance,
        other => {
            return Err(MmotError::Format(format!(
                "unknown cost kind in checkpoint: {other}"
            )))
        }
    };
    if let Some(data) = expect_data {
        let got = crate::datagen::dataset_fingerprint(data);
        if got != ckpt.dataset_sha256 {
            return Err(MmotError::CorruptData(
                "checkpoint dataset fingerprint does not match the provided dataset".into(),
            ));
        }
    }
    let nets = ckpt
        .nets
        .into_iter()
        .map(|m| Mlp::from_layers(m.into_layers()))
        .collect::<Result<Vec<_>>>()?;
    if nets.len() != ckpt.k {
        return Err(MmotError::Format(format!(
            "checkpoint has {} networks for k={}",
            nets.len(),
            ckpt.k
        )));
    }
    Ok(NemotModel {
        nets,
        epsilon: ckpt.epsilon,
        graph,
        cost: PairwiseCost {
            kind,
            normalization: ckpt.normalization,
        },
        config: ckpt.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GraphKind;
    use crate::sinkhorn::{kl_divergence_dense, sinkhorn_full};
    use rand::Rng;

    fn random_dataset(n: usize, k: usize, d: usize, seed: u64) -> MarginalDataset {
        let mut rng = derive_rng(seed, "nemot-test", 0);
        MarginalDataset::new(
            (0..k)
                .map(|_| Mat::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0))
                .collect(),
        )
        .unwrap()
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    fn tiny_model(data: &MarginalDataset, epsilon: f64, seed: u64) -> NemotModel {
        let k = data.k();
        let graph = CostGraph::build(GraphKind::Circle, k).unwrap();
        let cost = PairwiseCost::squared_euclidean(k);
        NemotModel::new(data.dims(), epsilon, graph, cost, small_config(seed)).unwrap()
    }

    #[test]
    fn zero_networks_zero_cost_objective_is_zero() {
        let data = MarginalDataset::new(
            (0..3)
                .map(|_| Mat::zeros(6, 2))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut model = tiny_model(&data, 0.7, 1);
        for net in model.nets.iter_mut() {
            for layer in net.layers_mut() {
                layer.w.iter_mut().for_each(|w| *w = 0.0);
                layer.b.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let rows: Vec<usize> = (0..6).collect();
        let batch = nemot_batch_objective(&model, &data, &rows).unwrap();
        assert!(batch.value.abs() < 1e-15);
        let full = evaluate_nemot(&model, &data).unwrap();
        assert!(full.abs() < 1e-15);
        // Every density is 1: the plan is the product measure itself.
        let pts: Vec<&[f64]> = (0..3).map(|i| data.point(i, 0)).collect();
        assert!((neural_plan_density(&model, &pts).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_outputs_match_scalar_arithmetic() {
        // Constant network outputs summing to 0.2 with zero cost, eps = 1:
        // objective = 0.2 - e^{0.2} + 1.
        let data = MarginalDataset::new(
            (0..2)
                .map(|_| Mat::zeros(4, 1))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let graph = CostGraph::build(GraphKind::Full, 2).unwrap();
        let cost = PairwiseCost::squared_euclidean(2);
        let mut model =
            NemotModel::new(data.dims(), 1.0, graph, cost, small_config(3)).unwrap();
        for (i, net) in model.nets.iter_mut().enumerate() {
            for layer in net.layers_mut() {
                layer.w.iter_mut().for_each(|w| *w = 0.0);
                layer.b.iter_mut().for_each(|b| *b = 0.0);
            }
            let last = net.layers_mut().last_mut().unwrap();
            last.b[0] = if i == 0 { 0.15 } else { 0.05 };
        }
        let rows: Vec<usize> = (0..4).collect();
        let batch = nemot_batch_objective(&model, &data, &rows).unwrap();
        let expect = 0.2 - 0.2f64.exp() + 1.0;
        assert!((batch.value - expect).abs() < 1e-12, "{}", batch.value);
    }

    #[test]
    fn aligned_gradients_match_finite_differences() {
        let data = random_dataset(8, 3, 2, 7);
        let model = tiny_model(&data, 0.8, 7);
        let rows: Vec<usize> = (0..8).collect();
        check_gradients(&model, &data, &rows, false, 1e-4);
    }

    #[test]
    fn ustat_gradients_match_finite_differences() {
        let data = random_dataset(6, 3, 2, 8);
        let model = tiny_model(&data, 0.9, 8);
        let rows: Vec<usize> = vec![0, 2, 3, 5];
        check_gradients(&model, &data, &rows, true, 1e-4);
    }

    fn check_gradients(
        model: &NemotModel,
        data: &MarginalDataset,
        rows: &[usize],
        ustat: bool,
        tol: f64,
    ) {
        let eval = |m: &NemotModel| -> f64 {
            if ustat {
                nemot_batch_objective_ustat(m, data, rows).unwrap().value
            } else {
                nemot_batch_objective(m, data, rows).unwrap().value
            }
        };
        let batch = if ustat {
            nemot_batch_objective_ustat(model, data, rows).unwrap()
        } else {
            nemot_batch_objective(model, data, rows).unwrap()
        };
        let h = 1e-5;
        let mut rng = derive_rng(99, "fd-pick", 0);
        let mut checked = 0;
        for net_idx in 0..model.k() {
            for layer_idx in 0..model.nets[net_idx].layers().len() {
                for _ in 0..3 {
                    let nw = model.nets[net_idx].layers()[layer_idx].w.len();
                    let w_idx = rng.random_range(0..nw);
                    let mut plus = model.clone();
                    plus.nets[net_idx].layers_mut()[layer_idx].w[w_idx] += h;
                    let mut minus = model.clone();
                    minus.nets[net_idx].layers_mut()[layer_idx].w[w_idx] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = batch.grads[net_idx].w[layer_idx].as_slice()[w_idx];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < tol,
                        "net {net_idx} layer {layer_idx} w[{w_idx}]: fd {fd} vs analytic {an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked >= 18);
    }

    #[test]
    fn ustat_batch_value_matches_bruteforce_over_batch() {
        let data = random_dataset(5, 3, 2, 21);
        let model = tiny_model(&data, 0.6, 21);
        let rows: Vec<usize> = (0..5).collect();
        let fast = nemot_batch_objective_ustat(&model, &data, &rows).unwrap();
        // Direct: sum of means minus eps * (bruteforce mean exp) + eps.
        let bf = ustat_exponential_bruteforce(&model, &data, 0.6, 1e7).unwrap();
        let pots = model.potentials_on(&data).unwrap();
        let mean_sum: f64 = pots
            .phis
            .iter()
            .map(|p| p.iter().sum::<f64>() / p.len() as f64)
            .sum();
        let slow = mean_sum - 0.6 * (bf - 0.6) + 0.6;
        assert!((fast.value - slow).abs() < 1e-10, "{} vs {slow}", fast.value);
    }

    #[test]
    fn trace_formula_matches_bruteforce_both_directions() {
        for (n, k) in [(4usize, 3usize), (3, 4), (6, 3)] {
            let data = random_dataset(n, k, 2, 100 + (n * k) as u64);
            let model = tiny_model(&data, 0.5, (n + k) as u64);
            let mats = build_l_matrices(&model, &data, 0.5).unwrap();
            let fast = ustat_exponential_circle(&mats).unwrap();
            let slow = ustat_exponential_bruteforce(&model, &data, 0.5, 1e7).unwrap();
            let rel = (fast - slow).abs() / slow.abs();
            assert!(rel < 1e-10, "n={n} k={k}: {fast} vs {slow}");
        }
    }

    #[test]
    fn bruteforce_respects_enumeration_budget() {
        let data = random_dataset(5, 3, 1, 2);
        let model = tiny_model(&data, 1.0, 2);
        let err = ustat_exponential_bruteforce(&model, &data, 1.0, 50.0).unwrap_err();
        assert!(matches!(err, MmotError::ResourceLimit(_)));
    }

    #[test]
    fn pairwise_marginals_match_dense_tensor() {
        let data = random_dataset(4, 3, 1, 33);
        let model = tiny_model(&data, 0.7, 33);
        let mats = build_l_matrices(&model, &data, 0.7).unwrap();
        let plan = neural_plan_discrete(&model, &data, 1e7).unwrap();
        for (u, v) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let raw = pairwise_plan_marginal_circle(&mats, u, v).unwrap();
            let total: f64 = raw.as_slice().iter().sum();
            let dense = plan.pairwise_marginal(u, v).unwrap();
            for a in 0..4 {
                for b_ in 0..4 {
                    assert!(
                        (raw[(a, b_)] / total - dense[(a, b_)]).abs() < 1e-12,
                        "({u},{v}) at ({a},{b_})"
                    );
                }
            }
        }
    }

    #[test]
    fn circle_cost_matches_dense_inner_product() {
        for (n, k) in [(4usize, 3usize), (3, 4)] {
            let data = random_dataset(n, k, 2, 55 + k as u64);
            let model = tiny_model(&data, 0.8, 55 + k as u64);
            let mats = build_l_matrices(&model, &data, 0.8).unwrap();
            let costs =
                pairwise_cost_matrices(&data, &model.graph, &model.cost).unwrap();
            let fast = unregularized_cost_circle(&costs, &mats).unwrap();
            // Dense: <eta * raw tuple cost, normalized plan>.
            let plan = neural_plan_discrete(&model, &data, 1e7).unwrap();
            let mut idx = vec![0usize; k];
            let mut slow = 0.0;
            for &p in &plan.values {
                slow += p * model.cost.normalization * costs.tuple_cost_raw(&idx);
                crate::sinkhorn::increment_index(&mut idx, &plan.dims);
            }
            let rel = (fast - slow).abs() / slow.abs().max(1e-12);
            assert!(rel < 1e-10, "n={n} k={k}: {fast} vs {slow}");
        }
    }

    #[test]
    fn discrete_plan_normalizes() {
        let data = random_dataset(4, 3, 2, 3);
        let model = tiny_model(&data, 0.5, 3);
        let plan = neural_plan_discrete(&model, &data, 1e7).unwrap();
        let total: f64 = plan.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_gauge_invariant_under_zero_sum_shifts() {
        let data = random_dataset(6, 3, 2, 11);
        let mut model = tiny_model(&data, 0.6, 11);
        let rows: Vec<usize> = (0..6).collect();
        let base = nemot_batch_objective(&model, &data, &rows).unwrap().value;
        let shifts = [0.3, -0.45, 0.15];
        for (net, s) in model.nets.iter_mut().zip(shifts.iter()) {
            net.layers_mut().last_mut().unwrap().b[0] += s;
        }
        let shifted = nemot_batch_objective(&model, &data, &rows).unwrap().value;
        assert!((base - shifted).abs() < 1e-12);
        let ustat_base = evaluate_nemot_ustat(&model, &data).unwrap();
        for (net, s) in model.nets.iter_mut().zip(shifts.iter()) {
            net.layers_mut().last_mut().unwrap().b[0] -= 2.0 * s;
        }
        let ustat_shifted = evaluate_nemot_ustat(&model, &data).unwrap();
        assert!((ustat_base - ustat_shifted).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_chunk_invariant_and_matches_full_batch() {
        let data = random_dataset(50, 3, 2, 13);
        let mut model = tiny_model(&data, 0.9, 13);
        let rows: Vec<usize> = (0..50).collect();
        let batch = nemot_batch_objective(&model, &data, &rows).unwrap().value;
        model.config.eval_chunk = 50;
        let full = evaluate_nemot(&model, &data).unwrap();
        assert!((batch - full).abs() < 1e-12);
        model.config.eval_chunk = 7;
        let chunked = evaluate_nemot(&model, &data).unwrap();
        assert!((full - chunked).abs() < 1e-12);
    }

    #[test]
    fn weak_duality_against_sinkhorn() {
        // The u-statistic full-data value of any parameters is dominated by
        // the converged block-ascent optimum on the same empirical measures.
        for seed in [5u64, 6, 7] {
            let data = random_dataset(5, 3, 2, 200 + seed);
            let model = tiny_model(&data, 0.4, seed);
            let value = evaluate_nemot_ustat(&model, &data).unwrap();
            let graph = CostGraph::build(GraphKind::Circle, 3).unwrap();
            let (_, report) =
                sinkhorn_full(&data, &graph, &model.cost, 0.4, 1e-10, 50_000).unwrap();
            assert!(
                value <= report.value + 1e-8,
                "seed {seed}: neural {value} above optimum {}",
                report.value
            );
        }
    }

    #[test]
    fn training_reaches_zero_on_coincident_data() {
        let data = MarginalDataset::new(
            (0..3)
                .map(|_| Mat::from_fn(64, 1, |_, _| 0.3))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut model = tiny_model(&data, 1.0, 4);
        model.config.epochs = 400;
        model.config.lr0 = 0.02;
        model.config.decay_every = 100;
        let est = train_nemot(&mut model, &data).unwrap();
        assert!(
            est.value.abs() < 1e-3,
            "estimate {} not within 1e-3 of 0",
            est.value
        );
        assert_eq!(est.epochs.len(), 400);
    }

    #[test]
    fn training_improves_the_objective() {
        let data = random_dataset(200, 3, 2, 17);
        let mut model = tiny_model(&data, 1.0, 17);
        model.config.epochs = 6;
        model.config.lr0 = 5e-3;
        let est = train_nemot(&mut model, &data).unwrap();
        let first = est.epochs.first().unwrap().median_objective;
        let last = est.epochs.last().unwrap().median_objective;
        assert!(
            last >= first,
            "median batch objective fell from {first} to {last}"
        );
        assert!(est.epochs.iter().all(|e| e.secs >= 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_dataset(40, 3, 2, 19);
        let mut m1 = tiny_model(&data, 0.8, 19);
        m1.config.epochs = 3;
        let mut m2 = m1.clone();
        let e1 = train_nemot(&mut m1, &data).unwrap();
        let e2 = train_nemot(&mut m2, &data).unwrap();
        assert_eq!(e1.value.to_bits(), e2.value.to_bits());
        for (a, b) in m1.nets.iter().zip(m2.nets.iter()) {
            for (la, lb) in a.layers().iter().zip(b.layers().iter()) {
                assert_eq!(la.w, lb.w);
                assert_eq!(la.b, lb.b);
            }
        }
    }

    #[test]
    fn trained_plan_close_to_sinkhorn_plan_on_toy_instance() {
        // Two atoms per marginal, k=2, the worked example of the dense
        // solver; the normalized neural plan should land near the optimum.
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
        let mut config = small_config(23);
        config.epochs = 600;
        config.lr0 = 1e-2;
        config.decay_every = 75;
        config.clip_norm = 1.0;
        let mut model = NemotModel::new(data.dims(), 1.0, graph.clone(), cost.clone(), config)
            .unwrap();
        train_nemot(&mut model, &data).unwrap();
        let neural = neural_plan_discrete(&model, &data, 1e6).unwrap();
        let (pots, _) = sinkhorn_full(&data, &graph, &cost, 1.0, 1e-10, 10_000).unwrap();
        let exact = dense_plan_from_potentials(&pots, &data, &graph, &cost, 1e6).unwrap();
        let l1: f64 = neural
            .values
            .iter()
            .zip(exact.values.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(l1 < 0.05, "plan l1 distance {l1}");
        let kl = kl_divergence_dense(&exact, &neural).unwrap();
        assert!(kl.is_finite() && kl >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let data = random_dataset(20, 3, 2, 29);
        let mut model = tiny_model(&data, 0.7, 29);
        model.config.epochs = 2;
        train_nemot(&mut model, &data).unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &data, &path).unwrap();
        let loaded = load_model(&path, Some(&data)).unwrap();
        let a = evaluate_nemot(&model, &data).unwrap();
        let b = evaluate_nemot(&loaded, &data).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(a.to_bits(), b.to_bits());
        // Fingerprint mismatch is rejected.
        let other = random_dataset(20, 3, 2, 30);
        let err = load_model(&path, Some(&other)).unwrap_err();
        assert!(matches!(err, MmotError::CorruptData(_)));
    }

    #[test]
    fn hard_overflow_is_a_training_error() {
        let data = random_dataset(8, 3, 1, 31);
        let mut model = tiny_model(&data, 1e-4, 31);
        // Force enormous constant outputs: exponent (sum f - c)/eps blows up.
        for net in model.nets.iter_mut() {
            net.layers_mut().last_mut().unwrap().b[0] = 10.0;
        }
        model.config.epochs = 1;
        let err = train_nemot(&mut model, &data).unwrap_err();
        match err {
            MmotError::Training { epoch, message, .. } => {
                assert_eq!(epoch, 0);
                assert!(message.contains("overflow guard"), "message: {message}");
            }
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn soft_cap_is_counted_not_fatal() {
        let data = random_dataset(6, 3, 1, 37);
        let mut model = tiny_model(&data, 0.05, 37);
        for net in model.nets.iter_mut() {
            net.layers_mut().last_mut().unwrap().b[0] = 2.0;
        }
        // (sum f - c)/eps ~ 6/0.05 = 120 > 80 soft cap, < 700 hard cap.
        let rows: Vec<usize> = (0..6).collect();
        let batch = nemot_batch_objective(&model, &data, &rows).unwrap();
        assert!(batch.overflow_events > 0);
        assert!(batch.value.is_finite());
    }

    #[test]
    fn ustat_estimator_requires_circle_graph() {
        let data = random_dataset(6, 5, 1, 41);
        let graph = CostGraph::build(GraphKind::Full, 5).unwrap();
        let cost = PairwiseCost::squared_euclidean(5);
        let mut config = small_config(41);
        config.estimator = Estimator::UstatCircle;
        let mut model = NemotModel::new(data.dims(), 0.5, graph, cost, config).unwrap();
        let err = train_nemot(&mut model, &data).unwrap_err();
        assert!(matches!(err, MmotError::InvalidArgument(_)));
    }
}
