//! Domain types: multimarginal datasets, cost graphs over the marginals, and
//! pairwise-decomposable tuple costs.
//!
//! A tuple cost is `normalization * sum over graph edges (i,j) of
//! ctilde(x_i, x_j)` where `ctilde` is one of the supported pairwise kinds.
//! Edge matrices store the raw `ctilde` values; the normalization multiplier
//! is applied at the point of use, never baked into the matrices.
//!
//! All indices are 0-based: marginals are `0..k`, and a graph edge `(i, j)`
//! always satisfies `i < j`. Circle graphs store the wrap edge `(0, k-1)` in
//! that normalized orientation.

use crate::error::{MmotError, Result};
use crate::numerics::Mat;
use rayon::prelude::*;

/// Samples from `k` marginals, `n` points each, marginal `i` of dimension
/// `dims[i]`.
#[derive(Debug, Clone)]
pub struct MarginalDataset {
    dims: Vec<usize>,
    samples: Vec<Mat>,
}

impl MarginalDataset {
    /// Validates shapes and finiteness; `samples[i]` must be `n x dims[i]`
    /// with a common `n >= 1`, and `k >= 2`.
    pub fn new(samples: Vec<Mat>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(MmotError::InvalidArgument(format!(
                "need at least 2 marginals, got {}",
                samples.len()
            )));
        }
        let n = samples[0].rows();
        if n == 0 {
            return Err(MmotError::InvalidArgument(
                "marginals must contain at least one sample".into(),
            ));
        }
        let mut dims = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.rows() != n {
                return Err(MmotError::InvalidArgument(format!(
                    "marginal {i} has {} rows, expected {n}",
                    s.rows()
                )));
            }
            if s.cols() == 0 {
                return Err(MmotError::InvalidArgument(format!(
                    "marginal {i} has dimension 0"
                )));
            }
            if !s.all_finite() {
                return Err(MmotError::InvalidArgument(format!(
                    "marginal {i} contains non-finite entries"
                )));
            }
            dims.push(s.cols());
        }
        Ok(MarginalDataset { dims, samples })
    }

    /// Number of marginals.
    pub fn k(&self) -> usize {
        self.samples.len()
    }

    /// Common sample count.
    pub fn n(&self) -> usize {
        self.samples[0].rows()
    }

    /// Ambient dimension of each marginal.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Sample matrix of marginal `i` (rows are points).
    pub fn marginal(&self, i: usize) -> &Mat {
        &self.samples[i]
    }

    /// Point `row` of marginal `i`.
    pub fn point(&self, i: usize, row: usize) -> &[f64] {
        self.samples[i].row(row)
    }
}

/// Shape tag of a cost graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    /// All `k(k-1)/2` pairs.
    Full,
    /// Edges `(i, i+1)` plus the wrap edge `(0, k-1)`; requires `k >= 3`.
    Circle,
    /// A tree; the builder produces the path `0-1-...-k-1`.
    Tree,
    /// Caller-supplied edge set.
    Custom,
}

impl GraphKind {
    /// Stable lower-case name used in files and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Full => "full",
            GraphKind::Circle => "circle",
            GraphKind::Tree => "tree",
            GraphKind::Custom => "custom",
        }
    }

    /// Inverse of [`GraphKind::name`].
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GraphKind::Full),
            "circle" => Ok(GraphKind::Circle),
            "tree" => Ok(GraphKind::Tree),
            "custom" => Ok(GraphKind::Custom),
            other => Err(MmotError::InvalidArgument(format!(
                "unknown graph kind '{other}' (expected full, circle, tree, or custom)"
            ))),
        }
    }
}

/// Graph over the `k` marginals whose edges index the pairwise cost terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostGraph {
    k: usize,
    edges: Vec<(usize, usize)>,
    kind: GraphKind,
}

impl CostGraph {
    /// Builds a full, circle, or path graph on `k` vertices.
    pub fn build(kind: GraphKind, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(MmotError::InvalidArgument(format!(
                "cost graph needs k >= 2 vertices, got {k}"
            )));
        }
        let edges = match kind {
            GraphKind::Full => {
                let mut e = Vec::with_capacity(k * (k - 1) / 2);
                for i in 0..k {
                    for j in (i + 1)..k {
                        e.push((i, j));
                    }
                }
                e
            }
            GraphKind::Circle => {
                if k < 3 {
                    return Err(MmotError::InvalidArgument(
                        "circle graphs need k >= 3".into(),
                    ));
                }
                let mut e: Vec<(usize, usize)> = (0..k - 1).map(|i| (i, i + 1)).collect();
                e.push((0, k - 1));
                e
            }
            GraphKind::Tree => (0..k - 1).map(|i| (i, i + 1)).collect(),
            GraphKind::Custom => {
                return Err(MmotError::InvalidArgument(
                    "custom graphs are built from an explicit edge list".into(),
                ))
            }
        };
        Ok(CostGraph { k, edges, kind })
    }

    /// Builds a custom graph from an explicit edge list.
    pub fn custom(k: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if k < 2 {
            return Err(MmotError::InvalidArgument(format!(
                "cost graph needs k >= 2 vertices, got {k}"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in &edges {
            if i >= j || j >= k {
                return Err(MmotError::InvalidArgument(format!(
                    "edge ({i},{j}) is not an ordered pair inside 0..{k}"
                )));
            }
            if !seen.insert((i, j)) {
                return Err(MmotError::InvalidArgument(format!(
                    "duplicate edge ({i},{j})"
                )));
            }
        }
        Ok(CostGraph {
            k,
            edges,
            kind: GraphKind::Custom,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Edges as ordered pairs `i < j`, in construction order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    /// Stable lower-case name of the graph kind.
    pub fn kind_name(&self) -> &'static str {
        self.kind.name()
    }

    /// True when the edge set is exactly the circle on `k` vertices
    /// (regardless of the declared kind; full graphs on k=3 qualify).
    pub fn is_circle_shaped(&self) -> bool {
        if self.k < 3 {
            return false;
        }
        let mut want: Vec<(usize, usize)> = (0..self.k - 1).map(|i| (i, i + 1)).collect();
        want.push((0, self.k - 1));
        want.sort_unstable();
        let mut have = self.edges.clone();
        have.sort_unstable();
        have == want
    }

    /// Returns the circle edge list `(0,1), (1,2), ..., (k-1,0)` in cyclic
    /// order when this graph is circle-shaped.
    pub fn circle_edge_order(&self) -> Result<Vec<(usize, usize)>> {
        if !self.is_circle_shaped() {
            return Err(MmotError::InvalidArgument(
                "graph is not circle-shaped".into(),
            ));
        }
        let mut e: Vec<(usize, usize)> = (0..self.k - 1).map(|i| (i, i + 1)).collect();
        e.push((self.k - 1, 0));
        Ok(e)
    }
}

/// Pairwise cost function kind.
#[derive(Debug, Clone)]
pub enum CostKind {
    /// `||x - y||^2`.
    SquaredEuclidean,
    /// `1 - <x,y>/(||x|| ||y||)` — a dissimilarity, so lower means more
    /// similar, like every other kind.
    CosineDistance,
    /// Externally supplied `n x n` matrices, one per graph edge, in the
    /// graph's edge order.
    Precomputed(Vec<Mat>),
}

/// A pairwise kind together with the multiplier applied to the edge sum.
#[derive(Debug, Clone)]
pub struct PairwiseCost {
    pub kind: CostKind,
    pub normalization: f64,
}

impl PairwiseCost {
    /// The conventional multiplier `1/k`.
    pub fn default_normalization(k: usize) -> f64 {
        1.0 / k as f64
    }

    /// Squared-euclidean cost with the `1/k` multiplier.
    pub fn squared_euclidean(k: usize) -> Self {
        PairwiseCost {
            kind: CostKind::SquaredEuclidean,
            normalization: Self::default_normalization(k),
        }
    }
}

/// Evaluates one pairwise term `ctilde(x, y)`.
pub fn pairwise_cost(x: &[f64], y: &[f64], kind: &CostKind) -> Result<f64> {
    match kind {
        CostKind::SquaredEuclidean => {
            if x.len() != y.len() {
                return Err(MmotError::InvalidArgument(format!(
                    "point dimensions differ: {} vs {}",
                    x.len(),
                    y.len()
                )));
            }
            Ok(x.iter()
                .zip(y)
                .map(|(a, b)| {
                    let d = a - b;
                    d * d
                })
                .sum())
        }
        CostKind::CosineDistance => {
            if x.len() != y.len() {
                return Err(MmotError::InvalidArgument(format!(
                    "point dimensions differ: {} vs {}",
                    x.len(),
                    y.len()
                )));
            }
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(MmotError::InvalidArgument(
                    "cosine distance is undefined for a zero vector".into(),
                ));
            }
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            Ok(1.0 - dot / (nx * ny))
        }
        CostKind::Precomputed(_) => Err(MmotError::InvalidArgument(
            "precomputed costs have no pointwise form; use the edge matrices".into(),
        )),
    }
}

/// Evaluates the tuple cost `normalization * sum over edges ctilde(x_i, x_j)`
/// for one point per marginal.
pub fn cost_tuple(points: &[&[f64]], graph: &CostGraph, cost: &PairwiseCost) -> Result<f64> {
    if points.len() != graph.k() {
        return Err(MmotError::InvalidArgument(format!(
            "expected {} points, got {}",
            graph.k(),
            points.len()
        )));
    }
    let mut total = 0.0;
    for &(i, j) in graph.edges() {
        total += pairwise_cost(points[i], points[j], &cost.kind)?;
    }
    Ok(cost.normalization * total)
}

/// The raw pairwise matrices `C_e[a, b] = ctilde(x_{ia}, x_{jb})`, one per
/// edge in graph edge order. Entries carry no normalization.
#[derive(Debug, Clone)]
pub struct CostMatrixSet {
    edges: Vec<(usize, usize)>,
    mats: Vec<Mat>,
}

impl CostMatrixSet {
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Matrix for the `e`-th edge.
    pub fn mat(&self, e: usize) -> &Mat {
        &self.mats[e]
    }

    /// Matrix for the edge `(i, j)` (in either orientation: requesting
    /// `(j, i)` returns the transposed view lazily as a copy).
    pub fn mat_for(&self, i: usize, j: usize) -> Option<Mat> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let e = self.edges.iter().position(|&p| p == (a, b))?;
        if i < j {
            Some(self.mats[e].clone())
        } else {
            Some(self.mats[e].transpose())
        }
    }

    /// Raw (unnormalized) edge sum for the index tuple `idx`.
    pub fn tuple_cost_raw(&self, idx: &[usize]) -> f64 {
        let mut total = 0.0;
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            total += self.mats[e][(idx[i], idx[j])];
        }
        total
    }

    pub fn n(&self) -> usize {
        self.mats.first().map_or(0, |m| m.rows())
    }

    /// Submatrices over the given sample rows (applied to both axes of every
    /// edge matrix), preserving edge order.
    pub fn gather(&self, rows: &[usize]) -> CostMatrixSet {
        let mats = self
            .mats
            .iter()
            .map(|m| Mat::from_fn(rows.len(), rows.len(), |a, b| m[(rows[a], rows[b])]))
            .collect();
        CostMatrixSet {
            edges: self.edges.clone(),
            mats,
        }
    }
}

/// Builds the per-edge cost matrices for a dataset.
///
/// Squared-euclidean entries are computed by direct per-pair differencing
/// (never the Gram-matrix expansion), so coincident points give exact zeros
/// and the matrices are exactly translation-consistent.
pub fn pairwise_cost_matrices(
    data: &MarginalDataset,
    graph: &CostGraph,
    cost: &PairwiseCost,
) -> Result<CostMatrixSet> {
    if data.k() != graph.k() {
        return Err(MmotError::InvalidArgument(format!(
            "dataset has {} marginals but graph has {}",
            data.k(),
            graph.k()
        )));
    }
    let n = data.n();
    if let CostKind::Precomputed(mats) = &cost.kind {
        if mats.len() != graph.edges().len() {
            return Err(MmotError::InvalidArgument(format!(
                "precomputed cost carries {} matrices for {} edges",
                mats.len(),
                graph.edges().len()
            )));
        }
        for (e, m) in mats.iter().enumerate() {
            if m.rows() != n || m.cols() != n {
                return Err(MmotError::InvalidArgument(format!(
                    "precomputed matrix {e} has shape {}x{}, expected {n}x{n}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.all_finite() {
                return Err(MmotError::InvalidArgument(format!(
                    "precomputed matrix {e} contains non-finite entries"
                )));
            }
        }
        return Ok(CostMatrixSet {
            edges: graph.edges().to_vec(),
            mats: mats.clone(),
        });
    }
    let mats: Vec<Mat> = graph
        .edges()
        .iter()
        .map(|&(i, j)| {
            let xi = data.marginal(i);
            let xj = data.marginal(j);
            let mut m = Mat::zeros(n, n);
            // Parallel over row blocks; each entry is computed independently
            // so the result is schedule-invariant.
            m.as_mut_slice()
                .par_chunks_mut(n)
                .enumerate()
                .try_for_each(|(a, row)| {
                    for (b, slot) in row.iter_mut().enumerate() {
                        *slot = pairwise_cost(xi.row(a), xj.row(b), &cost.kind)?;
                    }
                    Ok::<(), MmotError>(())
                })?;
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(CostMatrixSet {
        edges: graph.edges().to_vec(),
        mats,
    })
}
