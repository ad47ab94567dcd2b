//! Neural substrate: multilayer ReLU perceptrons with exact hand-derived
//! gradients, Adam, global gradient-norm clipping, and a stepwise
//! learning-rate schedule.
//!
//! Networks are small scalar-output MLPs: hidden layers apply ReLU (the
//! subgradient at 0 is taken as 0), the final layer is linear. All math is
//! `f64` with fixed reduction orders, so fixed seeds give bitwise-identical
//! trajectories.
//!
//! # Checkpoint format
//!
//! [`save_checkpoint`] writes a versioned JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "nets": [ { "layers": [ { "out": 2, "inp": 3,
//!                             "w": [row-major f64s], "b": [f64s] } ] } ]
//! }
//! ```
//!
//! Floats use shortest round-trip formatting, so save/load reproduces
//! parameters bitwise. The layout is stable; breaking changes bump
//! `format_version`.

use crate::error::{MmotError, Result};
use crate::numerics::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One affine layer: weights `out x in`, bias `out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub out: usize,
    pub inp: usize,
    /// Row-major `out x inp` weights.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Scalar-output ReLU MLP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Gradients matching an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w: Vec<Mat>,
    pub b: Vec<Vec<f64>>,
}

/// Activations cached by [`Mlp::forward`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// `acts[0]` is the input batch; `acts[l]` for `l >= 1` is the
    /// post-ReLU output of hidden layer `l`.
    acts: Vec<Mat>,
}

impl Mlp {
    /// He-style uniform initialization: weights uniform on
    /// `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, biases zero.
    ///
    /// `sizes` lists layer widths from input to output, e.g. `[d, h, h, 1]`.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (inp, out) = (pair[0], pair[1]);
                let lim = (6.0 / inp as f64).sqrt();
                let w = (0..out * inp)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * lim)
                    .collect();
                Layer {
                    out,
                    inp,
                    w,
                    b: vec![0.0; out],
                }
            })
            .collect();
        Mlp { layers }
    }

    /// Builds from explicit layers (mainly for tests).
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(MmotError::InvalidArgument("empty layer list".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.w.len() != layer.out * layer.inp || layer.b.len() != layer.out {
                return Err(MmotError::InvalidArgument(format!(
                    "layer {l} payload does not match its declared {}x{} shape",
                    layer.out, layer.inp
                )));
            }
            if l > 0 && layers[l - 1].out != layer.inp {
                return Err(MmotError::InvalidArgument(format!(
                    "layer {l} input width {} does not compose with previous output {}",
                    layer.inp,
                    layers[l - 1].out
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access (layer shapes must be left unchanged).
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Consumes the network into its layer list.
    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Input width of the first layer.
    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    /// Output width of the last layer (1 for the networks trained here).
    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out
    }

    fn layer_w_mat(&self, l: usize) -> Mat {
        Mat::from_vec(
            self.layers[l].out,
            self.layers[l].inp,
            self.layers[l].w.clone(),
        )
    }

    /// Forward pass over a batch (rows are points). Returns the scalar
    /// outputs and the cache for [`Mlp::backward`].
    pub fn forward(&self, batch: &Mat) -> Result<(Vec<f64>, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(MmotError::InvalidArgument(format!(
                "batch width {} does not match network input {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = self.layer_w_mat(l);
            let mut z = acts[l].matmul_nt(&w);
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += layer.b[j];
                }
            }
            if l < last {
                z.map_inplace(|v| if v > 0.0 { v } else { 0.0 });
                acts.push(z);
            } else {
                if layer.out != 1 {
                    return Err(MmotError::InvalidArgument(format!(
                        "scalar forward requires output width 1, got {}",
                        layer.out
                    )));
                }
                let outputs: Vec<f64> = (0..z.rows()).map(|r| z[(r, 0)]).collect();
                return Ok((outputs, ForwardCache { acts }));
            }
        }
        unreachable!("layer list is non-empty")
    }

    /// Exact gradients of `sum_r output_grads[r] * f(row r)` with respect to
    /// every parameter. `cache` must come from a matching [`Mlp::forward`].
    pub fn backward(&self, cache: &ForwardCache, output_grads: &[f64]) -> Result<MlpGrads> {
        if cache.acts.len() != self.layers.len() {
            return Err(MmotError::InvalidArgument(
                "forward cache does not match this network".into(),
            ));
        }
        let batch = cache.acts[0].rows();
        if output_grads.len() != batch {
            return Err(MmotError::InvalidArgument(format!(
                "{} output grads for a batch of {batch}",
                output_grads.len()
            )));
        }
        let mut gw = vec![Mat::zeros(0, 0); self.layers.len()];
        let mut gb = vec![Vec::new(); self.layers.len()];
        // Delta for the scalar output layer: the raw output grads.
        let mut delta = Mat::from_vec(batch, 1, output_grads.to_vec());
        for l in (0..self.layers.len()).rev() {
            // dW_l = delta^T * acts[l]; db_l = column sums of delta.
            gw[l] = delta.matmul_tn(&cache.acts[l]);
            let mut db = vec![0.0; self.layers[l].out];
            for r in 0..batch {
                for (j, slot) in db.iter_mut().enumerate() {
                    *slot += delta[(r, j)];
                }
            }
            gb[l] = db;
            if l > 0 {
                let w = self.layer_w_mat(l);
                let mut prev = delta.matmul(&w);
                // ReLU gate: zero wherever the forward activation was <= 0
                // (subgradient at exactly 0 taken as 0).
                let act = &cache.acts[l];
                for r in 0..batch {
                    let arow = act.row(r);
                    let prow = prev.row_mut(r);
                    for (j, slot) in prow.iter_mut().enumerate() {
                        if arow[j] <= 0.0 {
                            *slot = 0.0;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(MlpGrads { w: gw, b: gb })
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

impl MlpGrads {
    /// Sum of squared entries across all parameters.
    pub fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        for m in &self.w {
            for v in m.as_slice() {
                s += v * v;
            }
        }
        for b in &self.b {
            for v in b {
                s += v * v;
            }
        }
        s
    }

    /// Scales every gradient entry in place.
    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.w {
            for v in m.as_mut_slice() {
                *v *= factor;
            }
        }
        for b in &mut self.b {
            for v in b {
                *v *= factor;
            }
        }
    }
}

/// Clips the joint global L2 norm of a set of network gradients to
/// `max_norm`, scaling all gradients by the same factor when the norm
/// exceeds it. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [MlpGrads], max_norm: f64) -> f64 {
    let norm = grads.iter().map(MlpGrads::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(f);
        }
    }
    norm
}

/// Adam accumulators for one network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    /// Shared step counter; increment once per optimization step via
    /// [`AdamState::advance`] before calling [`AdamState::apply`].
    pub t: u64,
}

/// Adam hyperparameters (the optimizer's conventional defaults).
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator stabilizer.
pub const ADAM_DELTA: f64 = 1e-8;

impl AdamState {
    /// Zero state shaped like the given network.
    pub fn new(net: &Mlp) -> Self {
        let m_w = net.layers().iter().map(|l| vec![0.0; l.w.len()]).collect();
        let v_w = net.layers().iter().map(|l| vec![0.0; l.w.len()]).collect();
        let m_b = net.layers().iter().map(|l| vec![0.0; l.b.len()]).collect();
        let v_b = net.layers().iter().map(|l| vec![0.0; l.b.len()]).collect();
        AdamState {
            m_w,
            v_w,
            m_b,
            v_b,
            t: 0,
        }
    }

    /// Increments the shared step counter (call once per optimization step,
    /// before applying the step to each network).
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// One Adam descent step: `p -= lr * mhat / (sqrt(vhat) + delta)` with
    /// bias-corrected moments. A maximizing caller negates its gradients
    /// first. Requires `advance` to have been called at least once.
    pub fn apply(&mut self, net: &mut Mlp, grads: &MlpGrads, lr: f64) {
        assert!(self.t > 0, "advance() must precede apply()");
        let b1c = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2c = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let gl = grads.w[l].as_slice();
            for (idx, p) in layer.w.iter_mut().enumerate() {
                let g = gl[idx];
                let m = &mut self.m_w[l][idx];
                let v = &mut self.v_w[l][idx];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / b1c) / ((*v / b2c).sqrt() + ADAM_DELTA);
            }
            for (idx, p) in layer.b.iter_mut().enumerate() {
                let g = grads.b[l][idx];
                let m = &mut self.m_b[l][idx];
                let v = &mut self.v_b[l][idx];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / b1c) / ((*v / b2c).sqrt() + ADAM_DELTA);
            }
        }
    }
}

/// Which mini-batch objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// The aligned-tuple objective: one exponential term per shared sample
    /// index. The default.
    Aligned,
    /// The all-tuples (U-statistic) objective, evaluated through the trace of
    /// scaling-matrix products. Circle-shaped graphs only; trades the
    /// aligned estimator's small-sample bias for a product-measure average.
    UstatCircle,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Global gradient-norm clip across all networks.
    pub clip_norm: f64,
    /// Multiplicative learning-rate decay factor.
    pub decay_factor: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    /// Mini-batch size (capped at n during training).
    pub batch_size: usize,
    /// Total epochs.
    pub epochs: usize,
    /// Seed for initialization and shuffling streams.
    pub seed: u64,
    /// Mini-batch objective variant.
    pub estimator: Estimator,
    /// Chunk size for full-dataset evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-5,
            clip_norm: 0.1,
            decay_factor: 0.5,
            decay_every: 5,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            estimator: Estimator::Aligned,
            eval_chunk: 4096,
        }
    }
}

impl TrainConfig {
    /// Learning rate at a 0-based epoch:
    /// `lr0 * decay_factor^floor(epoch / decay_every)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    /// Hidden widths for an input dimension `d`: both hidden layers have
    /// `10 * min(10 d, 80)` units.
    pub fn hidden_sizes(d: usize) -> [usize; 2] {
        let k = (10 * d).min(80);
        [10 * k, 10 * k]
    }

    /// Full width list `[d, hidden, hidden, 1]` for input dimension `d`.
    pub fn layer_sizes(d: usize) -> Vec<usize> {
        let [h1, h2] = Self::hidden_sizes(d);
        vec![d, h1, h2, 1]
    }

    /// Rejects non-finite or non-positive hyperparameters before training.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(MmotError::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.lr0
            )));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(MmotError::InvalidArgument(format!(
                "clip norm must be positive and finite, got {}",
                self.clip_norm
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(MmotError::InvalidArgument(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(MmotError::InvalidArgument(
                "decay interval must be at least 1 epoch".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(MmotError::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(MmotError::InvalidArgument(
                "training needs at least 1 epoch".into(),
            ));
        }
        if self.eval_chunk == 0 {
            return Err(MmotError::InvalidArgument(
                "evaluation chunk size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    nets: Vec<Mlp>,
}

/// Current checkpoint format version.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Saves a set of networks to the versioned JSON checkpoint format.
pub fn save_checkpoint(nets: &[Mlp], path: &Path) -> Result<()> {
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_FORMAT_VERSION,
        nets: nets.to_vec(),
    };
    let json = serde_json::to_string(&doc)
        .map_err(|e| MmotError::Format(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads networks from a checkpoint file, validating version and shapes.
pub fn load_checkpoint(path: &Path) -> Result<Vec<Mlp>> {
    let text = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&text)
        .map_err(|e| MmotError::Format(format!("malformed checkpoint: {e}")))?;
    if doc.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(MmotError::Format(format!(
            "unsupported checkpoint version {}",
            doc.format_version
        )));
    }
    doc.nets
        .into_iter()
        .map(|net| Mlp::from_layers(net.layers))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn linear1(w: f64, b: f64) -> Mlp {
        Mlp::from_layers(vec![Layer {
            out: 1,
            inp: 1,
            w: vec![w],
            b: vec![b],
        }])
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::from_layers(vec![
            Layer {
                out: 3,
                inp: 2,
                w: vec![0.0; 6],
                b: vec![0.0; 3],
            },
            Layer {
                out: 1,
                inp: 3,
                w: vec![0.0; 3],
                b: vec![0.0],
            },
        ])
        .unwrap();
        let batch = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let (out, _) = net.forward(&batch).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let net = linear1(2.0, 1.0);
        let (out, _) = net.forward(&Mat::from_vec(1, 1, vec![3.0])).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn relu_gates_negative_preactivations() {
        let net = Mlp::from_layers(vec![
            Layer {
                out: 1,
                inp: 1,
                w: vec![1.0],
                b: vec![-1.0],
            },
            Layer {
                out: 1,
                inp: 1,
                w: vec![1.0],
                b: vec![0.0],
            },
        ])
        .unwrap();
        let (out, _) = net.forward(&Mat::from_vec(1, 1, vec![0.5])).unwrap();
        assert_eq!(out, vec![0.0]);
        let (out2, _) = net.forward(&Mat::from_vec(1, 1, vec![2.0])).unwrap();
        assert_eq!(out2, vec![1.0]);
    }

    #[test]
    fn backward_zero_grads_give_zero() {
        let mut rng = derive_rng(1, "test-init", 0);
        let net = Mlp::init(&[3, 8, 8, 1], &mut rng);
        let batch = Mat::from_vec(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let (_, cache) = net.forward(&batch).unwrap();
        let g = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert_eq!(g.sq_norm(), 0.0);
    }

    #[test]
    fn backward_affine_layer_matches_hand_derivative() {
        let net = linear1(2.0, 1.0);
        let (_, cache) = net.forward(&Mat::from_vec(1, 1, vec![3.0])).unwrap();
        let g = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.w[0][(0, 0)], 3.0);
        assert_eq!(g.b[0][0], 1.0);
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        let mut rng = derive_rng(42, "fd-test", 0);
        let sizes = [3usize, 6, 5, 1];
        let net = Mlp::init(&sizes, &mut rng);
        let batch = Mat::from_fn(4, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let grads_out: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let (_, cache) = net.forward(&batch).unwrap();
        let analytic = net.backward(&cache, &grads_out).unwrap();
        let eval = |net: &Mlp| {
            let (out, _) = net.forward(&batch).unwrap();
            out.iter().zip(&grads_out).map(|(o, g)| o * g).sum::<f64>()
        };
        let h = 1e-5;
        let mut checked = 0usize;
        for l in 0..net.layers().len() {
            for idx in 0..net.layers()[l].w.len() {
                let mut plus = net.clone();
                plus.layers[l].w[idx] += h;
                let mut minus = net.clone();
                minus.layers[l].w[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.w[l].as_slice()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "layer {l} w[{idx}]: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
            for idx in 0..net.layers()[l].b.len() {
                let mut plus = net.clone();
                plus.layers[l].b[idx] += h;
                let mut minus = net.clone();
                minus.layers[l].b[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.b[l][idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "layer {l} b[{idx}]: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut g = vec![MlpGrads {
            w: vec![Mat::from_vec(1, 2, vec![0.03, 0.04])],
            b: vec![vec![0.0]],
        }];
        let norm = clip_global_norm(&mut g, 0.1);
        assert!((norm - 0.05).abs() < 1e-15);
        assert_eq!(g[0].w[0].as_slice(), &[0.03, 0.04]);
    }

    #[test]
    fn clip_rescales_to_the_threshold() {
        let mut g = vec![MlpGrads {
            w: vec![Mat::from_vec(1, 2, vec![3.0, 4.0])],
            b: vec![vec![0.0]],
        }];
        let norm = clip_global_norm(&mut g, 0.1);
        assert!((norm - 5.0).abs() < 1e-15);
        let got = g[0].w[0].as_slice();
        assert!((got[0] - 0.06).abs() < 1e-15);
        assert!((got[1] - 0.08).abs() < 1e-15);
        let post = g.iter().map(MlpGrads::sq_norm).sum::<f64>().sqrt();
        assert!(post <= 0.1 + 1e-12);
    }

    #[test]
    fn clip_zero_gradients_is_safe() {
        let mut g = vec![MlpGrads {
            w: vec![Mat::zeros(2, 2)],
            b: vec![vec![0.0, 0.0]],
        }];
        clip_global_norm(&mut g, 0.1);
        assert_eq!(g[0].sq_norm(), 0.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_fixed() {
        let mut net = linear1(0.7, -0.3);
        let mut st = AdamState::new(&net);
        let g = MlpGrads {
            w: vec![Mat::zeros(1, 1)],
            b: vec![vec![0.0]],
        };
        st.advance();
        st.apply(&mut net, &g, 1e-3);
        assert_eq!(net.layers()[0].w[0], 0.7);
        assert_eq!(net.layers()[0].b[0], -0.3);
    }

    #[test]
    fn adam_first_step_is_nearly_lr_sized() {
        for g0 in [0.37, -2.4, 1e4] {
            let mut net = linear1(1.0, 0.0);
            let mut st = AdamState::new(&net);
            let g = MlpGrads {
                w: vec![Mat::from_vec(1, 1, vec![g0])],
                b: vec![vec![0.0]],
            };
            let lr = 5e-5;
            st.advance();
            st.apply(&mut net, &g, lr);
            let update = 1.0 - net.layers()[0].w[0];
            // Bias-corrected first step: lr * g/(|g| + delta), so the size is
            // within [0.999 lr, lr] and the sign follows the gradient.
            assert!(update.signum() == g0.signum());
            assert!(update.abs() <= lr && update.abs() >= 0.999 * lr, "{update}");
        }
    }

    #[test]
    fn adam_two_steps_match_scalar_recursion() {
        let mut net = linear1(0.5, 0.0);
        let mut st = AdamState::new(&net);
        let lr = 1e-3;
        // Independent scalar recursion of the same update rule.
        let mut p = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 1.0_f64), (2, -1.0)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9_f64.powi(t));
            let vhat = v / (1.0 - 0.999_f64.powi(t));
            p -= lr * mhat / (vhat.sqrt() + 1e-8);
            let grads = MlpGrads {
                w: vec![Mat::from_vec(1, 1, vec![g])],
                b: vec![vec![0.0]],
            };
            st.advance();
            st.apply(&mut net, &grads, lr);
        }
        assert!((net.layers()[0].w[0] - p).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_matches_the_stepwise_rule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 5e-5);
        assert_eq!(cfg.lr_at_epoch(4), 5e-5);
        assert!((cfg.lr_at_epoch(10) - 1.25e-5).abs() < 1e-20);
    }

    #[test]
    fn hidden_width_rule() {
        assert_eq!(TrainConfig::hidden_sizes(1), [100, 100]);
        assert_eq!(TrainConfig::hidden_sizes(5), [500, 500]);
        assert_eq!(TrainConfig::hidden_sizes(8), [800, 800]);
        assert_eq!(TrainConfig::hidden_sizes(100), [800, 800]);
        assert_eq!(TrainConfig::layer_sizes(5), vec![5, 500, 500, 1]);
    }

    #[test]
    fn last_layer_is_positively_homogeneous() {
        let mut rng = derive_rng(3, "homog", 0);
        let net = Mlp::init(&[2, 4, 1], &mut rng);
        let batch = Mat::from_vec(2, 2, vec![0.3, -0.8, 1.2, 0.4]);
        let (out, _) = net.forward(&batch).unwrap();
        let mut scaled = net.clone();
        let last = scaled.layers.len() - 1;
        for v in &mut scaled.layers[last].w {
            *v *= 3.0;
        }
        for v in &mut scaled.layers[last].b {
            *v *= 3.0;
        }
        let (out3, _) = scaled.forward(&batch).unwrap();
        for (a, b) in out.iter().zip(&out3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = derive_rng(9, "init", 4);
        let mut r2 = derive_rng(9, "init", 4);
        let a = Mlp::init(&[3, 10, 1], &mut r1);
        let b = Mlp::init(&[3, 10, 1], &mut r2);
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.w, lb.w);
        }
        // He bound: all weights within the fan-in limit.
        let lim0 = (6.0_f64 / 3.0).sqrt();
        assert!(a.layers()[0].w.iter().all(|v| v.abs() <= lim0));
        assert!(a.layers()[0].b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut rng = derive_rng(5, "ckpt", 0);
        let nets = vec![Mlp::init(&[2, 5, 1], &mut rng), Mlp::init(&[3, 4, 1], &mut rng)];
        save_checkpoint(&nets, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in nets.iter().zip(&loaded) {
            for (la, lb) in a.layers().iter().zip(b.layers()) {
                assert_eq!(la.w, lb.w);
                assert_eq!(la.b, lb.b);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, r#"{"format_version":99,"nets":[]}"#).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MmotError::Format(_))
        ));
    }
}
