//! Upper bounds on the Lipschitz constants of logit differences via
//! layer-wise spectral-norm products computed by power iteration.
//!
//! Training runs a fixed number of iterations per batch with persisted
//! states; an unconverged estimate can under-approximate the true norm, so
//! only bounds produced in convergence mode count as certificates.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{GloroError, Result};
use crate::net::{conv_apply, conv_apply_transpose, ConvMeta, Layer, Network};

/// A linear operator with apply and transpose-apply, as seen by the power
/// method.
pub trait LinearOp {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

pub struct DenseOp<'a> {
    pub weights: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl LinearOp for DenseOp<'_> {
    fn in_dim(&self) -> usize {
        self.cols
    }

    fn out_dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                self.weights[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            for c in 0..self.cols {
                out[c] += self.weights[r * self.cols + c] * yr;
            }
        }
        out
    }
}

pub struct ConvOp<'a> {
    pub kernel: &'a [f64],
    pub meta: ConvMeta,
}

impl LinearOp for ConvOp<'_> {
    fn in_dim(&self) -> usize {
        self.meta.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.meta.out_dim()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        conv_apply(self.kernel, x, &self.meta)
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        conv_apply_transpose(self.kernel, y, &self.meta)
    }
}

/// Persisted power-iteration state for one linear operator.
#[derive(Debug, Clone)]
pub struct PowerState {
    /// Current right-singular-vector iterate, unit l2 norm.
    pub u: Vec<f64>,
    pub iterations: u64,
    /// Last estimate of the spectral norm (||A u||, a Rayleigh estimate).
    pub estimate: f64,
    /// Set when the operator maps the iterate to zero.
    pub zero_operator: bool,
    /// Set once successive estimates differ by less than the tolerance.
    pub converged: bool,
}

impl PowerState {
    /// Fresh state with a unit iterate drawn from a fixed-seed PRNG.
    pub fn fresh(dim: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&u);
        if n == 0.0 {
            u[0] = 1.0;
        } else {
            u.iter_mut().for_each(|v| *v /= n);
        }
        PowerState { u, iterations: 0, estimate: 0.0, zero_operator: false, converged: false }
    }

    /// Left singular vector estimate paired with the current iterate.
    pub fn left_vector(&self, op: &dyn LinearOp) -> Vec<f64> {
        let mut w = op.apply(&self.u);
        let n = norm(&w);
        if n > 0.0 {
            w.iter_mut().for_each(|v| *v /= n);
        }
        w
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy)]
pub enum IterMode {
    /// Exactly this many iterations (training: 2 per batch, persisted).
    Fixed(usize),
    /// Iterate until successive estimates differ by less than `tol`.
    Converge { tol: f64, max_iters: usize },
}

pub const CERT_TOL: f64 = 1e-9;

impl IterMode {
    pub fn converge() -> Self {
        IterMode::Converge { tol: CERT_TOL, max_iters: 100_000 }
    }
}

/// One power step on A^T A: returns the estimate ||A u|| for the incoming
/// unit iterate and replaces it with normalize(A^T A u).
fn power_step(op: &dyn LinearOp, state: &mut PowerState) -> f64 {
    let w = op.apply(&state.u);
    let est = norm(&w);
    if est == 0.0 {
        state.zero_operator = true;
        state.estimate = 0.0;
        return 0.0;
    }
    let z = op.apply_transpose(&w);
    let zn = norm(&z);
    if zn > 0.0 {
        state.u = z.iter().map(|v| v / zn).collect();
    }
    state.iterations += 1;
    state.estimate = est;
    est
}

/// Power-method spectral norm estimate of `op`.
///
/// The estimate never exceeds the true norm beyond floating-point error;
/// under-estimation is possible before convergence.
pub fn spectral_norm(op: &dyn LinearOp, state: &mut PowerState, mode: IterMode) -> f64 {
    match mode {
        IterMode::Fixed(iters) => {
            for _ in 0..iters {
                power_step(op, state);
                if state.zero_operator {
                    return 0.0;
                }
            }
            state.estimate
        }
        IterMode::Converge { tol, max_iters } => {
            let mut prev = state.estimate;
            for _ in 0..max_iters {
                let est = power_step(op, state);
                if state.zero_operator {
                    state.converged = true;
                    return 0.0;
                }
                if (est - prev).abs() < tol {
                    state.converged = true;
                    return est;
                }
                prev = est;
            }
            state.estimate
        }
    }
}

/// Spectral norm of the linear operator induced by a conv layer on a given
/// input shape.
pub fn conv_spectral_norm(
    layer: &Layer,
    input_shape: &[usize],
    state: &mut PowerState,
    mode: IterMode,
) -> Result<f64> {
    match layer {
        Layer::Conv { kernel, out_c, in_c, kh, kw, stride, .. } => {
            let meta = ConvMeta::new(input_shape, *out_c, *in_c, *kh, *kw, *stride)?;
            let op = ConvOp { kernel, meta };
            Ok(spectral_norm(&op, state, mode))
        }
        _ => Err(GloroError::InvalidArgument("conv_spectral_norm expects a conv layer".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    /// K[j][i] = L_pen * ||w_j - w_i|| with L_pen the product of spectral
    /// norms of all layers before the final dense layer. The default.
    Pairwise,
    /// K[j][i] = sqrt(2) * product over all layers including the final one.
    /// Looser uniform bound, kept for ablation.
    WholeProduct,
}

/// Per-class-pair Lipschitz upper bounds.
#[derive(Debug, Clone)]
pub struct LipschitzBounds {
    pub l_pen: f64,
    /// Row-major C x C, symmetric, zero diagonal.
    pub k: Vec<f64>,
    pub num_classes: usize,
    pub mode: BoundMode,
    /// True when every contributing power state had converged.
    pub converged: bool,
}

impl LipschitzBounds {
    pub fn pair(&self, j: usize, i: usize) -> f64 {
        self.k[j * self.num_classes + i]
    }

    /// Exact bounds for a network with no hidden layers.
    pub fn exact_linear(net: &Network) -> Result<Self> {
        if net.layers.len() != 1 {
            return Err(GloroError::InvalidArgument(
                "exact bounds require a single dense layer".into(),
            ));
        }
        let (w, rows, cols) = net.final_dense();
        let c = net.num_classes;
        debug_assert_eq!(rows, c);
        let mut k = vec![0.0; c * c];
        for j in 0..c {
            for i in 0..c {
                if i == j {
                    continue;
                }
                let d: f64 = (0..cols)
                    .map(|x| (w[j * cols + x] - w[i * cols + x]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                k[j * c + i] = d;
            }
        }
        Ok(LipschitzBounds { l_pen: 1.0, k, num_classes: c, mode: BoundMode::Pairwise, converged: true })
    }
}

/// Power states for every parametric layer of a network.
#[derive(Debug, Clone)]
pub struct BoundStates {
    /// Indexed like `net.layers`; `None` for layers without parameters.
    pub per_layer: Vec<Option<PowerState>>,
    pub seed: u64,
}

impl BoundStates {
    pub fn init(net: &Network, seed: u64) -> Result<Self> {
        let shapes = net.activation_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_layer = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                layer.has_params().then(|| {
                    let dim: usize = shapes[i].iter().product();
                    PowerState::fresh(dim, &mut rng)
                })
            })
            .collect();
        Ok(BoundStates { per_layer, seed })
    }

    pub fn all_converged(&self) -> bool {
        self.per_layer.iter().flatten().all(|s| s.converged)
    }
}

/// Runs power iteration on every parametric layer, returning per-layer
/// spectral norm estimates (1.0 for MinMax and downsample layers).
pub fn update_states(net: &Network, states: &mut BoundStates, mode: IterMode) -> Result<Vec<f64>> {
    let shapes = net.activation_shapes()?;
    let mut sigmas = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let sigma = match layer {
            Layer::Dense { weights, rows, cols, .. } => {
                let op = DenseOp { weights, rows: *rows, cols: *cols };
                let state = states.per_layer[i].as_mut().unwrap();
                spectral_norm(&op, state, mode)
            }
            Layer::Conv { .. } => {
                let state = states.per_layer[i].as_mut().unwrap();
                conv_spectral_norm(layer, &shapes[i], state, mode)?
            }
            // Per-pair permutations and value-preserving reshapes are
            // exactly 1-Lipschitz.
            Layer::MinMax | Layer::InvertibleDownsample { .. } => 1.0,
        };
        sigmas.push(sigma);
    }
    Ok(sigmas)
}

/// Per-class-pair Lipschitz bounds for the whole network.
pub fn pair_bounds(net: &Network, states: &BoundStates, mode: BoundMode) -> Result<LipschitzBounds> {
    let c = net.num_classes;
    let n_layers = net.layers.len();
    let sigma_of = |i: usize| -> f64 {
        match &states.per_layer[i] {
            Some(s) => s.estimate,
            None => 1.0,
        }
    };
    let l_pen: f64 = (0..n_layers - 1).map(sigma_of).product();
    let converged = states.all_converged();
    let mut k = vec![0.0; c * c];
    match mode {
        BoundMode::Pairwise => {
            let (w, _, cols) = net.final_dense();
            for j in 0..c {
                for i in (j + 1)..c {
                    let d: f64 = (0..cols)
                        .map(|x| (w[j * cols + x] - w[i * cols + x]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let bound = l_pen * d;
                    k[j * c + i] = bound;
                    k[i * c + j] = bound;
                }
            }
        }
        BoundMode::WholeProduct => {
            let whole: f64 = (0..n_layers).map(sigma_of).product();
            let bound = std::f64::consts::SQRT_2 * whole;
            for j in 0..c {
                for i in 0..c {
                    if i != j {
                        k[j * c + i] = bound;
                    }
                }
            }
        }
    }
    Ok(LipschitzBounds { l_pen, k, num_classes: c, mode, converged })
}

/// Convenience: converged bounds for a frozen network.
pub fn converged_bounds(net: &Network, seed: u64, mode: BoundMode) -> Result<LipschitzBounds> {
    let mut states = BoundStates::init(net, seed)?;
    update_states(net, &mut states, IterMode::converge())?;
    pair_bounds(net, &states, mode)
}
