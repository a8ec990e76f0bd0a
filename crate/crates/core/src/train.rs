//! Gradient-based training of the certified heads.
//!
//! Each batch runs a fixed number of power iterations (persisted states),
//! rebuilds the Lipschitz bounds on the tape through the final Rayleigh
//! quotient (iterate vectors treated as constants), constructs the head,
//! and takes an Adam step. Bounds used during training may
//! under-approximate; certificates are only issued from converged bounds.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::certify::{admissible_ks, Guarantee, NEG_SENTINEL};
use crate::data::LabeledDataset;
use crate::error::{GloroError, Result};
use crate::eval::{guarantee_clean_accuracy, rejection_rate};
use crate::lipschitz::{
    pair_bounds, update_states, BoundMode, BoundStates, IterMode,
};
use crate::net::{Layer, Network};
use crate::tape::{forward_on_tape, record_params, NodeId, Tape, TapeParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    /// Fraction of training after which the decay begins, in (0, 1].
    pub decay_onset: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { start: 1e-3, end: 1e-6, decay_onset: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleShape {
    Linear,
    Logarithmic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradesSchedule {
    pub start: f64,
    pub end: f64,
    pub shape: ScheduleShape,
    /// Fraction of training at which the final value is reached, in (0, 1].
    pub onset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    Trades(TradesSchedule),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub loss: LossKind,
    pub power_iters: usize,
    pub eps: f64,
    pub guarantee: Guarantee,
    pub seed: u64,
    /// Compute converged-bound VRA every this many epochs (and at the end).
    pub eval_every: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(GloroError::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr.start <= 0.0 && self.lr.start != 0.0 {
            return Err(GloroError::Config("learning rate must be non-negative".into()));
        }
        if !(0.0 < self.lr.decay_onset && self.lr.decay_onset <= 1.0) {
            return Err(GloroError::Config("lr decay onset must be in (0, 1]".into()));
        }
        if let LossKind::Trades(t) = &self.loss {
            if t.start < 0.0 || t.end < 0.0 {
                return Err(GloroError::Config("TRADES lambda must be non-negative".into()));
            }
            if !(0.0 < t.onset && t.onset <= 1.0) {
                return Err(GloroError::Config("TRADES onset must be in (0, 1]".into()));
            }
        }
        if self.eps < 0.0 {
            return Err(GloroError::Config("eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Constant before the decay onset, then geometric interpolation reaching
/// `end` exactly on the final epoch.
pub fn lr_schedule(epoch: usize, epochs: usize, s: &LrSchedule) -> f64 {
    let decay_start = (s.decay_onset * epochs as f64).round() as usize;
    if epoch < decay_start || decay_start + 1 >= epochs {
        return s.start;
    }
    let span = (epochs - 1 - decay_start) as f64;
    let t = (epoch - decay_start) as f64 / span;
    s.start * (s.end / s.start).powf(t)
}

/// Linear shape: affine from `start` to `end`, reaching `end` at the onset
/// fraction of training, constant after. Logarithmic shape: monotone with
/// decreasing increments (the shortfall from `end` decays geometrically),
/// same endpoints.
pub fn lambda_schedule(epoch: usize, epochs: usize, s: &TradesSchedule) -> f64 {
    if epochs <= 1 || s.start == s.end {
        return if epoch + 1 >= epochs { s.end } else { s.start };
    }
    let t_end = ((s.onset * (epochs - 1) as f64).round()).max(1.0);
    let t = (epoch as f64).min(t_end) / t_end;
    match s.shape {
        ScheduleShape::Linear => s.start + (s.end - s.start) * t,
        ScheduleShape::Logarithmic => {
            let delta = s.start;
            let full = s.end - s.start + delta;
            if delta <= 0.0 || full <= 0.0 {
                // Degenerate start; fall back to the linear shape.
                return s.start + (s.end - s.start) * t;
            }
            s.end + delta - full * (delta / full).powf(t)
        }
    }
}

/// Negative log softmax of the augmented logits at the label index.
pub fn loss_ce_augmented(aug_logits: &[f64], label: usize) -> Result<f64> {
    if label + 1 >= aug_logits.len() + 1 || label >= aug_logits.len() - 1 {
        return Err(GloroError::InvalidArgument(format!(
            "label {label} out of range (bottom is never the target)"
        )));
    }
    Ok(cross_entropy_value(aug_logits, label))
}

/// CE on the clean logits plus lambda times CE on the augmented logits,
/// with the true label as target in both terms and zero bottom mass.
pub fn loss_trades(
    clean_logits: &[f64],
    aug_logits: &[f64],
    label: usize,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(GloroError::InvalidArgument("lambda must be non-negative".into()));
    }
    if label >= clean_logits.len() {
        return Err(GloroError::InvalidArgument(format!("label {label} out of range")));
    }
    Ok(cross_entropy_value(clean_logits, label) + lambda * cross_entropy_value(aug_logits, label))
}

fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

// ---------------------------------------------------------------------------
// Optimizer

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment accumulators.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One update over all parameter buffers; `grads` mirrors `params`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (pi, param) in params.iter_mut().enumerate() {
            let g = grads[pi];
            for i in 0..param.len() {
                self.m[pi][i] = ADAM_BETA1 * self.m[pi][i] + (1.0 - ADAM_BETA1) * g[i];
                self.v[pi][i] = ADAM_BETA2 * self.v[pi][i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = self.m[pi][i] / bc1;
                let vhat = self.v[pi][i] / bc2;
                param[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Network initialization

/// Dense network with min-max activations between hidden layers and
/// fan-in-scaled uniform initialization from the recorded seed.
pub fn init_dense_net(
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    seed: u64,
) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut fan_in = input_dim;
    for (i, &width) in hidden.iter().chain(std::iter::once(&num_classes)).enumerate() {
        let a = (1.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..width * fan_in).map(|_| rng.gen_range(-a..a)).collect();
        let b = vec![0.0; width];
        if i > 0 {
            layers.push(Layer::MinMax);
        }
        layers.push(Layer::dense(w, width, fan_in, b).unwrap());
        fan_in = width;
    }
    let mut net = Network::new(layers, vec![input_dim]).unwrap();
    net.metadata.power_seed = Some(seed);
    net
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, serde::Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: Option<f64>,
    pub loss: f64,
    pub clean_acc: f64,
    pub vra: Option<f64>,
    pub rejection_rate: Option<f64>,
}

pub struct TrainResult {
    pub net: Network,
    pub history: Vec<HistoryRow>,
    pub bound_states: BoundStates,
}

pub fn save_history_csv(history: &[HistoryRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("epoch,lr,lambda,loss,clean_acc,vra,rejection_rate\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch,
            row.lr,
            opt(row.lambda),
            row.loss,
            row.clean_acc,
            opt(row.vra),
            opt(row.rejection_rate),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Node handles for one batch's Lipschitz bound graph.
struct BoundNodes {
    /// K_ji nodes for j < i, indexed by (j, i).
    pairs: Vec<Vec<Option<NodeId>>>,
}

impl BoundNodes {
    fn pair(&self, j: usize, i: usize) -> NodeId {
        if j < i {
            self.pairs[j][i].unwrap()
        } else {
            self.pairs[i][j].unwrap()
        }
    }
}

/// Rebuilds the pairwise bounds on the tape: sigma via the Rayleigh
/// quotient with the persisted iterate as a constant, L_pen as the product
/// over non-final parametric layers, K_ji = L_pen * ||w_j - w_i||.
fn bound_nodes_on_tape(
    tape: &mut Tape,
    net: &Network,
    params: &TapeParams,
    states: &BoundStates,
) -> Result<BoundNodes> {
    let shapes = net.activation_shapes()?;
    let n_layers = net.layers.len();
    let mut sigma_nodes = Vec::new();
    for (li, layer) in net.layers.iter().enumerate().take(n_layers - 1) {
        let Some(state) = &states.per_layer[li] else { continue };
        let (w_node, _) = params.per_layer[li].unwrap();
        let sigma = match layer {
            Layer::Dense { weights, rows, cols, .. } => {
                let op = crate::lipschitz::DenseOp { weights, rows: *rows, cols: *cols };
                let left = state.left_vector(&op);
                let u = tape.leaf(state.u.clone());
                let l = tape.leaf(left);
                let wu = tape.matvec(w_node, u, *rows, *cols);
                tape.dot(l, wu)
            }
            Layer::Conv { kernel, out_c, in_c, kh, kw, stride, .. } => {
                let meta = crate::net::ConvMeta::new(&shapes[li], *out_c, *in_c, *kh, *kw, *stride)?;
                let op = crate::lipschitz::ConvOp { kernel, meta };
                let left = state.left_vector(&op);
                let u = tape.leaf(state.u.clone());
                let l = tape.leaf(left);
                let ku = tape.conv(w_node, u, meta);
                tape.dot(l, ku)
            }
            _ => unreachable!("states only exist for parametric layers"),
        };
        sigma_nodes.push(sigma);
    }
    let l_pen = if sigma_nodes.is_empty() {
        tape.constant(1.0)
    } else {
        tape.prod_many(&sigma_nodes)
    };
    let c = net.num_classes;
    let (_, _, cols) = net.final_dense();
    let (final_w, _) = params.per_layer[n_layers - 1].unwrap();
    let mut pairs = vec![vec![None; c]; c];
    for j in 0..c {
        for i in (j + 1)..c {
            let d = tape.row_diff_norm(final_w, j, i, cols);
            pairs[j][i] = Some(tape.mul(l_pen, d));
        }
    }
    Ok(BoundNodes { pairs })
}

/// The guarantee margin m(x) on the tape, given the float logits for
/// top-k set selection.
fn margin_on_tape(
    tape: &mut Tape,
    logit_scalars: &[NodeId],
    logits: &[f64],
    bounds: &BoundNodes,
    eps: f64,
    guarantee: &Guarantee,
) -> NodeId {
    let c = logits.len();
    let ranking = crate::net::rank_classes(logits);
    let (ks, _) = admissible_ks(logits, guarantee);
    let mut mk_nodes = Vec::new();
    for &k in &ks {
        let (top, rest) = ranking.split_at(k);
        let mut mkj_nodes = Vec::with_capacity(k);
        for &j in top {
            let mut terms = Vec::with_capacity(c - k);
            for &i in rest {
                let kji = bounds.pair(j, i);
                let scaled = tape.scale(kji, eps);
                terms.push(tape.add(logit_scalars[i], scaled));
            }
            let worst = tape.max_many(&terms);
            mkj_nodes.push(tape.sub(logit_scalars[j], worst));
        }
        mk_nodes.push(tape.min_many(&mkj_nodes));
    }
    if mk_nodes.is_empty() {
        tape.constant(NEG_SENTINEL)
    } else {
        tape.max_many(&mk_nodes)
    }
}

/// Mean loss over a batch and its gradients, per layer as (weights, bias),
/// with the spectral iterates in `states` held fixed. Lambda `None` means
/// plain cross-entropy on the augmented logits; `Some` the TRADES form.
pub fn batch_loss_grads(
    net: &Network,
    points: &[&[f64]],
    labels: &[usize],
    eps: f64,
    guarantee: &Guarantee,
    states: &BoundStates,
    lambda: Option<f64>,
) -> Result<(f64, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
    if points.is_empty() || points.len() != labels.len() {
        return Err(GloroError::InvalidArgument(format!(
            "got {} points and {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let params = record_params(&mut tape, net);
    let bounds = bound_nodes_on_tape(&mut tape, net, &params, states)?;
    let mut sample_losses = Vec::with_capacity(points.len());
    for (p, &label) in points.iter().zip(labels) {
        let x = tape.leaf(p.to_vec());
        let logits_node = forward_on_tape(&mut tape, net, &params, x)?;
        let logits = tape.value(logits_node).to_vec();
        let c = logits.len();
        let scalars: Vec<NodeId> = (0..c).map(|i| tape.index(logits_node, i)).collect();
        let m = margin_on_tape(&mut tape, &scalars, &logits, &bounds, eps, guarantee);
        let top = tape.max_many(&scalars);
        let g_bot = tape.sub(top, m);
        let mut aug = scalars.clone();
        aug.push(g_bot);
        let loss = match lambda {
            None => tape.cross_entropy(&aug, label),
            Some(l) => {
                let clean = tape.cross_entropy(&scalars, label);
                let robust = tape.cross_entropy(&aug, label);
                let scaled = tape.scale(robust, l);
                tape.add(clean, scaled)
            }
        };
        sample_losses.push(loss);
    }
    let total = tape.sum_many(&sample_losses);
    let mean = tape.scale(total, 1.0 / points.len() as f64);
    let loss_value = tape.scalar(mean);
    let grads = tape.backward(mean)?;
    let per_layer = params
        .per_layer
        .iter()
        .map(|entry| {
            entry.map(|(w, b)| (grads.wrt(w).to_vec(), grads.wrt(b).to_vec()))
        })
        .collect();
    Ok((loss_value, per_layer))
}

pub fn train(net: Network, dataset: &LabeledDataset, config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    let mut net = net;
    if dataset.labels.iter().any(|&y| y >= net.num_classes) {
        return Err(GloroError::Data("dataset label out of range for network".into()));
    }
    if let Guarantee::Affinity(s) = &config.guarantee {
        if s.num_classes != net.num_classes {
            return Err(GloroError::Config(
                "affinity collection class count does not match network".into(),
            ));
        }
    }
    let power_seed = net.metadata.power_seed.unwrap_or(config.seed);
    let mut states = BoundStates::init(&net, power_seed)?;
    let shapes: Vec<usize> = net
        .layers
        .iter()
        .flat_map(|l| match l {
            Layer::Dense { rows, cols, .. } => vec![rows * cols, *rows],
            Layer::Conv { kernel, bias, .. } => vec![kernel.len(), bias.len()],
            _ => vec![],
        })
        .collect();
    let mut adam = Adam::new(&shapes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.epochs, &config.lr);
        let lambda = match &config.loss {
            LossKind::Trades(s) => Some(lambda_schedule(epoch, config.epochs, s)),
            LossKind::CrossEntropy => None,
        };
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            // Fixed power iterations per batch, persisted states.
            update_states(&net, &mut states, IterMode::Fixed(config.power_iters))?;

            let points: Vec<&[f64]> =
                batch.iter().map(|&idx| dataset.points[idx].as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&idx| dataset.labels[idx]).collect();
            let (loss_value, per_layer) = batch_loss_grads(
                &net,
                &points,
                &labels,
                config.eps,
                &config.guarantee,
                &states,
                lambda,
            )?;
            if !loss_value.is_finite() {
                return Err(GloroError::Diverged(format!(
                    "non-finite loss {loss_value} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            epoch_loss += loss_value;
            batches += 1.0;

            let mut param_slices: Vec<&mut [f64]> = Vec::new();
            let mut grad_slices: Vec<&[f64]> = Vec::new();
            for (li, layer) in net.layers.iter_mut().enumerate() {
                let Some((gw, gb)) = &per_layer[li] else { continue };
                match layer {
                    Layer::Dense { weights, bias, .. } => {
                        param_slices.push(weights);
                        grad_slices.push(gw);
                        param_slices.push(bias);
                        grad_slices.push(gb);
                    }
                    Layer::Conv { kernel, bias, .. } => {
                        param_slices.push(kernel);
                        grad_slices.push(gw);
                        param_slices.push(bias);
                        grad_slices.push(gb);
                    }
                    _ => {}
                }
            }
            adam.step(&mut param_slices, &grad_slices, lr);
        }

        let all_logits: Vec<Vec<f64>> =
            dataset.points.iter().map(|p| net.forward(p)).collect::<Result<_>>()?;
        let clean_acc = guarantee_clean_accuracy(&all_logits, &dataset.labels, &config.guarantee);
        let eval_now = config
            .eval_every
            .map(|every| every > 0 && ((epoch + 1) % every == 0 || epoch + 1 == config.epochs))
            .unwrap_or(false);
        let (vra, rej) = if eval_now {
            let mut converged = states.clone();
            update_states(&net, &mut converged, IterMode::converge())?;
            let b = pair_bounds(&net, &converged, BoundMode::Pairwise)?;
            let results: Vec<_> = all_logits
                .iter()
                .map(|l| crate::certify::certify_logits(l, &b, config.eps, &config.guarantee))
                .collect::<Result<_>>()?;
            let vra = crate::eval::affinity_vra(&results, &dataset.labels)?;
            (Some(vra), Some(rejection_rate(&results)))
        } else {
            (None, None)
        };
        history.push(HistoryRow {
            epoch,
            lr,
            lambda,
            loss: epoch_loss / batches.max(1.0),
            clean_acc,
            vra,
            rejection_rate: rej,
        });
    }

    net.metadata.epsilon = Some(config.eps);
    net.metadata.guarantee = Some(config.guarantee.kind().to_string());
    net.metadata.k = match &config.guarantee {
        Guarantee::Rtk { k } => Some(*k),
        _ => None,
    };
    net.metadata.affinity_sets = match &config.guarantee {
        Guarantee::Affinity(s) => Some(s.sets.clone()),
        _ => None,
    };
    net.metadata.power_seed = Some(power_seed);
    Ok(TrainResult { net, history, bound_states: states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_2d;

    #[test]
    fn lr_schedule_endpoints() {
        let s = LrSchedule { start: 1e-3, end: 1e-6, decay_onset: 0.5 };
        assert_eq!(lr_schedule(0, 200, &s), 1e-3);
        assert_eq!(lr_schedule(99, 200, &s), 1e-3);
        let final_lr = lr_schedule(199, 200, &s);
        assert!((final_lr - 1e-6).abs() < 1e-18, "{final_lr}");
        // Halfway through the decay: geometric interpolation.
        let mid = lr_schedule(149, 200, &s);
        let expect = 1e-3 * 1e-3f64.powf(49.0 / 99.0);
        assert!((mid - expect).abs() < 1e-12, "{mid} vs {expect}");
    }

    #[test]
    fn lambda_schedule_linear() {
        let s = TradesSchedule { start: 1.0, end: 1.2, shape: ScheduleShape::Linear, onset: 1.0 };
        assert_eq!(lambda_schedule(0, 200, &s), 1.0);
        assert!((lambda_schedule(199, 200, &s) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn lambda_schedule_log_half() {
        let s = TradesSchedule {
            start: 0.01,
            end: 1.2,
            shape: ScheduleShape::Logarithmic,
            onset: 0.5,
        };
        assert!((lambda_schedule(0, 200, &s) - 0.01).abs() < 1e-12);
        for epoch in 100..200 {
            assert!((lambda_schedule(epoch, 200, &s) - 1.2).abs() < 1e-12);
        }
        // Monotone with decreasing increments up to the onset.
        let mut prev = lambda_schedule(0, 200, &s);
        let mut prev_inc = f64::INFINITY;
        for epoch in 1..100 {
            let v = lambda_schedule(epoch, 200, &s);
            let inc = v - prev;
            assert!(inc > 0.0, "epoch {epoch} not increasing");
            assert!(inc <= prev_inc + 1e-12, "epoch {epoch} increment grew");
            prev_inc = inc;
            prev = v;
        }
    }

    #[test]
    fn ce_augmented_values() {
        // (3, 0, 0), label 0 -> -log(e^3 / (e^3 + 2))
        let v = loss_ce_augmented(&[3.0, 0.0, 0.0], 0).unwrap();
        assert!((v - 0.0949229564).abs() < 1e-8);
        let v = loss_ce_augmented(&[0.0, 0.0, 0.0], 0).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
        // Dominating bottom logit.
        let v = loss_ce_augmented(&[0.0, 0.0, 10.0], 0).unwrap();
        assert!((v - (10.0 + (1.0 + 2.0 * (-10.0f64).exp()).ln())).abs() < 1e-9);
        // Bottom is never the target.
        assert!(loss_ce_augmented(&[0.0, 0.0, 0.0], 2).is_err());
    }

    #[test]
    fn trades_values() {
        // lambda = 0 reduces to clean cross-entropy.
        let clean = [3.0, 0.0];
        let aug = [3.0, 0.0, 0.0];
        let l0 = loss_trades(&clean, &aug, 0, 0.0).unwrap();
        assert!((l0 - cross_entropy_value(&clean, 0)).abs() < 1e-15);
        // lambda = 1: CE_clean + CE_aug.
        let l1 = loss_trades(&clean, &aug, 0, 1.0).unwrap();
        let expect = cross_entropy_value(&clean, 0) + cross_entropy_value(&aug, 0);
        assert!((l1 - expect).abs() < 1e-15);
        assert!((l1 - 0.1435).abs() < 5e-4);
        // Linearity in lambda: d(loss)/d(lambda) is the augmented CE term.
        let l2 = loss_trades(&clean, &aug, 0, 2.0).unwrap();
        assert!((l2 - l1 - cross_entropy_value(&aug, 0)).abs() < 1e-12);
        assert!(loss_trades(&clean, &aug, 0, -0.1).is_err());
    }

    fn small_config(guarantee: Guarantee, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            lr: LrSchedule { start: 1e-2, end: 1e-3, decay_onset: 0.5 },
            loss: LossKind::CrossEntropy,
            power_iters: 2,
            eps: 0.1,
            guarantee,
            seed: 3,
            eval_every: None,
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = gen_synthetic_2d(1, 8, 0.0);
        let net = init_dense_net(2, &[8], 4, 5);
        let mut cfg = small_config(Guarantee::Rtk { k: 2 }, 1);
        cfg.lr = LrSchedule { start: 0.0, end: 0.0, decay_onset: 1.0 };
        cfg.batch_size = 32;
        let before = net.clone();
        let out = train(net, &ds, &cfg).unwrap();
        assert_eq!(before.layers, out.net.layers);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_synthetic_2d(1, 16, 0.2);
        let cfg = small_config(Guarantee::Standard, 3);
        let a = train(init_dense_net(2, &[8], 4, 5), &ds, &cfg).unwrap();
        let b = train(init_dense_net(2, &[8], 4, 5), &ds, &cfg).unwrap();
        assert_eq!(a.net.layers, b.net.layers);
    }

    #[test]
    fn training_reduces_loss() {
        let ds = gen_synthetic_2d(2, 32, 0.1);
        let cfg = small_config(Guarantee::Rtk { k: 2 }, 15);
        let out = train(init_dense_net(2, &[16], 4, 7), &ds, &cfg).unwrap();
        let first = out.history.first().unwrap().loss;
        let last = out.history.last().unwrap().loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(out.history.last().unwrap().clean_acc > 0.8);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // Loss through head + margins + Rayleigh bounds vs central
        // differences on a couple of weight entries.
        let ds = gen_synthetic_2d(4, 4, 0.1);
        let net = init_dense_net(2, &[8], 4, 9);
        let eps = 0.15;
        let guarantee = Guarantee::Rtk { k: 2 };
        let mut states = BoundStates::init(&net, 9).unwrap();
        update_states(&net, &mut states, IterMode::converge()).unwrap();

        let batch_loss = |net: &Network| -> f64 {
            // Converged iterates frozen; the tape path mirrors training.
            let mut tape = Tape::new();
            let params = record_params(&mut tape, net);
            let bounds = bound_nodes_on_tape(&mut tape, net, &params, &states).unwrap();
            let mut losses = Vec::new();
            for (p, &y) in ds.points.iter().zip(&ds.labels) {
                let x = tape.leaf(p.clone());
                let ln = forward_on_tape(&mut tape, net, &params, x).unwrap();
                let logits = tape.value(ln).to_vec();
                let scalars: Vec<NodeId> =
                    (0..logits.len()).map(|i| tape.index(ln, i)).collect();
                let m = margin_on_tape(&mut tape, &scalars, &logits, &bounds, eps, &guarantee);
                let top = tape.max_many(&scalars);
                let g_bot = tape.sub(top, m);
                let mut aug = scalars.clone();
                aug.push(g_bot);
                losses.push(tape.cross_entropy(&aug, y));
            }
            let total = tape.sum_many(&losses);
            tape.scalar(total)
        };

        let mut tape = Tape::new();
        let params = record_params(&mut tape, &net);
        let bounds = bound_nodes_on_tape(&mut tape, &net, &params, &states).unwrap();
        let mut losses = Vec::new();
        for (p, &y) in ds.points.iter().zip(&ds.labels) {
            let x = tape.leaf(p.clone());
            let ln = forward_on_tape(&mut tape, &net, &params, x).unwrap();
            let logits = tape.value(ln).to_vec();
            let scalars: Vec<NodeId> = (0..logits.len()).map(|i| tape.index(ln, i)).collect();
            let m = margin_on_tape(&mut tape, &scalars, &logits, &bounds, eps, &guarantee);
            let top = tape.max_many(&scalars);
            let g_bot = tape.sub(top, m);
            let mut aug = scalars.clone();
            aug.push(g_bot);
            losses.push(tape.cross_entropy(&aug, y));
        }
        let total = tape.sum_many(&losses);
        let grads = tape.backward(total).unwrap();

        let h = 1e-6;
        for (layer_idx, entry) in [(0usize, 3usize), (0, 10), (2, 1), (2, 5)] {
            let perturbed = |delta: f64| {
                let mut n2 = net.clone();
                if let Layer::Dense { weights, .. } = &mut n2.layers[layer_idx] {
                    weights[entry] += delta;
                }
                batch_loss(&n2)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let (w_node, _) = params.per_layer[layer_idx].unwrap();
            let ad = grads.wrt(w_node)[entry];
            assert!(
                (ad - fd).abs() <= 1e-4 * fd.abs().max(1e-2),
                "layer {layer_idx} entry {entry}: autodiff {ad} vs fd {fd}"
            );
        }
    }
}
