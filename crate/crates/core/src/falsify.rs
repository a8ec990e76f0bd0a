//! Independent oracles that try to break issued certificates: a projected
//! gradient attack on the safe set, uniform sphere sampling, and exact
//! closed-form certification for linear models.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::certify::{certify_logits, CertificationResult, Guarantee};
use crate::error::{GloroError, Result};
use crate::lipschitz::LipschitzBounds;
use crate::net::{predict_topk, Network};
use crate::tape::{forward_on_tape, record_params, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Pgd,
    SphereSample,
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub point_id: usize,
    pub attack: AttackKind,
    pub eps: f64,
    pub safe_set: Vec<usize>,
    pub violated: bool,
    /// Perturbation that changes the safe set, when one was found.
    pub witness: Option<Vec<f64>>,
    /// Largest observed value of max_{j in S, i not in S} (f_i - f_j).
    pub max_disruption_margin: f64,
    /// Set when the check ran with zero samples or steps.
    pub vacuous: bool,
    pub step_size: f64,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// max over j in the safe set and i outside it of f_i - f_j; positive means
/// the safe set has been disrupted.
fn disruption_margin(logits: &[f64], safe_set: &[usize]) -> f64 {
    let in_set = |c: usize| safe_set.contains(&c);
    let worst_in = safe_set
        .iter()
        .map(|&j| logits[j])
        .fold(f64::INFINITY, f64::min);
    let best_out = (0..logits.len())
        .filter(|&i| !in_set(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    best_out - worst_in
}

fn safe_set_changed(logits: &[f64], safe_set: &[usize]) -> bool {
    let topk = predict_topk(logits, safe_set.len()).unwrap();
    let mut a = topk.clone();
    let mut b = safe_set.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a != b
}

fn project_ball(delta: &mut [f64], eps: f64) {
    let n = l2_norm(delta);
    if n > eps {
        let s = eps / n;
        delta.iter_mut().for_each(|v| *v *= s);
    }
}

fn random_in_ball(dim: usize, eps: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let n = l2_norm(&dir);
    if n == 0.0 {
        return vec![0.0; dim];
    }
    let r = eps * rng.gen_range(0.0f64..1.0).powf(1.0 / dim as f64);
    dir.iter_mut().for_each(|v| *v *= r / n);
    dir
}

/// Gradient of the disruption objective w.r.t. the input.
fn disruption_gradient(net: &Network, x: &[f64], safe_set: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = record_params(&mut tape, net);
    let xn = tape.leaf(x.to_vec());
    let logits = forward_on_tape(&mut tape, net, &params, xn)?;
    let c = net.num_classes;
    let mut pair_nodes = Vec::new();
    for &j in safe_set {
        for i in 0..c {
            if safe_set.contains(&i) {
                continue;
            }
            let fj = tape.index(logits, j);
            let fi = tape.index(logits, i);
            pair_nodes.push(tape.sub(fi, fj));
        }
    }
    if pair_nodes.is_empty() {
        return Ok(vec![0.0; x.len()]);
    }
    let obj = tape.max_many(&pair_nodes);
    let grads = tape.backward(obj)?;
    Ok(grads.wrt(xn).to_vec())
}

/// Projected gradient ascent on the safe-set disruption objective within
/// the eps-ball, with random restarts. Step size is the standard
/// 2.5 * eps / steps heuristic.
pub fn pgd_safe_set_attack(
    net: &Network,
    point_id: usize,
    x: &[f64],
    eps: f64,
    safe_set: &[usize],
    steps: usize,
    restarts: usize,
    seed: u64,
) -> Result<AttackReport> {
    let step_size = if steps > 0 { 2.5 * eps / steps as f64 } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AttackReport {
        point_id,
        attack: AttackKind::Pgd,
        eps,
        safe_set: safe_set.to_vec(),
        violated: false,
        witness: None,
        max_disruption_margin: f64::NEG_INFINITY,
        vacuous: steps == 0 || restarts == 0,
        step_size,
    };
    for restart in 0..restarts {
        let mut delta = if restart == 0 || eps == 0.0 {
            vec![0.0; x.len()]
        } else {
            random_in_ball(x.len(), eps, &mut rng)
        };
        for _ in 0..steps {
            let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let grad = disruption_gradient(net, &xp, safe_set)?;
            let gn = l2_norm(&grad);
            if gn > 0.0 {
                for (d, g) in delta.iter_mut().zip(&grad) {
                    *d += step_size * g / gn;
                }
            }
            project_ball(&mut delta, eps);
        }
        let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let logits = net.forward(&xp)?;
        let margin = disruption_margin(&logits, safe_set);
        report.max_disruption_margin = report.max_disruption_margin.max(margin);
        if safe_set_changed(&logits, safe_set) {
            report.violated = true;
            report.witness = Some(delta);
            break;
        }
    }
    Ok(report)
}

/// Uniform samples in the eps-ball; reports any safe-set change. Complements
/// the gradient attack against gradient masking.
pub fn sphere_sample_check(
    net: &Network,
    point_id: usize,
    x: &[f64],
    eps: f64,
    safe_set: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<AttackReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AttackReport {
        point_id,
        attack: AttackKind::SphereSample,
        eps,
        safe_set: safe_set.to_vec(),
        violated: false,
        witness: None,
        max_disruption_margin: f64::NEG_INFINITY,
        vacuous: n_samples == 0,
        step_size: 0.0,
    };
    for _ in 0..n_samples {
        let delta = random_in_ball(x.len(), eps, &mut rng);
        let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let logits = net.forward(&xp)?;
        let margin = disruption_margin(&logits, safe_set);
        report.max_disruption_margin = report.max_disruption_margin.max(margin);
        if safe_set_changed(&logits, safe_set) {
            report.violated = true;
            report.witness = Some(delta);
            break;
        }
    }
    Ok(report)
}

/// Exact certification for a network with no hidden layers: for a linear
/// map the pairwise Lipschitz bound ||w_j - w_i|| is tight, so the margin
/// chain evaluated with it is the exact worst case over the eps-ball.
pub fn linear_exact_certify(
    net: &Network,
    x: &[f64],
    eps: f64,
    guarantee: &Guarantee,
) -> Result<CertificationResult> {
    if net.layers.len() != 1 {
        return Err(GloroError::InvalidArgument(
            "exact certification requires a network with no hidden layers".into(),
        ));
    }
    let bounds = LipschitzBounds::exact_linear(net)?;
    let logits = net.forward(x)?;
    certify_logits(&logits, &bounds, eps, guarantee)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lipschitz::{converged_bounds, BoundMode};
    use crate::net::Layer;

    fn linear_net(w: Vec<f64>, rows: usize, cols: usize) -> Network {
        Network::new(vec![Layer::dense(w, rows, cols, vec![0.0; rows]).unwrap()], vec![cols])
            .unwrap()
    }

    #[test]
    fn eps_zero_never_violates() {
        let net = linear_net(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let r = pgd_safe_set_attack(&net, 0, &[1.0, 0.0], 0.0, &[0], 20, 3, 1).unwrap();
        assert!(!r.violated);
        assert!(r.max_disruption_margin < 0.0);
    }

    #[test]
    fn zero_samples_vacuous() {
        let net = linear_net(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let r = sphere_sample_check(&net, 0, &[1.0, 0.0], 0.5, &[0], 0, 1).unwrap();
        assert!(!r.violated);
        assert!(r.vacuous);
    }

    #[test]
    fn pgd_finds_flip_on_uncertified_linear_point() {
        // Identity 3x3 map: logits = x. Exact margin at eps = 0.25 for the
        // near-tie (1.0, 0.9, 0.0) is negative, so a flip must exist.
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let net = linear_net(w, 3, 3);
        let x = [1.0, 0.9, 0.0];
        let exact = linear_exact_certify(&net, &x, 0.25, &Guarantee::Standard).unwrap();
        assert!(!exact.accepted);
        let r = pgd_safe_set_attack(&net, 0, &x, 0.25, &[0], 100, 5, 2).unwrap();
        assert!(r.violated);
        let witness = r.witness.unwrap();
        assert!(l2_norm(&witness) <= 0.25 + 1e-9);
        // The witness really changes the safe set when re-evaluated.
        let xp: Vec<f64> = x.iter().zip(&witness).map(|(a, d)| a + d).collect();
        assert!(safe_set_changed(&net.forward(&xp).unwrap(), &[0]));
    }

    #[test]
    fn sphere_finds_close_flip_in_2d() {
        // Two-class linear model; flip distance from x is 0.5 * eps, so
        // 10^4 uniform ball samples find it with overwhelming probability.
        let net = linear_net(vec![1.0, 0.0, -1.0, 0.0], 2, 2);
        let eps = 1.0;
        let x = [0.5, 0.0]; // flip plane x0 = 0, distance 0.5 eps
        let r = sphere_sample_check(&net, 0, &x, eps, &[0], 10_000, 3).unwrap();
        assert!(r.violated);
    }

    #[test]
    fn exact_matches_pair_bound_certification_on_identity() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let net = linear_net(w, 3, 3);
        let x = [3.0, 2.0, 0.5];
        let exact = linear_exact_certify(&net, &x, 0.25, &Guarantee::Rtk { k: 2 }).unwrap();
        assert!(exact.accepted);
        assert_eq!(exact.kstar, Some(2));

        let bounds = converged_bounds(&net, 0, BoundMode::Pairwise).unwrap();
        let viacert =
            crate::certify::certify_point(&net, &bounds, 0.25, &Guarantee::Rtk { k: 2 }, &x)
                .unwrap();
        assert_eq!(exact.accepted, viacert.accepted);
        assert_eq!(exact.kstar, viacert.kstar);
    }

    #[test]
    fn exact_decision_flips_at_radius() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let net = linear_net(w, 3, 3);
        let x = [3.0, 2.0, 0.5];
        let exact = linear_exact_certify(&net, &x, 0.25, &Guarantee::Rtk { k: 2 }).unwrap();
        let r = exact.radius.unwrap();
        let below = linear_exact_certify(&net, &x, r * 0.999, &Guarantee::Rtk { k: 2 }).unwrap();
        let above = linear_exact_certify(&net, &x, r * 1.001, &Guarantee::Rtk { k: 2 }).unwrap();
        assert!(below.accepted);
        assert!(!above.accepted);
    }

    #[test]
    fn exact_eps_zero_margins_are_logit_gaps() {
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        w[3] = 1.0;
        let net = linear_net(w, 2, 2);
        let exact = linear_exact_certify(&net, &[2.0, 0.5], 0.0, &Guarantee::Standard).unwrap();
        assert!(exact.accepted);
        assert!((exact.margin - 1.5).abs() < 1e-12);
    }
}
