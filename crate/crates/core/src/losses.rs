//! Training objective: focal reconstruction loss, the permutation loss that
//! discourages keys from doubling each other's pitches, and the Gaussian KL.
//!
//! Every loss comes as a plain function, its gradient, and a tape node built
//! from the two.

use crate::numerics::{Matrix, Tape, Var};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Lower bound applied to log-probabilities inside the permutation loss.
pub const LOG_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Loss weights at one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub perm: f64,
}

/// KL weight ramps linearly from 0 to `beta_max` over `warmup` steps.
pub fn kl_anneal(step: usize, warmup: usize, beta_max: f64) -> f64 {
    if warmup == 0 {
        return beta_max;
    }
    beta_max * (step as f64 / warmup as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon_focal: f64,
    pub kl: f64,
    pub perm: f64,
    pub total: f64,
    pub kl_weight: f64,
    pub perm_weight: f64,
}

impl LossBreakdown {
    pub fn new(recon_focal: f64, kl: f64, perm: f64, weights: LossWeights) -> Self {
        Self {
            recon_focal,
            kl,
            perm,
            total: recon_focal + weights.kl * kl + weights.perm * perm,
            kl_weight: weights.kl,
            perm_weight: weights.perm,
        }
    }
}

/// KL divergence from `N(mu, exp(log_var))` to the standard normal.
pub fn kl_gaussian(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter().zip(log_var).map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv)).sum()
}

/// Gradients of [`kl_gaussian`] with respect to `mu` and `log_var`.
pub fn kl_gaussian_grad(mu: &[f64], log_var: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (mu.to_vec(), log_var.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect())
}

fn focal_of(p: f64, cfg: FocalConfig) -> f64 {
    let p = p.max(PROB_FLOOR);
    if p >= 1.0 {
        return 0.0;
    }
    -cfg.alpha * (1.0 - p).powf(cfg.gamma) * p.ln()
}

/// Focal loss `-alpha (1 - p_t)^gamma log p_t` of a categorical prediction.
pub fn focal_loss(dist: &[f64], target: usize, cfg: FocalConfig) -> f64 {
    focal_of(dist[target], cfg)
}

/// Derivative of the focal loss with respect to `p_t`.
pub fn focal_loss_dp(p: f64, cfg: FocalConfig) -> f64 {
    if p < PROB_FLOOR || p >= 1.0 {
        return if p >= 1.0 && cfg.gamma == 0.0 { -cfg.alpha } else { 0.0 };
    }
    let q = 1.0 - p;
    let weight_term = if cfg.gamma == 0.0 { 0.0 } else { cfg.gamma * q.powf(cfg.gamma - 1.0) * p.ln() };
    -cfg.alpha * (q.powf(cfg.gamma) / p - weight_term)
}

/// Permutation loss of one step's per-key distributions.
///
/// For each key `k > 0`, the earlier keys' distributions are averaged over
/// the sounded tokens (every index but `rest`), renormalized, and used to
/// weight `log p_k`. Values are at most 0 and rise as key `k` agrees with the
/// keys above it.
pub fn permutation_loss(dists: &[&[f64]], rest: usize) -> f64 {
    let mut total = 0.0;
    let mut earlier = vec![0.0; dists.first().map_or(0, |d| d.len())];
    for (k, dist) in dists.iter().enumerate() {
        if k > 0 {
            let z: f64 = sounded_mass(&earlier, rest);
            if z > 0.0 {
                total += earlier
                    .iter()
                    .enumerate()
                    .filter(|&(v, _)| v != rest)
                    .map(|(v, &s)| s / z * clamped_log(dist[v]))
                    .sum::<f64>();
            }
        }
        for (e, p) in earlier.iter_mut().zip(dist.iter()) {
            *e += p;
        }
    }
    total
}

/// Gradient of [`permutation_loss`] with respect to every distribution.
pub fn permutation_loss_grad(dists: &[&[f64]], rest: usize) -> Vec<Vec<f64>> {
    let vocab = dists.first().map_or(0, |d| d.len());
    let mut grads = vec![vec![0.0; vocab]; dists.len()];
    let mut earlier = vec![0.0; vocab];
    for (k, dist) in dists.iter().enumerate() {
        if k > 0 {
            let z = sounded_mass(&earlier, rest);
            if z > 0.0 {
                let logs: Vec<f64> = dist.iter().map(|&p| clamped_log(p)).collect();
                let term: f64 =
                    (0..vocab).filter(|&v| v != rest).map(|v| earlier[v] / z * logs[v]).sum();
                for v in (0..vocab).filter(|&v| v != rest) {
                    if dist[v] > 0.0 && dist[v].ln() > LOG_FLOOR {
                        grads[k][v] += earlier[v] / z / dist[v];
                    }
                    let through_earlier = (logs[v] - term) / z;
                    for g in grads.iter_mut().take(k) {
                        g[v] += through_earlier;
                    }
                }
            }
        }
        for (e, p) in earlier.iter_mut().zip(dist.iter()) {
            *e += p;
        }
    }
    grads
}

fn sounded_mass(weights: &[f64], rest: usize) -> f64 {
    weights.iter().enumerate().filter(|&(v, _)| v != rest).map(|(_, w)| w).sum()
}

fn clamped_log(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// Scalar focal-loss node for one predicted column distribution.
pub fn focal_var(tape: &mut Tape, dist: Var, target: usize, cfg: FocalConfig) -> Var {
    let d = tape.value(dist);
    let rows = d.rows();
    let p = d.data()[target];
    let value = Matrix::from_vec(1, 1, vec![focal_of(p, cfg)]);
    let dp = focal_loss_dp(p, cfg);
    tape.custom(
        &[dist],
        value,
        Box::new(move |g| {
            let mut out = Matrix::zeros(rows, 1);
            out.data_mut()[target] = g.scalar() * dp;
            vec![Some(out)]
        }),
    )
}

/// Scalar permutation-loss node over one step's per-key columns.
pub fn permutation_var(tape: &mut Tape, dists: &[Var], rest: usize) -> Var {
    let values: Vec<Vec<f64>> = dists.iter().map(|&d| tape.value(d).data().to_vec()).collect();
    let refs: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
    let value = Matrix::from_vec(1, 1, vec![permutation_loss(&refs, rest)]);
    let grads = permutation_loss_grad(&refs, rest);
    tape.custom(
        dists,
        value,
        Box::new(move |g| {
            let s = g.scalar();
            grads.iter().map(|gr| Some(Matrix::column(gr).scale(s))).collect()
        }),
    )
}

/// Scalar KL node for column vectors `mu` and `log_var`.
pub fn kl_var(tape: &mut Tape, mu: Var, log_var: Var) -> Var {
    let (m, lv) = (tape.value(mu).data().to_vec(), tape.value(log_var).data().to_vec());
    let value = Matrix::from_vec(1, 1, vec![kl_gaussian(&m, &lv)]);
    let (gm, glv) = kl_gaussian_grad(&m, &lv);
    tape.custom(
        &[mu, log_var],
        value,
        Box::new(move |g| {
            let s = g.scalar();
            vec![Some(Matrix::column(&gm).scale(s)), Some(Matrix::column(&glv).scale(s))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::numerics::seeded;
    use crate::numerics::tape::softmax;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_gaussian(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    /// Trapezoidal integral of `q log(q / p)` on a wide grid.
    fn kl_quadrature(mu: f64, log_var: f64) -> f64 {
        let sd = (0.5 * log_var).exp();
        let (lo, hi) = (mu - 12.0 * sd.max(1.0), mu + 12.0 * sd.max(1.0));
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let log_q = |x: f64| -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_p = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let f = |x: f64| log_q(x).exp() * (log_q(x) - log_p(x));
        let mut s = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            s += f(lo + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut rng = seeded(3);
        for _ in 0..10 {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let lv: f64 = rng.random_range(-2.0..1.5);
            assert!((kl_gaussian(&[mu], &[lv]) - kl_quadrature(mu, lv)).abs() < 1e-6, "mu={mu} lv={lv}");
        }
    }

    #[test]
    fn focal_examples() {
        let ce = FocalConfig { gamma: 0.0, alpha: 1.0 };
        assert!((focal_loss(&[0.5, 0.5], 0, ce) - 0.693147).abs() < 1e-6);
        assert_eq!(focal_loss(&[1.0, 0.0], 0, FocalConfig::default()), 0.0);
        let expected = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((focal_loss(&[0.9, 0.1], 0, FocalConfig::default()) - expected).abs() < 1e-15);
        assert!((expected - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let ce = FocalConfig { gamma: 0.0, alpha: 1.0 };
        for i in 0..=99 {
            let p = 0.01 + 0.01 * i as f64;
            if p >= 1.0 {
                continue;
            }
            assert!((focal_loss(&[p, 1.0 - p], 0, ce) + p.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_derivative_matches_difference_quotient() {
        for &gamma in &[0.0, 0.5, 1.0, 2.0, 3.5] {
            let cfg = FocalConfig { gamma, alpha: 0.7 };
            for &p in &[0.01, 0.2, 0.5, 0.8, 0.97] {
                let h = 1e-6;
                let numeric = (focal_of(p + h, cfg) - focal_of(p - h, cfg)) / (2.0 * h);
                assert!((focal_loss_dp(p, cfg) - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
            }
        }
    }

    #[test]
    fn permutation_examples() {
        let v = [0.2, 0.3, 0.5];
        assert_eq!(permutation_loss(&[&v], 2), 0.0);
        let one_hot = [0.0, 1.0, 0.0];
        assert_eq!(permutation_loss(&[&one_hot, &one_hot], 2), 0.0);
        let mut p1 = vec![0.0; 13];
        p1[4] = 1.0;
        let mut p2 = vec![1.0 / 12.0; 13];
        p2[12] = 0.0;
        let pl = permutation_loss(&[&p1, &p2], 12);
        assert!((pl - (1.0f64 / 12.0).ln()).abs() < 1e-12);
        assert!((pl + 2.4849).abs() < 1e-4);
    }

    #[test]
    fn earlier_rest_only_contributes_nothing() {
        let rest_only = [0.0, 0.0, 1.0];
        let other = [0.5, 0.5, 0.0];
        assert_eq!(permutation_loss(&[&rest_only, &other], 2), 0.0);
    }

    #[test]
    fn overlap_raises_permutation_loss() {
        let top = [0.7, 0.2, 0.1, 0.0];
        let apart = [0.05, 0.15, 0.7, 0.1];
        let closer = [0.25, 0.15, 0.5, 0.1];
        assert!(permutation_loss(&[&top, &closer], 3) > permutation_loss(&[&top, &apart], 3));
    }

    fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        softmax(&logits)
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        let mut rng = seeded(19);
        let cfg = FocalConfig::default();
        for _ in 0..5 {
            let logits: Vec<Matrix> = (0..3).map(|_| Matrix::column(&random_simplex(&mut rng, 6))).collect();
            let logits: Vec<Matrix> = logits.iter().map(|m| m.map(|p| p.ln())).collect();
            let target = rng.random_range(0..6);

            // Through softmax, so the parameters are unconstrained logits.
            let focal = |ps: &[Matrix]| {
                let mut t = Tape::new();
                let l = t.leaf(ps[0].clone());
                let d = t.softmax(l);
                let f = focal_var(&mut t, d, target, cfg);
                let g = t.backward(f);
                (t.value(f).scalar(), vec![g.get(l).unwrap().clone()])
            };
            assert!(grad_check(focal, &logits[..1], DEFAULT_STEP).unwrap() < 1e-6);

            let perm = |ps: &[Matrix]| {
                let mut t = Tape::new();
                let leaves: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
                let dists: Vec<Var> = leaves.iter().map(|&l| t.softmax(l)).collect();
                let pl = permutation_var(&mut t, &dists, 5);
                let g = t.backward(pl);
                (t.value(pl).scalar(), leaves.iter().map(|&l| g.get(l).unwrap().clone()).collect())
            };
            assert!(grad_check(perm, &logits, DEFAULT_STEP).unwrap() < 1e-6);

            let mu = Matrix::column(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let lv = Matrix::column(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let kl = |ps: &[Matrix]| {
                let mut t = Tape::new();
                let (m, l) = (t.leaf(ps[0].clone()), t.leaf(ps[1].clone()));
                let k = kl_var(&mut t, m, l);
                let g = t.backward(k);
                (t.value(k).scalar(), vec![g.get(m).unwrap().clone(), g.get(l).unwrap().clone()])
            };
            assert!(grad_check(kl, &[mu, lv], DEFAULT_STEP).unwrap() < 1e-6);
        }
    }

    #[test]
    fn breakdown_identity() {
        let w = LossWeights { kl: 0.0, perm: 0.0 };
        assert_eq!(LossBreakdown::new(1.5, 3.0, -2.0, w).total, 1.5);
        let w = LossWeights { kl: 0.2, perm: 0.1 };
        let b = LossBreakdown::new(1.5, 3.0, -2.0, w);
        assert!((b.total - (1.5 + 0.6 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(kl_anneal(0, 2000, 0.2), 0.0);
        assert!((kl_anneal(1000, 2000, 0.2) - 0.1).abs() < 1e-15);
        assert_eq!(kl_anneal(5000, 2000, 0.2), 0.2);
        assert_eq!(kl_anneal(3, 0, 0.2), 0.2);
    }

    proptest! {
        #[test]
        fn focal_nonnegative_and_decreasing(p in 0.001f64..0.999, dp in 0.0001f64..0.001, gamma in 0.0f64..4.0, alpha in 0.01f64..1.0) {
            let cfg = FocalConfig { gamma, alpha };
            let a = focal_of(p, cfg);
            let b = focal_of((p + dp).min(1.0), cfg);
            prop_assert!(a >= 0.0);
            prop_assert!(b <= a);
        }

        #[test]
        fn kl_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 1..6), seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let lv: Vec<f64> = mu.iter().map(|_| rng.random_range(-5.0..3.0)).collect();
            prop_assert!(kl_gaussian(&mu, &lv) >= 0.0);
        }

        #[test]
        fn permutation_loss_nonpositive(seed in 0u64..1000, keys in 1usize..5) {
            let mut rng = seeded(seed);
            let dists: Vec<Vec<f64>> = (0..keys).map(|_| random_simplex(&mut rng, 7)).collect();
            let refs: Vec<&[f64]> = dists.iter().map(Vec::as_slice).collect();
            prop_assert!(permutation_loss(&refs, 6) <= 0.0);
        }
    }
}
