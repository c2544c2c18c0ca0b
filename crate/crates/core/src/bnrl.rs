//! Background Negative Re-scale Loss.
//!
//! For class `c` with predicted probability `p` and one-hot target:
//!
//! ```text
//! L_c = -beta * (1 - p)^gamma * ln(p)            if c is the ground truth
//! L_c = -(1 - beta) * p^epsilon * ln(1 - p)      otherwise (mirror term)
//! ```
//!
//! The total sums `L_c` over foreground classes and adds the background
//! class term weighted by `omega_bg`. With `beta = omega_bg = 1` the loss is
//! the (unbalanced) focal loss; with `gamma = 0` as well it is cross-entropy.
//!
//! Probabilities are treated as free inputs. Backpropagating through a
//! softmax is left to the caller.
//!
//! The module also models a hard-negative distribution
//! `p_alpha(c) = 1/N + alpha * x_c` over the `N` wrong classes, with
//! zero-sum noise `x`, and checks that the mirror sum `-sum ln(1 - p_alpha)`
//! grows with `alpha`.

use rand::Rng;

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

const DIST_SUM_TOLERANCE: f64 = 1e-6;
const NOISE_SUM_TOLERANCE: f64 = 1e-9;

/// Slack allowed between consecutive mirror sums.
pub const MONOTONICITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnrlParams {
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub omega_bg: f64,
    pub bg_class: usize,
}

impl BnrlParams {
    /// Fine-tuning defaults (`beta = 0.2`, `gamma = 4`, `epsilon = 1`,
    /// `omega_bg = 0.2`) with the given background index.
    pub fn with_background(bg_class: usize) -> Self {
        BnrlParams {
            beta: 0.2,
            gamma: 4.0,
            epsilon: 1.0,
            omega_bg: 0.2,
            bg_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.gamma, self.epsilon, self.omega_bg]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("bnrl", "all parameters must be finite"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        if self.gamma < 0.0 {
            return Err(Error::param(
                "gamma",
                format!("must be non-negative, got {}", self.gamma),
            ));
        }
        if self.epsilon < 0.0 {
            return Err(Error::param(
                "epsilon",
                format!("must be non-negative, got {}", self.epsilon),
            ));
        }
        if self.omega_bg < 0.0 {
            return Err(Error::param(
                "omega_bg",
                format!("must be non-negative, got {}", self.omega_bg),
            ));
        }
        Ok(())
    }
}

/// A predicted class distribution with its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
    gt_class: usize,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>, gt_class: usize) -> Result<Self> {
        if gt_class >= probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "ground truth class {gt_class} outside {} classes",
                probs.len()
            )));
        }
        if let Some((i, &p)) = probs.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::OutOfRange { index: i, value: p });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {sum}")));
        }
        Ok(ClassDistribution { probs, gt_class })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn gt_class(&self) -> usize {
        self.gt_class
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-class loss term.
pub fn bnrl_per_class(p: f64, is_gt: bool, params: &BnrlParams) -> f64 {
    let p = clamp_prob(p);
    if is_gt {
        -params.beta * (1.0 - p).powf(params.gamma) * p.ln()
    } else {
        -(1.0 - params.beta) * p.powf(params.epsilon) * (-p).ln_1p()
    }
}

/// Derivative of [`bnrl_per_class`] with respect to `p`.
pub fn bnrl_per_class_derivative(p: f64, is_gt: bool, params: &BnrlParams) -> f64 {
    let p = clamp_prob(p);
    let q = 1.0 - p;
    if is_gt {
        // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
        let g = params.gamma;
        let left = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * p.ln() };
        params.beta * (left - q.powf(g) / p)
    } else {
        // d/dp [-p^e ln(1-p)] = -e p^(e-1) ln(1-p) + p^e / (1-p)
        let e = params.epsilon;
        let left = if e == 0.0 {
            0.0
        } else {
            -e * p.powf(e - 1.0) * (-p).ln_1p()
        };
        (1.0 - params.beta) * (left + p.powf(e) / q)
    }
}

fn class_weight(c: usize, params: &BnrlParams) -> f64 {
    if c == params.bg_class {
        params.omega_bg
    } else {
        1.0
    }
}

/// Total loss: foreground terms plus `omega_bg` times the background term.
///
/// When the ground truth is the background class, the weighted background
/// term is its positive branch.
pub fn bnrl_total(dist: &ClassDistribution, params: &BnrlParams) -> f64 {
    dist.probs
        .iter()
        .enumerate()
        .map(|(c, &p)| class_weight(c, params) * bnrl_per_class(p, c == dist.gt_class, params))
        .sum()
}

/// Gradient of [`bnrl_total`] with respect to each probability.
pub fn bnrl_gradient(dist: &ClassDistribution, params: &BnrlParams) -> Vec<f64> {
    dist.probs
        .iter()
        .enumerate()
        .map(|(c, &p)| class_weight(c, params) * bnrl_per_class_derivative(p, c == dist.gt_class, params))
        .collect()
}

/// Unbalanced focal loss on the ground-truth probability.
pub fn focal_loss(dist: &ClassDistribution, gamma: f64) -> f64 {
    let p = clamp_prob(dist.probs[dist.gt_class]);
    -(1.0 - p).powf(gamma) * p.ln()
}

/// Cross-entropy on the ground-truth probability.
pub fn cross_entropy(dist: &ClassDistribution) -> f64 {
    -clamp_prob(dist.probs[dist.gt_class]).ln()
}

/// Hard-negative distribution `p(c) = 1/N + alpha * x_c` over `n` classes.
///
/// The normalizer is identically 1 because the noise sums to zero.
pub fn noise_distribution(n: usize, noise: &[f64], alpha: f64) -> Result<Vec<f64>> {
    validate_noise(n, noise)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::param(
            "alpha",
            format!("must be a non-negative finite number, got {alpha}"),
        ));
    }
    let base = 1.0 / n as f64;
    noise
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let p = base + alpha * x;
            if p > 0.0 && p < 1.0 {
                Ok(p)
            } else {
                Err(Error::OutOfRange { index: i, value: p })
            }
        })
        .collect()
}

fn validate_noise(n: usize, noise: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::param("n", "need at least one class"));
    }
    if noise.len() != n {
        return Err(Error::param(
            "noise",
            format!("expected {n} entries, got {}", noise.len()),
        ));
    }
    if noise.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("noise", "entries must be finite"));
    }
    let sum: f64 = noise.iter().sum();
    if sum.abs() > NOISE_SUM_TOLERANCE {
        return Err(Error::param("noise", format!("must sum to zero, sums to {sum}")));
    }
    Ok(())
}

/// Supremum of the `alpha` values for which every `1/N + alpha * x_c` stays
/// inside `(0, 1)`. Infinite when the noise is all zero.
pub fn max_valid_alpha(n: usize, noise: &[f64]) -> Result<f64> {
    validate_noise(n, noise)?;
    let base = 1.0 / n as f64;
    Ok(noise
        .iter()
        .map(|&x| {
            if x > 0.0 {
                (1.0 - base) / x
            } else if x < 0.0 {
                base / -x
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min))
}

/// Mirror sum `-sum_c ln(1 - p(c))`. Every `p(c)` must lie in `(0, 1)`.
pub fn mirror_sum(p: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, &v) in p.iter().enumerate() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::OutOfRange { index: i, value: v });
        }
        total -= (-v).ln_1p();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// `(alpha, mirror_sum)` per grid point.
    pub points: Vec<(f64, f64)>,
    /// Largest decrease between consecutive points (0 when non-decreasing).
    pub worst_drop: f64,
    pub passed: bool,
}

impl MonotonicityReport {
    /// CSV with header `alpha,mirror_sum`, values at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,mirror_sum\n");
        for &(a, m) in &self.points {
            out.push_str(&crate::fmt::g17(a));
            out.push(',');
            out.push_str(&crate::fmt::g17(m));
            out.push('\n');
        }
        out
    }
}

/// Evaluates the mirror sum of the hard-negative distribution along
/// `alpha_grid` and checks it never decreases by more than
/// [`MONOTONICITY_SLACK`].
pub fn verify_monotonicity(n: usize, noise: &[f64], alpha_grid: &[f64]) -> Result<MonotonicityReport> {
    if alpha_grid
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::param("alpha_grid", "must be strictly increasing"));
    }
    let mut points = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let p = noise_distribution(n, noise, alpha)?;
        points.push((alpha, mirror_sum(&p)?));
    }
    let worst_drop = points.windows(2).map(|w| w[0].1 - w[1].1).fold(0.0, f64::max);
    Ok(MonotonicityReport {
        points,
        worst_drop,
        passed: worst_drop <= MONOTONICITY_SLACK,
    })
}

/// Draws a zero-sum noise vector of length `n` with entries of magnitude
/// up to about `scale`.
pub fn random_zero_sum_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    for x in &mut v {
        *x -= mean;
    }
    v
}

/// `points` alphas evenly spaced over `[0, fraction * alpha_max]`.
pub fn alpha_grid(n: usize, noise: &[f64], points: usize, fraction: f64) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::param("points", "need at least two grid points"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param("fraction", format!("must lie in (0, 1), got {fraction}")));
    }
    let max = max_valid_alpha(n, noise)?;
    // Zero noise leaves alpha without effect; any range will do.
    let top = if max.is_finite() { fraction * max } else { 1.0 };
    Ok((0..points).map(|i| top * i as f64 / (points - 1) as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub trials: usize,
    pub failures: usize,
    /// `(n, report)` for every trial, in draw order.
    pub reports: Vec<(usize, MonotonicityReport)>,
}

impl SweepSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Randomized monotonicity sweep: `trials` zero-sum noise vectors with `n`
/// drawn uniformly from `n_range`, each checked on a `points`-long grid
/// spanning 99% of its valid alpha range.
pub fn monotonicity_sweep<R: Rng + ?Sized>(
    rng: &mut R,
    trials: usize,
    n_range: std::ops::RangeInclusive<usize>,
    points: usize,
) -> Result<SweepSummary> {
    if *n_range.start() < 1 || n_range.is_empty() {
        return Err(Error::param("n_range", "must be a non-empty range of positive sizes"));
    }
    let mut reports = Vec::with_capacity(trials);
    let mut failures = 0;
    for _ in 0..trials {
        let n = rng.gen_range(n_range.clone());
        let scale = rng.gen_range(0.01..1.0) / n as f64;
        let noise = random_zero_sum_noise(rng, n, scale);
        let grid = alpha_grid(n, &noise, points, 0.99)?;
        let report = verify_monotonicity(n, &noise, &grid)?;
        if !report.passed {
            failures += 1;
        }
        reports.push((n, report));
    }
    Ok(SweepSummary {
        trials,
        failures,
        reports,
    })
}

pub mod check {
    //! Runtime self-check of the loss: reduction identities and the
    //! analytic gradient against central finite differences.

    use rand::Rng;

    use super::*;

    /// Finite-difference step.
    pub const FD_STEP: f64 = 1e-6;
    /// Maximum tolerated difference for the reduction identities.
    pub const REDUCTION_TOLERANCE: f64 = 1e-12;
    /// Maximum componentwise relative gradient error.
    pub const GRADIENT_TOLERANCE: f64 = 1e-5;
    /// Random distributions keep every probability in `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub const PROB_FLOOR: f64 = 1e-4;

    #[derive(Debug, Clone, PartialEq)]
    pub struct LossCheckReport {
        pub trials: usize,
        pub max_focal_diff: f64,
        pub max_ce_diff: f64,
        pub max_grad_rel_err: f64,
        pub min_loss: f64,
    }

    impl LossCheckReport {
        pub fn reductions_pass(&self) -> bool {
            self.max_focal_diff < REDUCTION_TOLERANCE && self.max_ce_diff < REDUCTION_TOLERANCE
        }

        pub fn gradient_pass(&self) -> bool {
            self.max_grad_rel_err < GRADIENT_TOLERANCE
        }

        pub fn passed(&self) -> bool {
            self.reductions_pass() && self.gradient_pass() && self.min_loss >= 0.0
        }
    }

    /// Softmax of Gaussian-ish logits, rejected until every entry lies in
    /// `[floor, 1 - floor]`.
    pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> ClassDistribution {
        loop {
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
            if probs.iter().all(|&p| p >= floor && p <= 1.0 - floor) {
                let gt = rng.gen_range(0..n);
                return ClassDistribution::new(probs, gt).expect("softmax output is a distribution");
            }
        }
    }

    /// Fourth-order central difference of `bnrl_total` along each
    /// coordinate, perturbing one probability at a time.
    ///
    /// Only the term that depends on the perturbed coordinate is evaluated;
    /// the others cancel exactly in the difference but their rounding would
    /// swamp components near 1e-13.
    pub fn finite_difference_gradient(dist: &ClassDistribution, params: &BnrlParams, h: f64) -> Vec<f64> {
        let term = |c: usize, delta: f64| {
            let p = dist.probs()[c] + delta;
            class_weight(c, params) * bnrl_per_class(p, c == dist.gt_class(), params)
        };
        (0..dist.len())
            .map(|c| (-term(c, 2.0 * h) + 8.0 * term(c, h) - 8.0 * term(c, -h) + term(c, -2.0 * h)) / (12.0 * h))
            .collect()
    }

    /// The same stencil applied to the full `bnrl_total`. Accurate in
    /// absolute terms only, to within rounding of the total over `h`.
    pub fn finite_difference_total(dist: &ClassDistribution, params: &BnrlParams, h: f64) -> Vec<f64> {
        let total_at = |c: usize, delta: f64| {
            let mut probs = dist.probs().to_vec();
            probs[c] += delta;
            let shifted = ClassDistribution {
                probs,
                gt_class: dist.gt_class(),
            };
            bnrl_total(&shifted, params)
        };
        (0..dist.len())
            .map(|c| {
                (-total_at(c, 2.0 * h) + 8.0 * total_at(c, h) - 8.0 * total_at(c, -h) + total_at(c, -2.0 * h))
                    / (12.0 * h)
            })
            .collect()
    }

    /// Runs the reduction and gradient checks on `trials` random
    /// distributions with `n` drawn from `2..=max_classes`.
    pub fn run_loss_check<R: Rng + ?Sized>(
        rng: &mut R,
        trials: usize,
        max_classes: usize,
        params: &BnrlParams,
    ) -> LossCheckReport {
        let mut report = LossCheckReport {
            trials,
            max_focal_diff: 0.0,
            max_ce_diff: 0.0,
            max_grad_rel_err: 0.0,
            min_loss: f64::INFINITY,
        };
        for _ in 0..trials {
            let n = rng.gen_range(2..=max_classes.max(2));
            let dist = random_distribution(rng, n, PROB_FLOOR);
            let bg = rng.gen_range(0..n);

            let focal = BnrlParams {
                beta: 1.0,
                omega_bg: 1.0,
                bg_class: bg,
                ..*params
            };
            report.max_focal_diff = report
                .max_focal_diff
                .max((bnrl_total(&dist, &focal) - focal_loss(&dist, focal.gamma)).abs());
            let ce = BnrlParams { gamma: 0.0, ..focal };
            report.max_ce_diff = report
                .max_ce_diff
                .max((bnrl_total(&dist, &ce) - cross_entropy(&dist)).abs());

            let p = BnrlParams {
                bg_class: bg,
                ..*params
            };
            report.min_loss = report.min_loss.min(bnrl_total(&dist, &p));
            let analytic = bnrl_gradient(&dist, &p);
            let numeric = finite_difference_gradient(&dist, &p, FD_STEP);
            for (a, f) in analytic.iter().zip(&numeric) {
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(f64::MIN_POSITIVE);
                report.max_grad_rel_err = report.max_grad_rel_err.max(rel);
            }
        }
        report
    }
}
