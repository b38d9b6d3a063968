//! Conditional-risk oracles over finite discrete distributions and numerical
//! checks of the consistency bounds for the abstention surrogates.
//!
//! Conventions: a conditional distribution `p` over labels `0..n` is
//! augmented with `p⁺[n] = 1 − c`; decisions index the augmented set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis::{fit_comp_sum, Model, ModelSpec, TrainConfig, WeightedSample};
use crate::losses::{
    argmax, comp_sum_from_margin, log_sum_exp, predict_label, CompSumParams, CostModel, Decision,
    MarginFunction,
};

const SUM_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Distributions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDistribution {
    p: Vec<f64>,
    cost: CostModel,
}

impl ConditionalDistribution {
    pub fn new(p: Vec<f64>, cost: CostModel) -> Result<Self> {
        Self::with_tolerance(p, cost, SUM_TOL)
    }

    /// Accepts `|Σp − 1| <= tol` and renormalizes.
    pub fn with_tolerance(mut p: Vec<f64>, cost: CostModel, tol: f64) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 labels, got {}",
                p.len()
            )));
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidDistribution(
                "probabilities must be finite and >= 0".into(),
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        // already-normalized input is kept bit-for-bit
        if (total - 1.0).abs() > 4.0 * f64::EPSILON {
            p.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self { p, cost })
    }

    pub fn deterministic(n: usize, y: usize, cost: CostModel) -> Result<Self> {
        if y >= n {
            return Err(Error::InvalidLabel { label: y, limit: n });
        }
        let mut p = vec![0.0; n];
        p[y] = 1.0;
        Self::new(p, cost)
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn cost(&self) -> CostModel {
        self.cost
    }

    /// `p⁺`: `p` followed by `1 − c`.
    pub fn augmented(&self) -> Vec<f64> {
        let mut a = self.p.clone();
        a.push(self.cost.accept_mass());
        a
    }

    pub fn is_deterministic(&self) -> bool {
        self.p.iter().any(|&v| v == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub weight: f64,
    pub dist: ConditionalDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

/// Finite mixture of conditional distributions sharing `n` and `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProblem {
    atoms: Vec<Atom>,
}

impl DiscreteProblem {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        Self::with_tolerance(atoms, SUM_TOL)
    }

    pub fn with_tolerance(mut atoms: Vec<Atom>, tol: f64) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::InvalidDistribution("problem has no atoms".into()))?;
        let (n, c) = (first.dist.n(), first.dist.cost());
        let d = first.features.as_ref().map(Vec::len);
        for a in &atoms {
            if !(a.weight.is_finite() && a.weight > 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "atom weight must be > 0, got {}",
                    a.weight
                )));
            }
            if a.dist.n() != n || a.dist.cost() != c {
                return Err(Error::InvalidDistribution(
                    "atoms must share n and c".into(),
                ));
            }
            if a.features.as_ref().map(Vec::len) != d {
                return Err(Error::InvalidDistribution(
                    "feature vectors must be present on all atoms with one dimension".into(),
                ));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!(
                "atom weights sum to {total}, expected 1"
            )));
        }
        if (total - 1.0).abs() > 4.0 * f64::EPSILON {
            atoms.iter_mut().for_each(|a| a.weight /= total);
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn n(&self) -> usize {
        self.atoms[0].dist.n()
    }

    pub fn cost(&self) -> CostModel {
        self.atoms[0].dist.cost()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.atoms[0].features.as_ref().map(Vec::len)
    }

    /// One row per `(atom, label)` with positive mass, weighted
    /// `weight · p[y]`.
    pub fn population_sample(&self) -> Result<WeightedSample> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        for a in &self.atoms {
            let x = a
                .features
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("problem atoms carry no features".into()))?;
            for (y, &py) in a.dist.p().iter().enumerate() {
                if py > 0.0 {
                    feats.push(x.clone());
                    labels.push(y);
                    weights.push(a.weight * py);
                }
            }
        }
        WeightedSample::new(feats, labels, weights, self.n())
    }

    /// Draws `m` i.i.d. labeled points (uniform weights).
    pub fn sample<R: Rng>(&self, m: usize, rng: &mut R) -> Result<WeightedSample> {
        if m == 0 {
            return Err(Error::InvalidArgument("sample size must be >= 1".into()));
        }
        let mut feats = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for _ in 0..m {
            let atom = pick(rng, self.atoms.iter().map(|a| a.weight));
            let a = &self.atoms[atom];
            let x = a.features.as_ref().ok_or_else(|| {
                Error::InvalidArgument("problem atoms carry no features".into())
            })?;
            feats.push(x.clone());
            labels.push(pick(rng, a.dist.p().iter().copied()));
        }
        WeightedSample::uniform(feats, labels, self.n())
    }

    /// Exact expected abstention loss of per-atom decisions.
    pub fn abstention_risk(&self, decisions: &[Decision]) -> f64 {
        self.atoms
            .iter()
            .zip(decisions)
            .map(|(a, &d)| a.weight * conditional_risk_abstention(d, &a.dist))
            .sum()
    }

    /// `E*` of the abstention loss over all decision rules.
    pub fn bayes_abstention_risk(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * conditional_risk_abstention(chow_decision(&a.dist), &a.dist))
            .sum()
    }
}

/// Index drawn with probability proportional to `weights`.
fn pick<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Abstention-loss conditional quantities

/// `1 − p⁺[decision]`.
pub fn conditional_risk_abstention(decision: Decision, dist: &ConditionalDistribution) -> f64 {
    match decision {
        Decision::Abstain => dist.cost().value(),
        Decision::Label(y) => 1.0 - dist.p()[y],
    }
}

/// Abstains iff `1 − c >= max p`; otherwise the smallest-index argmax.
pub fn chow_decision(dist: &ConditionalDistribution) -> Decision {
    let top = argmax(dist.p());
    if dist.cost().accept_mass() >= dist.p()[top] {
        Decision::Abstain
    } else {
        Decision::Label(top)
    }
}

/// `p⁺[chow] − p⁺[decision]`.
pub fn abstention_calibration_gap(decision: Decision, dist: &ConditionalDistribution) -> f64 {
    let mass = |d: Decision| match d {
        Decision::Abstain => dist.cost().accept_mass(),
        Decision::Label(y) => dist.p()[y],
    };
    mass(chow_decision(dist)) - mass(decision)
}

// ---------------------------------------------------------------------------
// Comp-sum conditional risk and its minimization

/// `Σ_y w_y ℓ_μ(s, y)` over every index of `s`.
pub fn weighted_comp_sum_risk(scores: &[f64], weights: &[f64], mu: f64) -> f64 {
    let lse = log_sum_exp(scores);
    scores
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, w)| w * comp_sum_from_margin((lse - s).max(0.0), mu))
        .sum()
}

/// `C_L(s) = Σ_y p⁺[y] ℓ_μ(s, y)`.
pub fn conditional_risk_surrogate(
    scores: &[f64],
    dist: &ConditionalDistribution,
    params: CompSumParams,
) -> f64 {
    weighted_comp_sum_risk(scores, &dist.augmented(), params.mu())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskMinimum {
    pub value: f64,
    /// Softmax of the minimizing scores (zeros allowed at the infimum).
    pub softmax: Vec<f64>,
    /// Spread across restarts together with the final stationarity measure.
    pub residual: f64,
    pub converged: bool,
}

const NEWTON_STARTS: usize = 5;
const NEWTON_MAX_ITER: usize = 20_000;
const GRAD_TOL: f64 = 1e-10;

/// Infimum of `C_L` over all score vectors.
pub fn min_conditional_risk_surrogate(
    dist: &ConditionalDistribution,
    params: CompSumParams,
) -> RiskMinimum {
    minimize_comp_sum_risk(&dist.augmented(), params.mu())
}

/// Infimum over `s ∈ ℝ^K` of `Σ_y w_y ℓ_μ(s, y)` for nonnegative `w`.
///
/// Zero-weight labels are sent to `−∞`. For `μ < 2` the reduced problem is
/// solved by damped Newton on the free logits (last support logit pinned at
/// zero) from several starts. For `μ >= 2` the risk is concave in the
/// softmax coordinates, so the infimum sits on a vertex of the simplex and
/// the vertices are enumerated.
pub fn minimize_comp_sum_risk(weights: &[f64], mu: f64) -> RiskMinimum {
    let k = weights.len();
    let support: Vec<usize> = (0..k).filter(|&i| weights[i] > 0.0).collect();
    let w: Vec<f64> = support.iter().map(|&i| weights[i]).collect();
    let expand = |q: &[f64]| {
        let mut full = vec![0.0; k];
        for (&i, &v) in support.iter().zip(q) {
            full[i] = v;
        }
        full
    };
    if support.len() <= 1 {
        return RiskMinimum {
            value: 0.0,
            softmax: expand(&[1.0]),
            residual: 0.0,
            converged: true,
        };
    }
    if mu >= 2.0 {
        let total: f64 = w.iter().sum();
        let best = argmax(&w);
        let mut q = vec![0.0; w.len()];
        q[best] = 1.0;
        return RiskMinimum {
            value: (total - w[best]) / (mu - 1.0),
            softmax: expand(&q),
            residual: 0.0,
            converged: true,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x0a_c1e);
    let mut results = Vec::with_capacity(NEWTON_STARTS);
    for start in 0..NEWTON_STARTS {
        let mut x: Vec<f64> = if start == 0 {
            vec![0.0; w.len()]
        } else {
            (0..w.len()).map(|_| rng.gen_range(-4.0..4.0)).collect()
        };
        *x.last_mut().unwrap() = 0.0;
        results.push(newton(&w, mu, &mut x));
    }
    let values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values[best];
    let (value, gnorm, ref x) = results[best];
    RiskMinimum {
        value,
        softmax: expand(&crate::losses::softmax(x)),
        residual: spread.max(gnorm),
        converged: gnorm < GRAD_TOL || spread.max(gnorm) < 1e-9,
    }
}

/// Value, gradient and Hessian of `Σ w_y ℓ_μ(s, y)`.
///
/// With `a_y = w_y q_y^(μ−1)` and `A = Σ a_y`:
/// `∇ = A q − a`,
/// `H = A(diag q − q qᵀ) − (μ−1)(A q qᵀ − q aᵀ − a qᵀ + diag a)`.
fn risk_derivatives(s: &[f64], w: &[f64], mu: f64, g: &mut [f64], h: Option<&mut [f64]>) -> f64 {
    let k = s.len();
    let lse = log_sum_exp(s);
    let mut q = vec![0.0; k];
    let mut a = vec![0.0; k];
    let mut value = 0.0;
    for i in 0..k {
        let lq = s[i] - lse;
        q[i] = lq.exp();
        a[i] = w[i] * ((mu - 1.0) * lq).exp();
        value += w[i] * comp_sum_from_margin((-lq).max(0.0), mu);
    }
    let total: f64 = a.iter().sum();
    for i in 0..k {
        g[i] = total * q[i] - a[i];
    }
    if let Some(h) = h {
        let m1 = mu - 1.0;
        for i in 0..k {
            for j in 0..k {
                let mut v =
                    -total * q[i] * q[j] - m1 * (total * q[i] * q[j] - q[i] * a[j] - a[i] * q[j]);
                if i == j {
                    v += total * q[i] - m1 * a[i];
                }
                h[i * k + j] = v;
            }
        }
    }
    value
}

/// Damped Newton over the first `K − 1` logits; returns (value, ‖∇‖, x).
fn newton(w: &[f64], mu: f64, x: &mut [f64]) -> (f64, f64, Vec<f64>) {
    let k = w.len();
    let f = k - 1;
    let mut g = vec![0.0; k];
    let mut h = vec![0.0; k * k];
    let mut gt = vec![0.0; k];
    let mut trial = x.to_vec();
    let mut value = risk_derivatives(x, w, mu, &mut g, Some(&mut h));
    let mut gnorm = norm(&g[..f]);
    for _ in 0..NEWTON_MAX_ITER {
        if gnorm < GRAD_TOL {
            break;
        }
        // Levenberg shift until the free Hessian block is positive definite
        let diag = (0..f).map(|i| h[i * k + i].abs()).fold(1e-12, f64::max);
        let mut shift = 0.0;
        let mut d = loop {
            let mut hf = vec![0.0; f * f];
            for i in 0..f {
                hf[i * f..(i + 1) * f].copy_from_slice(&h[i * k..i * k + f]);
                hf[i * f + i] += shift;
            }
            if let Some(sol) = cholesky_solve(&mut hf, &g[..f], f) {
                break sol.into_iter().map(|v| -v).collect::<Vec<f64>>();
            }
            if shift > 1e12 * diag {
                break g[..f].iter().map(|v| -v).collect();
            }
            shift = if shift == 0.0 { 1e-8 * diag } else { shift * 10.0 };
        };
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            d = g[..f].iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-20 {
            for i in 0..f {
                trial[i] = x[i] + t * d[i];
            }
            trial[f] = 0.0;
            let v = risk_derivatives(&trial, w, mu, &mut gt, None);
            let tol = 1e-15 * value.abs().max(1.0);
            if v <= value + 1e-4 * t * slope + tol {
                // near the optimum the value stalls at rounding level; require
                // the gradient to shrink in that regime
                if v >= value - tol && norm(&gt[..f]) >= gnorm {
                    t *= 0.5;
                    continue;
                }
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        x.copy_from_slice(&trial);
        value = risk_derivatives(x, w, mu, &mut g, Some(&mut h));
        gnorm = norm(&g[..f]);
    }
    (value, gnorm, x.to_vec())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `A x = b` for symmetric positive definite `A` (overwritten).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-300) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}

/// Minimum of `Σ w_y ℓ_μ(s, y)` over the box `s ∈ [−Λ, Λ]^K`.
///
/// Projected gradient descent with backtracking, started from every corner
/// (when `K <= 8`) and a few random interior points.
pub fn minimize_comp_sum_risk_boxed(weights: &[f64], mu: f64, lambda: f64) -> RiskMinimum {
    let k = weights.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0_c5);
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; k]];
    if k <= 8 {
        for mask in 0..(1usize << k) {
            starts.push(
                (0..k)
                    .map(|i| if mask >> i & 1 == 1 { lambda } else { -lambda })
                    .collect(),
            );
        }
    }
    for _ in 0..4 {
        starts.push((0..k).map(|_| rng.gen_range(-lambda..lambda)).collect());
    }
    let mut runs: Vec<(f64, f64, Vec<f64>)> = starts
        .into_iter()
        .map(|mut x| projected_descent(weights, mu, lambda, &mut x))
        .collect();
    runs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (value, stat, x) = runs.swap_remove(0);
    RiskMinimum {
        value,
        softmax: crate::losses::softmax(&x),
        residual: stat,
        converged: stat < 1e-9,
    }
}

fn projected_descent(w: &[f64], mu: f64, lambda: f64, x: &mut [f64]) -> (f64, f64, Vec<f64>) {
    let k = x.len();
    let mut g = vec![0.0; k];
    let mut gt = vec![0.0; k];
    let mut trial = vec![0.0; k];
    let mut value = risk_derivatives(x, w, mu, &mut g, None);
    let mut step = 1.0;
    let stationarity = |x: &[f64], g: &[f64]| -> f64 {
        x.iter()
            .zip(g)
            .map(|(xi, gi)| (xi - (xi - gi).clamp(-lambda, lambda)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut stat = stationarity(x, &g);
    for _ in 0..20_000 {
        if stat < 1e-11 {
            break;
        }
        let mut accepted = false;
        while step > 1e-16 {
            for i in 0..k {
                trial[i] = (x[i] - step * g[i]).clamp(-lambda, lambda);
            }
            let v = risk_derivatives(&trial, w, mu, &mut gt, None);
            let dec: f64 = g
                .iter()
                .zip(x.iter().zip(&trial))
                .map(|(gi, (a, b))| gi * (a - b))
                .sum();
            if v <= value - 1e-4 * dec || (v <= value && dec < 1e-14) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        x.copy_from_slice(&trial);
        value = risk_derivatives(x, w, mu, &mut g, None);
        stat = stationarity(x, &g);
        step = (step * 2.0).min(1e3);
    }
    (value, stat, x.to_vec())
}

// ---------------------------------------------------------------------------
// Closed forms for deterministic distributions

/// `V(μ, c) = inf_s [ℓ_μ(s, y) + (1 − c) ℓ_μ(s, n)]` for deterministic `p`.
///
/// For `μ < 2` the infimum is attained in the interior with softmax ratio
/// `(1 − c)^(1/(2−μ))`. For `μ >= 2` it is attained in the limit where the
/// correct label takes all the mass, giving `(1 − c)/(μ − 1)`.
pub fn closed_form_v(mu: f64, cost: CostModel) -> f64 {
    let c = cost.value();
    let mu = CompSumParams::new(mu).map(|p| p.mu()).unwrap_or(mu);
    if mu == 1.0 {
        (2.0 - c) * (2.0 - c).ln() - (1.0 - c) * (1.0 - c).ln()
    } else if mu < 2.0 {
        stationary_value(mu, cost)
    } else {
        (1.0 - c) / (mu - 1.0)
    }
}

/// Risk at the interior stationary point
/// `(1/(1−μ))[(1 + (1−c)^(1/(2−μ)))^(2−μ) − (2 − c)]`, `μ ∉ {1, 2}`.
///
/// This is the minimum for `μ < 2`; for `μ > 2` it is a maximum along the
/// segment between the two vertices.
pub fn stationary_value(mu: f64, cost: CostModel) -> f64 {
    let c = cost.value();
    let a = (1.0 - c).powf(1.0 / (2.0 - mu));
    ((1.0 + a).powf(2.0 - mu) - (2.0 - c)) / (1.0 - mu)
}

/// `(s*(y), s*(n))` at the deterministic optimum.
pub fn optimal_softmax_deterministic(mu: f64, cost: CostModel) -> (f64, f64) {
    let mu = CompSumParams::new(mu).map(|p| p.mu()).unwrap_or(mu);
    if mu >= 2.0 {
        return (1.0, 0.0);
    }
    let a = cost.accept_mass().powf(1.0 / (2.0 - mu));
    (1.0 / (1.0 + a), a / (1.0 + a))
}

// ---------------------------------------------------------------------------
// Minimizability gaps

/// Hypothesis sets for which the best-in-class risk can be computed.
#[derive(Debug, Clone)]
pub enum HypothesisFamily {
    /// Every score vector is reachable at every atom independently.
    SymmetricComplete,
    /// A single hypothesis given by its score vector at each atom.
    Fixed(Vec<Vec<f64>>),
    /// Models trained on the population objective; the best of `restarts`
    /// seeded runs stands in for the infimum over the family.
    Trained { cfg: TrainConfig, restarts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub mu: f64,
    pub c: f64,
    /// Present only for problems whose atoms are all deterministic.
    #[serde(rename = "closed_form_V")]
    pub closed_form_v: Option<f64>,
    /// `Σ_x w_x C*_L(x)`: expected pointwise best conditional risk.
    #[serde(rename = "numeric_V")]
    pub numeric_v: f64,
    /// `E*_L(family)`.
    pub best_in_class: f64,
    /// `E*_L(family) − numeric_v`.
    pub gap_estimate: f64,
    /// `(s*(y_max), s*(n))` for deterministic problems.
    pub optimal_softmax: Option<(f64, f64)>,
    pub oracle_residual: f64,
    pub converged: bool,
}

/// `M_L(family) = E*_L(family) − E_x[C*_L(x)]` for the `L_μ` surrogate.
///
/// For a clamped trained family the pointwise reference is the minimum over
/// the clamp box.
pub fn minimizability_gap(
    problem: &DiscreteProblem,
    family: &HypothesisFamily,
    params: CompSumParams,
) -> Result<GapReport> {
    let mu = params.mu();
    let clamp = match family {
        HypothesisFamily::Trained { cfg, .. } => cfg.clamp,
        _ => None,
    };
    let mut numeric_v = 0.0;
    let mut residual: f64 = 0.0;
    let mut converged = true;
    for a in problem.atoms() {
        let w = a.dist.augmented();
        let m = match clamp {
            Some(l) => minimize_comp_sum_risk_boxed(&w, mu, l),
            None => minimize_comp_sum_risk(&w, mu),
        };
        numeric_v += a.weight * m.value;
        residual = residual.max(m.residual);
        converged &= m.converged;
    }
    let best_in_class = match family {
        HypothesisFamily::SymmetricComplete => numeric_v,
        HypothesisFamily::Fixed(scores) => {
            if scores.len() != problem.atoms().len() {
                return Err(Error::DimensionMismatch {
                    expected: problem.atoms().len(),
                    actual: scores.len(),
                });
            }
            problem
                .atoms()
                .iter()
                .zip(scores)
                .map(|(a, s)| {
                    if s.len() != problem.n() + 1 {
                        return Err(Error::DimensionMismatch {
                            expected: problem.n() + 1,
                            actual: s.len(),
                        });
                    }
                    Ok(a.weight * conditional_risk_surrogate(s, &a.dist, params))
                })
                .sum::<Result<f64>>()?
        }
        HypothesisFamily::Trained { cfg, restarts } => {
            best_trained_surrogate_risk(problem, cfg, params, (*restarts).max(1))?.0
        }
    };
    let deterministic = problem.atoms().iter().all(|a| a.dist.is_deterministic());
    let cost = problem.cost();
    Ok(GapReport {
        mu,
        c: cost.value(),
        closed_form_v: deterministic.then(|| closed_form_v(mu, cost)),
        numeric_v,
        best_in_class,
        gap_estimate: best_in_class - numeric_v,
        optimal_softmax: deterministic.then(|| optimal_softmax_deterministic(mu, cost)),
        oracle_residual: residual,
        converged,
    })
}

/// Trains `restarts` population runs with seeds `cfg.seed + i` and returns
/// the lowest exact surrogate risk with its model.
pub fn best_trained_surrogate_risk(
    problem: &DiscreteProblem,
    cfg: &TrainConfig,
    params: CompSumParams,
    restarts: usize,
) -> Result<(f64, Model)> {
    let sample = problem.population_sample()?;
    let spec = ModelSpec {
        kind: cfg.model,
        input_dim: sample.dim(),
        output_count: problem.n() + 1,
        clamp: cfg.clamp,
    };
    let runs: Vec<Result<(f64, Model)>> = (0..restarts as u64)
        .into_par_iter()
        .map(|i| {
            let mut cfg = cfg.clone();
            cfg.seed = cfg.seed.wrapping_add(i);
            let mut model = Model::new(spec, cfg.seed)?;
            fit_comp_sum(&mut model, &sample, &cfg, params, Some(problem.cost()))?;
            Ok((surrogate_risk(problem, &model, params)?, model))
        })
        .collect();
    let mut best: Option<(f64, Model)> = None;
    for r in runs {
        let (v, m) = r?;
        if best.as_ref().map_or(true, |b| v < b.0) {
            best = Some((v, m));
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Exact `E_x[C_L(h(x), x)]` of a model on a featured problem.
pub fn surrogate_risk(
    problem: &DiscreteProblem,
    model: &Model,
    params: CompSumParams,
) -> Result<f64> {
    problem
        .atoms()
        .iter()
        .map(|a| {
            let x = a
                .features
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("problem atoms carry no features".into()))?;
            Ok(a.weight * conditional_risk_surrogate(&model.forward(x)?, &a.dist, params))
        })
        .sum()
}

/// Per-atom decisions of a single-stage model on a featured problem.
pub fn model_decisions(problem: &DiscreteProblem, model: &Model) -> Result<Vec<Decision>> {
    problem
        .atoms()
        .iter()
        .map(|a| {
            let x = a
                .features
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("problem atoms carry no features".into()))?;
            Ok(predict_label(&model.forward(x)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Γ transforms

/// Non-decreasing concave transform with `Γ(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum GammaTransform {
    /// `√(k t)`.
    Sqrt { k: f64 },
    /// `k t`.
    Linear { k: f64 },
    /// `outer · inner(t / arg)`.
    Rescaled {
        inner: Box<GammaTransform>,
        outer: f64,
        arg: f64,
    },
}

impl GammaTransform {
    /// Transform for `L_μ` against the abstention loss under a symmetric,
    /// complete family.
    pub fn comp_sum(params: CompSumParams, cost: CostModel, n: usize) -> Self {
        let (mu, c) = (params.mu(), cost.value());
        let n1 = (n + 1) as f64;
        if mu < 1.0 {
            GammaTransform::Sqrt {
                k: (2.0 - c) * 2f64.powf(mu) * (2.0 - mu),
            }
        } else if mu < 2.0 {
            GammaTransform::Sqrt {
                k: 2.0 * (2.0 - c) * n1.powf(mu - 1.0),
            }
        } else {
            GammaTransform::Linear {
                k: (mu - 1.0) * n1.powf(mu - 1.0),
            }
        }
    }

    /// Evaluates at `max(t, 0)`.
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            GammaTransform::Sqrt { k } => (k * t).sqrt(),
            GammaTransform::Linear { k } => k * t,
            GammaTransform::Rescaled { inner, outer, arg } => outer * inner.eval(t / arg),
        }
    }

    pub fn is_linear(&self) -> bool {
        match self {
            GammaTransform::Linear { .. } => true,
            GammaTransform::Sqrt { .. } => false,
            GammaTransform::Rescaled { inner, .. } => inner.is_linear(),
        }
    }

    /// `t ↦ factor · Γ(t)`.
    pub fn scaled(self, factor: f64) -> Self {
        GammaTransform::Rescaled {
            inner: Box::new(self),
            outer: factor,
            arg: 1.0,
        }
    }

    /// `Γ(0) = 0`, non-decreasing and concave on 1000 grid points of `[0, 10]`.
    pub fn satisfies_invariants(&self) -> bool {
        let pts: Vec<f64> = (0..1000).map(|i| 10.0 * i as f64 / 999.0).collect();
        let v: Vec<f64> = pts.iter().map(|&t| self.eval(t)).collect();
        if v[0].abs() > 0.0 {
            return false;
        }
        let scale = v.iter().fold(1.0f64, |a, b| a.max(b.abs()));
        let tol = 1e-12 * scale;
        v.windows(2).all(|w| w[1] >= w[0] - tol)
            && v.windows(3).all(|w| w[0] + w[2] <= 2.0 * w[1] + tol)
    }
}

pub fn gamma_mu(t: f64, params: CompSumParams, cost: CostModel, n: usize) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma argument must be >= 0, got {t}"
        )));
    }
    Ok(GammaTransform::comp_sum(params, cost, n).eval(t))
}

/// `t ↦ (2 − c) Γ(t / (2 − c))`; linear transforms map to themselves.
pub fn transform_bound(gamma: &GammaTransform, cost: CostModel) -> GammaTransform {
    let s = 2.0 - cost.value();
    match gamma {
        GammaTransform::Linear { k } => GammaTransform::Linear { k: *k },
        GammaTransform::Sqrt { k } => GammaTransform::Sqrt { k: k * s },
        g => GammaTransform::Rescaled {
            inner: Box::new(g.clone()),
            outer: s,
            arg: s,
        },
    }
}

// ---------------------------------------------------------------------------
// Bound-check harness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub trials: usize,
    pub seed: u64,
    /// Atoms per random problem in expectation-form checks.
    pub atoms: usize,
    /// Random problems drawn for expectation-form checks.
    pub problems: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            seed: 0,
            atoms: 5,
            problems: 100,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trial count must be >= 1".into()));
        }
        if self.atoms == 0 {
            return Err(Error::InvalidArgument(
                "atoms per problem must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Flattened inputs: the conditional probabilities followed by the scores.
    pub inputs: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

const MAX_STORED_VIOLATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub name: String,
    pub trials: usize,
    pub violation_count: usize,
    /// The first violations found (at most 50).
    pub violations: Vec<Violation>,
    /// Extremes of `rhs − lhs` over converged trials.
    pub max_slack: f64,
    pub min_slack: f64,
    /// Trials skipped because the oracle did not converge.
    pub nonconverged: usize,
    pub passed: bool,
}

impl BoundCheckReport {
    fn empty(name: &str) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            violation_count: 0,
            violations: Vec::new(),
            max_slack: f64::NEG_INFINITY,
            min_slack: f64::INFINITY,
            nonconverged: 0,
            passed: true,
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64, tol: f64, inputs: impl FnOnce() -> Vec<f64>) {
        self.trials += 1;
        let slack = rhs - lhs;
        self.max_slack = self.max_slack.max(slack);
        self.min_slack = self.min_slack.min(slack);
        if lhs > rhs + tol {
            self.violation_count += 1;
            if self.violations.len() < MAX_STORED_VIOLATIONS {
                self.violations.push(Violation {
                    inputs: inputs(),
                    lhs,
                    rhs,
                });
            }
        }
    }

    fn skip(&mut self) {
        self.trials += 1;
        self.nonconverged += 1;
    }

    /// Associative merge of two partial reports.
    pub fn merge(mut self, other: Self) -> Self {
        self.trials += other.trials;
        self.violation_count += other.violation_count;
        for v in other.violations {
            if self.violations.len() < MAX_STORED_VIOLATIONS {
                self.violations.push(v);
            }
        }
        self.max_slack = self.max_slack.max(other.max_slack);
        self.min_slack = self.min_slack.min(other.min_slack);
        self.nonconverged += other.nonconverged;
        self.passed = self.violation_count == 0;
        self
    }

    fn finish(mut self) -> Self {
        self.passed = self.violation_count == 0;
        self
    }
}

/// Absolute violation tolerance on top of the oracle residual.
pub const VIOLATION_TOL: f64 = 1e-9;
const CHUNK: usize = 256;

fn chunk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `trial(rng, report)` `trials` times in fixed-size chunks, each with
/// its own stream, so the outcome is independent of the worker count.
fn run_chunked<F>(name: &str, trials: usize, seed: u64, trial: F) -> BoundCheckReport
where
    F: Fn(&mut ChaCha8Rng, &mut BoundCheckReport) + Sync,
{
    let chunks = trials.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = chunk_rng(seed, ci as u64);
            let mut rep = BoundCheckReport::empty(name);
            let count = CHUNK.min(trials - ci * CHUNK);
            for _ in 0..count {
                trial(&mut rng, &mut rep);
            }
            rep
        })
        .reduce(|| BoundCheckReport::empty(name), BoundCheckReport::merge)
        .finish()
}

/// Uniform point on the probability simplex (normalized exponential spacings).
pub fn sample_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Mixture over the simplex: uniform, near-uniform, and sparse draws.
fn sample_p<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => sample_simplex(rng, n),
        1 => {
            let eps = 10f64.powf(rng.gen_range(-4.0..-0.5));
            let mut v: Vec<f64> = (0..n)
                .map(|_| 1.0 + eps * rng.gen_range(-1.0..1.0))
                .collect();
            let t: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= t);
            v
        }
        _ => {
            let keep = rng.gen_range(1..=n);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..keep {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            let sub = sample_simplex(rng, keep);
            let mut v = vec![0.0; n];
            for (i, &s) in idx[..keep].iter().zip(&sub) {
                v[*i] = s;
            }
            v
        }
    }
}

fn small_magnitude<R: Rng>(rng: &mut R) -> f64 {
    let m = 10f64.powf(rng.gen_range(-6.0..0.0));
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Mixture over score vectors: uniform on `[−5, 5]^K`, the optimal logits
/// with their top two entries pulled together, and near-constant vectors.
fn sample_scores<R: Rng>(rng: &mut R, k: usize, optimal_softmax: &[f64]) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        1 => {
            let mut s: Vec<f64> = optimal_softmax.iter().map(|q| q.max(1e-12).ln()).collect();
            let i = argmax(&s);
            let mut rest = s.clone();
            rest[i] = f64::NEG_INFINITY;
            let j = argmax(&rest);
            let mid = 0.5 * (s[i] + s[j]);
            s[i] = mid + small_magnitude(rng);
            s[j] = mid + small_magnitude(rng);
            s
        }
        _ => {
            let eps = 10f64.powf(rng.gen_range(-6.0..0.0));
            (0..k).map(|_| eps * rng.gen_range(-1.0..1.0)).collect()
        }
    }
}

/// `L_μ` against the abstention loss with `Γ_μ`.
pub fn check_comp_sum_bound(
    params: CompSumParams,
    cost: CostModel,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<BoundCheckReport> {
    check_comp_sum_bound_with(
        params,
        cost,
        n,
        sampler,
        &GammaTransform::comp_sum(params, cost, n),
    )
}

/// Pointwise form `ΔC_abs(s) <= Γ(ΔC_L(s))` on `sampler.trials` random
/// `(p, s)` pairs, then the expectation form on `sampler.problems` random
/// problems.
pub fn check_comp_sum_bound_with(
    params: CompSumParams,
    cost: CostModel,
    n: usize,
    sampler: &SamplerConfig,
    gamma: &GammaTransform,
) -> Result<BoundCheckReport> {
    sampler.validate()?;
    if n < 2 {
        return Err(Error::InvalidArgument("n must be >= 2".into()));
    }
    let name = format!(
        "abstention vs L_mu (mu={}, c={}, n={n})",
        params.mu(),
        cost.value()
    );
    let pointwise = run_chunked(&name, sampler.trials, sampler.seed, |rng, rep| {
        let dist = ConditionalDistribution::new(sample_p(rng, n), cost).expect("valid draw");
        let opt = min_conditional_risk_surrogate(&dist, params);
        let s = sample_scores(rng, n + 1, &opt.softmax);
        if !opt.converged {
            rep.skip();
            return;
        }
        let lhs = abstention_calibration_gap(predict_label(&s), &dist);
        let dl = conditional_risk_surrogate(&s, &dist, params) - opt.value;
        let rhs = gamma.eval(dl + opt.residual);
        rep.record(lhs, rhs, VIOLATION_TOL, || [dist.p(), &s[..]].concat());
    });
    let expectation = run_chunked(&name, sampler.problems, sampler.seed ^ 0xe1, |rng, rep| {
        let weights = sample_simplex(rng, sampler.atoms);
        let (mut lhs, mut dl, mut res) = (0.0, 0.0, 0.0f64);
        let mut inputs = Vec::new();
        for w in weights {
            let dist = ConditionalDistribution::new(sample_p(rng, n), cost).expect("valid draw");
            let opt = min_conditional_risk_surrogate(&dist, params);
            let s = sample_scores(rng, n + 1, &opt.softmax);
            if !opt.converged {
                rep.skip();
                return;
            }
            lhs += w * abstention_calibration_gap(predict_label(&s), &dist);
            dl += w * (conditional_risk_surrogate(&s, &dist, params) - opt.value);
            res = res.max(opt.residual);
            inputs.push(w);
            inputs.extend_from_slice(dist.p());
            inputs.extend_from_slice(&s);
        }
        rep.record(lhs, gamma.eval(dl + res), VIOLATION_TOL, || inputs);
    });
    Ok(pointwise.merge(expectation).finish())
}

/// Base losses on `n + 1` categories with a known bound against the
/// `(n + 1)`-class zero-one loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// `2 ℓ_1`: zero-one gap `<= √(gap)`.
    DoubledLogistic,
    /// `ℓ_2`: zero-one gap `<= (n + 1) · gap`.
    MeanAbsolute,
}

impl BaseLoss {
    pub fn gamma(self, n: usize) -> GammaTransform {
        match self {
            BaseLoss::DoubledLogistic => GammaTransform::Sqrt { k: 1.0 },
            BaseLoss::MeanAbsolute => GammaTransform::Linear { k: (n + 1) as f64 },
        }
    }

    fn conditional_risk(self, s: &[f64], weights: &[f64]) -> f64 {
        match self {
            BaseLoss::DoubledLogistic => 2.0 * weighted_comp_sum_risk(s, weights, 1.0),
            BaseLoss::MeanAbsolute => weighted_comp_sum_risk(s, weights, 2.0),
        }
    }

    fn minimum(self, weights: &[f64]) -> RiskMinimum {
        match self {
            BaseLoss::DoubledLogistic => {
                let mut m = minimize_comp_sum_risk(weights, 1.0);
                m.value *= 2.0;
                m.residual *= 2.0;
                m
            }
            BaseLoss::MeanAbsolute => minimize_comp_sum_risk(weights, 2.0),
        }
    }
}

/// Expectation-form check of the transformed bound
/// `(2 − c) Γ(t / (2 − c))` for `base(s, y) + (1 − c) base(s, n)` on
/// `sampler.trials` random problems.
pub fn check_transformed_bound(
    base: BaseLoss,
    cost: CostModel,
    n: usize,
    sampler: &SamplerConfig,
    gamma: Option<&GammaTransform>,
) -> Result<BoundCheckReport> {
    sampler.validate()?;
    let gamma = gamma
        .cloned()
        .unwrap_or_else(|| transform_bound(&base.gamma(n), cost));
    let name = format!(
        "abstention vs generic surrogate ({base:?}, c={}, n={n})",
        cost.value()
    );
    Ok(run_chunked(
        &name,
        sampler.trials,
        sampler.seed,
        |rng, rep| {
            let weights = sample_simplex(rng, sampler.atoms);
            let (mut lhs, mut dl, mut res) = (0.0, 0.0, 0.0f64);
            let mut inputs = Vec::new();
            for w in weights {
                let dist =
                    ConditionalDistribution::new(sample_p(rng, n), cost).expect("valid draw");
                let aug = dist.augmented();
                let opt = base.minimum(&aug);
                let s = sample_scores(rng, n + 1, &opt.softmax);
                if !opt.converged {
                    rep.skip();
                    return;
                }
                lhs += w * abstention_calibration_gap(predict_label(&s), &dist);
                dl += w * (base.conditional_risk(&s, &aug) - opt.value);
                res = res.max(opt.residual);
                inputs.push(w);
                inputs.extend_from_slice(dist.p());
                inputs.extend_from_slice(&s);
            }
            rep.record(lhs, gamma.eval(dl + res), VIOLATION_TOL, || inputs);
        },
    ))
}

/// Binary conditional minimum of `a Φ(t) + c Φ(−t)` over `t`.
fn second_stage_minimum(a: f64, c: f64, phi: MarginFunction) -> f64 {
    if a <= 0.0 {
        0.0
    } else {
        (a + c) * phi.conditional_infimum(a / (a + c))
    }
}

/// `g1 + (1 + c) Γ2(t2 / c)`, or `g1 + Γ2(t2)` when `Γ2` is linear.
pub fn two_stage_rhs(g1: f64, gamma2: &GammaTransform, t2: f64, c: f64) -> f64 {
    if gamma2.is_linear() {
        g1 + gamma2.eval(t2)
    } else {
        g1 + (1.0 + c) * gamma2.eval(t2 / c)
    }
}

/// Two-stage bound on one problem over `sampler.trials` random
/// (predictor, rejector) score assignments.
///
/// With `T1` the first-stage `ℓ_1` calibration gap and `T2` the
/// second-stage gap, both averaged over atoms, checks
/// `ΔE_abs <= Γ1(T1) + (1 + c) Γ2(T2 / c)`, or `Γ1(T1) + Γ2(T2)` when `Γ2`
/// is linear.
pub fn check_two_stage_bound(
    problem: &DiscreteProblem,
    gamma1: &GammaTransform,
    gamma2: &GammaTransform,
    phi: MarginFunction,
    sampler: &SamplerConfig,
) -> Result<BoundCheckReport> {
    sampler.validate()?;
    let n = problem.n();
    let c = problem.cost().value();
    let first_stage: Vec<RiskMinimum> = problem
        .atoms()
        .iter()
        .map(|a| minimize_comp_sum_risk(a.dist.p(), 1.0))
        .collect();
    if first_stage.iter().any(|m| !m.converged) {
        let mut rep = BoundCheckReport::empty("two-stage");
        rep.trials = sampler.trials;
        rep.nonconverged = sampler.trials;
        return Ok(rep.finish());
    }
    let res1 = first_stage.iter().map(|m| m.residual).fold(0.0, f64::max);
    let name = format!("two-stage ({}, c={c}, n={n})", phi.name());
    Ok(run_chunked(
        &name,
        sampler.trials,
        sampler.seed,
        |rng, rep| {
            let (mut lhs, mut t1, mut t2) = (0.0, 0.0, 0.0);
            let mut inputs = Vec::new();
            for (a, opt) in problem.atoms().iter().zip(&first_stage) {
                let h = match rng.gen_range(0..3) {
                    0 => (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<_>>(),
                    _ => opt.softmax.iter().map(|q| q.max(1e-12).ln()).collect(),
                };
                let top = argmax(&h);
                let m = h[top];
                let r = m + match rng.gen_range(0..2) {
                    0 => rng.gen_range(-5.0..5.0),
                    _ => small_magnitude(rng),
                };
                let decision = if r >= m {
                    Decision::Abstain
                } else {
                    Decision::Label(top)
                };
                lhs += a.weight * abstention_calibration_gap(decision, &a.dist);
                t1 += a.weight * (weighted_comp_sum_risk(&h, a.dist.p(), 1.0) - opt.value);
                let miss = 1.0 - a.dist.p()[top];
                let risk2 = miss * phi.value(r - m) + c * phi.value(m - r);
                t2 += a.weight * (risk2 - second_stage_minimum(miss, c, phi));
                inputs.push(a.weight);
                inputs.extend_from_slice(&h);
                inputs.push(r);
            }
            let rhs = two_stage_rhs(gamma1.eval(t1 + res1), gamma2, t2, c);
            rep.record(lhs, rhs, VIOLATION_TOL, || inputs);
        },
    ))
}

// ---------------------------------------------------------------------------
// Empirical calibration functions

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pair", rename_all = "snake_case")]
pub enum LossPair {
    /// Abstention loss against `L_μ`.
    AbstentionVsCompSum { mu: f64, c: f64, n: usize },
    /// Abstention loss against itself.
    AbstentionIdentity { c: f64, n: usize },
    /// Binary zero-one loss (positive iff score >= 0) against `Φ`.
    BinaryMargin { phi: MarginFunction },
    /// `n`-class zero-one loss against `ℓ_1`.
    ZeroOneVsLogistic { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub pair: LossPair,
    /// `bins + 1` edges over `[0, max_gap]`.
    pub edges: Vec<f64>,
    /// Largest target gap seen per bin; `None` for empty bins.
    pub max_target: Vec<Option<f64>>,
    pub samples: usize,
    /// `max target² / surrogate` over samples with surrogate gap `>= 1e-8`.
    pub sqrt_constant: f64,
    /// `max target / surrogate` over the same samples.
    pub linear_constant: f64,
}

impl CalibrationCurve {
    /// True when `Γ(upper edge) + 1e-9 >= max target` on every non-empty bin.
    pub fn dominated_by(&self, gamma: &GammaTransform) -> bool {
        self.max_target
            .iter()
            .zip(&self.edges[1..])
            .all(|(v, &u)| v.map_or(true, |v| v <= gamma.eval(u) + 1e-9))
    }

    /// `Γ(t) = √(k̂ t)` fitted to the observed samples.
    pub fn sqrt_envelope(&self) -> GammaTransform {
        GammaTransform::Sqrt {
            k: self.sqrt_constant,
        }
    }
}

/// Draws `(surrogate gap, target gap)` pairs for `pair` and keeps the
/// largest target gap per surrogate-gap bin.
pub fn estimate_calibration_function(
    pair: LossPair,
    sampler: &SamplerConfig,
    bins: usize,
    max_gap: f64,
) -> Result<CalibrationCurve> {
    sampler.validate()?;
    if bins == 0 || !(max_gap > 0.0) {
        return Err(Error::InvalidArgument(
            "need bins >= 1 and max_gap > 0".into(),
        ));
    }
    let draw = |rng: &mut ChaCha8Rng| -> Result<(f64, f64)> {
        Ok(match pair {
            LossPair::AbstentionVsCompSum { mu, c, n } => {
                let params = CompSumParams::new(mu)?;
                let dist = ConditionalDistribution::new(sample_p(rng, n), CostModel::new(c)?)?;
                let opt = min_conditional_risk_surrogate(&dist, params);
                let s = sample_scores(rng, n + 1, &opt.softmax);
                (
                    conditional_risk_surrogate(&s, &dist, params) - opt.value,
                    abstention_calibration_gap(predict_label(&s), &dist),
                )
            }
            LossPair::AbstentionIdentity { c, n } => {
                let dist = ConditionalDistribution::new(sample_p(rng, n), CostModel::new(c)?)?;
                let s: Vec<f64> = (0..=n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let g = abstention_calibration_gap(predict_label(&s), &dist);
                (g, g)
            }
            LossPair::BinaryMargin { phi } => {
                let eta = match rng.gen_range(0..2) {
                    0 => rng.gen::<f64>(),
                    _ => 0.5 + 0.5 * small_magnitude(rng),
                };
                let f = match rng.gen_range(0..2) {
                    0 => rng.gen_range(-5.0..5.0),
                    _ => small_magnitude(rng),
                };
                let sur =
                    eta * phi.value(f) + (1.0 - eta) * phi.value(-f) - phi.conditional_infimum(eta);
                let target = if f >= 0.0 { 1.0 - eta } else { eta } - eta.min(1.0 - eta);
                (sur, target)
            }
            LossPair::ZeroOneVsLogistic { n } => {
                let p = sample_p(rng, n);
                let opt = minimize_comp_sum_risk(&p, 1.0);
                let s = sample_scores(rng, n, &opt.softmax);
                (
                    weighted_comp_sum_risk(&s, &p, 1.0) - opt.value,
                    p[argmax(&p)] - p[argmax(&s)],
                )
            }
        })
    };
    let chunks = sampler.trials.div_ceil(CHUNK);
    let parts: Vec<Result<Vec<(f64, f64)>>> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = chunk_rng(sampler.seed, ci as u64);
            (0..CHUNK.min(sampler.trials - ci * CHUNK))
                .map(|_| draw(&mut rng))
                .collect()
        })
        .collect();
    let mut edges: Vec<f64> = (0..=bins)
        .map(|i| max_gap * i as f64 / bins as f64)
        .collect();
    edges[bins] = max_gap;
    let mut max_target = vec![None; bins];
    let (mut kq, mut kl) = (0.0f64, 0.0f64);
    for part in parts {
        for (sur, target) in part? {
            let sur = sur.max(0.0);
            if sur >= 1e-8 {
                kq = kq.max(target * target / sur);
                kl = kl.max(target / sur);
            }
            if sur <= max_gap {
                let b = ((sur / max_gap * bins as f64) as usize).min(bins - 1);
                max_target[b] = Some(max_target[b].map_or(target, |v: f64| v.max(target)));
            }
        }
    }
    Ok(CalibrationCurve {
        pair,
        edges,
        max_target,
        samples: sampler.trials,
        sqrt_constant: kq,
        linear_constant: kl,
    })
}

// ---------------------------------------------------------------------------
// Bounded exponential-margin demonstration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxGapRecord {
    pub lambda: f64,
    pub eta: f64,
    /// `inf_{|h| <= Λ} η e^{−h} + (1 − η) e^{h}`.
    pub bounded_inf: f64,
    /// `2 √(η (1 − η))`.
    pub unbounded_inf: f64,
    pub difference: f64,
}

/// Best bounded versus unbounded conditional exponential risk at one point.
pub fn approx_vs_gap_demo(lambda: f64, eta: f64) -> Result<ApproxGapRecord> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!(
            "eta must lie in [0, 1], got {eta}"
        )));
    }
    let risk = |h: f64| eta * (-h).exp() + (1.0 - eta) * h.exp();
    let unbounded = 2.0 * (eta * (1.0 - eta)).sqrt();
    let threshold = if eta == 0.0 || eta == 1.0 {
        f64::INFINITY
    } else {
        0.5 * (eta / (1.0 - eta)).ln().abs()
    };
    let bounded = if lambda >= threshold {
        unbounded
    } else if eta > 0.5 {
        risk(lambda)
    } else {
        risk(-lambda)
    };
    // at η ∈ {0, 1} the unbounded infimum is exactly 0
    Ok(ApproxGapRecord {
        lambda,
        eta,
        bounded_inf: bounded,
        unbounded_inf: unbounded,
        difference: bounded - unbounded,
    })
}

// ---------------------------------------------------------------------------
// Second-stage helpers shared with the CLI

/// `(1 − p[argmax h])`: the second-stage miss weight at one atom.
pub fn miss_weight(predictor_scores: &[f64], dist: &ConditionalDistribution) -> f64 {
    1.0 - dist.p()[argmax(predictor_scores)]
}

/// Conditional second-stage risk and its pointwise minimum.
pub fn second_stage_gap(
    predictor_scores: &[f64],
    rejector: f64,
    dist: &ConditionalDistribution,
    phi: MarginFunction,
) -> f64 {
    let a = miss_weight(predictor_scores, dist);
    let c = dist.cost().value();
    let m = predictor_scores[argmax(predictor_scores)];
    let risk = a * phi.value(rejector - m) + c * phi.value(m - rejector);
    risk - second_stage_minimum(a, c, phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(c: f64) -> CostModel {
        CostModel::new(c).unwrap()
    }

    fn dist(p: &[f64], c: f64) -> ConditionalDistribution {
        ConditionalDistribution::new(p.to_vec(), cost(c)).unwrap()
    }

    #[test]
    fn abstention_risk_examples() {
        let d = dist(&[0.6, 0.4], 0.3);
        assert!((conditional_risk_abstention(Decision::Abstain, &d) - 0.3).abs() < 1e-15);
        assert!((conditional_risk_abstention(Decision::Label(0), &d) - 0.4).abs() < 1e-15);
        assert!((conditional_risk_abstention(Decision::Label(1), &d) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn chow_examples() {
        assert_eq!(chow_decision(&dist(&[0.7, 0.3], 0.2)), Decision::Abstain);
        assert_eq!(chow_decision(&dist(&[0.9, 0.1], 0.2)), Decision::Label(0));
        assert_eq!(chow_decision(&dist(&[0.5, 0.5], 0.6)), Decision::Label(0));
    }

    #[test]
    fn calibration_gap_examples() {
        let d = dist(&[0.7, 0.3], 0.2);
        assert!((abstention_calibration_gap(Decision::Label(0), &d) - 0.1).abs() < 1e-12);
        assert_eq!(abstention_calibration_gap(chow_decision(&d), &d), 0.0);
        let d = dist(&[0.9, 0.1], 0.2);
        assert!((abstention_calibration_gap(Decision::Abstain, &d) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn surrogate_risk_examples() {
        let mu1 = CompSumParams::new(1.0).unwrap();
        let mu2 = CompSumParams::new(2.0).unwrap();
        let det = dist(&[1.0, 0.0], 0.5);
        let v = conditional_risk_surrogate(&[0.0; 3], &det, mu1);
        assert!((v - 1.5 * 3f64.ln()).abs() < 1e-14);
        let v = conditional_risk_surrogate(&[0.0; 3], &dist(&[0.5, 0.5], 0.5), mu2);
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn oracle_matches_closed_forms() {
        for (mu, c, expect) in [
            (2.0, 0.05, 0.95),
            (1.0, 0.5, 0.954_771_252_442_219),
            (0.0, 0.5, 1.414_213_562_373_095),
        ] {
            let d = dist(&[1.0, 0.0], c);
            let m = min_conditional_risk_surrogate(&d, CompSumParams::new(mu).unwrap());
            assert!(m.converged);
            assert!((m.value - expect).abs() < 1e-9, "mu={mu}: {}", m.value);
            assert!((closed_form_v(mu, cost(c)) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_point_is_not_minimal_above_two() {
        let c = cost(0.5);
        let stationary = stationary_value(3.0, c);
        let d = dist(&[1.0, 0.0], 0.5);
        let m = min_conditional_risk_surrogate(&d, CompSumParams::new(3.0).unwrap());
        assert!((m.value - 0.25).abs() < 1e-12);
        assert!(stationary > m.value + 0.3, "{stationary}");
        // the stationary value is attained at the interior point
        let a = 0.5f64.powf(-1.0);
        let s = [0.0, -700.0, a.ln()];
        let v = conditional_risk_surrogate(&s, &d, CompSumParams::new(3.0).unwrap());
        assert!((v - stationary).abs() < 1e-9, "{v} vs {stationary}");
    }

    #[test]
    fn gamma_examples() {
        let mu = |m: f64| CompSumParams::new(m).unwrap();
        assert!((gamma_mu(0.03, mu(1.0), cost(0.5), 2).unwrap() - 0.3).abs() < 1e-15);
        let g = gamma_mu(0.375, mu(0.5), cost(0.5), 2).unwrap();
        assert!((g - 1.092_356_486_341_48).abs() < 1e-12);
        assert!((gamma_mu(0.01, mu(3.0), cost(0.5), 2).unwrap() - 0.18).abs() < 1e-15);
        assert!(gamma_mu(-1.0, mu(1.0), cost(0.5), 2).is_err());
    }

    #[test]
    fn transform_examples() {
        let t = transform_bound(&GammaTransform::Sqrt { k: 1.0 }, cost(0.5));
        assert!((t.eval(0.015) - 0.15).abs() < 1e-15);
        let lin = GammaTransform::Linear { k: 3.0 };
        assert_eq!(transform_bound(&lin, cost(0.3)), lin);
        let nested = transform_bound(&lin.clone().scaled(0.5), cost(0.3));
        assert_eq!(nested.eval(0.0), 0.0);
        assert!(nested.satisfies_invariants());
    }

    #[test]
    fn demo_examples() {
        let r = approx_vs_gap_demo(2.0, 1.0).unwrap();
        assert_eq!(r.unbounded_inf, 0.0);
        assert!((r.difference - (-2f64).exp()).abs() < 1e-15);
        let r = approx_vs_gap_demo(0.0, 0.5).unwrap();
        assert_eq!(r.difference, 0.0);
        let a = approx_vs_gap_demo(0.5, 0.9).unwrap().difference;
        let b = approx_vs_gap_demo(5.0, 0.9).unwrap().difference;
        assert!(a > b);
        assert!(approx_vs_gap_demo(-1.0, 0.5).is_err());
    }

    #[test]
    fn singleton_family_gap() {
        let atom = Atom {
            weight: 1.0,
            dist: dist(&[1.0, 0.0], 0.5),
            features: None,
        };
        let problem = DiscreteProblem::new(vec![atom]).unwrap();
        let rep = minimizability_gap(
            &problem,
            &HypothesisFamily::Fixed(vec![vec![0.0; 3]]),
            CompSumParams::logistic(),
        )
        .unwrap();
        assert!(
            (rep.gap_estimate - 2f64.ln()).abs() < 1e-9,
            "{}",
            rep.gap_estimate
        );
    }

    #[test]
    fn boxed_minimum_is_feasible_and_below_zero_scores() {
        let w = [0.5, 0.3, 0.2, 0.7];
        let m = minimize_comp_sum_risk_boxed(&w, 1.0, 2.0);
        assert!(m.value <= weighted_comp_sum_risk(&[0.0; 4], &w, 1.0));
        assert!(m.value >= minimize_comp_sum_risk(&w, 1.0).value - 1e-12);
    }
}
