//! Losses on score vectors.
//!
//! A score vector holds `n + 1` real scores: one per true label `0..n` and a
//! final rejection score at index `n`. Labels are zero-based throughout the
//! crate; index `n` always denotes the abstention category.
//!
//! The cross-entropy (comp-sum) family is
//!
//! ```text
//! ℓ_μ(s, y) = ([Σ_y' exp(s_y' − s_y)]^(1−μ) − 1) / (1 − μ)    μ ≠ 1
//! ℓ_1(s, y) = log Σ_y' exp(s_y' − s_y)
//! ```
//!
//! and the single-stage abstention surrogate is
//! `L_μ(s, y) = ℓ_μ(s, y) + (1 − c) ℓ_μ(s, n)`.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window inside which `mu` snaps to the exact special cases 1 and 2.
pub const MU_SNAP: f64 = 1e-12;

/// `n + 1` finite scores, `n >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 3 {
            return Err(Error::InvalidScores(format!(
                "need at least 3 entries (n >= 2 labels plus rejection), got {}",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidScores(format!("entry {i} is not finite")));
        }
        Ok(Self(scores))
    }

    /// Number of true labels.
    pub fn n(&self) -> usize {
        self.0.len() - 1
    }

    pub fn rejection_index(&self) -> usize {
        self.n()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScoreVector> for Vec<f64> {
    fn from(s: ScoreVector) -> Self {
        s.0
    }
}

/// Constant abstention cost `c ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CostModel(f64);

impl CostModel {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 && c < 1.0 {
            Ok(Self(c))
        } else {
            Err(Error::InvalidCost(c))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Probability mass assigned to the rejection category in the augmented
    /// conditional distribution.
    pub fn accept_mass(self) -> f64 {
        1.0 - self.0
    }
}

impl TryFrom<f64> for CostModel {
    type Error = Error;

    fn try_from(c: f64) -> Result<Self> {
        Self::new(c)
    }
}

impl From<CostModel> for f64 {
    fn from(c: CostModel) -> Self {
        c.0
    }
}

/// Parameter `μ >= 0` of the comp-sum family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CompSumParams {
    mu: f64,
}

impl CompSumParams {
    pub fn new(mu: f64) -> Result<Self> {
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::InvalidMu(mu));
        }
        let mu = if (mu - 1.0).abs() <= MU_SNAP {
            1.0
        } else if (mu - 2.0).abs() <= MU_SNAP {
            2.0
        } else {
            mu
        };
        Ok(Self { mu })
    }

    pub fn logistic() -> Self {
        Self { mu: 1.0 }
    }

    pub fn mu(self) -> f64 {
        self.mu
    }
}

impl TryFrom<f64> for CompSumParams {
    type Error = Error;

    fn try_from(mu: f64) -> Result<Self> {
        Self::new(mu)
    }
}

impl From<CompSumParams> for f64 {
    fn from(p: CompSumParams) -> Self {
        p.mu
    }
}

/// Decreasing margin function Φ used by the second-stage loss.
///
/// The logistic variant is taken in base 2 so that `Φ(0) = 1` and
/// `Φ(t) >= 1{t <= 0}` holds for both kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginFunction {
    #[default]
    Exponential,
    Logistic,
}

impl MarginFunction {
    pub fn value(self, t: f64) -> f64 {
        match self {
            MarginFunction::Exponential => (-t).exp(),
            MarginFunction::Logistic => softplus(-t) / std::f64::consts::LN_2,
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            MarginFunction::Exponential => -(-t).exp(),
            // d/dt log2(1 + e^{-t}) = -1 / ((1 + e^t) ln 2)
            MarginFunction::Logistic => -sigmoid(-t) / std::f64::consts::LN_2,
        }
    }

    /// `inf_t [η Φ(t) + (1 − η) Φ(−t)]` for `η ∈ [0, 1]`.
    pub fn conditional_infimum(self, eta: f64) -> f64 {
        let eta = eta.clamp(0.0, 1.0);
        match self {
            MarginFunction::Exponential => 2.0 * (eta * (1.0 - eta)).sqrt(),
            MarginFunction::Logistic => binary_entropy_bits(eta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginFunction::Exponential => "exp",
            MarginFunction::Logistic => "logistic",
        }
    }
}

impl std::str::FromStr for MarginFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" | "exponential" => Ok(Self::Exponential),
            "logistic" | "log" => Ok(Self::Logistic),
            other => Err(Error::InvalidArgument(format!(
                "unknown margin function {other:?} (expected exp or logistic)"
            ))),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn binary_entropy_bits(eta: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
    h(eta) + h(1.0 - eta)
}

/// Outcome of the score-based decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Label(usize),
    Abstain,
}

impl Decision {
    /// Index in the augmented label set `0..=n` (abstention is `n`).
    pub fn index(self, n: usize) -> usize {
        match self {
            Decision::Label(y) => y,
            Decision::Abstain => n,
        }
    }

    pub fn from_index(index: usize, n: usize) -> Self {
        if index == n {
            Decision::Abstain
        } else {
            Decision::Label(index)
        }
    }

    pub fn is_abstain(self) -> bool {
        matches!(self, Decision::Abstain)
    }
}

/// Smallest index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Abstains when the rejection score reaches the best label score; otherwise
/// the smallest-index top label.
pub fn predict_label(scores: &[f64]) -> Decision {
    let n = scores.len() - 1;
    let top = argmax(&scores[..n]);
    if scores[n] >= scores[top] {
        Decision::Abstain
    } else {
        Decision::Label(top)
    }
}

/// Abstention loss: 0 for a correct accepted label, 1 for a wrong one, `c`
/// on abstention.
pub fn abstention_loss(scores: &[f64], y: usize, cost: CostModel) -> Result<f64> {
    let n = scores.len() - 1;
    check_label(y, n)?;
    Ok(decision_loss(predict_label(scores), y, cost))
}

pub(crate) fn decision_loss(decision: Decision, y: usize, cost: CostModel) -> f64 {
    match decision {
        Decision::Abstain => cost.value(),
        Decision::Label(l) if l == y => 0.0,
        Decision::Label(_) => 1.0,
    }
}

fn check_label(y: usize, limit: usize) -> Result<()> {
    if y < limit {
        Ok(())
    } else {
        Err(Error::InvalidLabel { label: y, limit })
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    out
}

pub fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `ℓ_μ` as a function of the log-partition margin `z = lse(s) − s_y >= 0`.
#[inline]
pub(crate) fn comp_sum_from_margin(z: f64, mu: f64) -> f64 {
    if mu == 1.0 {
        z
    } else {
        let a = 1.0 - mu;
        (a * z).exp_m1() / a
    }
}

/// `ℓ_μ(s, y)` for `y` in `0..=n` (any score length >= 2).
pub fn comp_sum_loss(scores: &[f64], y: usize, params: CompSumParams) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidScores("need at least 2 scores".into()));
    }
    check_label(y, scores.len())?;
    let z = (log_sum_exp(scores) - scores[y]).max(0.0);
    Ok(comp_sum_from_margin(z, params.mu()))
}

/// `L_μ(s, y) = ℓ_μ(s, y) + (1 − c) ℓ_μ(s, n)` for `y` in `0..n`.
pub fn surrogate_l_mu(
    scores: &[f64],
    y: usize,
    cost: CostModel,
    params: CompSumParams,
) -> Result<f64> {
    generic_surrogate(&params, scores, y, cost)
}

/// A standard loss on `n + 1` categories.
pub trait MulticlassLoss {
    fn loss(&self, scores: &[f64], y: usize) -> f64;
}

impl MulticlassLoss for CompSumParams {
    fn loss(&self, scores: &[f64], y: usize) -> f64 {
        let z = (log_sum_exp(scores) - scores[y]).max(0.0);
        comp_sum_from_margin(z, self.mu)
    }
}

impl<F> MulticlassLoss for F
where
    F: Fn(&[f64], usize) -> f64,
{
    fn loss(&self, scores: &[f64], y: usize) -> f64 {
        self(scores, y)
    }
}

/// `base(s, y) + (1 − c) base(s, n)`.
pub fn generic_surrogate<L: MulticlassLoss + ?Sized>(
    base: &L,
    scores: &[f64],
    y: usize,
    cost: CostModel,
) -> Result<f64> {
    if scores.len() < 3 {
        return Err(Error::InvalidScores("need n + 1 >= 3 scores".into()));
    }
    let n = scores.len() - 1;
    check_label(y, n)?;
    Ok(base.loss(scores, y) + cost.accept_mass() * base.loss(scores, n))
}

/// Second-stage loss for a frozen predictor.
///
/// With `M = max_y predictor_scores[y]` and `wrong = 1` when the predictor's
/// smallest-index argmax differs from `y`:
/// `wrong · Φ(r − M) + c · Φ(M − r)`.
pub fn two_stage_loss(
    predictor_scores: &[f64],
    rejector_score: f64,
    y: usize,
    cost: CostModel,
    phi: MarginFunction,
) -> Result<f64> {
    let (wrong, top) = predictor_outcome(predictor_scores, y)?;
    Ok(two_stage_from_parts(
        wrong,
        top,
        rejector_score,
        cost.value(),
        phi,
    ))
}

/// `(wrong, max score)` of a frozen predictor on label `y`.
pub fn predictor_outcome(predictor_scores: &[f64], y: usize) -> Result<(bool, f64)> {
    if predictor_scores.is_empty() {
        return Err(Error::InvalidScores("empty predictor scores".into()));
    }
    check_label(y, predictor_scores.len())?;
    let top = argmax(predictor_scores);
    Ok((top != y, predictor_scores[top]))
}

#[inline]
pub(crate) fn two_stage_from_parts(
    wrong: bool,
    top: f64,
    rejector: f64,
    c: f64,
    phi: MarginFunction,
) -> f64 {
    let miss = if wrong {
        phi.value(rejector - top)
    } else {
        0.0
    };
    miss + c * phi.value(top - rejector)
}

#[inline]
pub(crate) fn two_stage_grad_from_parts(
    wrong: bool,
    top: f64,
    rejector: f64,
    c: f64,
    phi: MarginFunction,
) -> f64 {
    let miss = if wrong {
        phi.derivative(rejector - top)
    } else {
        0.0
    };
    miss - c * phi.derivative(top - rejector)
}

/// Adds `weight · ∇_s ℓ_μ(s, y)` into `out`; returns `weight · ℓ_μ(s, y)`.
///
/// `∇ℓ_μ = q_y^(μ−1) (q − e_y)` with `q = softmax(s)`; `softmax` is the
/// caller-supplied `q`.
#[inline]
pub(crate) fn accumulate_comp_sum_grad(
    q: &[f64],
    z: f64,
    y: usize,
    mu: f64,
    weight: f64,
    out: &mut [f64],
) -> f64 {
    let scale = weight * ((1.0 - mu) * z).exp();
    for (o, &qj) in out.iter_mut().zip(q) {
        *o += scale * qj;
    }
    out[y] -= scale;
    weight * comp_sum_from_margin(z, mu)
}

/// Gradient of `ℓ_μ(s, y)` with respect to the scores.
pub fn grad_comp_sum(scores: &[f64], y: usize, params: CompSumParams) -> Result<Vec<f64>> {
    check_label(y, scores.len())?;
    let q = softmax(scores);
    let z = (log_sum_exp(scores) - scores[y]).max(0.0);
    let mut g = vec![0.0; scores.len()];
    accumulate_comp_sum_grad(&q, z, y, params.mu(), 1.0, &mut g);
    Ok(g)
}

/// Gradient of `L_μ(s, y)` with respect to the scores.
pub fn grad_surrogate_l_mu(
    scores: &[f64],
    y: usize,
    cost: CostModel,
    params: CompSumParams,
) -> Result<Vec<f64>> {
    if scores.len() < 3 {
        return Err(Error::InvalidScores("need n + 1 >= 3 scores".into()));
    }
    let n = scores.len() - 1;
    check_label(y, n)?;
    let q = softmax(scores);
    let lse = log_sum_exp(scores);
    let mut g = vec![0.0; scores.len()];
    let mu = params.mu();
    accumulate_comp_sum_grad(&q, (lse - scores[y]).max(0.0), y, mu, 1.0, &mut g);
    accumulate_comp_sum_grad(
        &q,
        (lse - scores[n]).max(0.0),
        n,
        mu,
        cost.accept_mass(),
        &mut g,
    );
    Ok(g)
}

/// Derivative of the second-stage loss with respect to the rejector score:
/// `wrong · Φ'(r − M) − c · Φ'(M − r)`.
pub fn grad_two_stage_loss(
    predictor_scores: &[f64],
    rejector_score: f64,
    y: usize,
    cost: CostModel,
    phi: MarginFunction,
) -> Result<f64> {
    let (wrong, top) = predictor_outcome(predictor_scores, y)?;
    Ok(two_stage_grad_from_parts(
        wrong,
        top,
        rejector_score,
        cost.value(),
        phi,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(c: f64) -> CostModel {
        CostModel::new(c).unwrap()
    }

    fn mu(m: f64) -> CompSumParams {
        CompSumParams::new(m).unwrap()
    }

    #[test]
    fn predict_label_examples() {
        assert_eq!(predict_label(&[2.0, 1.0, 0.5]), Decision::Label(0));
        assert_eq!(predict_label(&[1.0, 1.0, 1.0]), Decision::Abstain);
        assert_eq!(predict_label(&[0.3, 0.7, 0.5]), Decision::Label(1));
        // tie among labels goes to the smallest index
        assert_eq!(predict_label(&[0.7, 0.7, 0.5]), Decision::Label(0));
    }

    #[test]
    fn abstention_loss_examples() {
        let c = cost(0.2);
        assert_eq!(abstention_loss(&[2.0, 1.0, 0.5], 0, c).unwrap(), 0.0);
        assert_eq!(abstention_loss(&[0.1, 0.1, 0.9], 0, c).unwrap(), 0.2);
        assert_eq!(abstention_loss(&[0.1, 0.9, 0.2], 0, c).unwrap(), 1.0);
        assert!(matches!(
            abstention_loss(&[0.1, 0.9, 0.2], 2, c),
            Err(Error::InvalidLabel { label: 2, limit: 2 })
        ));
    }

    #[test]
    fn comp_sum_examples() {
        let z = [0.0, 0.0, 0.0];
        assert!((comp_sum_loss(&z, 0, mu(1.0)).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!((comp_sum_loss(&z, 0, mu(2.0)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((comp_sum_loss(&z, 0, mu(0.0)).unwrap() - 2.0).abs() < 1e-15);
        // 2(√(1 + 2/e) − 1), evaluated to 30 digits offline
        let v = comp_sum_loss(&[1.0, 0.0, 0.0], 0, mu(0.5)).unwrap();
        assert!((v - 0.634_964_047_073_799_9).abs() < 1e-12, "{v}");
    }

    #[test]
    fn surrogate_examples() {
        let z = [0.0, 0.0, 0.0];
        let v = surrogate_l_mu(&z, 0, cost(0.5), mu(1.0)).unwrap();
        assert!((v - 1.5 * 3f64.ln()).abs() < 1e-14);
        let v = surrogate_l_mu(&z, 0, cost(0.5), mu(2.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        // ℓ_1(y=1) = 0.0509457635..., ℓ_1(y=3) = 6.0509457635... (mpmath)
        let v = surrogate_l_mu(&[3.0, 0.0, -3.0], 0, cost(0.2), mu(1.0)).unwrap();
        assert!((v - 4.891_702_374_341_397).abs() < 1e-12, "{v}");
    }

    #[test]
    fn generic_surrogate_matches_l_mu() {
        let zero = |_: &[f64], _: usize| 0.0;
        assert_eq!(
            generic_surrogate(&zero, &[1.0, 2.0, 3.0], 1, cost(0.3)).unwrap(),
            0.0
        );
        let v = generic_surrogate(&mu(2.0), &[0.0; 3], 0, cost(0.5)).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_stage_examples() {
        let c = cost(0.2);
        let phi = MarginFunction::Exponential;
        // predictor top label 0 with score 1, rejector 0
        let correct = two_stage_loss(&[1.0, 0.0], 0.0, 0, c, phi).unwrap();
        assert!((correct - 0.2 * (-1f64).exp()).abs() < 1e-15);
        let wrong = two_stage_loss(&[1.0, 0.0], 0.0, 1, c, phi).unwrap();
        // Φ(r − M) = e^1 on the miss term, c Φ(M − r) = 0.2 e^-1 on the cost term
        assert!((wrong - (1f64.exp() + 0.2 * (-1f64).exp())).abs() < 1e-14);
        let far = two_stage_from_parts(true, 0.0, 50.0, 0.0, phi);
        assert!(far < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[1000.0, 0.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0);
        let s = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn margin_function_shape() {
        for phi in [MarginFunction::Exponential, MarginFunction::Logistic] {
            assert!(phi.value(50.0) < 1e-12);
            assert!(phi.value(0.0) >= 1.0 - 1e-15);
            let mut prev = f64::INFINITY;
            for i in -200..=200 {
                let t = i as f64 * 0.05;
                let v = phi.value(t);
                assert!(v < prev);
                if t <= 0.0 {
                    assert!(v >= 1.0 - 1e-15);
                }
                prev = v;
            }
        }
    }

    #[test]
    fn mu_canonicalization() {
        assert_eq!(mu(1.0 + 5e-13).mu(), 1.0);
        assert_eq!(mu(2.0 - 5e-13).mu(), 2.0);
        assert_eq!(mu(1.0 + 1e-9).mu(), 1.0 + 1e-9);
        assert!(CompSumParams::new(-0.1).is_err());
        assert!(CostModel::new(1.0).is_err());
        assert!(CostModel::new(0.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = grad_surrogate_l_mu(&[0.0; 3], 0, cost(0.5), mu(1.0)).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15);
        let g = grad_comp_sum(&[0.0; 3], 0, mu(2.0)).unwrap();
        assert!((g[0] + 2.0 / 9.0).abs() < 1e-15);
        let d = grad_two_stage_loss(&[1.0, 0.0], 0.0, 0, cost(0.2), MarginFunction::Exponential)
            .unwrap();
        assert!((d - 0.2 * (-1f64).exp()).abs() < 1e-15);
        let d = grad_two_stage_loss(&[1.0, 0.0], 1.0, 1, cost(0.5), MarginFunction::Exponential)
            .unwrap();
        assert!((d + 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_vector_validation() {
        assert!(ScoreVector::new(vec![0.0, 1.0]).is_err());
        assert!(ScoreVector::new(vec![0.0, f64::NAN, 1.0]).is_err());
        let s = ScoreVector::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(predict_label(&s), Decision::Abstain);
    }
}
