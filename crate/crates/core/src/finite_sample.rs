//! Finite-sample guarantee for `L_μ` minimizers: empirical Rademacher
//! estimates, the loss upper bound, bound assembly and coverage validation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{
    chow_decision, conditional_risk_abstention, minimize_comp_sum_risk_boxed, model_decisions,
    surrogate_risk, DiscreteProblem, GammaTransform,
};
use crate::error::{Error, Result};
use crate::hypothesis::{
    fit_comp_sum, train_single_stage, Model, ModelSpec, TrainConfig, TrainLoss, WeightedSample,
    Workspace,
};
use crate::losses::{
    accumulate_comp_sum_grad, log_sum_exp, softmax_into, surrogate_l_mu, CompSumParams, CostModel,
};

/// Hypothesis sets over which suprema are taken.
#[derive(Debug, Clone)]
pub enum Family {
    /// Loss vectors given directly: `table[h][i]` is the loss of hypothesis
    /// `h` on point `i`.
    LossTable(Vec<Vec<f64>>),
    Finite(Vec<Model>),
    /// All parameter values of a clamped architecture.
    Parametric(ModelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherConfig {
    pub sigma_draws: usize,
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RademacherConfig {
    fn default() -> Self {
        Self {
            sigma_draws: 50,
            restarts: 3,
            steps: 2000,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    /// Mean of the per-draw suprema.
    pub value: f64,
    pub sigma_draws: usize,
    pub suprema: Vec<f64>,
    /// Per-draw spread between the best and worst restart.
    pub residuals: Vec<f64>,
    pub std_error: f64,
}

impl RademacherEstimate {
    /// `value` plus the largest optimizer residual. The ascent only finds
    /// lower bounds on each supremum, so this is the figure fed into the
    /// bound.
    pub fn inflated(&self) -> f64 {
        self.value + self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    fn from_draws(suprema: Vec<f64>, residuals: Vec<f64>) -> Self {
        let k = suprema.len() as f64;
        let value = suprema.iter().sum::<f64>() / k;
        let var = if suprema.len() > 1 {
            suprema.iter().map(|s| (s - value).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Self {
            value,
            sigma_draws: suprema.len(),
            suprema,
            residuals,
            std_error: (var / k).sqrt(),
        }
    }
}

fn sigma_draw(seed: u64, draw: usize, m: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    (0..m)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Monte-Carlo estimate of `E_σ sup_h (1/m) Σ_i σ_i L_μ(h, x_i, y_i)` on a
/// fixed sample.
pub fn empirical_rademacher(
    sample: &WeightedSample,
    family: &Family,
    cost: CostModel,
    params: CompSumParams,
    cfg: &RademacherConfig,
) -> Result<RademacherEstimate> {
    if cfg.sigma_draws == 0 {
        return Err(Error::InvalidArgument("sigma_draws must be >= 1".into()));
    }
    let m = sample.len();
    match family {
        Family::LossTable(table) => rademacher_table(table, m, cfg),
        Family::Finite(models) => {
            let table = models
                .iter()
                .map(|h| {
                    sample
                        .features
                        .iter()
                        .zip(&sample.labels)
                        .map(|(x, &y)| surrogate_l_mu(&h.forward(x)?, y, cost, params))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            rademacher_table(&table, m, cfg)
        }
        Family::Parametric(spec) => {
            if spec.clamp.is_none() {
                return Err(Error::InvalidArgument(
                    "Rademacher estimation needs a clamped family".into(),
                ));
            }
            if spec.input_dim != sample.dim() || spec.output_count != sample.n + 1 {
                return Err(Error::DimensionMismatch {
                    expected: spec.input_dim,
                    actual: sample.dim(),
                });
            }
            rademacher_parametric(sample, spec, cost, params, cfg)
        }
    }
}

fn rademacher_table(table: &[Vec<f64>], m: usize, cfg: &RademacherConfig) -> Result<RademacherEstimate> {
    if table.is_empty() || table.iter().any(|row| row.len() != m) {
        return Err(Error::InvalidArgument(
            "loss table needs one row of length m per hypothesis".into(),
        ));
    }
    let suprema: Vec<f64> = (0..cfg.sigma_draws)
        .map(|d| {
            let sigma = sigma_draw(cfg.seed, d, m);
            table
                .iter()
                .map(|row| row.iter().zip(&sigma).map(|(l, s)| l * s).sum::<f64>() / m as f64)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let residuals = vec![0.0; suprema.len()];
    Ok(RademacherEstimate::from_draws(suprema, residuals))
}

/// Gradient ascent over the parameters; repeated points are merged so each
/// step costs one pass over the distinct `(x, y)` pairs.
fn rademacher_parametric(
    sample: &WeightedSample,
    spec: &ModelSpec,
    cost: CostModel,
    params: CompSumParams,
    cfg: &RademacherConfig,
) -> Result<RademacherEstimate> {
    let m = sample.len();
    let mut index: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
    let mut group = Vec::with_capacity(m);
    let mut rows: Vec<usize> = Vec::new();
    for (i, (x, &y)) in sample.features.iter().zip(&sample.labels).enumerate() {
        let key = (x.iter().map(|v| v.to_bits()).collect(), y);
        let next = index.len();
        let g = *index.entry(key).or_insert_with(|| {
            rows.push(i);
            next
        });
        group.push(g);
    }
    let mu = params.mu();
    let draws: Vec<(f64, f64)> = (0..cfg.sigma_draws)
        .into_par_iter()
        .map(|d| {
            let sigma = sigma_draw(cfg.seed, d, m);
            let mut coef = vec![0.0; rows.len()];
            for (g, s) in group.iter().zip(&sigma) {
                coef[*g] += s / m as f64;
            }
            let mut finals = Vec::with_capacity(cfg.restarts.max(1));
            for r in 0..cfg.restarts.max(1) {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5c3);
                rng.set_stream((d * 1000 + r) as u64);
                let mut model = Model::new(*spec, rng.gen()).expect("validated spec");
                if r > 0 {
                    for p in model.params_mut() {
                        *p = rng.gen_range(-1.0..1.0);
                    }
                }
                finals.push(ascend(&mut model, sample, &rows, &coef, cost, mu, cfg));
            }
            let best = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let worst = finals.iter().cloned().fold(f64::INFINITY, f64::min);
            (best, best - worst)
        })
        .collect();
    let (suprema, residuals) = draws.into_iter().unzip();
    Ok(RademacherEstimate::from_draws(suprema, residuals))
}

fn ascend(
    model: &mut Model,
    sample: &WeightedSample,
    rows: &[usize],
    coef: &[f64],
    cost: CostModel,
    mu: f64,
    cfg: &RademacherConfig,
) -> f64 {
    let o = model.output_count();
    let mut ws = Workspace::default();
    let mut scores = vec![0.0; o];
    let mut q = vec![0.0; o];
    let mut g = vec![0.0; o];
    let mut grad = vec![0.0; model.params().len()];
    let mut objective = |model: &Model, grad: Option<&mut Vec<f64>>| -> f64 {
        let mut total = 0.0;
        let mut grad = grad;
        if let Some(gr) = grad.as_deref_mut() {
            gr.iter_mut().for_each(|v| *v = 0.0);
        }
        for (&i, &c) in rows.iter().zip(coef) {
            let x = &sample.features[i];
            let y = sample.labels[i];
            model.forward_into(x, &mut scores, &mut ws);
            softmax_into(&scores, &mut q);
            let lse = log_sum_exp(&scores);
            g.iter_mut().for_each(|v| *v = 0.0);
            let n = o - 1;
            let mut l = accumulate_comp_sum_grad(&q, (lse - scores[y]).max(0.0), y, mu, 1.0, &mut g);
            l += accumulate_comp_sum_grad(&q, (lse - scores[n]).max(0.0), n, mu, cost.accept_mass(), &mut g);
            total += c * l;
            if let Some(gr) = grad.as_deref_mut() {
                model.backward(x, &g, c, gr, &mut ws);
            }
        }
        total
    };
    let mut best = objective(model, None);
    for _ in 0..cfg.steps {
        objective(model, Some(&mut grad));
        for (p, gi) in model.params_mut().iter_mut().zip(&grad) {
            *p += cfg.learning_rate * gi;
        }
    }
    best = best.max(objective(model, None));
    best
}

/// Upper bound on `L_μ` when every score lies in `[−Λ, Λ]`: `(2 − c) B_ℓ`.
pub fn loss_upper_bound(params: CompSumParams, cost: CostModel, n: usize, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("clamp must be > 0, got {lambda}")));
    }
    let mu = params.mu();
    let n1 = (n + 1) as f64;
    let b = if mu < 1.0 {
        ((n1 * (2.0 * lambda).exp()).powf(1.0 - mu) - 1.0) / (1.0 - mu)
    } else if mu == 1.0 {
        2.0 * lambda + n1.ln()
    } else {
        1.0 / (mu - 1.0)
    };
    Ok((2.0 - cost.value()) * b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteSampleInput {
    pub m: usize,
    pub delta: f64,
    pub loss_bound: f64,
    pub rademacher: f64,
    pub mu: f64,
    pub cost: f64,
    pub n: usize,
    pub surrogate_gap: f64,
    pub abstention_gap: f64,
}

impl FiniteSampleInput {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.delta,
            self.loss_bound,
            self.rademacher,
            self.mu,
            self.cost,
            self.surrogate_gap,
            self.abstention_gap,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.m == 0 || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(
                "finite-sample input needs m >= 1, delta in (0, 1) and finite fields".into(),
            ));
        }
        Ok(())
    }
}

/// `Γ_μ(4R + 2B √(log(2/δ) / (2m)) + M_L) − M_abs`.
pub fn assemble_bound(input: &FiniteSampleInput) -> Result<f64> {
    input.validate()?;
    let params = CompSumParams::new(input.mu)?;
    let cost = CostModel::new(input.cost)?;
    let dev = ((2.0 / input.delta).ln() / (2.0 * input.m as f64)).sqrt();
    let arg = 4.0 * input.rademacher + 2.0 * input.loss_bound * dev + input.surrogate_gap;
    Ok(GammaTransform::comp_sum(params, cost, input.n).eval(arg) - input.abstention_gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub m: usize,
    pub delta: f64,
    pub trials: usize,
    /// ERM trainer; must use the surrogate loss and a clamp.
    pub train: TrainConfig,
    /// Population runs used to approximate the best-in-class risks.
    pub reference_runs: usize,
    pub reference_epochs: usize,
    pub rademacher: RademacherConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: usize,
    pub covered: usize,
    pub coverage: f64,
    /// `1 − δ − 2 √(log 20 / (2 · trials))`.
    pub threshold: f64,
    pub passed: bool,
    pub delta: f64,
    pub m: usize,
    pub loss_bound: f64,
    pub best_in_class_surrogate: f64,
    pub best_in_class_abstention: f64,
    pub bayes_abstention: f64,
    pub surrogate_gap: f64,
    pub abstention_gap: f64,
    pub reference_seeds: Vec<u64>,
    /// Per trial: inflated Rademacher estimate, bound and realized excess.
    pub rademacher: Vec<f64>,
    pub bounds: Vec<f64>,
    pub excess: Vec<f64>,
    pub nonconverged: usize,
}

/// Coverage of the assembled bound over repeated samples from a featured
/// problem.
pub fn validate_bound(problem: &DiscreteProblem, cfg: &ValidationConfig) -> Result<CoverageReport> {
    if cfg.trials < 20 {
        return Err(Error::InvalidArgument(format!(
            "need at least 20 trials, got {}",
            cfg.trials
        )));
    }
    let TrainLoss::Surrogate { mu } = cfg.train.loss else {
        return Err(Error::InvalidArgument("validation trains the surrogate loss".into()));
    };
    let Some(lambda) = cfg.train.clamp else {
        return Err(Error::InvalidArgument("validation needs a clamped family".into()));
    };
    if cfg.train.cost != problem.cost() {
        return Err(Error::InvalidArgument("trainer cost differs from problem cost".into()));
    }
    let n = problem.n();
    let cost = problem.cost();
    let d = problem
        .feature_dim()
        .ok_or_else(|| Error::InvalidArgument("problem atoms carry no features".into()))?;
    let spec = ModelSpec {
        kind: cfg.train.model,
        input_dim: d,
        output_count: n + 1,
        clamp: Some(lambda),
    };

    // best-in-class references from long population runs
    let population = problem.population_sample()?;
    let reference_seeds: Vec<u64> = (0..cfg.reference_runs.max(1) as u64)
        .map(|i| cfg.seed.wrapping_mul(31).wrapping_add(1000 + i))
        .collect();
    let refs: Vec<Result<(f64, f64)>> = reference_seeds
        .par_iter()
        .map(|&seed| {
            let mut rc = cfg.train.clone();
            rc.seed = seed;
            rc.epochs = cfg.reference_epochs.max(1);
            rc.batch_size = population.len();
            let mut model = Model::new(spec, seed)?;
            fit_comp_sum(&mut model, &population, &rc, mu, Some(cost))?;
            Ok((
                surrogate_risk(problem, &model, mu)?,
                problem.abstention_risk(&model_decisions(problem, &model)?),
            ))
        })
        .collect();
    let mut e_sur = f64::INFINITY;
    let mut e_abs = f64::INFINITY;
    for r in refs {
        let (s, a) = r?;
        e_sur = e_sur.min(s);
        e_abs = e_abs.min(a);
    }
    let pointwise: f64 = problem
        .atoms()
        .iter()
        .map(|a| a.weight * minimize_comp_sum_risk_boxed(&a.dist.augmented(), mu.mu(), lambda).value)
        .sum();
    let bayes: f64 = problem
        .atoms()
        .iter()
        .map(|a| a.weight * conditional_risk_abstention(chow_decision(&a.dist), &a.dist))
        .sum();
    let surrogate_gap = (e_sur - pointwise).max(0.0);
    let abstention_gap = (e_abs - bayes).max(0.0);
    let loss_bound = loss_upper_bound(mu, cost, n, lambda)?;

    let outcomes: Vec<Result<(f64, f64, f64, bool)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64 + 1);
            let sample = problem.sample(cfg.m, &mut rng)?;
            let mut tc = cfg.train.clone();
            tc.seed = cfg.seed.wrapping_add(t as u64);
            let (model, _) = train_single_stage(&sample, &tc)?;
            let mut rcfg = cfg.rademacher.clone();
            rcfg.seed = rcfg.seed.wrapping_add(t as u64);
            let r = empirical_rademacher(&sample, &Family::Parametric(spec), cost, mu, &rcfg)?;
            let bound = assemble_bound(&FiniteSampleInput {
                m: cfg.m,
                delta: cfg.delta,
                loss_bound,
                rademacher: r.inflated(),
                mu: mu.mu(),
                cost: cost.value(),
                n,
                surrogate_gap,
                abstention_gap,
            })?;
            let excess = problem.abstention_risk(&model_decisions(problem, &model)?) - e_abs;
            let converged = r.residuals.iter().all(|v| v.is_finite());
            Ok((r.inflated(), bound, excess, converged))
        })
        .collect();
    let mut report = CoverageReport {
        trials: cfg.trials,
        covered: 0,
        coverage: 0.0,
        threshold: 1.0 - cfg.delta - 2.0 * (20f64.ln() / (2.0 * cfg.trials as f64)).sqrt(),
        passed: false,
        delta: cfg.delta,
        m: cfg.m,
        loss_bound,
        best_in_class_surrogate: e_sur,
        best_in_class_abstention: e_abs,
        bayes_abstention: bayes,
        surrogate_gap,
        abstention_gap,
        reference_seeds,
        rademacher: Vec::new(),
        bounds: Vec::new(),
        excess: Vec::new(),
        nonconverged: 0,
    };
    for o in outcomes {
        let (r, b, e, ok) = o?;
        if !ok {
            report.nonconverged += 1;
        }
        if e <= b {
            report.covered += 1;
        }
        report.rademacher.push(r);
        report.bounds.push(b);
        report.excess.push(e);
    }
    report.coverage = report.covered as f64 / cfg.trials as f64;
    report.passed = report.coverage >= report.threshold;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assemble_example() {
        let input = FiniteSampleInput {
            m: 1000,
            delta: 0.05,
            loss_bound: 2.0,
            rademacher: 0.01,
            mu: 1.0,
            cost: 0.5,
            n: 2,
            surrogate_gap: 0.1,
            abstention_gap: 0.05,
        };
        let b = assemble_bound(&input).unwrap();
        assert!((b - 0.917_141_814_842_107).abs() < 1e-12, "{b}");
        let zero = FiniteSampleInput {
            rademacher: 0.0,
            loss_bound: 0.0,
            surrogate_gap: 0.0,
            abstention_gap: 0.0,
            ..input
        };
        assert_eq!(assemble_bound(&zero).unwrap(), 0.0);
    }

    #[test]
    fn loss_bound_examples() {
        let c = CostModel::new(0.5).unwrap();
        let b = loss_upper_bound(CompSumParams::new(1.0).unwrap(), c, 2, 1.0).unwrap();
        assert!((b - 1.5 * (2.0 + 3f64.ln())).abs() < 1e-12);
        let b = loss_upper_bound(CompSumParams::new(2.0).unwrap(), c, 2, 7.0).unwrap();
        assert!((b - 1.5).abs() < 1e-15);
        assert!(loss_upper_bound(CompSumParams::new(2.0).unwrap(), c, 2, 0.0).is_err());
    }

    #[test]
    fn two_valued_table_tends_to_half() {
        let cfg = RademacherConfig {
            sigma_draws: 4000,
            ..Default::default()
        };
        let est = rademacher_table(&[vec![0.0], vec![3.0]], 1, &cfg).unwrap();
        assert!((est.value - 1.5).abs() < 4.0 * est.std_error + 1e-12, "{est:?}");
    }
}
