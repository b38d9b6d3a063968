//! Linear and one-hidden-layer scorers, and SGD trainers for the
//! single-stage surrogate and the two-stage scheme.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{
    self, accumulate_comp_sum_grad, decision_loss, log_sum_exp, predict_label, softmax_into,
    two_stage_from_parts, two_stage_grad_from_parts, CompSumParams, CostModel, Decision,
    MarginFunction,
};

pub const DEFAULT_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp { width: usize },
}

impl Default for ModelKind {
    fn default() -> Self {
        ModelKind::Linear
    }
}

/// Shape of a scorer: family, input dimension, number of outputs, clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_count: usize,
    pub clamp: Option<f64>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_count == 0 {
            return Err(Error::InvalidArgument(
                "model needs at least one input and one output".into(),
            ));
        }
        if let ModelKind::Mlp { width } = self.kind {
            if width == 0 {
                return Err(Error::InvalidArgument("mlp width must be positive".into()));
            }
        }
        if let Some(l) = self.clamp {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "clamp must be a positive finite number, got {l}"
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, o) = (self.input_dim, self.output_count);
        match self.kind {
            ModelKind::Linear => o * (d + 1),
            ModelKind::Mlp { width } => width * (d + 1) + o * (width + 1),
        }
    }
}

/// Free-form training provenance stored alongside parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<MarginFunction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Original label names, index `i` for internal label `i`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

/// Scorer parameters.
///
/// Linear: `output_count × (d + 1)` row-major, bias in the last column.
/// MLP: `[W1 (width × d), b1, W2 (out × width), b2]`, ReLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<f64>,
    pub metadata: ModelMetadata,
}

/// Scratch buffers reused across forward/backward calls.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    hidden: Vec<f64>,
    raw: Vec<f64>,
    grad_hidden: Vec<f64>,
}

impl Model {
    /// Linear models start at zero; MLP layers are uniform in `±1/√fan_in`
    /// with zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = vec![0.0; spec.param_count()];
        if let ModelKind::Mlp { width } = spec.kind {
            let d = spec.input_dim;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a1 = 1.0 / (d as f64).sqrt();
            for v in &mut params[..width * d] {
                *v = rng.gen_range(-a1..=a1);
            }
            let a2 = 1.0 / (width as f64).sqrt();
            let w2 = width * (d + 1);
            for v in &mut params[w2..w2 + spec.output_count * width] {
                *v = rng.gen_range(-a2..=a2);
            }
        }
        Ok(Self {
            spec,
            params,
            metadata: ModelMetadata::default(),
        })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.param_count(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model parameter".into()));
        }
        Ok(Self {
            spec,
            params,
            metadata: ModelMetadata::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_count(&self) -> usize {
        self.spec.output_count
    }

    /// Multiplies every parameter by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut m = self.clone();
        m.params.iter_mut().for_each(|p| *p *= alpha);
        m
    }

    /// SHA-256 of the parameters' bit patterns.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.spec.output_count];
        self.forward_into(x, &mut out, &mut Workspace::default());
        Ok(out)
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Unchecked forward pass; `x.len()` must equal the input dimension.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let d = self.spec.input_dim;
        let o = self.spec.output_count;
        ws.raw.resize(o, 0.0);
        match self.spec.kind {
            ModelKind::Linear => {
                for (k, r) in ws.raw.iter_mut().enumerate() {
                    let row = &self.params[k * (d + 1)..(k + 1) * (d + 1)];
                    *r = dot(&row[..d], x) + row[d];
                }
            }
            ModelKind::Mlp { width } => {
                let (w1, rest) = self.params.split_at(width * d);
                let (b1, rest) = rest.split_at(width);
                let (w2, b2) = rest.split_at(o * width);
                ws.hidden.resize(width, 0.0);
                for (j, h) in ws.hidden.iter_mut().enumerate() {
                    *h = (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).max(0.0);
                }
                for (k, r) in ws.raw.iter_mut().enumerate() {
                    *r = dot(&w2[k * width..(k + 1) * width], &ws.hidden) + b2[k];
                }
            }
        }
        match self.spec.clamp {
            Some(l) => {
                for (s, r) in out.iter_mut().zip(&ws.raw) {
                    *s = r.clamp(-l, l);
                }
            }
            None => out.copy_from_slice(&ws.raw),
        }
    }

    /// Adds `scale · ∂(g_scores · scores)/∂params` into `grad`. Must follow a
    /// `forward_into` on the same `x` and workspace.
    pub fn backward(
        &self,
        x: &[f64],
        g_scores: &[f64],
        scale: f64,
        grad: &mut [f64],
        ws: &mut Workspace,
    ) {
        let d = self.spec.input_dim;
        let o = self.spec.output_count;
        let clamp = self.spec.clamp;
        let g = |k: usize| -> f64 {
            match clamp {
                Some(l) if ws.raw[k].abs() > l => 0.0,
                _ => scale * g_scores[k],
            }
        };
        match self.spec.kind {
            ModelKind::Linear => {
                for k in 0..o {
                    let gk = g(k);
                    if gk == 0.0 {
                        continue;
                    }
                    let row = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                    for (r, xi) in row[..d].iter_mut().zip(x) {
                        *r += gk * xi;
                    }
                    row[d] += gk;
                }
            }
            ModelKind::Mlp { width } => {
                let gs: Vec<f64> = (0..o).map(g).collect();
                let w2 = &self.params[width * (d + 1)..width * (d + 1) + o * width];
                ws.grad_hidden.clear();
                ws.grad_hidden.resize(width, 0.0);
                let (g1, rest) = grad.split_at_mut(width * (d + 1));
                let (gw2, gb2) = rest.split_at_mut(o * width);
                for (k, &gk) in gs.iter().enumerate() {
                    if gk == 0.0 {
                        continue;
                    }
                    gb2[k] += gk;
                    let row = &mut gw2[k * width..(k + 1) * width];
                    for j in 0..width {
                        row[j] += gk * ws.hidden[j];
                        ws.grad_hidden[j] += gk * w2[k * width + j];
                    }
                }
                let (gw1, gb1) = g1.split_at_mut(width * d);
                for j in 0..width {
                    if ws.hidden[j] <= 0.0 {
                        continue;
                    }
                    let gh = ws.grad_hidden[j];
                    gb1[j] += gh;
                    for (r, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *r += gh * xi;
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Labeled points with nonnegative weights summing to one.
///
/// A uniform-weight sample is an ordinary i.i.d. dataset; population-weighted
/// samples expand a discrete problem into one row per `(atom, label)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub n: usize,
}

impl WeightedSample {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        weights: Vec<f64>,
        n: usize,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("empty sample".into()));
        }
        if labels.len() != features.len() || weights.len() != features.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                actual: labels.len().min(weights.len()),
            });
        }
        let d = features[0].len();
        for f in &features {
            if f.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite feature".into()));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::InvalidLabel { label: y, limit: n });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "weights must be finite and >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            features,
            labels,
            weights,
            n,
        })
    }

    pub fn uniform(features: Vec<Vec<f64>>, labels: Vec<usize>, n: usize) -> Result<Self> {
        let w = vec![1.0; features.len()];
        Self::new(features, labels, w, n)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainLoss {
    /// `L_μ` over `n + 1` outputs.
    Surrogate { mu: CompSumParams },
    /// `ℓ_μ` over `n` outputs (first stage).
    Multiclass { mu: CompSumParams },
    /// Second-stage loss over one rejector output.
    TwoStage { phi: MarginFunction },
}

impl TrainLoss {
    pub fn name(&self) -> &'static str {
        match self {
            TrainLoss::Surrogate { .. } => "surrogate",
            TrainLoss::Multiclass { .. } => "multiclass",
            TrainLoss::TwoStage { .. } => "two_stage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball SGD using `momentum`.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999); `momentum` is ignored.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: TrainLoss,
    pub cost: CostModel,
    pub model: ModelKind,
    pub clamp: Option<f64>,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
    pub momentum: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn new(loss: TrainLoss, cost: CostModel) -> Self {
        Self {
            loss,
            cost,
            model: ModelKind::Linear,
            clamp: None,
            learning_rate: 0.1,
            schedule: Schedule::Constant,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            l2: 0.0,
            momentum: 0.0,
            optimizer: Optimizer::Sgd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::InvalidArgument("l2 must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn metadata(&self, role: &str) -> ModelMetadata {
        let (mu, phi) = match self.loss {
            TrainLoss::Surrogate { mu } | TrainLoss::Multiclass { mu } => (Some(mu.mu()), None),
            TrainLoss::TwoStage { phi } => (None, Some(phi)),
        };
        ModelMetadata {
            role: Some(role.into()),
            loss: Some(self.loss.name().into()),
            mu,
            phi,
            cost: Some(self.cost.value()),
            seed: Some(self.seed),
            labels: Vec::new(),
        }
    }
}

/// Per-epoch objective values and learning-rate halvings of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub halvings: usize,
}

/// Minibatch SGD or Adam on `Σ_i w_i loss_i + (λ/2)‖θ‖²`.
///
/// `loss_grad(i, scores, g)` returns the loss of row `i` and writes its score
/// gradient into the zeroed buffer `g`. The model ends at the best
/// epoch-end parameters seen.
pub fn fit<F>(
    model: &mut Model,
    sample: &WeightedSample,
    cfg: &TrainConfig,
    mut loss_grad: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    if sample.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: sample.dim(),
        });
    }
    let m = sample.len();
    let o = model.output_count();
    let p = model.params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut ws = Workspace::default();
    let mut scores = vec![0.0; o];
    let mut g_scores = vec![0.0; o];
    let mut grad = vec![0.0; p];
    let mut velocity = vec![0.0; p];
    let mut second = vec![0.0; p];
    let mut step = 0i32;
    let batch = cfg.batch_size.min(m);
    let mut lr_scale = 1.0;

    let mut objective = |model: &Model, loss_grad: &mut F, ws: &mut Workspace| -> f64 {
        let mut total = 0.0;
        for i in 0..m {
            model.forward_into(&sample.features[i], &mut scores, ws);
            g_scores.iter_mut().for_each(|g| *g = 0.0);
            total += sample.weights[i] * loss_grad(i, &scores, &mut g_scores);
        }
        total + 0.5 * cfg.l2 * model.params.iter().map(|v| v * v).sum::<f64>()
    };

    let mut best = objective(model, &mut loss_grad, &mut ws);
    if !best.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            detail: "initial objective is not finite".into(),
        });
    }
    let mut best_params = model.params.clone();
    let mut report = TrainReport::default();
    let mut scores = vec![0.0; o];
    let mut g_scores = vec![0.0; o];

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate
            * lr_scale
            * match cfg.schedule {
                Schedule::Constant => 1.0,
                Schedule::Cosine => {
                    0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
                }
            };
        if batch < m {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = m as f64 / chunk.len() as f64;
            for &i in chunk {
                let x = &sample.features[i];
                model.forward_into(x, &mut scores, &mut ws);
                g_scores.iter_mut().for_each(|g| *g = 0.0);
                loss_grad(i, &scores, &mut g_scores);
                model.backward(x, &g_scores, scale * sample.weights[i], &mut grad, &mut ws);
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for ((v, g), th) in velocity.iter_mut().zip(&grad).zip(&mut model.params) {
                        *v = cfg.momentum * *v + g + cfg.l2 * *th;
                        *th -= lr * *v;
                    }
                }
                Optimizer::Adam => {
                    const B1: f64 = 0.9;
                    const B2: f64 = 0.999;
                    step += 1;
                    let (c1, c2) = (1.0 - B1.powi(step), 1.0 - B2.powi(step));
                    for (((v, s), g), th) in velocity
                        .iter_mut()
                        .zip(&mut second)
                        .zip(&grad)
                        .zip(&mut model.params)
                    {
                        let g = g + cfg.l2 * *th;
                        *v = B1 * *v + (1.0 - B1) * g;
                        *s = B2 * *s + (1.0 - B2) * g * g;
                        *th -= lr * (*v / c1) / ((*s / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
        let loss = objective(model, &mut loss_grad, &mut ws);
        if !loss.is_finite() || model.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                epoch: epoch + 1,
                detail: format!("objective {loss} at learning rate {lr}"),
            });
        }
        report.epoch_losses.push(loss);
        if loss > best * 1.05 {
            lr_scale *= 0.5;
            report.halvings += 1;
            model.params.copy_from_slice(&best_params);
            velocity.iter_mut().for_each(|v| *v = 0.0);
            second.iter_mut().for_each(|v| *v = 0.0);
            step = 0;
        } else if loss < best {
            best = loss;
            best_params.copy_from_slice(&model.params);
        }
    }
    model.params.copy_from_slice(&best_params);
    report.final_loss = best;
    Ok(report)
}

/// Trains an `n + 1`-output scorer on `L_μ`.
pub fn train_single_stage(
    sample: &WeightedSample,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let TrainLoss::Surrogate { mu } = cfg.loss else {
        return Err(Error::InvalidArgument(
            "single-stage training needs a surrogate loss selector".into(),
        ));
    };
    let n = sample.n;
    let spec = ModelSpec {
        kind: cfg.model,
        input_dim: sample.dim(),
        output_count: n + 1,
        clamp: cfg.clamp,
    };
    let mut model = Model::new(spec, cfg.seed)?;
    let report = fit_comp_sum(&mut model, sample, cfg, mu, Some(cfg.cost))?;
    model.metadata = cfg.metadata("single");
    Ok((model, report))
}

/// Further `L_μ` training of an existing `n + 1`-output scorer, e.g. to
/// anneal μ from a run at a smaller value.
pub fn continue_single_stage(
    model: &mut Model,
    sample: &WeightedSample,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let TrainLoss::Surrogate { mu } = cfg.loss else {
        return Err(Error::InvalidArgument(
            "single-stage training needs a surrogate loss selector".into(),
        ));
    };
    if model.output_count() != sample.n + 1 {
        return Err(Error::DimensionMismatch {
            expected: sample.n + 1,
            actual: model.output_count(),
        });
    }
    let report = fit_comp_sum(model, sample, cfg, mu, Some(cfg.cost))?;
    model.metadata = cfg.metadata("single");
    Ok(report)
}

/// `ℓ_μ(y)` plus, when `cost` is set, `(1 − c) ℓ_μ(n)`.
pub(crate) fn fit_comp_sum(
    model: &mut Model,
    sample: &WeightedSample,
    cfg: &TrainConfig,
    mu: CompSumParams,
    cost: Option<CostModel>,
) -> Result<TrainReport> {
    let mu = mu.mu();
    let mut q = vec![0.0; model.output_count()];
    fit(model, sample, cfg, |i, s, g| {
        softmax_into(s, &mut q);
        let lse = log_sum_exp(s);
        let y = sample.labels[i];
        let mut loss = accumulate_comp_sum_grad(&q, (lse - s[y]).max(0.0), y, mu, 1.0, g);
        if let Some(c) = cost {
            let r = s.len() - 1;
            loss += accumulate_comp_sum_grad(&q, (lse - s[r]).max(0.0), r, mu, c.accept_mass(), g);
        }
        loss
    })
}

/// Stage 1 trains an `n`-output predictor on `ℓ_μ`; stage 2 freezes it and
/// trains a one-output rejector on the second-stage loss.
pub fn train_two_stage(
    sample: &WeightedSample,
    cfg_stage1: &TrainConfig,
    cfg_stage2: &TrainConfig,
) -> Result<TwoStageOutcome> {
    let TrainLoss::Multiclass { mu } = cfg_stage1.loss else {
        return Err(Error::InvalidArgument(
            "first stage needs a multiclass loss selector".into(),
        ));
    };
    let spec = ModelSpec {
        kind: cfg_stage1.model,
        input_dim: sample.dim(),
        output_count: sample.n,
        clamp: cfg_stage1.clamp,
    };
    let mut predictor = Model::new(spec, cfg_stage1.seed)?;
    let stage1 = fit_comp_sum(&mut predictor, sample, cfg_stage1, mu, None)?;
    predictor.metadata = cfg_stage1.metadata("predictor");
    let (rejector, stage2) = train_rejector(sample, &predictor, cfg_stage2)?;
    Ok(TwoStageOutcome {
        predictor,
        rejector,
        stage1,
        stage2,
    })
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub predictor: Model,
    pub rejector: Model,
    pub stage1: TrainReport,
    pub stage2: TrainReport,
}

/// Second stage alone, against a frozen predictor.
pub fn train_rejector(
    sample: &WeightedSample,
    predictor: &Model,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let TrainLoss::TwoStage { phi } = cfg.loss else {
        return Err(Error::InvalidArgument(
            "second stage needs a two-stage loss selector".into(),
        ));
    };
    let frozen: Vec<(bool, f64)> = sample
        .features
        .iter()
        .zip(&sample.labels)
        .map(|(x, &y)| {
            let s = predictor.forward(x)?;
            losses::predictor_outcome(&s, y)
        })
        .collect::<Result<_>>()?;
    let spec = ModelSpec {
        kind: cfg.model,
        input_dim: sample.dim(),
        output_count: 1,
        clamp: cfg.clamp,
    };
    let mut rejector = Model::new(spec, cfg.seed.wrapping_add(1))?;
    let c = cfg.cost.value();
    let report = fit(&mut rejector, sample, cfg, |i, s, g| {
        let (wrong, top) = frozen[i];
        g[0] = two_stage_grad_from_parts(wrong, top, s[0], c, phi);
        two_stage_from_parts(wrong, top, s[0], c, phi)
    })?;
    rejector.metadata = cfg.metadata("rejector");
    Ok((rejector, report))
}

/// A trained decision maker.
#[derive(Debug, Clone)]
pub enum Scorer {
    Single {
        model: Model,
        mu: Option<CompSumParams>,
    },
    TwoStage {
        predictor: Model,
        rejector: Model,
        phi: MarginFunction,
    },
}

impl Scorer {
    pub fn input_dim(&self) -> usize {
        match self {
            Scorer::Single { model, .. } => model.input_dim(),
            Scorer::TwoStage { predictor, .. } => predictor.input_dim(),
        }
    }

    /// Number of true labels.
    pub fn n(&self) -> usize {
        match self {
            Scorer::Single { model, .. } => model.output_count() - 1,
            Scorer::TwoStage { predictor, .. } => predictor.output_count(),
        }
    }

    pub fn decide(&self, x: &[f64]) -> Result<Decision> {
        Ok(self.decide_with_loss(x, 0, None)?.0)
    }

    fn decide_with_loss(
        &self,
        x: &[f64],
        y: usize,
        cost: Option<CostModel>,
    ) -> Result<(Decision, Option<f64>)> {
        match self {
            Scorer::Single { model, mu } => {
                let s = model.forward(x)?;
                let sur = match (mu, cost) {
                    (Some(mu), Some(c)) => Some(losses::surrogate_l_mu(&s, y, c, *mu)?),
                    _ => None,
                };
                Ok((predict_label(&s), sur))
            }
            Scorer::TwoStage {
                predictor,
                rejector,
                phi,
            } => {
                let s = predictor.forward(x)?;
                let r = rejector.forward(x)?[0];
                let top = losses::argmax(&s);
                let d = if r >= s[top] {
                    Decision::Abstain
                } else {
                    Decision::Label(top)
                };
                let sur = match cost {
                    Some(c) => Some(losses::two_stage_loss(&s, r, y, c, *phi)?),
                    None => None,
                };
                Ok((d, sur))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub abstention_loss: f64,
    pub rejection_rate: f64,
    /// Absent when every point is rejected.
    pub accepted_accuracy: Option<f64>,
    /// `L_μ` for single-stage scorers with known μ, the second-stage loss
    /// for two-stage scorers.
    pub surrogate_loss: Option<f64>,
}

/// Weighted abstention metrics of `scorer` on `sample`.
pub fn evaluate(scorer: &Scorer, sample: &WeightedSample, cost: CostModel) -> Result<Metrics> {
    if sample.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if sample.dim() != scorer.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: scorer.input_dim(),
            actual: sample.dim(),
        });
    }
    let (mut loss, mut rejected, mut accepted, mut correct) = (0.0, 0.0, 0.0, 0.0);
    let mut sur = Some(0.0);
    for ((x, &y), &w) in sample
        .features
        .iter()
        .zip(&sample.labels)
        .zip(&sample.weights)
    {
        let (d, s) = scorer.decide_with_loss(x, y, Some(cost))?;
        loss += w * decision_loss(d, y, cost);
        match d {
            Decision::Abstain => rejected += w,
            Decision::Label(l) => {
                accepted += w;
                if l == y {
                    correct += w;
                }
            }
        }
        sur = match (sur, s) {
            (Some(a), Some(b)) => Some(a + w * b),
            _ => None,
        };
    }
    Ok(Metrics {
        abstention_loss: loss,
        rejection_rate: rejected,
        accepted_accuracy: (accepted > 0.0).then(|| correct / accepted),
        surrogate_loss: sur,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(d: usize, o: usize, params: Vec<f64>, clamp: Option<f64>) -> Model {
        let spec = ModelSpec {
            kind: ModelKind::Linear,
            input_dim: d,
            output_count: o,
            clamp,
        };
        Model::from_params(spec, params).unwrap()
    }

    #[test]
    fn forward_examples() {
        let zero = linear(2, 3, vec![0.0; 9], None);
        assert_eq!(zero.forward(&[1.5, -2.0]).unwrap(), vec![0.0; 3]);
        // identity rows, zero bias
        let id = linear(2, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], None);
        assert_eq!(id.forward(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        let clamped = linear(1, 1, vec![3.7, 0.0], Some(1.0));
        assert_eq!(clamped.forward(&[1.0]).unwrap(), vec![1.0]);
        assert!(matches!(
            zero.forward(&[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let spec = ModelSpec {
            kind: ModelKind::Mlp { width: 5 },
            input_dim: 3,
            output_count: 4,
            clamp: None,
        };
        let model = Model::new(spec, 11).unwrap();
        let x = [0.3, -1.2, 0.8];
        let gs = [0.5, -1.0, 0.25, 2.0];
        let mut ws = Workspace::default();
        let mut out = vec![0.0; 4];
        model.forward_into(&x, &mut out, &mut ws);
        let mut grad = vec![0.0; spec.param_count()];
        model.backward(&x, &gs, 1.0, &mut grad, &mut ws);
        let f = |m: &Model| -> f64 { dot(&m.forward(&x).unwrap(), &gs) };
        for k in 0..grad.len() {
            let h = 1e-6;
            let mut a = model.clone();
            a.params[k] += h;
            let mut b = model.clone();
            b.params[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() < 1e-6,
                "param {k}: {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let sample = WeightedSample::uniform(vec![vec![1.0]], vec![0], 2).unwrap();
        let mut cfg = TrainConfig::new(
            TrainLoss::Surrogate {
                mu: CompSumParams::logistic(),
            },
            CostModel::new(0.5).unwrap(),
        );
        cfg.epochs = 0;
        assert!(train_single_stage(&sample, &cfg).is_err());
    }

    #[test]
    fn evaluate_hand_built_set() {
        // scores are the one-hot feature itself: points 0,1 correct, 2 wrong, 3 abstain
        let id = linear(
            3,
            3,
            {
                let mut p = vec![0.0; 12];
                p[0] = 1.0;
                p[5] = 1.0;
                p[10] = 1.0;
                p
            },
            None,
        );
        let feats = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let sample = WeightedSample::uniform(feats, vec![0, 1, 0, 1], 2).unwrap();
        let scorer = Scorer::Single {
            model: id,
            mu: None,
        };
        let m = evaluate(&scorer, &sample, CostModel::new(0.2).unwrap()).unwrap();
        assert!((m.abstention_loss - 0.3).abs() < 1e-15);
        assert!((m.rejection_rate - 0.25).abs() < 1e-15);
        assert!((m.accepted_accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(m.surrogate_loss.is_none());
    }
}
