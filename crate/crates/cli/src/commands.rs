use std::path::Path;

use abstention::consistency::{
    approx_vs_gap_demo, check_comp_sum_bound_with, check_transformed_bound,
    check_two_stage_bound, closed_form_v, estimate_calibration_function, minimize_comp_sum_risk,
    sample_simplex, transform_bound, Atom, BaseLoss, BoundCheckReport, ConditionalDistribution,
    DiscreteProblem, GammaTransform, LossPair, SamplerConfig,
};
use abstention::data_io::{
    class_directions, generate, load_csv, load_csv_with_labels, load_model, load_problem_spec,
    multiclass_margin, save_model, write_report, GapSweep, GapSweepRow, MetricsRecord,
    ModelEvaluation, RealizableRecord, RealizableRun, RecipeKind, Report, SyntheticRecipe,
};
use abstention::finite_sample::{validate_bound, RademacherConfig, ValidationConfig};
use abstention::hypothesis::{
    evaluate, train_single_stage, train_two_stage, Model, ModelKind, Optimizer, Schedule,
    Scorer, TrainConfig, TrainLoss, WeightedSample,
};
use abstention::losses::{CompSumParams, CostModel, MarginFunction};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunDir;
use crate::{
    BaseArg, CheckArg, EvalArgs, FiniteSampleArgs, GapsArgs, LossArg, ModelArg, OptimizerArg,
    RealizableArgs, RecipeArg, ScheduleArg, TrainArgs, TrainerArgs, VerifyArgs,
};
use crate::Failure;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

/// Writes the manifest and passes the outcome through.
fn finish(
    run: &RunDir,
    name: &str,
    args: &impl Serialize,
    seeds: Vec<u64>,
    outcome: Result<(), Failure>,
) -> Result<(), Failure> {
    let code = outcome.as_ref().err().map_or(0, |f| f.code() as i32);
    run.write_manifest(name, args, seeds, code)?;
    outcome
}

fn report(run: &mut RunDir, rel: &str, r: &Report) -> Result<(), Failure> {
    let path = run.path(rel)?;
    write_report(&path, r)?;
    run.record(abstention::data_io::csv_sidecar(&path));
    run.record(path);
    Ok(())
}

fn model_file(run: &mut RunDir, rel: &str, m: &Model) -> Result<(), Failure> {
    let path = run.path(rel)?;
    save_model(&path, m)?;
    run.record(path);
    Ok(())
}

fn resolve_mu(loss: Option<LossArg>, mu: Option<f64>) -> Result<f64, Failure> {
    let fixed = |v: f64| match mu {
        Some(m) if m != v => Err(config_err(format!(
            "--loss fixes mu = {v}, but --mu {m} was given"
        ))),
        _ => Ok(v),
    };
    match loss {
        None | Some(LossArg::CompSum) => Ok(mu.unwrap_or(1.0)),
        Some(LossArg::SumExp) => fixed(0.0),
        Some(LossArg::Ce) => fixed(1.0),
        Some(LossArg::Mae) => fixed(2.0),
        Some(LossArg::Gce) => match mu {
            Some(m) if m > 1.0 && m < 2.0 => Ok(m),
            _ => Err(config_err("--loss gce needs --mu in (1, 2)")),
        },
    }
}

fn train_config(t: &TrainerArgs, loss: TrainLoss, cost: CostModel, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(loss, cost);
    cfg.model = match t.model {
        ModelArg::Linear => ModelKind::Linear,
        ModelArg::Mlp => ModelKind::Mlp { width: t.width },
    };
    cfg.clamp = t.clamp;
    cfg.epochs = t.epochs;
    cfg.batch_size = t.batch_size;
    cfg.learning_rate = t.lr;
    cfg.optimizer = match t.optimizer {
        OptimizerArg::Sgd => Optimizer::Sgd,
        OptimizerArg::Adam => Optimizer::Adam,
    };
    cfg.momentum = t.momentum;
    cfg.l2 = t.l2;
    cfg.schedule = match t.schedule {
        ScheduleArg::Constant => Schedule::Constant,
        ScheduleArg::Cosine => Schedule::Cosine,
    };
    cfg.seed = seed;
    cfg
}

// ---------------------------------------------------------------------------

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let csv = a.csv.clone().ok_or_else(|| config_err("--csv is required"))?;
    if a.two_stage && (a.mu.is_some() || a.loss.is_some()) {
        return Err(config_err(
            "--two-stage and a single-stage loss selector (--mu/--loss) are mutually exclusive",
        ));
    }
    let cost = CostModel::new(a.cost)?;
    let data = load_csv(&csv, &a.label)?;
    let sample = WeightedSample::try_from(&data)?;
    let mut run = RunDir::create(&a.out)?;
    let outcome = (|| {
        let (scorer, names) = if a.two_stage {
            let c1 = train_config(
                &a.trainer,
                TrainLoss::Multiclass {
                    mu: CompSumParams::new(a.stage1_mu)?,
                },
                cost,
                a.seed,
            );
            let c2 = train_config(&a.trainer, TrainLoss::TwoStage { phi: a.phi.into() }, cost, a.seed);
            let mut out = train_two_stage(&sample, &c1, &c2)?;
            out.predictor.metadata.labels = data.label_names.clone();
            out.rejector.metadata.labels = data.label_names.clone();
            model_file(&mut run, "predictor.model", &out.predictor)?;
            model_file(&mut run, "rejector.model", &out.rejector)?;
            eprintln!(
                "stage 1 loss {:.6}, stage 2 loss {:.6}",
                out.stage1.final_loss, out.stage2.final_loss
            );
            (
                Scorer::TwoStage {
                    predictor: out.predictor,
                    rejector: out.rejector,
                    phi: a.phi.into(),
                },
                "predictor.model+rejector.model",
            )
        } else {
            let mu = CompSumParams::new(resolve_mu(a.loss, a.mu)?)?;
            let cfg = train_config(&a.trainer, TrainLoss::Surrogate { mu }, cost, a.seed);
            let (mut model, rep) = train_single_stage(&sample, &cfg)?;
            model.metadata.labels = data.label_names.clone();
            model_file(&mut run, "model.model", &model)?;
            eprintln!("training loss {:.6}", rep.final_loss);
            (Scorer::Single { model, mu: Some(mu) }, "model.model")
        };
        let metrics = evaluate(&scorer, &sample, cost)?;
        eprintln!(
            "training abstention loss {:.4}, rejection rate {:.4}",
            metrics.abstention_loss, metrics.rejection_rate
        );
        let record = MetricsRecord::new(
            cost.value(),
            csv.display().to_string(),
            data.m(),
            vec![ModelEvaluation {
                model: names.into(),
                seed: Some(a.seed),
                metrics,
            }],
        );
        report(&mut run, "metrics.json", &Report::Metrics(record))
    })();
    finish(&run, "train", &a, vec![a.seed], outcome)
}

// ---------------------------------------------------------------------------

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    if a.model.is_empty() {
        return Err(config_err("at least one --model is required"));
    }
    if !a.rejector.is_empty() && a.rejector.len() != a.model.len() {
        return Err(config_err("--rejector must be given once per --model"));
    }
    let csv = a.csv.clone().ok_or_else(|| config_err("--csv is required"))?;
    let models = a
        .model
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>, _>>()?;
    let rejectors = a
        .rejector
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = &models[0].metadata.labels;
    let data = if labels.is_empty() {
        load_csv(&csv, &a.label)?
    } else {
        load_csv_with_labels(&csv, &a.label, labels)?
    };
    let cost = match a.cost.or(models[0].metadata.cost) {
        Some(c) => CostModel::new(c)?,
        None => return Err(config_err("--cost is required (models carry no cost)")),
    };
    let sample = WeightedSample::try_from(&data)?;
    let mut evals = Vec::new();
    for (i, model) in models.into_iter().enumerate() {
        if model.input_dim() != data.d {
            return Err(config_err(format!(
                "{}: model expects {} features, dataset has {}",
                a.model[i].display(),
                model.input_dim(),
                data.d
            )));
        }
        let seed = model.metadata.seed;
        let scorer = match rejectors.get(i) {
            Some(r) => Scorer::TwoStage {
                phi: r.metadata.phi.unwrap_or(MarginFunction::Exponential),
                predictor: model,
                rejector: r.clone(),
            },
            None => {
                let expected = data.n + 1;
                if model.output_count() != expected {
                    return Err(config_err(format!(
                        "{}: model has {} outputs, dataset needs {expected}",
                        a.model[i].display(),
                        model.output_count()
                    )));
                }
                let mu = model.metadata.mu.map(CompSumParams::new).transpose()?;
                Scorer::Single { model, mu }
            }
        };
        let metrics = evaluate(&scorer, &sample, cost)?;
        evals.push(ModelEvaluation {
            model: a.model[i].display().to_string(),
            seed,
            metrics,
        });
    }
    let record = MetricsRecord::new(cost.value(), csv.display().to_string(), data.m(), evals);
    match record.std_abstention_loss {
        Some(s) => eprintln!("abstention loss {:.4} ± {:.4}", record.mean_abstention_loss, s),
        None => eprintln!("abstention loss {:.4}", record.mean_abstention_loss),
    }
    let mut run = RunDir::create(&a.out)?;
    let outcome = report(&mut run, "metrics.json", &Report::Metrics(record));
    finish(&run, "eval", &a, Vec::new(), outcome)
}

// ---------------------------------------------------------------------------

/// Random problem with `atoms` atoms of `n`-label distributions.
fn random_problem(rng: &mut ChaCha8Rng, atoms: usize, n: usize, cost: CostModel) -> DiscreteProblem {
    let w = sample_simplex(rng, atoms);
    let atoms = w
        .into_iter()
        .map(|w| Atom {
            weight: w,
            dist: ConditionalDistribution::new(sample_simplex(rng, n), cost).expect("simplex draw"),
            features: None,
        })
        .collect();
    DiscreteProblem::new(atoms).expect("simplex weights")
}

/// Binary margin calibration estimate, `√(k̂ t)`.
pub fn estimate_gamma2(phi: MarginFunction, seed: u64) -> Result<GammaTransform, Failure> {
    let s = SamplerConfig {
        trials: 200_000,
        seed,
        atoms: 1,
        problems: 1,
    };
    Ok(estimate_calibration_function(LossPair::BinaryMargin { phi }, &s, 50, 0.5)?.sqrt_envelope())
}

fn grid3<A: Copy>(first: &[A], costs: &[f64], ns: &[usize]) -> Vec<(A, f64, usize)> {
    let mut out = Vec::new();
    for &f in first {
        for &c in costs {
            for &n in ns {
                out.push((f, c, n));
            }
        }
    }
    out
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn verify(a: VerifyArgs) -> Result<(), Failure> {
    if a.trials == 0 || a.problems == 0 || a.atoms == 0 {
        return Err(config_err("--trials, --problems and --atoms must be >= 1"));
    }
    for &mu in &a.mu {
        CompSumParams::new(mu)?;
    }
    for &c in &a.cost {
        CostModel::new(c)?;
    }
    if a.n.iter().any(|&n| n < 2) {
        return Err(config_err("--n values must be >= 2"));
    }
    let sampler = SamplerConfig {
        trials: a.trials,
        seed: a.seed,
        atoms: a.atoms,
        problems: a.problems,
    };
    let mut run = RunDir::create(&a.out)?;
    eprintln!(
        "verify {:?}: mu [{}] c [{}] n [{}], {} trials per cell{}",
        a.check,
        fmt_list(&a.mu),
        fmt_list(&a.cost),
        fmt_list(&a.n),
        a.trials,
        if a.mutate { ", mutated constant" } else { "" }
    );
    let cells: Vec<(String, Report)> = match a.check {
        CheckArg::CompSum => {
            let grid = grid3(&a.mu, &a.cost, &a.n);
            grid.par_iter()
                .map(|&(mu, c, n)| {
                    let params = CompSumParams::new(mu)?;
                    let cost = CostModel::new(c)?;
                    let mut gamma = GammaTransform::comp_sum(params, cost, n);
                    if a.mutate {
                        gamma = gamma.scaled(0.5);
                    }
                    let r = check_comp_sum_bound_with(params, cost, n, &sampler, &gamma)?;
                    Ok((format!("mu={mu}_c={c}_n={n}"), Report::BoundCheck(r)))
                })
                .collect::<Result<_, Failure>>()?
        }
        CheckArg::Transformed => {
            let grid = grid3(&a.base, &a.cost, &a.n);
            grid.par_iter()
                .map(|&(b, c, n)| {
                    let base = match b {
                        BaseArg::DoubledLogistic => BaseLoss::DoubledLogistic,
                        BaseArg::MeanAbsolute => BaseLoss::MeanAbsolute,
                    };
                    let cost = CostModel::new(c)?;
                    let mut gamma = transform_bound(&base.gamma(n), cost);
                    if a.mutate {
                        gamma = gamma.scaled(0.5);
                    }
                    let r = check_transformed_bound(base, cost, n, &sampler, Some(&gamma))?;
                    Ok((format!("{b:?}_c={c}_n={n}").to_lowercase(), Report::BoundCheck(r)))
                })
                .collect::<Result<_, Failure>>()?
        }
        CheckArg::TwoStage => {
            let gamma1 = GammaTransform::Sqrt { k: 2.0 };
            let mut out = Vec::new();
            for &phi_arg in &a.phi {
                let phi: MarginFunction = phi_arg.into();
                let mut gamma2 = estimate_gamma2(phi, a.seed)?;
                if a.mutate {
                    gamma2 = gamma2.scaled(0.1);
                }
                eprintln!("{}: estimated second-stage transform {gamma2:?}", phi.name());
                let grid: Vec<(f64, usize)> = grid3(&[()], &a.cost, &a.n)
                    .into_iter()
                    .map(|(_, c, n)| (c, n))
                    .collect();
                let cells: Vec<(String, Report)> = grid
                    .par_iter()
                    .enumerate()
                    .map(|(i, &(c, n))| {
                        let cost = CostModel::new(c)?;
                        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                        rng.set_stream(i as u64);
                        let per = a.trials.div_ceil(a.problems);
                        let mut merged: Option<BoundCheckReport> = None;
                        for p in 0..a.problems {
                            let problem = random_problem(&mut rng, a.atoms, n, cost);
                            let s = SamplerConfig {
                                trials: per,
                                seed: a.seed.wrapping_add(p as u64),
                                atoms: a.atoms,
                                problems: 1,
                            };
                            let r = check_two_stage_bound(&problem, &gamma1, &gamma2, phi, &s)?;
                            merged = Some(match merged {
                                Some(m) => m.merge(r),
                                None => r,
                            });
                        }
                        Ok((
                            format!("{}_c={c}_n={n}", phi.name()),
                            Report::BoundCheck(merged.expect("problems >= 1")),
                        ))
                    })
                    .collect::<Result<_, Failure>>()?;
                out.extend(cells);
            }
            out
        }
        CheckArg::Calibration => {
            let grid = grid3(&a.mu, &a.cost, &a.n);
            grid.par_iter()
                .map(|&(mu, c, n)| {
                    let pair = LossPair::AbstentionVsCompSum { mu, c, n };
                    let curve = estimate_calibration_function(pair, &sampler, 50, 1.0)?;
                    Ok((format!("mu={mu}_c={c}_n={n}"), Report::Calibration(curve)))
                })
                .collect::<Result<_, Failure>>()?
        }
    };

    let (mut trials, mut violations, mut nonconverged) = (0usize, 0usize, 0usize);
    for (name, r) in &cells {
        match r {
            Report::BoundCheck(b) => {
                eprintln!(
                    "{name}: {} trials, {} violations, {} non-converged, min slack {:.3e}",
                    b.trials, b.violation_count, b.nonconverged, b.min_slack
                );
                trials += b.trials;
                violations += b.violation_count;
                nonconverged += b.nonconverged;
            }
            Report::Calibration(curve) => {
                let LossPair::AbstentionVsCompSum { mu, c, n } = curve.pair else {
                    unreachable!("calibration cells use the comp-sum pair")
                };
                let mut gamma = GammaTransform::comp_sum(CompSumParams::new(mu)?, CostModel::new(c)?, n);
                if a.mutate {
                    gamma = gamma.scaled(0.5);
                }
                let ok = curve.dominated_by(&gamma);
                eprintln!("{name}: {} samples, dominated {ok}", curve.samples);
                trials += 1;
                violations += usize::from(!ok);
            }
            _ => {}
        }
        report(&mut run, &format!("{name}/report.json"), r)?;
    }
    eprintln!("total: {trials} trials, {violations} violations, {nonconverged} non-converged");
    let outcome = if violations > 0 {
        Err(Failure::Violation(format!("{violations} bound violations")))
    } else if nonconverged as f64 > a.max_nonconverged * trials as f64 {
        Err(Failure::Inconclusive(format!(
            "{nonconverged} of {trials} oracle calls did not converge"
        )))
    } else {
        Ok(())
    };
    finish(&run, "verify", &a, vec![a.seed], outcome)
}

// ---------------------------------------------------------------------------

/// `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, Failure> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| config_err(format!("bad grid value '{s}'")))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(config_err(format!("bad grid '{spec}'")));
            }
            let k = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=k).map(|i| a + i as f64 * step).collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => Err(config_err(format!("bad grid '{spec}'"))),
    }
}

pub fn gaps(a: GapsArgs) -> Result<(), Failure> {
    let mut run = RunDir::create(&a.out)?;
    if a.demo.is_some() {
        let rec = approx_vs_gap_demo(a.lambda, a.eta)?;
        eprintln!(
            "bounded {:.12} unbounded {:.12} difference {:.12e}",
            rec.bounded_inf, rec.unbounded_inf, rec.difference
        );
        let outcome = report(&mut run, "demo.json", &Report::ApproxGap(rec));
        return finish(&run, "gaps", &a, Vec::new(), outcome);
    }
    let grid = parse_grid(&a.mu_grid)?;
    for &mu in &grid {
        CompSumParams::new(mu)?;
    }
    let costs = a
        .cost
        .iter()
        .map(|&c| CostModel::new(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut failures = Vec::new();
    let mut nonconverged = 0;
    for cost in costs {
        let weights = ConditionalDistribution::deterministic(2, 0, cost)?.augmented();
        let rows: Vec<GapSweepRow> = grid
            .par_iter()
            .map(|&mu| {
                let m = minimize_comp_sum_risk(&weights, mu);
                (m.converged, GapSweepRow {
                    mu,
                    closed_form_v: closed_form_v(mu, cost),
                    numeric_v: m.value,
                    oracle_residual: m.residual,
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|(ok, r)| {
                nonconverged += usize::from(!ok);
                r
            })
            .collect();
        let max_abs_error = rows
            .iter()
            .map(|r| (r.closed_form_v - r.numeric_v).abs())
            .fold(0.0, f64::max);
        let monotone = rows
            .windows(2)
            .all(|w| w[1].closed_form_v <= w[0].closed_form_v + 1e-12);
        let c = cost.value();
        eprintln!("c={c}: {} grid points, max |closed - numeric| {max_abs_error:.3e}, monotone {monotone}", rows.len());
        if max_abs_error > a.tol || !monotone {
            failures.push(c);
        }
        let sweep = GapSweep {
            c,
            rows,
            max_abs_error,
            monotone_decreasing: monotone,
        };
        report(&mut run, &format!("c={c}/gaps.json"), &Report::GapSweep(sweep))?;
    }
    let outcome = if !failures.is_empty() {
        Err(Failure::Violation(format!(
            "closed form disagrees or is not monotone for c in [{}]",
            fmt_list(&failures)
        )))
    } else if nonconverged > 0 {
        Err(Failure::Inconclusive(format!("{nonconverged} oracle calls did not converge")))
    } else {
        Ok(())
    };
    finish(&run, "gaps", &a, Vec::new(), outcome)
}

// ---------------------------------------------------------------------------

pub fn realizable(a: RealizableArgs) -> Result<(), Failure> {
    if a.cost.is_empty() {
        return Err(config_err("at least one --cost is required"));
    }
    let recipes = a
        .cost
        .iter()
        .map(|&c| {
            let r = SyntheticRecipe::separable(a.n, a.d, c, a.margin, a.atoms, a.seed);
            r.validate().map(|_| r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if a.m == 0 {
        return Err(config_err("--m must be >= 1"));
    }
    let mut run = RunDir::create(&a.out)?;
    let outcome = (|| {
        let mut runs = Vec::new();
        let mut certified = f64::INFINITY;
        for r in &recipes {
            let (problem, sampler) = generate(r)?;
            let dirs = class_directions(r.n, r.d);
            certified = problem
                .atoms()
                .iter()
                .map(|at| {
                    let y = at.dist.p().iter().position(|&p| p == 1.0).expect("deterministic");
                    multiclass_margin(&dirs, at.features.as_ref().expect("featured"), y)
                })
                .fold(certified, f64::min);
            let data = sampler.sample(a.m, 0)?;
            let sample = WeightedSample::try_from(&data)?;
            let cost = CostModel::new(r.c)?;
            let mut c1 = TrainConfig::new(
                TrainLoss::Multiclass {
                    mu: CompSumParams::new(1.0)?,
                },
                cost,
            );
            c1.epochs = a.epochs;
            c1.learning_rate = a.lr;
            c1.seed = a.seed;
            let mut c2 = c1.clone();
            c2.loss = TrainLoss::TwoStage { phi: a.phi.into() };
            let two = train_two_stage(&sample, &c1, &c2)?;
            let mut cs = c1.clone();
            cs.loss = TrainLoss::Surrogate {
                mu: CompSumParams::new(1.0)?,
            };
            let (single, _) = train_single_stage(&sample, &cs)?;
            let pop = problem.population_sample()?;
            let dir = format!("c={}", r.c);
            model_file(&mut run, &format!("{dir}/predictor.model"), &two.predictor)?;
            model_file(&mut run, &format!("{dir}/rejector.model"), &two.rejector)?;
            model_file(&mut run, &format!("{dir}/single.model"), &single)?;
            let two_loss = evaluate(
                &Scorer::TwoStage {
                    predictor: two.predictor,
                    rejector: two.rejector,
                    phi: a.phi.into(),
                },
                &pop,
                cost,
            )?
            .abstention_loss;
            let single_loss = evaluate(&Scorer::Single { model: single, mu: None }, &pop, cost)?
                .abstention_loss;
            eprintln!(
                "c={}: two-stage abstention loss {two_loss:.4}, single-stage L_1 {single_loss:.4}",
                r.c
            );
            runs.push(RealizableRun {
                c: r.c,
                two_stage_loss: two_loss,
                single_stage_loss: single_loss,
                passed: two_loss <= a.threshold,
            });
        }
        let passed = runs.iter().all(|r| r.passed);
        let record = RealizableRecord {
            recipe: recipes[0].clone(),
            certified_margin: certified,
            threshold: a.threshold,
            runs,
            passed,
        };
        report(&mut run, "realizable.json", &Report::Realizable(record))?;
        if passed {
            Ok(())
        } else {
            Err(Failure::Violation(format!(
                "two-stage abstention loss above {}",
                a.threshold
            )))
        }
    })();
    finish(&run, "realizable", &a, vec![a.seed], outcome)
}

// ---------------------------------------------------------------------------

pub fn finite_sample(a: FiniteSampleArgs) -> Result<(), Failure> {
    if a.trials < 20 {
        return Err(config_err(format!("--trials must be >= 20, got {}", a.trials)));
    }
    let Some(lambda) = a.clamp else {
        return Err(config_err("--clamp is required: the bound needs a clamped family"));
    };
    let problem = match &a.problem {
        Some(p) => load_problem_spec(Path::new(p))?,
        None => {
            let kind = match a.recipe {
                RecipeArg::SeparableMargin => RecipeKind::SeparableMargin,
                RecipeArg::LabelNoise => RecipeKind::LabelNoise,
                RecipeArg::ChowStress => RecipeKind::ChowStress,
            };
            let recipe = SyntheticRecipe {
                kind,
                n: a.n,
                d: a.d,
                c: a.cost,
                margin: a.margin,
                noise: a.rho,
                atoms: a.atoms,
                seed: a.seed,
            };
            generate(&recipe)?.0
        }
    };
    let mu = CompSumParams::new(a.mu)?;
    let mut train = TrainConfig::new(TrainLoss::Surrogate { mu }, problem.cost());
    train.clamp = Some(lambda);
    train.epochs = a.epochs;
    train.learning_rate = a.lr;
    train.optimizer = Optimizer::Adam;
    train.batch_size = a.m.max(1);
    let cfg = ValidationConfig {
        m: a.m,
        delta: a.delta,
        trials: a.trials,
        train,
        reference_runs: a.reference_runs,
        reference_epochs: a.reference_epochs,
        rademacher: RademacherConfig {
            sigma_draws: a.sigma_draws,
            restarts: a.restarts,
            steps: a.steps,
            learning_rate: a.ascent_lr,
            seed: a.seed,
        },
        seed: a.seed,
    };
    let mut run = RunDir::create(&a.out)?;
    let outcome = (|| {
        let rep = validate_bound(&problem, &cfg)?;
        eprintln!(
            "coverage {}/{} = {:.3} (threshold {:.3}), mean bound {:.4}",
            rep.covered,
            rep.trials,
            rep.coverage,
            rep.threshold,
            rep.bounds.iter().sum::<f64>() / rep.bounds.len() as f64
        );
        let passed = rep.passed;
        let seeds = rep.reference_seeds.clone();
        report(&mut run, "coverage.json", &Report::Coverage(rep))?;
        if passed {
            Ok(seeds)
        } else {
            Err(Failure::Violation("coverage below threshold".into()))
        }
    })();
    let seeds = outcome.as_ref().map(|s| s.clone()).unwrap_or_default();
    let mut all = vec![a.seed];
    all.extend(seeds);
    finish(&run, "finite-sample", &a, all, outcome.map(|_| ()))
}
