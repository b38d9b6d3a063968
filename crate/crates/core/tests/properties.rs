//! Property tests for the invariants of each module.

use abstention::consistency::*;
use abstention::data_io::*;
use abstention::finite_sample::*;
use abstention::hypothesis::*;
use abstention::losses::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `(n, scores of length n + 1, y)`.
fn scored() -> impl Strategy<Value = (usize, Vec<f64>, usize)> {
    (2usize..=6).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-5.0f64..5.0, n + 1),
            0..n,
        )
    })
}

fn cost() -> impl Strategy<Value = f64> {
    0.01f64..0.99
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        if s <= 1e-9 {
            let mut u = vec![0.0; v.len()];
            u[0] = 1.0;
            u
        } else {
            v.into_iter().map(|x| x / s).collect()
        }
    })
}

fn k(c: f64) -> CostModel {
    CostModel::new(c).unwrap()
}

fn p(mu: f64) -> CompSumParams {
    CompSumParams::new(mu).unwrap()
}

// ---------------------------------------------------------------------------
// losses

proptest! {
    #[test]
    fn abstention_loss_takes_three_values((_, s, y) in scored(), c in cost()) {
        let v = abstention_loss(&s, y, k(c)).unwrap();
        prop_assert!(v == 0.0 || v == 1.0 || v == c);
    }

    #[test]
    fn comp_sum_is_translation_invariant(
        (_, s, y) in scored(),
        shift in -10.0f64..10.0,
        mu in prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0]),
    ) {
        let t: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let a = comp_sum_loss(&s, y, p(mu)).unwrap();
        let b = comp_sum_loss(&t, y, p(mu)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn comp_sum_decreases_in_mu((_, s, y) in scored(), a in 0.0f64..4.0, b in 0.0f64..4.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let l_lo = comp_sum_loss(&s, y, p(lo)).unwrap();
        let l_hi = comp_sum_loss(&s, y, p(hi)).unwrap();
        prop_assert!(l_lo >= l_hi - 1e-12 * l_lo.abs().max(1.0));
    }

    #[test]
    fn comp_sum_is_continuous_at_one_and_two(
        (n, _, y) in scored(),
        raw in prop::collection::vec(-1.0f64..1.0, 7),
        mu0 in prop::sample::select(vec![1.0, 2.0]),
    ) {
        let s = &raw[..=n];
        let at = comp_sum_loss(s, y, p(mu0)).unwrap();
        for m in [mu0 - 1e-6, mu0 + 1e-6] {
            prop_assert!((comp_sum_loss(s, y, p(m)).unwrap() - at).abs() <= 1e-5);
        }
    }

    #[test]
    fn comp_sum_is_nonnegative((_, s, y) in scored(), mu in 0.0f64..5.0) {
        prop_assert!(comp_sum_loss(&s, y, p(mu)).unwrap() >= 0.0);
    }

    #[test]
    fn two_stage_loss_dominates_abstention_loss(
        (n, s, y) in scored(),
        r in -6.0f64..6.0,
        c in cost(),
        exp in any::<bool>(),
    ) {
        let phi = if exp { MarginFunction::Exponential } else { MarginFunction::Logistic };
        let h = &s[..n];
        // composite rule: abstain iff r >= max h
        let mut composite = h.to_vec();
        composite.push(r);
        let target = abstention_loss(&composite, y, k(c)).unwrap();
        let sur = two_stage_loss(h, r, y, k(c), phi).unwrap();
        prop_assert!(sur >= target - 1e-12, "{sur} < {target}");
    }

    #[test]
    fn predict_label_is_scale_invariant((_, s, _) in scored(), alpha in 1e-3f64..1e3) {
        let t: Vec<f64> = s.iter().map(|v| v * alpha).collect();
        prop_assert_eq!(predict_label(&s), predict_label(&t));
    }
}

// ---------------------------------------------------------------------------
// hypothesis

fn tiny_sample(seed: u64, m: usize) -> WeightedSample {
    let recipe = SyntheticRecipe::separable(3, 2, 0.3, 0.2, 12, seed);
    let (_, sampler) = generate(&recipe).unwrap();
    WeightedSample::try_from(&sampler.sample(m, 0).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn training_is_deterministic(seed in 0u64..1000, mlp in any::<bool>()) {
        let sample = tiny_sample(seed % 7, 40);
        let mut cfg = TrainConfig::new(TrainLoss::Surrogate { mu: p(1.0) }, k(0.3));
        cfg.epochs = 5;
        cfg.seed = seed;
        if mlp {
            cfg.model = ModelKind::Mlp { width: 8 };
        }
        let (a, _) = train_single_stage(&sample, &cfg).unwrap();
        let (b, _) = train_single_stage(&sample, &cfg).unwrap();
        prop_assert_eq!(a.params(), b.params());
    }

    #[test]
    fn second_stage_leaves_predictor_untouched(seed in 0u64..1000) {
        let sample = tiny_sample(seed % 5, 40);
        let mut c1 = TrainConfig::new(TrainLoss::Multiclass { mu: p(1.0) }, k(0.2));
        c1.epochs = 5;
        c1.seed = seed;
        let mut c2 = c1.clone();
        c2.loss = TrainLoss::TwoStage { phi: MarginFunction::Exponential };
        let out = train_two_stage(&sample, &c1, &c2).unwrap();
        // a longer second stage must not change the predictor
        let mut c2b = c2.clone();
        c2b.epochs = 20;
        let out_b = train_two_stage(&sample, &c1, &c2b).unwrap();
        prop_assert_eq!(out.predictor.param_hash(), out_b.predictor.param_hash());
        prop_assert_ne!(out.rejector.param_hash(), out_b.rejector.param_hash());
    }

    #[test]
    fn tiny_step_lowers_the_loss(seed in 0u64..1000, mu in 0.0f64..3.0) {
        let full = tiny_sample(seed % 5, 1);
        let mut cfg = TrainConfig::new(TrainLoss::Surrogate { mu: p(mu) }, k(0.3));
        cfg.learning_rate = 1e-6;
        cfg.batch_size = 1;
        cfg.seed = seed;
        let spec = ModelSpec { kind: ModelKind::Linear, input_dim: 2, output_count: 4, clamp: None };
        let mut model = Model::new(spec, seed).unwrap();
        let x = &full.features[0];
        let y = full.labels[0];
        let before = surrogate_l_mu(&model.forward(x).unwrap(), y, k(0.3), p(mu)).unwrap();
        cfg.epochs = 1;
        continue_single_stage(&mut model, &full, &cfg).unwrap();
        let after = surrogate_l_mu(&model.forward(x).unwrap(), y, k(0.3), p(mu)).unwrap();
        prop_assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn scaling_a_linear_scorer_keeps_decisions(
        seed in 0u64..1000,
        alpha in 0.01f64..100.0,
        xs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 20),
    ) {
        let spec = ModelSpec { kind: ModelKind::Linear, input_dim: 3, output_count: 5, clamp: None };
        let model = Model::new(spec, seed).unwrap();
        let scaled = model.scaled(alpha);
        for x in &xs {
            prop_assert_eq!(
                predict_label(&model.forward(x).unwrap()),
                predict_label(&scaled.forward(x).unwrap())
            );
        }
    }
}

// ---------------------------------------------------------------------------
// consistency

proptest! {
    #[test]
    fn chow_decision_is_optimal(pv in (2usize..=6).prop_flat_map(simplex), c in cost()) {
        let n = pv.len();
        let dist = ConditionalDistribution::new(pv.clone(), k(c)).unwrap();
        let best = (0..=n)
            .map(|d| conditional_risk_abstention(Decision::from_index(d, n), &dist))
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(conditional_risk_abstention(chow_decision(&dist), &dist), best);
        for d in 0..=n {
            prop_assert!(abstention_calibration_gap(Decision::from_index(d, n), &dist) >= 0.0);
        }
    }

    #[test]
    fn symmetric_family_gap_is_nonnegative(
        pv in (2usize..=4).prop_flat_map(simplex),
        c in cost(),
        mu in prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0]),
    ) {
        let dist = ConditionalDistribution::new(pv, k(c)).unwrap();
        let problem = DiscreteProblem::new(vec![Atom { weight: 1.0, dist, features: None }]).unwrap();
        let gap = minimizability_gap(&problem, &HypothesisFamily::SymmetricComplete, p(mu)).unwrap();
        prop_assert!(gap.gap_estimate >= -1e-9, "{gap:?}");
    }

    #[test]
    fn optimal_softmax_ratio(c in cost(), mu in 0.0f64..1.99) {
        let dist = ConditionalDistribution::deterministic(3, 1, k(c)).unwrap();
        let opt = min_conditional_risk_surrogate(&dist, p(mu));
        let (sy, sn) = (opt.softmax[1], opt.softmax[3]);
        prop_assert!(sy + sn <= 1.0 + 1e-9);
        let want = (1.0 - c).powf(1.0 / (2.0 - mu));
        prop_assert!((sn / sy - want).abs() <= 1e-6, "{} vs {want}", sn / sy);
    }

    #[test]
    fn gamma_transforms_are_concave_and_monotone(
        c in cost(),
        mu in 0.0f64..4.0,
        n in 2usize..=6,
    ) {
        let g = GammaTransform::comp_sum(p(mu), k(c), n);
        prop_assert!(g.satisfies_invariants());
        prop_assert!(transform_bound(&g, k(c)).satisfies_invariants());
        prop_assert!(transform_bound(&g.clone().scaled(0.5), k(c)).satisfies_invariants());
    }
}

#[test]
fn closed_form_v_decreases_strictly_in_mu() {
    for c in [0.05, 0.25, 0.5, 0.9] {
        let vals: Vec<f64> = (0..=40).map(|i| closed_form_v(0.1 * i as f64, k(c))).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "c={c}: {vals:?}");
    }
}

// ---------------------------------------------------------------------------
// finite_sample

fn bound_input() -> impl Strategy<Value = FiniteSampleInput> {
    (
        1usize..5000,
        0.001f64..0.999,
        0.0f64..10.0,
        0.0f64..2.0,
        prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0]),
        cost(),
        2usize..6,
        0.0f64..1.0,
        0.0f64..1.0,
    )
        .prop_map(|(m, delta, b, r, mu, c, n, ms, ma)| FiniteSampleInput {
            m,
            delta,
            loss_bound: b,
            rademacher: r,
            mu,
            cost: c,
            n,
            surrogate_gap: ms,
            abstention_gap: ma,
        })
}

proptest! {
    #[test]
    fn bound_is_monotone(input in bound_input(), bump in 0.01f64..1.0) {
        let base = assemble_bound(&input).unwrap();
        for f in [
            |i: &mut FiniteSampleInput, b: f64| i.rademacher += b,
            |i: &mut FiniteSampleInput, b: f64| i.loss_bound += b,
            |i: &mut FiniteSampleInput, b: f64| i.surrogate_gap += b,
        ] {
            let mut j = input;
            f(&mut j, bump);
            prop_assert!(assemble_bound(&j).unwrap() >= base);
        }
        if input.loss_bound > 0.0 {
            let mut j = input;
            j.m += 1;
            prop_assert!(assemble_bound(&j).unwrap() < base);
            let mut j = input;
            j.delta = (input.delta + 0.5 * (1.0 - input.delta)).min(0.9999);
            prop_assert!(assemble_bound(&j).unwrap() < base);
        }
    }

    #[test]
    fn bound_at_zero_input(ma in 0.0f64..1.0, m in 1usize..1000) {
        let zero = FiniteSampleInput {
            m,
            delta: 0.05,
            loss_bound: 0.0,
            rademacher: 0.0,
            mu: 1.0,
            cost: 0.3,
            n: 3,
            surrogate_gap: 0.0,
            abstention_gap: ma,
        };
        prop_assert_eq!(assemble_bound(&zero).unwrap(), -ma);
        prop_assert_eq!(assemble_bound(&FiniteSampleInput { abstention_gap: 0.0, ..zero }).unwrap(), 0.0);
    }

    #[test]
    fn loss_bound_dominates_clamped_losses(
        (_, s, y) in scored(),
        lambda in 0.1f64..5.0,
        mu in 0.0f64..4.0,
        c in cost(),
    ) {
        let n = s.len() - 1;
        let clamped: Vec<f64> = s.iter().map(|v| v.clamp(-lambda, lambda)).collect();
        let b = loss_upper_bound(p(mu), k(c), n, lambda).unwrap();
        let l = surrogate_l_mu(&clamped, y, k(c), p(mu)).unwrap();
        prop_assert!(l <= b * (1.0 + 1e-12), "{l} > {b}");
    }
}

#[test]
fn rademacher_is_symmetric_under_loss_negation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use rand::Rng;
    let table: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..30).map(|_| rng.gen_range(0.0..2.0)).collect())
        .collect();
    let neg: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let sample = WeightedSample::uniform(vec![vec![0.0]; 30], vec![0; 30], 2).unwrap();
    let cfg = RademacherConfig {
        sigma_draws: 2000,
        ..Default::default()
    };
    let est = |t: &Vec<Vec<f64>>| {
        empirical_rademacher(&sample, &Family::LossTable(t.clone()), k(0.3), p(1.0), &cfg).unwrap()
    };
    let (a, b) = (est(&table), est(&neg));
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.value - b.value).abs() <= 4.0 * se, "{} vs {} (se {se})", a.value, b.value);
}

#[test]
fn singleton_family_has_zero_complexity() {
    let table = vec![vec![0.7; 25]];
    let sample = WeightedSample::uniform(vec![vec![0.0]; 25], vec![0; 25], 2).unwrap();
    let cfg = RademacherConfig {
        sigma_draws: 4000,
        ..Default::default()
    };
    let est = empirical_rademacher(&sample, &Family::LossTable(table), k(0.3), p(1.0), &cfg).unwrap();
    assert!(est.value.abs() <= 4.0 * est.std_error + 1e-12, "{est:?}");
}

// ---------------------------------------------------------------------------
// data_io

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_files_round_trip(seed in 0u64..10_000, width in 1usize..10, mlp in any::<bool>()) {
        let spec = ModelSpec {
            kind: if mlp { ModelKind::Mlp { width } } else { ModelKind::Linear },
            input_dim: 3,
            output_count: 4,
            clamp: if seed % 2 == 0 { Some(2.0) } else { None },
        };
        let model = Model::new(spec, seed).unwrap();
        let first = model_to_string(&model).unwrap();
        let back = model_from_str(&first).unwrap();
        prop_assert_eq!(back.params(), model.params());
        prop_assert_eq!(model_to_string(&back).unwrap(), first);
    }

    #[test]
    fn problem_specs_round_trip(
        rows in prop::collection::vec((0.01f64..1.0, simplex(3)), 1..6),
        c in cost(),
    ) {
        let atoms = rows
            .into_iter()
            .map(|(w, pv)| Atom {
                weight: w,
                dist: ConditionalDistribution::new(pv, k(c)).unwrap(),
                features: None,
            })
            .collect();
        let problem = DiscreteProblem::with_tolerance(atoms, f64::INFINITY).unwrap();
        let first = format_problem_spec(&problem);
        let back = parse_problem_spec(&first, std::path::Path::new("spec")).unwrap();
        prop_assert_eq!(format_problem_spec(&back), first);
    }

    #[test]
    fn reports_round_trip(lambda in 0.0f64..10.0, eta in 0.0f64..1.0, trials in 1usize..200) {
        let demo = Report::ApproxGap(approx_vs_gap_demo(lambda, eta).unwrap());
        let s = SamplerConfig { trials, seed: trials as u64, atoms: 2, problems: 2 };
        let check = Report::BoundCheck(check_comp_sum_bound(p(1.0), k(0.3), 2, &s).unwrap());
        for r in [demo, check] {
            let first = report_to_json(&r).unwrap();
            let back = report_from_json(&first).unwrap();
            prop_assert_eq!(report_to_json(&back).unwrap(), first);
        }
    }

    #[test]
    fn sampler_is_deterministic(seed in 0u64..10_000, index in 0u64..100) {
        let recipe = SyntheticRecipe::separable(3, 2, 0.3, 0.2, 10, seed);
        let (_, a) = generate(&recipe).unwrap();
        let (_, b) = generate(&recipe).unwrap();
        prop_assert_eq!(a.sample(50, index).unwrap(), b.sample(50, index).unwrap());
    }

    #[test]
    fn label_mapping_is_stable(
        labels in prop::collection::vec(prop::sample::select(vec!["cat", "dog", "emu", "7", "b-2"]), 2..30),
    ) {
        prop_assume!(labels.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut text = String::from("x,label\n");
        for (i, l) in labels.iter().enumerate() {
            text.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(&path, text).unwrap();
        let ds = load_csv(&path, "label").unwrap();
        for (i, l) in labels.iter().enumerate() {
            prop_assert_eq!(ds.label_name(i), *l);
        }
        // written back and reloaded, the mapping reproduces the same names
        let again = dir.path().join("e.csv");
        ds.write_csv(&again, "label").unwrap();
        let ds2 = load_csv(&again, "label").unwrap();
        prop_assert_eq!(&ds2.label_names, &ds.label_names);
        prop_assert_eq!(&ds2.labels, &ds.labels);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn separable_recipe_certifies_its_margin(seed in 0u64..10_000, n in 2usize..=4) {
        let recipe = SyntheticRecipe::separable(n, 2, 0.3, 0.5, 20, seed);
        let (problem, _) = generate(&recipe).unwrap();
        let dirs = class_directions(n, 2);
        for a in problem.atoms() {
            let y = a.dist.p().iter().position(|&q| q == 1.0).unwrap();
            prop_assert!(multiclass_margin(&dirs, a.features.as_ref().unwrap(), y) >= 0.5);
        }
    }

    #[test]
    fn chow_stress_puts_half_the_atoms_near_the_threshold(seed in 0u64..10_000, c in 0.1f64..0.5) {
        let recipe = SyntheticRecipe {
            kind: RecipeKind::ChowStress,
            n: 3,
            d: 2,
            c,
            margin: 0.5,
            noise: 0.0,
            atoms: 20,
            seed,
        };
        let (problem, _) = generate(&recipe).unwrap();
        let near = problem
            .atoms()
            .iter()
            .filter(|a| {
                let top = a.dist.p().iter().cloned().fold(0.0, f64::max);
                (top - (1.0 - c)).abs() <= 0.05 + 1e-12
            })
            .count();
        prop_assert_eq!(near, 10);
    }

    #[test]
    fn noiseless_label_noise_matches_separable(seed in 0u64..10_000) {
        let sep = SyntheticRecipe::separable(3, 2, 0.3, 0.2, 15, seed);
        let noisy = SyntheticRecipe { kind: RecipeKind::LabelNoise, ..sep.clone() };
        let (a, sa) = generate(&sep).unwrap();
        let (b, sb) = generate(&noisy).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(sa.sample(30, 1).unwrap(), sb.sample(30, 1).unwrap());
    }
}
