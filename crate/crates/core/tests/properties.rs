use epifit_core::autodiff::{finite_diff_check, tape_fn, value_and_grad, AdError, Scalar, Tape, Var};
use epifit_core::data::{moving_average_7, scale_covid, Dataset, DatasetMeta, TrueBeta};
use epifit_core::epimodels::{EpidemicModel, ScaledSirParams, SirParams, SisParams};
use epifit_core::experiment::{classify_shape, Shape, Table};
use epifit_core::nn::{Activation, Mlp};
use epifit_core::ode::{integrate, Method};
use epifit_core::train::{bifurcation_penalty, LrSchedule};
use proptest::prelude::*;

fn unary(kind: usize, x: Var<'_>) -> Var<'_> {
    match kind {
        0 => x.sin(),
        1 => x.cos(),
        2 => x.tanh(),
        3 => x.exp(),
        4 => x.square(),
        5 => x.powi(3),
        6 => x.max0(),
        _ => Activation::Snake { a: 0.1 }.apply(x),
    }
}

fn meta() -> DatasetMeta {
    DatasetMeta::File {
        path: "mem".into(),
        window: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64, x in -2.0..2.0f64, y in -2.0..2.0f64) {
        fn f<S: Scalar>(p: &[S]) -> S {
            p[0].sin() * p[1]
        }
        fn g<S: Scalar>(p: &[S]) -> S {
            (p[0] * p[1]).tanh() + p[1].exp()
        }
        let (_, gf) = value_and_grad(tape_fn(|_t: &Tape, p: &[Var<'_>]| Ok::<_, AdError>(f(p))), &[x, y]).unwrap();
        let (_, gg) = value_and_grad(tape_fn(|_t: &Tape, p: &[Var<'_>]| Ok::<_, AdError>(g(p))), &[x, y]).unwrap();
        let (_, gc) = value_and_grad(
            tape_fn(|_t: &Tape, p: &[Var<'_>]| Ok::<_, AdError>(f(p) * a + g(p) * b)),
            &[x, y],
        )
        .unwrap();
        for k in 0..2 {
            let want = a * gf[k] + b * gg[k];
            prop_assert!((gc[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn primitives_match_finite_differences(kind in 0usize..8, xs in prop::collection::vec(-2.0..2.0f64, 20)) {
        for x in xs {
            // The kink of max0 sits at 0; stay clear of it.
            let x = if kind == 6 && x.abs() < 1e-3 { x + 0.1 } else { x };
            let f = tape_fn(|_t: &Tape, p: &[Var<'_>]| Ok::<_, AdError>(unary(kind, p[0])));
            let err = finite_diff_check(f, &[x], 1e-5).unwrap();
            prop_assert!(err < 1e-6, "op {kind} at {x}: {err}");
        }
    }

    #[test]
    fn replay_reproduces_recorded_values(x in -2.0..2.0f64, y in 0.1..2.0f64) {
        let tape = Tape::new();
        let (a, b) = (tape.leaf(x).unwrap(), tape.leaf(y).unwrap());
        let _ = ((a * b).sin() + a.exp() / b - (a - b).square().tanh()).powi(2).max0();
        prop_assert_eq!(tape.replay(), tape.values());
        prop_assert!(tape.is_topological());
    }

    #[test]
    fn moving_average_stays_within_its_window(series in prop::collection::vec(0.0..1e6f64, 7..60)) {
        let avg = moving_average_7(&series).unwrap();
        prop_assert_eq!(avg.len(), series.len() - 6);
        for (k, m) in avg.iter().enumerate() {
            let w = &series[k..k + 7];
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*m >= lo * (1.0 - 1e-15) && *m <= hi * (1.0 + 1e-15));
        }
    }

    #[test]
    fn penalty_vanishes_at_or_above_threshold(r0 in -5.0..5.0f64, alpha in 0.0..500.0f64) {
        let tape = Tape::new();
        let r = tape.leaf(r0).unwrap();
        let p = bifurcation_penalty(r, alpha);
        let g = tape.backward(p).wrt(r);
        prop_assert!(p.value() >= 0.0);
        if r0 >= 1.0 {
            prop_assert_eq!(p.value(), 0.0);
            prop_assert_eq!(g, 0.0);
        } else {
            prop_assert_eq!(p.value(), alpha * (1.0 - r0));
            prop_assert_eq!(g, -alpha);
        }
    }

    #[test]
    fn scaling_round_trips_to_within_one_ulp(
        series in prop::collection::vec(0.0..1e6f64, 2..40),
        population in 2e8..5e8f64,
    ) {
        let scaled = scale_covid(&series, population, series[0], meta()).unwrap();
        for (back, orig) in scaled.unscaled().iter().zip(&series) {
            let ulp = f64::EPSILON * orig.abs();
            prop_assert!((back - orig).abs() <= ulp, "{back} vs {orig}");
        }
        prop_assert_eq!(scaled.x0[0], 1.0 - 1e-3 * scaled.x0[1]);
    }

    #[test]
    fn network_json_preserves_outputs(seed in 0u64..1000, x in -50.0..50.0f64) {
        let act = Activation::Snake { a: 0.1 };
        let mlp = Mlp::init(&[1, 5, 5, 1], &[act, Activation::Tanh, Activation::Identity], seed).unwrap();
        let back = Mlp::from_json(&mlp.to_json()).unwrap();
        prop_assert_eq!(back.eval(&[x]).unwrap(), mlp.eval(&[x]).unwrap());
    }

    #[test]
    fn sir_conserves_population(s0 in 1.0..200.0f64, i0 in 0.1..50.0f64, gamma in 0.01..0.5f64, which in 0usize..2) {
        let (model, beta) = if which == 0 {
            (EpidemicModel::SirBetaS(SirParams { gamma }), TrueBeta::BetaS)
        } else {
            (EpidemicModel::SirBetaI(SirParams { gamma }), TrueBeta::BetaI)
        };
        let rhs = model.hybrid_rhs(|x: f64| beta.eval(x));
        let traj = integrate(Method::Rk4, &rhs, &[s0, i0, 0.0], 0.0, 50.0, 0.5).unwrap();
        let n0 = s0 + i0;
        for s in &traj.states {
            prop_assert!(((s[0] + s[1] + s[2]) - n0).abs() <= 1e-8 * n0);
        }
    }

    #[test]
    fn disease_free_state_is_stationary(lambda in 0.01..2.0f64, d in 0.01..0.5f64, gamma in 0.01..0.5f64, s0 in 0.1..100.0f64, c in 0.0..1.0f64) {
        let beta = move |x: f64| c * x / (1.0 + x.abs());
        let models = [
            (EpidemicModel::Sis(SisParams { lambda, gamma, d }), vec![s0, 1.0]),
            (EpidemicModel::SirBetaS(SirParams { gamma }), vec![s0, 1.0, 0.0]),
            (EpidemicModel::SirBetaI(SirParams { gamma }), vec![s0, 1.0, 0.0]),
            (EpidemicModel::ScaledSir(ScaledSirParams { gamma, d }), vec![0.99, 0.01]),
        ];
        for (model, x0) in models {
            let dfe = model.dfe(&x0);
            let traj = integrate(Method::Rk4, &model.hybrid_rhs(beta), &dfe, 0.0, 30.0, 0.5).unwrap();
            for s in &traj.states {
                let dist: f64 = s.iter().zip(&dfe).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(dist < 1e-10, "{} drifted {dist}", model.name());
            }
        }
    }

    #[test]
    fn learning_rate_is_piecewise_constant(
        mut starts in prop::collection::btree_set(1usize..5000, 0..5),
        rates in prop::collection::vec(1e-5..1e-1f64, 6),
        it in 0usize..6000,
    ) {
        starts.insert(0);
        let schedule = LrSchedule(starts.iter().copied().zip(rates.iter().copied()).collect());
        schedule.validate().unwrap();
        let expected = schedule.0.iter().rfind(|(s, _)| *s <= it).unwrap().1;
        prop_assert_eq!(schedule.lr_at(it), expected);
    }

    #[test]
    fn tables_round_trip_bit_for_bit(rows in prop::collection::vec(prop::collection::vec(-1e9..1e9f64, 3), 0..20)) {
        let mut table = Table::new(&["a", "b", "c"]);
        for r in &rows {
            table.push(r.clone());
        }
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        prop_assert_eq!(Table::read_csv(&buf[..]).unwrap(), table);
    }

    #[test]
    fn datasets_round_trip(values in prop::collection::vec(0.0..1e3f64, 2..50), dt in prop::sample::select(vec![0.25, 0.5, 1.0])) {
        let data = Dataset::new(0.0, dt, values, meta()).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(&buf[..], meta()).unwrap();
        prop_assert_eq!(back.values, data.values);
        prop_assert_eq!(back.dt, dt);
    }

    #[test]
    fn shape_ignores_positive_affine_maps(
        knee in 10usize..60,
        len in 80usize..160,
        scale in 0.01..100.0f64,
        shift in -10.0..10.0f64,
        rising in any::<bool>(),
    ) {
        let curve: Vec<f64> = (0..len)
            .map(|k| {
                let u = (1.0 - k as f64 / knee as f64).max(0.0);
                if rising { 1.0 - u * u } else { u * u }
            })
            .collect();
        let shape = classify_shape(&curve);
        prop_assert_ne!(shape, Shape::Other);
        let mapped: Vec<f64> = curve.iter().map(|v| v * scale + shift).collect();
        prop_assert_eq!(classify_shape(&mapped), shape);
        let reversed: Vec<f64> = curve.iter().map(|v| -v).collect();
        prop_assert_ne!(classify_shape(&reversed), shape);
    }
}
