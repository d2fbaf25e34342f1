//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line; the test fails if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use epifit_core::autodiff::{finite_diff_check, tape_fn, Scalar, Tape, Var};
use epifit_core::data::{load_case_csv, TrueBeta};
use epifit_core::epimodels::{EpidemicModel, SirParams, SisParams, ScaledSirParams};
use epifit_core::experiment::{
    prepare_covid, run_check, run_covid, run_probe, run_synthetic, ExperimentConfig, Shape,
};
use epifit_core::nn::{Activation, Mlp, NnError};
use epifit_core::ode::{integrate, Method};
use epifit_core::train::{bifurcation_penalty, NeuralBeta, Problem, TrainError};

const BUDGET: Duration = Duration::from_secs(300);

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&root().join("configs").join(name)).expect("shipped config loads")
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gradients() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for draw in 0..50u64 {
        let act = if draw % 2 == 0 { Activation::Snake { a: 0.1 } } else { Activation::Tanh };
        let mut mlp = Mlp::init(&[1, 6, 6, 1], &[act, act, Activation::Identity], draw).unwrap();
        mlp.shift_output(0.1 * draw as f64 - 2.0);
        let xs: Vec<f64> = (0..5).map(|k| (draw as f64 * 0.37 + k as f64 * 1.3).sin() * 3.0).collect();
        let f = tape_fn(|_t: &Tape, p: &[Var<'_>]| -> Result<Var<'_>, NnError> {
            let mut acc = p[0].constant_like(0.0);
            for &x in &xs {
                let y = mlp.eval_scalar(p, p[0].constant_like(x));
                acc = acc + y * y;
            }
            Ok(acc)
        });
        worst = worst.max(finite_diff_check(f, mlp.params(), 1e-5).unwrap());
    }
    let sis = EpidemicModel::Sis(SisParams { lambda: 0.02, gamma: 0.2, d: 0.02 });
    let sir = EpidemicModel::SirBetaS(SirParams { gamma: 0.1 });
    for draw in 0..50u64 {
        let (model, truth, x0, scale) = if draw % 2 == 0 {
            (&sis, TrueBeta::Beta1, vec![0.8, 0.04], 1.0)
        } else {
            (&sir, TrueBeta::BetaS, vec![90.0, 10.0, 0.0], 0.01)
        };
        let data = epifit_core::data::generate_synthetic(
            model,
            truth,
            &x0,
            0.0,
            10.0,
            0.5,
            4,
            epifit_core::data::Perturbation { noise_sigma: 0.02, seed: draw },
        )
        .unwrap();
        let act = if draw % 2 == 0 { Activation::Snake { a: 0.1 } } else { Activation::Tanh };
        let mut mlp = Mlp::init(&[1, 6, 6, 1], &[act, act, Activation::Identity], 100 + draw).unwrap();
        mlp.scale_output(0.2);
        let beta = NeuralBeta::new(mlp, scale, 1.0).unwrap();
        let problem = Problem { model, x0: &x0, data: &data };
        let alpha = 300.0 * model.removal_rate();
        let f = tape_fn(|_t: &Tape, p: &[Var<'_>]| -> Result<Var<'_>, TrainError> {
            Ok(problem.loss_with(|x| beta.eval_with(p, x), alpha, p[0])?.total)
        });
        worst = worst.max(finite_diff_check(f, beta.mlp.params(), 1e-5).unwrap());
    }
    let elapsed = started.elapsed();
    verdict(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("worst relative error {worst:.2e} over 100 draws in {elapsed:.1?}"),
    )
}

fn orders() -> Verdict {
    let rhs = |_t: f64, x: &[f64]| vec![x[0]];
    let error = |m: Method, dt: f64| {
        let traj = integrate(m, &rhs, &[1.0], 0.0, 1.0, dt).unwrap();
        (traj.final_state()[0] - std::f64::consts::E).abs()
    };
    let order = |m: Method, dt: f64| (error(m, dt) / error(m, dt / 2.0)).log2();
    let rk4 = order(Method::Rk4, 0.05);
    let euler = order(Method::Euler, 1e-3);
    verdict(
        (3.8..=4.2).contains(&rk4) && (0.9..=1.1).contains(&euler),
        format!("rk4 order {rk4:.3}, euler order {euler:.3}"),
    )
}

fn probe() -> Verdict {
    let started = Instant::now();
    let config = load("exp1_sis_beta1.toml");
    let penalized = run_probe(&config, None).unwrap();
    let plain = run_probe(&config, Some(0.0)).unwrap();
    let elapsed = started.elapsed();
    verdict(
        penalized.r0 < 1.0
            && penalized.ratio() <= 0.1
            && plain.ratio() == 1.0
            && elapsed < Duration::from_secs(60),
        format!(
            "r0 {:.3}, plain/augmented {:.3e}, with alpha 0 {}",
            penalized.r0,
            penalized.ratio(),
            plain.ratio()
        ),
    )
}

fn experiments() -> Verdict {
    let mut pass = true;
    let mut lines = Vec::new();
    for name in [
        "exp1_sis_beta1.toml",
        "exp2_sis_beta2.toml",
        "exp3_sir_beta_s.toml",
        "exp4_sir_beta_i.toml",
    ] {
        let started = Instant::now();
        let config = load(name);
        let data = config.generate().unwrap();
        let outcome = run_synthetic(&config, &data, |_, _| {}).unwrap();
        let elapsed = started.elapsed();
        let ev = &outcome.evaluation;
        let ok = ev.mse_ratio() < 0.01
            && ev.relative_error() < 0.05
            && ev.r0_settled_at.is_some()
            && elapsed <= BUDGET;
        pass &= ok;
        lines.push(format!(
            "{} {}: mse ratio {:.2e}, max error {:.2}% of range, r0 {:.3}, {elapsed:.0?}",
            if ok { "ok" } else { "miss" },
            config.name,
            ev.mse_ratio(),
            100.0 * ev.relative_error(),
            ev.final_r0,
        ));
    }
    verdict(pass, lines.join("; "))
}

fn penalty_grid() -> Verdict {
    let mut pass = true;
    for alpha in [0.0, 0.5, 30.0, 66.0, 300.0] {
        for k in -40..=80 {
            let r0 = k as f64 * 0.05;
            let tape = Tape::new();
            let r = tape.leaf(r0).unwrap();
            let p = bifurcation_penalty(r, alpha);
            let g = tape.backward(p).wrt(r);
            pass &= if r0 >= 1.0 {
                p.value() == 0.0 && g == 0.0
            } else {
                p.value() == alpha * (1.0 - r0) && g == -alpha
            };
        }
    }
    verdict(pass, "5 weights x 121 values of r0 in [-2, 4]".into())
}

fn invariants() -> Verdict {
    let mut conservation: f64 = 0.0;
    for (model, truth) in [
        (EpidemicModel::SirBetaS(SirParams { gamma: 0.1 }), TrueBeta::BetaS),
        (EpidemicModel::SirBetaI(SirParams { gamma: 0.1 }), TrueBeta::BetaI),
    ] {
        let rhs = model.hybrid_rhs(|x: f64| truth.eval(x));
        let traj = integrate(Method::Rk4, &rhs, &[90.0, 10.0, 0.0], 0.0, 100.0, 0.5).unwrap();
        for s in &traj.states {
            conservation = conservation.max(((s[0] + s[1] + s[2]) - 100.0).abs() / 100.0);
        }
    }
    let cases: [(EpidemicModel, Vec<f64>, Vec<f64>); 4] = [
        (EpidemicModel::Sis(SisParams { lambda: 0.02, gamma: 0.2, d: 0.02 }), vec![0.8, 0.04], vec![0.3, 0.0]),
        (EpidemicModel::SirBetaS(SirParams { gamma: 0.1 }), vec![90.0, 10.0, 0.0], vec![50.0, 0.0, 20.0]),
        (EpidemicModel::SirBetaI(SirParams { gamma: 0.1 }), vec![90.0, 10.0, 0.0], vec![50.0, 0.0, 20.0]),
        (EpidemicModel::ScaledSir(ScaledSirParams { gamma: 0.1, d: 0.01 }), vec![0.99, 0.01], vec![0.5, 0.0]),
    ];
    // Any rate with beta(0) = 0, so that the infected-dependent model has its
    // equilibrium at zero infection too.
    let beta = |x: f64| 0.3 * x / (1.0 + x.abs());
    let mut dfe_drift: f64 = 0.0;
    let mut infected_leak: f64 = 0.0;
    for (model, x0, zero_infected) in &cases {
        let rhs = model.hybrid_rhs(beta);
        let dfe = model.dfe(x0);
        let traj = integrate(Method::Rk4, &rhs, &dfe, 0.0, 100.0, 0.5).unwrap();
        for s in &traj.states {
            let d: f64 = s.iter().zip(&dfe).map(|(a, b)| (a - b) * (a - b)).sum();
            dfe_drift = dfe_drift.max(d.sqrt());
        }
        let traj = integrate(Method::Rk4, &rhs, zero_infected, 0.0, 100.0, 0.5).unwrap();
        for s in &traj.states {
            for &k in model.infected_indices() {
                infected_leak = infected_leak.max(s[k].abs());
            }
        }
    }
    let c5 = ["exp1_sis_beta1.toml", "exp3_sir_beta_s.toml", "exp4_sir_beta_i.toml"]
        .iter()
        .all(|n| run_check(&load(n)).unwrap().c5_holds());
    verdict(
        conservation < 1e-8 && dfe_drift < 1e-10 && infected_leak == 0.0 && c5,
        format!(
            "conservation {conservation:.1e}, dfe drift {dfe_drift:.1e}, infected from zero {infected_leak:.1e}, C5 on configs {c5}"
        ),
    )
}

fn covid() -> Verdict {
    let mut maxima = Vec::new();
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, want) in [
        ("covid_first_peak.toml", Shape::DecreasingThenFlat),
        ("covid_second_peak.toml", Shape::IncreasingThenFlat),
    ] {
        let started = Instant::now();
        let config = load(name);
        let covid = config.covid.clone().unwrap();
        let path = config.resolve(covid.data.as_ref().unwrap());
        let series = load_case_csv(&path).unwrap();
        let cases = prepare_covid(&series, covid.window, covid.population, &path).unwrap();
        let outcome = run_covid(&config, &cases, covid.window, |_, _| {}).unwrap();
        let elapsed = started.elapsed();
        let s = &outcome.summary;
        pass &= s.shape == want && elapsed <= BUDGET;
        maxima.push(s.beta_max);
        lines.push(format!(
            "{}: {:?}, beta in [{:.4}, {:.4}], {elapsed:.0?}",
            covid.window, s.shape, s.beta_min, s.beta_max
        ));
    }
    pass &= maxima[1] > maxima[0];
    verdict(pass, lines.join("; "))
}

const TINY: &str = r#"
name = "tiny"
x0 = [0.8, 0.04]

[model]
name = "sis"
lambda = 0.02
gamma = 0.2
d = 0.02

[network]
dims = [1, 8, 8, 1]
activations = [{ kind = "snake", a = 0.1 }, { kind = "snake", a = 0.1 }, { kind = "identity" }]
output_scale = 0.1

[train]
alpha = 66.0
lr_schedule = [[0, 1e-2], [20, 3.5e-3]]
iterations = 40
dt = 0.5
T = 15.0
seed = 4

[synthetic]
beta = "beta1"
seed = 1
substeps = 20

[probe]
target_r0 = 0.5
"#;

fn tiny_covid() -> String {
    fs::read_to_string(root().join("configs/covid_second_peak.toml"))
        .unwrap()
        .replace("iterations = 4000", "iterations = 30")
}

fn epifit(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_epifit"))
        .args(args)
        .status()
        .expect("binary runs");
    assert!(status.success(), "epifit {args:?} failed: {status}");
}

fn run_all_commands(work: &Path, out: &Path) {
    let cfg = work.join("tiny.toml");
    let covid_cfg = work.join("covid.toml");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = out.join("data.csv");
    epifit(&["generate", "--config", &s(&cfg), "--out", &s(&data)]);
    epifit(&["train", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out.join("train"))]);
    epifit(&[
        "train", "--config", &s(&cfg), "--out", &s(&out.join("seeds")), "--seed", "1", "--seed", "2", "--jobs", "2",
    ]);
    epifit(&["probe", "--config", &s(&cfg), "--out", &s(&out.join("probe.json"))]);
    epifit(&["check", "--config", &s(&cfg), "--out", &s(&out.join("check.json"))]);
    epifit(&[
        "covid", "--config", &s(&covid_cfg), "--out", &s(&out.join("covid")), "--window", "first_peak", "--window",
        "second_peak", "--jobs", "2",
    ]);
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let work = tempfile::tempdir().unwrap();
    fs::write(work.path().join("tiny.toml"), TINY).unwrap();
    let covid = tiny_covid().replace(
        "data = \"../data/us_cases_surrogate.csv\"",
        &format!("data = {:?}", root().join("data/us_cases_surrogate.csv")),
    );
    fs::write(work.path().join("covid.toml"), covid).unwrap();
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    run_all_commands(work.path(), &a);
    run_all_commands(work.path(), &b);
    let (fa, fb) = (files(&a), files(&b));
    let mut differing = Vec::new();
    for f in &fa {
        let rel = f.strip_prefix(&a).unwrap();
        let left = fs::read(f).unwrap();
        if fs::read(b.join(rel)).ok().as_deref() != Some(&left[..]) {
            differing.push(rel.display().to_string());
        }
    }
    let same_set = fa.len() == fb.len();
    verdict(
        same_set && differing.is_empty() && fa.len() > 15,
        format!("{} artifacts compared, differing: {differing:?}", fa.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient correctness", gradients),
        ("integrator orders", orders),
        ("vanishing gradient below threshold", probe),
        ("experiments 1-4 recover beta", experiments),
        ("penalty shape", penalty_grid),
        ("conservation and equilibrium invariants", invariants),
        ("case-data infection rate shapes", covid),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!("{} criterion {} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, k + 1, v.detail);
        if !v.pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
