//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use propfit::check::fixtures;
use propfit_core::asymptotics::{
    bias_order2, cov_ml_exact_from_bundle, cov_ml_full_from_bundle, cov_order2_from_bundle,
};
use propfit_core::equivalent_dose::{
    beta1_from_gamma, fit_two_curves, gamma_bias_se, joint_bundle, FitMode, PartialBleachModel,
};
use propfit_core::estimators::{fit, FitOptions, Method};
use propfit_core::linalg::{min_eigenvalue, rel_diff};
use propfit_core::model::{
    fd_check, Dataset, ExpDecay, JacobianBundle, Linear, ModelFunction, ModelSpec,
    SaturatingExponential,
};
use propfit_core::simulation::{
    draw_errors, run_study, unit_stream, SimDesign, SimSummary, BLEACH_ALPHA, BLEACH_BETA2,
    BLEACH_BETA3, BLEACH_GAMMA, DEFAULT_X1, DEFAULT_X2,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn bleach_theta() -> Vec<f64> {
    let b1 = beta1_from_gamma(&BLEACH_ALPHA, BLEACH_BETA2, BLEACH_BETA3, BLEACH_GAMMA).unwrap();
    vec![
        BLEACH_ALPHA[0],
        BLEACH_ALPHA[1],
        BLEACH_ALPHA[2],
        b1,
        BLEACH_BETA2,
        BLEACH_BETA3,
    ]
}

fn synth(model: &dyn ModelFunction, xs: &[f64], theta: &[f64], sigma: f64, eps: &[f64]) -> Dataset {
    let ys: Vec<f64> = xs
        .iter()
        .zip(eps)
        .map(|(&x, e)| model.value(x, theta) * (1.0 + sigma * e))
        .collect();
    Dataset::from_xy(xs, &ys).unwrap()
}

/// Second-order expansions of the constant-model estimators: WLS is
/// `Σy²/Σy`, DWLS is `Σ(1/y)/Σ(1/y²)`, ML and QL reduce to the sample mean.
fn constant_model_targets(theta: f64, sigma: f64, n: usize) -> [(Method, f64); 4] {
    let shrink = 1.0 - 1.0 / n as f64;
    [
        (Method::Ml, 0.0),
        (Method::Ql, 0.0),
        (Method::Wls, theta * sigma * sigma * shrink),
        (Method::Dwls, -2.0 * theta * sigma * sigma * shrink),
    ]
}

fn criterion_1() -> Outcome {
    let (theta, sigma, n, r) = (100.0, 0.02, 20, 20_000);
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let design = SimDesign::single_curve(
        ModelSpec::named("constant"),
        xs,
        vec![theta],
        vec![sigma],
        r,
        2024,
    );
    let summary = run_study(&design).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (m, target) in constant_model_targets(theta, sigma, n) {
        let e = summary.entry(m, sigma, "theta1").unwrap();
        let (b_s, se) = (e.b_s.unwrap(), e.mc_se.unwrap());
        let z = (b_s - target).abs() / se;
        ok &= z <= 3.0;
        parts.push(format!(
            "{} B_s={b_s:+.4} target={target:+.4} |z|={z:.2}",
            m.label()
        ));
    }
    outcome(ok, parts.join("; "))
}

fn bleach_summary(sigmas: &[f64], r: usize) -> SimSummary {
    let mut design = SimDesign::bleach_default(r, 7).unwrap();
    design.sigma_grid = sigmas.to_vec();
    run_study(&design).unwrap()
}

fn criterion_2(summary: &SimSummary) -> Outcome {
    let sigmas = [0.01, 0.02, 0.03];
    let get = |m: Method, s: f64| summary.entry(m, s, "gamma").unwrap();
    let mut ok = true;
    let mut notes = Vec::new();

    let signs = sigmas
        .iter()
        .flat_map(|&s| Method::ALL.map(|m| (m, s)))
        .all(|(m, s)| get(m, s).b_t < 0.0 && get(m, s).b_s.is_some_and(|b| b < 0.0));
    ok &= signs;
    notes.push(format!("(a) all negative: {signs}"));

    let mut order = true;
    let mut worst_ml_wls: f64 = 0.0;
    for &s in &sigmas {
        let [ml, ql, wls, dwls] = Method::ALL.map(|m| get(m, s).b_t.abs());
        order &= dwls > ql && ql > ml;
        worst_ml_wls = worst_ml_wls.max((ml - wls).abs() / ml);
    }
    ok &= order && worst_ml_wls <= 0.10;
    notes.push(format!(
        "(b) ordering {order}, |ML-WLS|/|ML| <= {worst_ml_wls:.4}"
    ));

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &s in &sigmas {
        for m in [Method::Ml, Method::Ql, Method::Wls] {
            let e = get(m, s);
            let ratio = e.b_s.unwrap() / e.b_t;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    ok &= lo >= 0.7 && hi <= 1.3;
    notes.push(format!("(c) B_s/B_T in [{lo:.3}, {hi:.3}]"));

    let (mut smin, mut smax) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in Method::ALL {
        let pts: Vec<(f64, f64)> = sigmas
            .iter()
            .map(|&s| (s.ln(), get(m, s).b_t.abs().ln()))
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        smin = smin.min(slope);
        smax = smax.max(slope);
    }
    ok &= smin >= 1.9 && smax <= 2.1;
    notes.push(format!("(d) slopes in [{smin:.4}, {smax:.4}]"));

    let b = |m| get(m, 0.01);
    notes.push(format!(
        "sigma=0.01 B_T/B_s ML {:.4}/{:.4} QL {:.4}/{:.4} WLS {:.4}/{:.4} DWLS {:.4}/{:.4}",
        b(Method::Ml).b_t,
        b(Method::Ml).b_s.unwrap(),
        b(Method::Ql).b_t,
        b(Method::Ql).b_s.unwrap(),
        b(Method::Wls).b_t,
        b(Method::Wls).b_s.unwrap(),
        b(Method::Dwls).b_t,
        b(Method::Dwls).b_s.unwrap(),
    ));
    outcome(ok, notes.join("; "))
}

fn criterion_3() -> Outcome {
    let model = SaturatingExponential;
    let theta = BLEACH_ALPHA;
    let ys: Vec<f64> = DEFAULT_X1.iter().map(|&x| model.value(x, &theta)).collect();
    let data = Dataset::from_xy(&DEFAULT_X1, &ys).unwrap();
    let bundle = JacobianBundle::build(&model, &data, &theta).unwrap();
    let v = &bundle.jtj_inv * bundle.sum_j();
    let scale = theta[0].abs();
    let off = v[1].abs().max(v[2].abs()) / scale;
    let lead = (v[0] - theta[0]).abs() / scale;

    let ml = bias_order2(Method::Ml, &model, &data, &theta, 0.03)
        .unwrap()
        .bias;
    let wls = bias_order2(Method::Wls, &model, &data, &theta, 0.03)
        .unwrap()
        .bias;
    let rel = (1..3)
        .map(|k| (ml[k] - wls[k]).abs() / ml[k].abs().max(wls[k].abs()))
        .fold(0.0, f64::max);
    outcome(
        off < 1e-8 && lead < 1e-8 && rel <= 1e-10,
        format!("off-axis {off:.2e}, first component {lead:.2e} (< 1e-8 rel); ML vs WLS shape bias {rel:.2e} (<= 1e-10)"),
    )
}

fn random_fixture(rng: &mut ChaCha8Rng) -> (Box<dyn ModelFunction>, Vec<f64>, Vec<f64>) {
    let n = rng.random_range(6..30);
    match rng.random_range(0..3) {
        0 => {
            let theta = vec![rng.random_range(0.5..10.0), rng.random_range(0.5..5.0)];
            let xs = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            (Box::new(ExpDecay), theta, xs)
        }
        1 => {
            let theta = vec![
                rng.random_range(1.0..1e5),
                rng.random_range(0.0..200.0),
                rng.random_range(100.0..1000.0),
            ];
            let xs = (0..n).map(|_| rng.random_range(0.0..1500.0)).collect();
            (Box::new(SaturatingExponential), theta, xs)
        }
        _ => {
            let theta = vec![rng.random_range(1.0..10.0), rng.random_range(0.1..2.0)];
            let xs = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            (Box::new(Linear), theta, xs)
        }
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_a, mut worst_b, mut worst_c): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for _ in 0..50 {
        let (model, theta, xs) = random_fixture(&mut rng);
        let sigma = rng.random_range(0.005..0.2);
        let ys: Vec<f64> = xs.iter().map(|&x| model.value(x, &theta)).collect();
        let data = Dataset::from_xy(&xs, &ys).unwrap();
        let bundle = JacobianBundle::build(model.as_ref(), &data, &theta).unwrap();
        let (n, p) = (bundle.n() as f64, bundle.p());

        let exact = cov_ml_exact_from_bundle(&bundle, sigma).unwrap();
        let sum_j = bundle.sum_j();
        let unreduced = (&bundle.jtj * (2.0 + sigma.powi(-2))
            - &sum_j * sum_j.transpose() * (2.0 / n))
            .try_inverse()
            .unwrap();
        worst_a = worst_a.max(rel_diff(&exact, &unreduced));

        let full = cov_ml_full_from_bundle(&bundle, sigma).unwrap();
        worst_b = worst_b.max(rel_diff(&full.view((0, 0), (p, p)).into_owned(), &exact));

        let order2 = cov_order2_from_bundle(&bundle, sigma);
        let gap: DMatrix<f64> = &order2 - &exact;
        worst_c = worst_c.min(min_eigenvalue(&gap) / order2.amax());
    }
    outcome(
        worst_a <= 1e-10 && worst_b <= 1e-10 && worst_c >= -1e-12,
        format!(
            "50 fixtures: (a) reduced vs unreduced {worst_a:.2e}; (b) full-block {worst_b:.2e}; (c) min eigenvalue of gap / scale {worst_c:.2e}"
        ),
    )
}

fn first_order_gap(method: Method, sigma: f64, eps: &[f64]) -> f64 {
    let model = SaturatingExponential;
    let theta = BLEACH_ALPHA;
    let d = synth(&model, &DEFAULT_X1, &theta, sigma, eps);
    let mut opts = FitOptions::starting_at(&theta);
    opts.tol_abs = 1e-16;
    opts.tol_rel = 1e-13;
    let r = fit(method, &model, &d, &opts).unwrap();
    let b = JacobianBundle::build(&model, &d, &theta).unwrap();
    let c1 = &b.jtj_inv * b.j.transpose() * DVector::from_column_slice(eps);
    DVector::from_fn(3, |k, _| {
        ((r.theta_hat[k] - theta[k]) / sigma - c1[k]) / theta[k]
    })
    .norm()
}

fn criterion_5() -> Outcome {
    let eps = draw_errors(&mut unit_stream(5, 0, 0), DEFAULT_X1.len());
    let mut ok = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        let ratio = first_order_gap(m, 1e-3, &eps) / first_order_gap(m, 1e-4, &eps);
        ok &= (5.0..=20.0).contains(&ratio);
        parts.push(format!("{} {ratio:.2}", m.label()));
    }
    outcome(
        ok,
        format!("shrink factor 1e-3 -> 1e-4: {}", parts.join(", ")),
    )
}

fn criterion_6() -> Outcome {
    let mut worst_trace: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut fd_ok = true;
    let mut count = 0;
    for f in fixtures() {
        worst_trace = worst_trace.max(f.bundle().unwrap().hat_trace_error().abs());
        let rep = fd_check(f.model.as_ref(), &f.theta, &f.xs);
        fd_ok &= rep.passed;
        worst_fd = worst_fd
            .max(rep.gradient_rel_error.unwrap_or(0.0))
            .max(rep.hessian_rel_error.unwrap_or(0.0));
        count += 1;
    }
    let joint = joint_bundle(
        &PartialBleachModel,
        &DEFAULT_X1,
        &DEFAULT_X2,
        &bleach_theta(),
    )
    .unwrap();
    worst_trace = worst_trace.max(joint.hat_trace_error().abs());
    outcome(
        worst_trace <= 1e-10 && fd_ok && worst_fd < 1e-5,
        format!(
            "{} fixtures: max |sum w1 - p| {worst_trace:.2e}; max FD rel error {worst_fd:.2e}",
            count + 1
        ),
    )
}

fn criterion_7() -> Outcome {
    let model = PartialBleachModel;
    let theta = bleach_theta();
    let curve = model.curve();
    let e1 = draw_errors(&mut unit_stream(7, 0, 0), DEFAULT_X1.len());
    let e2 = draw_errors(&mut unit_stream(7, 0, 1), DEFAULT_X2.len());
    let d1 = synth(curve, &DEFAULT_X1, &theta[..3], 0.01, &e1);
    let d2 = synth(curve, &DEFAULT_X2, &theta[3..], 0.06, &e2);
    let mut opts = FitOptions::starting_at(&theta);
    opts.tol_rel = 1e-12;
    opts.tol_abs = 1e-14;
    let tol = 1e-8;
    let rel = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .zip(&theta)
            .map(|((x, y), t)| (x - y).abs() / t.abs())
            .fold(0.0, f64::max)
    };
    let run = |m, mode| {
        fit_two_curves(&model, &d1, &d2, m, mode, &opts)
            .unwrap()
            .theta_hat
    };

    let mut worst: f64 = 0.0;
    for m in [Method::Ql, Method::Wls] {
        let sep = run(m, FitMode::Separate);
        for mode in [
            FitMode::FixedSigmas(0.01, 0.06),
            FitMode::FixedSigmas(0.2, 0.003),
            FitMode::CommonSigma,
        ] {
            worst = worst.max(rel(&sep, &run(m, mode)));
        }
    }
    let dwls_common = run(Method::Dwls, FitMode::CommonSigma);
    let dwls_exact = [
        FitMode::FixedSigmas(0.01, 0.06),
        FitMode::FixedSigmas(0.2, 0.003),
    ]
    .into_iter()
    .all(|mode| run(Method::Dwls, mode) == dwls_common);
    let dwls_sep = rel(&run(Method::Dwls, FitMode::Separate), &dwls_common);

    let ml_gap = rel(
        &run(Method::Ml, FitMode::Separate),
        &run(Method::Ml, FitMode::CommonSigma),
    );
    outcome(
        worst <= tol && dwls_exact && dwls_sep <= tol && ml_gap > 10.0 * tol,
        format!(
            "QL/WLS separate vs simultaneous {worst:.2e}; DWLS simultaneous identical across sigma handling: {dwls_exact}, vs separate {dwls_sep:.2e}; ML common vs separate {ml_gap:.2e} (> {:.0e})",
            10.0 * tol
        ),
    )
}

fn criterion_8() -> Outcome {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_propfit"))
            .args([
                "--threads",
                threads,
                "simulate",
                "--seed",
                "42",
                "--format",
                "json",
            ])
            .env_remove("PROPFIT_THREADS")
            .output()
            .unwrap()
    };
    let a = run("1");
    let b = run("8");
    let ok =
        a.status.success() && b.status.success() && !a.stdout.is_empty() && a.stdout == b.stdout;
    outcome(
        ok,
        format!(
            "seed 42, --threads 1 vs 8: {} vs {} bytes, identical: {}",
            a.stdout.len(),
            b.stdout.len(),
            a.stdout == b.stdout
        ),
    )
}

fn criterion_9(summary: &SimSummary) -> Outcome {
    let sigma = 0.02;
    let theta = bleach_theta();
    let mut ok = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        let se = gamma_bias_se(
            &PartialBleachModel,
            &DEFAULT_X1,
            &DEFAULT_X2,
            &theta,
            sigma,
            m,
            FitMode::default_for(m),
        )
        .unwrap()
        .se;
        let sd = summary.entry(m, sigma, "gamma").unwrap().sd.unwrap();
        let dev = (sd / se - 1.0).abs();
        ok &= dev <= 0.15;
        parts.push(format!(
            "{} sd {sd:.3} vs se {se:.3} ({:.1}%)",
            m.label(),
            100.0 * dev
        ));
    }
    outcome(ok, parts.join("; "))
}

fn report(id: usize, title: &str, start: Instant, o: Outcome) -> bool {
    let status = if o.passed { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} [{status}] {title} ({:.1}s): {}",
        start.elapsed().as_secs_f64(),
        o.detail
    );
    o.passed
}

fn main() -> ExitCode {
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "constant-model closed-form bias", t, criterion_1());

    let t = Instant::now();
    let study = bleach_summary(&[0.01, 0.02, 0.03], 5000);
    let study_time = t;
    all &= report(
        2,
        "equivalent-dose bias pattern",
        study_time,
        criterion_2(&study),
    );

    let t = Instant::now();
    all &= report(3, "theta1 factorization structure", t, criterion_3());
    let t = Instant::now();
    all &= report(4, "ML covariance identities", t, criterion_4());
    let t = Instant::now();
    all &= report(5, "order-sigma equivalence", t, criterion_5());
    let t = Instant::now();
    all &= report(6, "hat trace and derivative checks", t, criterion_6());
    let t = Instant::now();
    all &= report(7, "sigma-handling invariance", t, criterion_7());
    let t = Instant::now();
    all &= report(8, "simulation determinism across threads", t, criterion_8());
    let t = Instant::now();
    all &= report(
        9,
        "delta-method standard error of gamma",
        t,
        criterion_9(&study),
    );

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
