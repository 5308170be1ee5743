use propfit_core::equivalent_dose::{
    beta1_from_gamma, default_bracket, fit_two_curves, gamma_bias_se, gamma_gradient,
    gamma_hessian, joint_bias_cov, solve_gamma, FitMode, PartialBleachModel,
};
use propfit_core::estimators::{FitOptions, Method};
use propfit_core::model::{Dataset, ModelFunction, SaturatingExponential};
use propfit_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const ALPHA: [f64; 3] = [142853.0, 123.182, 393.065];
const BETA23: [f64; 2] = [192.547, 756.620];
const GAMMA: f64 = -87.45;
const X1: [f64; 16] = [
    0.0, 0.0, 50.0, 50.0, 100.0, 100.0, 200.0, 200.0, 400.0, 400.0, 600.0, 600.0, 800.0, 800.0,
    1000.0, 1000.0,
];
const X2: [f64; 13] = [
    0.0, 0.0, 50.0, 100.0, 100.0, 200.0, 200.0, 400.0, 400.0, 600.0, 600.0, 800.0, 1000.0,
];

fn theta_for(gamma: f64) -> Vec<f64> {
    let b1 = beta1_from_gamma(&ALPHA, BETA23[0], BETA23[1], gamma).unwrap();
    vec![ALPHA[0], ALPHA[1], ALPHA[2], b1, BETA23[0], BETA23[1]]
}

fn bleach_theta() -> Vec<f64> {
    theta_for(GAMMA)
}

fn noisy(xs: &[f64], params: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Dataset {
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            SaturatingExponential.value(x, params) * (1.0 + sigma * e)
        })
        .collect();
    Dataset::from_xy(xs, &ys).unwrap()
}

#[test]
fn published_curves_round_trip() {
    let theta = bleach_theta();
    let root = solve_gamma(&PartialBleachModel, &theta, None).unwrap();
    assert!((root.gamma - GAMMA).abs() < 1e-4, "{}", root.gamma);
    assert_eq!(root.sign_changes, 1);
    assert_eq!(root.bracket, default_bracket(&theta).unwrap());
    let g = PartialBleachModel.g(root.gamma, &theta).unwrap();
    // tolerance on x is 1e-8 of the bracket; g's slope is O(100) per Gray
    assert!(g.abs() < 1e-3, "g = {g}");
}

#[test]
fn round_trip_over_gamma_grid() {
    let mut gamma = -200.0;
    while gamma <= -10.0 {
        // β₁ is undefined where the bleached shape vanishes
        if (gamma + BETA23[0]).abs() > 1.0 {
            let theta = theta_for(gamma);
            let bracket = if gamma > -ALPHA[1] {
                None
            } else {
                Some((gamma - 5.0, gamma + 5.0))
            };
            let root = solve_gamma(&PartialBleachModel, &theta, bracket).unwrap();
            assert!(
                (root.gamma - gamma).abs() < 1e-4,
                "gamma {gamma}: {}",
                root.gamma
            );
        }
        gamma += 2.5;
    }
}

#[test]
fn doubled_scale_crosses_at_shift() {
    let mut theta = ALPHA.to_vec();
    theta.extend([2.0 * ALPHA[0], ALPHA[1], ALPHA[2]]);
    let root = solve_gamma(&PartialBleachModel, &theta, Some((-2.0 * ALPHA[1], 0.0))).unwrap();
    assert!((root.gamma + ALPHA[1]).abs() < 1e-6);
    let grad = gamma_gradient(&PartialBleachModel, &theta, root.gamma).unwrap();
    // moving the shared shift parameter moves the root one for one
    assert!((grad[1] + grad[4] + 1.0).abs() < 1e-9);
    // the default bracket stops just short of the root
    assert!(matches!(
        solve_gamma(&PartialBleachModel, &theta, None),
        Err(Error::NoBracket { .. })
    ));
}

#[test]
fn gradient_matches_resolved_differences() {
    let theta = bleach_theta();
    let gamma = solve_gamma(&PartialBleachModel, &theta, None)
        .unwrap()
        .gamma;
    let grad = gamma_gradient(&PartialBleachModel, &theta, gamma).unwrap();
    let tight = |t: &[f64]| {
        // a narrow bracket keeps Brent's x tolerance far below the FD step effect
        solve_gamma(&PartialBleachModel, t, Some((gamma - 1.0, gamma + 1.0)))
            .unwrap()
            .gamma
    };
    for j in 0..6 {
        let h = 1e-5 * theta[j].abs();
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += h;
        dn[j] -= h;
        let fd = (tight(&up) - tight(&dn)) / (2.0 * h);
        let err = (fd - grad[j]).abs() / grad[j].abs();
        assert!(err < 1e-4, "component {j}: {} vs {fd}", grad[j]);
    }
}

#[test]
fn hessian_matches_gradient_differences() {
    let theta = bleach_theta();
    let gamma = solve_gamma(&PartialBleachModel, &theta, None)
        .unwrap()
        .gamma;
    let hess = gamma_hessian(&PartialBleachModel, &theta, gamma).unwrap();
    assert_eq!(hess, hess.transpose());
    let grad_at = |t: &[f64]| {
        let g = solve_gamma(&PartialBleachModel, t, Some((gamma - 0.01, gamma + 0.01)))
            .unwrap()
            .gamma;
        gamma_gradient(&PartialBleachModel, t, g).unwrap()
    };
    for j in 0..6 {
        let h = 1e-5 * theta[j].abs();
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += h;
        dn[j] -= h;
        let fd = (grad_at(&up) - grad_at(&dn)) / (2.0 * h);
        for i in 0..6 {
            // entries are compared on the scale of their row
            let scale = hess.row(i).amax();
            assert!(
                (fd[i] - hess[(i, j)]).abs() < 1e-5 * scale,
                "({i},{j}): {} vs {}",
                hess[(i, j)],
                fd[i]
            );
        }
    }
}

#[test]
fn bias_splits_into_linear_and_curvature_parts() {
    let theta = bleach_theta();
    let e = gamma_bias_se(
        &PartialBleachModel,
        &X1,
        &X2,
        &theta,
        0.02,
        Method::Wls,
        FitMode::Separate,
    )
    .unwrap();
    assert_eq!(e.bias, e.bias_linear + e.bias_curvature);
    let (b, _) = joint_bias_cov(
        &PartialBleachModel,
        &X1,
        &X2,
        &theta,
        [0.02, 0.02],
        Method::Wls,
        FitMode::Separate,
    )
    .unwrap();
    let lin: f64 = e.gradient.iter().zip(b.iter()).map(|(g, v)| g * v).sum();
    assert!((lin - e.bias_linear).abs() < 1e-14 * lin.abs());
}

#[test]
fn scales_do_not_move_the_root() {
    let theta = bleach_theta();
    let c = 3.5;
    let mut scaled = theta.clone();
    scaled[0] *= c;
    scaled[3] *= c;
    let g0 = solve_gamma(&PartialBleachModel, &theta, None)
        .unwrap()
        .gamma;
    let g1 = solve_gamma(&PartialBleachModel, &scaled, None)
        .unwrap()
        .gamma;
    assert!((g0 - g1).abs() < 1e-5);
    let d0 = gamma_gradient(&PartialBleachModel, &theta, g0).unwrap();
    let d1 = gamma_gradient(&PartialBleachModel, &scaled, g0).unwrap();
    for j in 0..6 {
        let expected = if j == 0 || j == 3 { d0[j] / c } else { d0[j] };
        assert!(
            (d1[j] - expected).abs() < 1e-10 * expected.abs(),
            "component {j}"
        );
    }
}

#[test]
fn bias_and_se_vanish_with_sigma() {
    let theta = bleach_theta();
    for method in Method::ALL {
        let mode = FitMode::default_for(method);
        let a = gamma_bias_se(&PartialBleachModel, &X1, &X2, &theta, 1e-3, method, mode).unwrap();
        let b = gamma_bias_se(&PartialBleachModel, &X1, &X2, &theta, 1e-4, method, mode).unwrap();
        let bias_ratio = a.bias / b.bias;
        let se_ratio = a.se / b.se;
        // the large-sample ML covariance carries an O(σ⁴) term
        assert!((bias_ratio - 100.0).abs() < 1e-3, "{method}: {bias_ratio}");
        assert!((se_ratio - 10.0).abs() < 1e-3, "{method}: {se_ratio}");
    }
}

#[test]
fn formula_bias_pattern_across_sigma() {
    let theta = bleach_theta();
    for sigma in [0.01, 0.02, 0.03, 0.04, 0.05, 0.06] {
        let bt = |m: Method| {
            gamma_bias_se(
                &PartialBleachModel,
                &X1,
                &X2,
                &theta,
                sigma,
                m,
                FitMode::default_for(m),
            )
            .unwrap()
            .bias
        };
        let (ml, ql, wls, dwls) = (
            bt(Method::Ml),
            bt(Method::Ql),
            bt(Method::Wls),
            bt(Method::Dwls),
        );
        assert!(ml < 0.0 && ql < 0.0 && wls < 0.0 && dwls < 0.0);
        assert!(
            dwls.abs() > ql.abs() && ql.abs() > ml.abs(),
            "sigma {sigma}: {ml} {ql} {wls} {dwls}"
        );
        assert!(
            (ml / wls - 1.0).abs() < 0.10,
            "sigma {sigma}: {ml} vs {wls}"
        );
    }
}

#[test]
fn separate_mode_covariance_is_block_diagonal() {
    let theta = bleach_theta();
    let (_, cov) = joint_bias_cov(
        &PartialBleachModel,
        &X1,
        &X2,
        &theta,
        [0.02, 0.03],
        Method::Wls,
        FitMode::Separate,
    )
    .unwrap();
    for i in 0..3 {
        for j in 3..6 {
            assert_eq!(cov[(i, j)], 0.0);
        }
    }
    let (_, joint) = joint_bias_cov(
        &PartialBleachModel,
        &X1,
        &X2,
        &theta,
        [0.02, 0.02],
        Method::Ml,
        FitMode::CommonSigma,
    )
    .unwrap();
    assert!(joint[(0, 3)] != 0.0);
    assert!(matches!(
        joint_bias_cov(
            &PartialBleachModel,
            &X1,
            &X2,
            &theta,
            [0.02, 0.03],
            Method::Ml,
            FitMode::CommonSigma
        ),
        Err(Error::Mode(_))
    ));
}

#[test]
fn sigma_free_methods_are_invariant_to_mode() {
    let theta = bleach_theta();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d1 = noisy(&X1, &theta[..3], 0.03, &mut rng);
    let d2 = noisy(&X2, &theta[3..], 0.03, &mut rng);
    let opts = FitOptions {
        tol_rel: 1e-12,
        ..FitOptions::starting_at(&theta)
    };
    for method in [Method::Ql, Method::Wls] {
        let sep = fit_two_curves(
            &PartialBleachModel,
            &d1,
            &d2,
            method,
            FitMode::Separate,
            &opts,
        )
        .unwrap();
        for mode in [FitMode::FixedSigmas(0.01, 0.05), FitMode::CommonSigma] {
            let sim = fit_two_curves(&PartialBleachModel, &d1, &d2, method, mode, &opts).unwrap();
            assert!(sep.converged && sim.converged);
            for j in 0..6 {
                let rel = (sep.theta_hat[j] - sim.theta_hat[j]).abs() / theta[j].abs();
                assert!(rel < 1e-8, "{method} {mode} component {j}: {rel}");
            }
        }
    }
    let dwls = fit_two_curves(
        &PartialBleachModel,
        &d1,
        &d2,
        Method::Dwls,
        FitMode::Separate,
        &opts,
    )
    .unwrap();
    let common = fit_two_curves(
        &PartialBleachModel,
        &d1,
        &d2,
        Method::Dwls,
        FitMode::CommonSigma,
        &opts,
    )
    .unwrap();
    for mode in [
        FitMode::FixedSigmas(0.01, 0.02),
        FitMode::FixedSigmas(0.3, 0.001),
    ] {
        let fixed =
            fit_two_curves(&PartialBleachModel, &d1, &d2, Method::Dwls, mode, &opts).unwrap();
        assert_eq!(fixed.theta_hat, common.theta_hat, "{mode}");
    }
    for j in 0..6 {
        let rel = (dwls.theta_hat[j] - common.theta_hat[j]).abs() / theta[j].abs();
        assert!(rel < 1e-8, "DWLS component {j}: {rel}");
    }
}

#[test]
fn common_sigma_ml_differs_under_asymmetric_noise() {
    let theta = bleach_theta();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d1 = noisy(&X1, &theta[..3], 0.01, &mut rng);
    let d2 = noisy(&X2, &theta[3..], 0.06, &mut rng);
    let opts = FitOptions::starting_at(&theta);
    let sep = fit_two_curves(
        &PartialBleachModel,
        &d1,
        &d2,
        Method::Ml,
        FitMode::Separate,
        &opts,
    )
    .unwrap();
    let com = fit_two_curves(
        &PartialBleachModel,
        &d1,
        &d2,
        Method::Ml,
        FitMode::CommonSigma,
        &opts,
    )
    .unwrap();
    assert!(sep.converged && com.converged);
    assert_eq!(com.sigma_hat[0], com.sigma_hat[1]);
    let diff = (0..6)
        .map(|j| (sep.theta_hat[j] - com.theta_hat[j]).abs() / theta[j].abs())
        .fold(0.0, f64::max);
    assert!(diff > 10.0 * opts.tol_rel, "max relative difference {diff}");
}

#[test]
fn noise_free_fits_recover_the_design() {
    let theta = bleach_theta();
    let d1 = Dataset::from_xy(
        &X1,
        &X1.map(|x| SaturatingExponential.value(x, &theta[..3])),
    )
    .unwrap();
    let d2 = Dataset::from_xy(
        &X2,
        &X2.map(|x| SaturatingExponential.value(x, &theta[3..])),
    )
    .unwrap();
    let start: Vec<f64> = theta.iter().map(|t| t * 1.01).collect();
    for method in Method::ALL {
        let r = fit_two_curves(
            &PartialBleachModel,
            &d1,
            &d2,
            method,
            FitMode::default_for(method),
            &FitOptions::starting_at(&start),
        )
        .unwrap();
        assert!(r.converged, "{method}");
        let gamma = solve_gamma(&PartialBleachModel, &r.theta_hat, None)
            .unwrap()
            .gamma;
        assert!((gamma - GAMMA).abs() < 1e-4, "{method}: {gamma}");
    }
}
