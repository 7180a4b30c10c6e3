mod common;

use ndarray::Array2;
use panda_core::chaos::{self, SelectionConfig, Stage, TransientReason};
use panda_core::integrate::{integrate, IntegrationConfig};
use panda_core::rng;
use panda_core::stats;
use panda_core::systems::{founder, list_founders, reference_system};
use panda_core::trajectory::Trajectory;

#[test]
fn founders_pass_battery_and_match_benettin() {
    let cfg = SelectionConfig::default();
    let mut worst: f64 = 0.0;
    for spec in list_founders() {
        let tr = common::reference(&spec);
        let v = chaos::select(&tr, &cfg, &mut rng::from_seed(11));
        assert!(v.accepted, "{} rejected: {v:?}", spec.id);
        let x_end = tr.state(tr.len() - 1);
        let ben = common::benettin(&spec, &x_end, (spec.dt * 5000.0).max(1000.0), (spec.dt / 4.0).min(0.005));
        let ros = v.lyapunov_estimate.unwrap();
        println!("{:22} rosenstein={ros:.3} benettin={ben:.3}", spec.id);
        assert!(ben > 0.0 && ros > 0.0, "{}", spec.id);
        let rel = (ros / ben - 1.0).abs();
        assert!(rel < 0.25, "{}: rosenstein {ros} vs benettin {ben}", spec.id);
        worst = worst.max(rel);
    }
    println!("worst relative deviation {worst:.3}");
}

#[test]
fn lorenz_x_is_chaotic_and_sine_is_not() {
    let tr = common::reference(&founder("lorenz").unwrap());
    let x = tr.channel(0).to_vec();
    let k = chaos::zero_one_test(&x, 16, &mut rng::from_seed(3)).unwrap();
    assert!(k > 0.9, "K = {k}");
    let s: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.0645).sin()).collect();
    let k = chaos::zero_one_test(&s, 16, &mut rng::from_seed(3)).unwrap();
    assert!(k < 0.1, "K = {k}");
}

#[test]
fn lorenz_stage_statistics() {
    let tr = common::reference(&founder("lorenz").unwrap());
    let cfg = SelectionConfig::default();
    assert_eq!(chaos::reject_transient(&tr, &cfg).unwrap(), None);
    assert!(chaos::recurrence_limit_cycle_test(&tr, 0.02).unwrap() < 0.5);
    assert!(chaos::spectral_peak_test(&tr.channel(0).to_vec()).unwrap() < 0.9);
}

#[test]
fn quasi_periodic_spectrum_is_spread() {
    let mut r = rng::from_seed(9);
    use rand::Rng;
    // 20 on-bin tones: under a Hann window each keeps 2/3 of its power in
    // the centre bin, so the top-5 share is 5·(2/3)/20 = 1/6.
    let n = 4096;
    let mut bins: Vec<usize> = Vec::new();
    while bins.len() < 20 {
        let b = r.random_range(20..400usize);
        if bins.iter().all(|&c| c.abs_diff(b) > 3) {
            bins.push(b);
        }
    }
    let x: Vec<f64> = (0..n)
        .map(|i| {
            bins.iter()
                .map(|&b| (2.0 * std::f64::consts::PI * b as f64 * i as f64 / n as f64).sin())
                .sum()
        })
        .collect();
    let ratio = chaos::spectral_peak_test(&x).unwrap();
    assert!((0.1..0.3).contains(&ratio), "{ratio}");
}

#[test]
fn noise_does_not_recur() {
    let mut r = rng::from_seed(2);
    use rand_distr::{Distribution, StandardNormal};
    let v = Array2::from_shape_fn((3, 2048), |_| StandardNormal.sample(&mut r));
    let tr = Trajectory::new(v, 1.0, 0.0, "noise").unwrap();
    assert!(chaos::recurrence_limit_cycle_test(&tr, 0.02).unwrap() < 0.01);
}

#[test]
fn diverging_ramp_is_transient() {
    let v = Array2::from_shape_fn((1, 1024), |(_, t)| t as f64 * 20.0);
    let tr = Trajectory::new(v, 1.0, 0.0, "ramp").unwrap();
    assert_eq!(
        chaos::reject_transient(&tr, &SelectionConfig::default()).unwrap(),
        Some(TransientReason::Diverged)
    );
}

#[test]
fn circle_has_no_exponent() {
    let n = 4096;
    let v = Array2::from_shape_fn((2, n), |(c, t)| {
        // Irrational period: a rational one returns to the same samples and
        // the neighbour distances collapse to rounding noise.
        let a = 2.0 * std::f64::consts::PI * t as f64 / (50.0 * 3f64.sqrt());
        if c == 0 { a.cos() } else { a.sin() }
    });
    let tr = Trajectory::new(v, 0.05, 0.0, "circle").unwrap();
    let p = chaos::estimate_mean_period(&tr.channel(0).to_vec(), tr.dt);
    let lam = chaos::rosenstein_lyapunov(&tr, p).unwrap();
    // Dimensionless: growth per mean period.
    assert!((lam * p).abs() < 0.01, "{lam}");
}

#[test]
fn delay_embedded_reversed_lorenz_is_positive() {
    let tr = common::reference(&founder("lorenz").unwrap());
    let mut x = tr.channel(0).to_vec();
    x.reverse();
    let tau = stats::first_acf_zero(&x).clamp(1, 20);
    let states = stats::delay_embed(&x, 3, tau);
    let p = chaos::estimate_mean_period(&x, tr.dt);
    let lam = chaos::rosenstein_from_states(&states, tr.dt, p).unwrap();
    assert!(lam > 0.0, "{lam}");
}

#[test]
fn damped_oscillator_is_fixed_point() {
    let s = reference_system("damped_oscillator").unwrap();
    let (tr, _) = integrate(&s, &s.default_ic, &IntegrationConfig::standard(&s)).unwrap();
    let v = chaos::select(&tr, &SelectionConfig::default(), &mut rng::from_seed(0));
    assert!(!v.accepted);
    assert_eq!(v.failed_stage, Some(Stage::Transient));
    assert_eq!(v.transient_reason, Some(TransientReason::FixedPoint));
    assert!(v.k_statistic.is_none());
}

#[test]
fn van_der_pol_is_rejected_early() {
    let s = reference_system("van_der_pol").unwrap();
    let (tr, _) = integrate(&s, &s.default_ic, &IntegrationConfig::standard(&s)).unwrap();
    let v = chaos::select(&tr, &SelectionConfig::default(), &mut rng::from_seed(0));
    assert!(!v.accepted);
    assert!(
        matches!(v.failed_stage, Some(Stage::ZeroOne) | Some(Stage::Recurrence)),
        "{v:?}"
    );
}

#[test]
fn zero_one_is_seed_deterministic() {
    let tr = common::reference(&founder("rossler").unwrap());
    let x = tr.channel(1).to_vec();
    let a = chaos::zero_one_test(&x, 16, &mut rng::from_seed(5)).unwrap();
    let b = chaos::zero_one_test(&x, 16, &mut rng::from_seed(5)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
