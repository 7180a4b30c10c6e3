mod common;

use ndarray::{s, Array2};
use panda_core::eval::*;
use panda_core::rng;
use panda_core::systems::founder;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn gp_dimension_on_manifolds() {
    let cfg = GpConfig::default();
    let c = gp_correlation_dimension(&common::circle(4096, 1), &cfg).unwrap();
    let b = gp_correlation_dimension(&common::ball(4096, 3, 2), &cfg).unwrap();
    eprintln!("circle {c:.3} ball {b:.3}");
    assert!((c - 1.0).abs() < 0.15, "circle {c}");
    assert!((b - 3.0).abs() < 0.3, "ball {b}");
}

#[test]
fn gp_dimension_on_lorenz_matches_least_squares() {
    let spec = founder("lorenz").unwrap();
    let tr = common::reference(&spec);
    let cfg = GpConfig::default();
    let est = gp_correlation_dimension(&tr.values, &cfg).unwrap();
    let ls = common::ls_oracle(&tr.values, &cfg);
    eprintln!("lorenz mle {est:.3} ls {ls:.3}");
    assert!((est - ls).abs() < 0.3);
    assert!(est > 1.6 && est < 2.4);
    // Takens: three delayed copies of x reconstruct the attractor.
    let x = tr.values.row(0).to_vec();
    let tau = panda_core::stats::first_acf_zero(&x);
    let n = x.len() - 2 * tau;
    let emb = Array2::from_shape_fn((3, n), |(k, t)| x[t + k * tau]);
    let de = gp_correlation_dimension(&emb, &cfg).unwrap();
    eprintln!("delay-embedded {de:.3} tau {tau}");
    assert!((de - est).abs() < 0.3);
}

#[test]
fn gp_literal_estimator_values() {
    // The tail formula over the (5%, 50%) window, reported for the record.
    let cfg = GpConfig::literal();
    let c = gp_correlation_dimension(&common::circle(4096, 1), &cfg).unwrap();
    let b = gp_correlation_dimension(&common::ball(4096, 3, 2), &cfg).unwrap();
    let l = gp_correlation_dimension(&common::reference(&founder("lorenz").unwrap()).values, &cfg).unwrap();
    eprintln!("literal: circle {c:.3} ball {b:.3} lorenz {l:.3}");
    assert!(c.is_finite() && b.is_finite() && l.is_finite());
}

#[test]
fn gp_dimension_grows_toward_manifold_dimension() {
    let cfg = GpConfig::default();
    for dim in 1..=3usize {
        let est = |n: usize| {
            let x = if dim == 1 {
                // A segment embedded in the plane.
                let mut r = rng::from_seed(7);
                let t: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
                Array2::from_shape_fn((2, n), |(c, i)| if c == 0 { t[i] } else { 0.5 * t[i] })
            } else {
                common::ball(n, dim, 8)
            };
            gp_correlation_dimension(&x, &cfg).unwrap()
        };
        let small = (est(1024) - dim as f64).abs();
        let large = (est(4096) - dim as f64).abs();
        eprintln!("dim {dim}: err {small:.3} -> {large:.3}");
        assert!(large < 0.1 * dim as f64 + 0.05);
    }
}

#[test]
fn gp_errors() {
    let cfg = GpConfig::default();
    assert!(matches!(
        gp_correlation_dimension(&common::circle(100, 1), &cfg),
        Err(panda_core::Error::InsufficientData(_))
    ));
    // A 1D series is delay-embedded first.
    let x = Array2::from_shape_fn((1, 4096), |(_, t)| (t as f64 * 0.05).sin());
    let d = gp_correlation_dimension(&x, &cfg).unwrap();
    assert!((d - 1.0).abs() < 0.2, "{d}");
}

#[test]
fn smape_properties() {
    let mut r = rng::from_seed(9);
    for _ in 0..200 {
        let p = Array2::from_shape_fn((2, 5), |_| r.random_range(-10.0..10.0));
        let y = Array2::from_shape_fn((2, 5), |_| r.random_range(-10.0..10.0));
        let a = smape(p.view(), y.view());
        assert!((0.0..=200.0).contains(&a));
        assert!((a - smape(y.view(), p.view())).abs() < 1e-12);
        let k = r.random_range(0.1..100.0);
        assert!((a - smape((&p * k).view(), (&y * k).view())).abs() < 1e-9);
    }
}

#[test]
fn persistence_cases() {
    let ctx = Array2::from_shape_fn((2, 10), |(c, t)| if c == 0 { 5.0 } else { t as f64 });
    let f = persistence_baseline(&ctx, 4).unwrap();
    assert!(f.row(0).iter().all(|&v| v == 5.0));
    assert!(f.row(1).iter().all(|&v| v == 9.0));
    let flat = Array2::from_elem((1, 8), 2.5);
    let pf = persistence_baseline(&flat, 3).unwrap();
    assert_eq!(mse(pf.view(), Array2::from_elem((1, 3), 2.5).view()), 0.0);
    assert!(persistence_baseline(&Array2::zeros((1, 0)), 3).is_err());
}

/// Predicts exact steps of the linear map x ← a·x from the last value and
/// records every context it sees.
struct Teacher {
    a: f64,
    h: usize,
    seen: std::sync::Mutex<Vec<Array2<f64>>>,
}

impl Forecaster for Teacher {
    fn horizon(&self) -> usize {
        self.h
    }
    fn predict(&self, ctx: &Array2<f64>) -> panda_core::Result<Array2<f64>> {
        self.seen.lock().unwrap().push(ctx.clone());
        let last = ctx.column(ctx.ncols() - 1).to_owned();
        Ok(Array2::from_shape_fn((ctx.nrows(), self.h), |(c, k)| last[c] * self.a.powi(k as i32 + 1)))
    }
}

#[test]
fn rollout_mechanics() {
    let a: f64 = 0.99;
    let series = Array2::from_shape_fn((2, 300), |(c, t)| (c as f64 + 1.0) * a.powi(t as i32));
    let ctx = series.slice(s![.., ..100]).to_owned();
    let t = Teacher {
        a,
        h: 16,
        seen: Default::default(),
    };
    let one = rollout_forecast(&t, &ctx, 16).unwrap();
    assert_eq!(one.forecast, t.predict(&ctx).unwrap());
    t.seen.lock().unwrap().clear();
    let ro = rollout_forecast(&t, &ctx, 40).unwrap();
    assert!(ro.complete);
    assert_eq!(ro.forecast.ncols(), 40);
    let seen = t.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    // Second block's context ends with the first block's output.
    assert_eq!(seen[1].slice(s![.., 84..]), ro.forecast.slice(s![.., ..16]));
    assert_eq!(seen[1].ncols(), 100);
    let truth = series.slice(s![.., 100..140]);
    let err = (&ro.forecast - &truth).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(err < 1e-12);
    assert!(rollout_forecast(&t, &ctx, 8).is_err());
}

struct Nan;
impl Forecaster for Nan {
    fn horizon(&self) -> usize {
        4
    }
    fn predict(&self, ctx: &Array2<f64>) -> panda_core::Result<Array2<f64>> {
        Ok(Array2::from_elem((ctx.nrows(), 4), f64::NAN))
    }
}

#[test]
fn rollout_stops_on_non_finite() {
    let ro = rollout_forecast(&Nan, &Array2::zeros((1, 8)), 12).unwrap();
    assert!(!ro.complete);
    assert_eq!(ro.forecast.ncols(), 0);
}

fn lorenz_like_systems(k: usize) -> Vec<(String, Vec<Array2<f64>>)> {
    let names = ["lorenz", "rossler", "chen", "thomas", "sprott_b"];
    names[..k]
        .iter()
        .map(|n| {
            let spec = founder(n).unwrap();
            (n.to_string(), vec![common::reference(&spec).values])
        })
        .collect()
}

#[test]
fn zero_shot_aggregation_matches_brute_force() {
    let systems = lorenz_like_systems(3);
    let cfg = EvalConfig {
        horizons: vec![16, 64],
        n_windows: 6,
        context_len: 256,
        seed: 3,
    };
    let p = Persistence { horizon: 64 };
    let rep = evaluate_zero_shot(&p, "persistence", &systems, &cfg).unwrap();
    assert_eq!(rep.records.len(), 3 * 6 * 2);
    for h in [16usize, 64] {
        let mut per_system = Vec::new();
        for (id, trajs) in &systems {
            let mut acc = 0.0;
            for w in 0..6 {
                let (ti, start) = window_start(id, w, trajs.len(), trajs[0].ncols(), &cfg).unwrap();
                let x = &trajs[ti];
                let ctx = x.slice(s![.., start..start + 256]).to_owned();
                let pred = persistence_baseline(&ctx, h).unwrap();
                acc += smape(pred.view(), x.slice(s![.., start + 256..start + 256 + h]));
            }
            per_system.push(acc / 6.0);
        }
        let want = panda_core::stats::median(&per_system);
        assert!((rep.at(h).unwrap().smape.median - want).abs() < 1e-12);
    }
    let empty = evaluate_zero_shot(&p, "persistence", &[], &cfg).unwrap();
    assert!(empty.records.is_empty() && empty.summary.is_empty());
    // CSV has one row per record plus a header.
    assert_eq!(rep.to_csv().lines().count(), rep.records.len() + 1);
}

#[test]
fn persistence_error_grows_with_horizon() {
    let systems = lorenz_like_systems(5);
    let cfg = EvalConfig {
        horizons: vec![16, 128],
        n_windows: 6,
        context_len: 256,
        seed: 4,
    };
    let rep = evaluate_zero_shot(&Persistence { horizon: 128 }, "p", &systems, &cfg).unwrap();
    assert!(rep.at(128).unwrap().smape.median >= rep.at(16).unwrap().smape.median);
}

/// Replaces masked patches with Gaussian noise scaled to the block.
struct NoiseInfill;
impl Infiller for NoiseInfill {
    fn patch_size(&self) -> usize {
        16
    }
    fn infill(&self, block: &Array2<f64>, mask: &Array2<bool>) -> panda_core::Result<Array2<f64>> {
        let mut r = rng::from_seed(block.sum().to_bits());
        let mut out = block.clone();
        for ((c, k), &m) in mask.indexed_iter() {
            if m {
                let row = block.row(c);
                let sd = panda_core::stats::std(&row.to_vec());
                for j in 0..16 {
                    let z: f64 = StandardNormal.sample(&mut r);
                    out[[c, k * 16 + j]] = row.mean().unwrap() + sd * z;
                }
            }
        }
        Ok(out)
    }
}

#[test]
fn completion_with_noise_raises_dimension() {
    let tr = common::reference(&founder("lorenz").unwrap());
    let gp = GpConfig::default();
    let cfg = CompletionConfig {
        n_masks: 2,
        ..Default::default()
    };
    let c = completion_eval(&NoiseInfill, &tr.values, &cfg, &gp).unwrap();
    eprintln!("noise completion {:.3} truth {:.3}", c.d2_completion, c.d2_truth);
    assert!(c.d2_completion > c.d2_truth);
    let zero = CompletionConfig {
        mask_fraction: 0.0,
        n_masks: 1,
        ..Default::default()
    };
    let z = completion_eval(&NoiseInfill, &tr.values, &zero, &gp).unwrap();
    assert_eq!(z.d2_completion, z.d2_truth);
    let again = completion_eval(&NoiseInfill, &tr.values, &cfg, &gp).unwrap();
    assert_eq!(again.completions, c.completions);
}
