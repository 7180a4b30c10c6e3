use std::collections::BTreeSet;

use ndarray::Array2;
use panda_core::dataset::*;
use panda_core::eval::{gp_correlation_dimension, GpConfig};
use panda_core::rng;
use panda_core::systems::{
    founder, list_founders, make_skew_product, perturb_params, pick_pair, FlowSample, SystemSpec,
};
use panda_core::trajectory::Trajectory;
use panda_core::Error;

mod common;

fn small_evolve(target: usize) -> EvolveConfig {
    EvolveConfig {
        target_count: target,
        max_candidates: 200,
        n_points: 2048,
        workers: 1,
        ..Default::default()
    }
}

/// Skew products built from a handful of on-orbit points; no integration.
fn cheap_skews(n: usize, seed: u64) -> Vec<SystemSpec> {
    let founders = list_founders();
    let mut r = rng::from_seed(seed);
    let sample = |s: &SystemSpec| {
        let pts = (0..8)
            .map(|k| s.default_ic.iter().map(|v| v + 0.1 * k as f64).collect())
            .collect();
        FlowSample::from_points(s, pts).unwrap()
    };
    (0..n)
        .map(|_| {
            let (a, b) = pick_pair(founders.len(), &mut r);
            let d = perturb_params(&founders[a], 0.05, &mut r);
            let s = perturb_params(&founders[b], 0.05, &mut r);
            make_skew_product(&d, &s, &sample(&d), &sample(&s)).unwrap()
        })
        .collect()
}

#[test]
fn evolve_is_deterministic_and_worker_independent() {
    let f = list_founders();
    let (a, ra) = evolve_generation(&f, &small_evolve(4), 3).unwrap();
    let mut cfg = small_evolve(4);
    cfg.workers = 3;
    let (b, rb) = evolve_generation(&f, &cfg, 3).unwrap();
    assert_eq!(a.len(), 4);
    let ids = |v: &[Accepted]| v.iter().map(|x| (x.candidate_index, x.spec.id.clone())).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
    assert_eq!(ra, rb);
    for x in &a {
        assert!(x.verdict.accepted);
        assert_eq!(x.trajectory.len(), 2048);
    }
    assert_eq!(ra.candidates_evaluated, ra.accepted + ra.failure_histogram.values().sum::<usize>());

    let (none, rep) = evolve_generation(&f, &small_evolve(0), 3).unwrap();
    assert!(none.is_empty());
    assert_eq!(rep.candidates_evaluated, 0);
    assert!(evolve_generation(&f[..1], &small_evolve(1), 3).is_err());
}

#[test]
fn holdout_audit_is_exhaustive() {
    let founders = list_founders();
    let skews = cheap_skews(200, 5);
    for k in [0, 2, founders.len() - 1] {
        let p = partition_holdout(&founders, k, &skews, &mut rng::from_seed(k as u64)).unwrap();
        assert_eq!(p.founders.held_out.len(), k);
        assert_eq!(p.train.len() + p.held_out.len(), skews.len());
        let held: BTreeSet<&String> = p.founders.held_out.iter().collect();
        let train: BTreeSet<&String> = p.train.iter().collect();
        for s in &skews {
            let touches = s.founders_touched().iter().any(|f| held.contains(f));
            assert_eq!(touches, !train.contains(&s.id), "{}", s.id);
        }
        if k == 0 {
            assert!(p.held_out.is_empty());
        }
        if k == founders.len() - 1 {
            // skews always combine two distinct founders
            assert!(p.train.is_empty());
        }
    }
    assert!(partition_holdout(&founders, founders.len(), &skews, &mut rng::from_seed(0)).is_err());
}

fn toy(c: usize, t: usize) -> Trajectory {
    let v = Array2::from_shape_fn((c, t), |(i, j)| ((i + 1) as f64 * 0.07 * j as f64).sin() + i as f64);
    Trajectory::new(v, 0.05, 0.0, "toy").unwrap()
}

#[test]
fn augmentations_respect_contracts() {
    let tr = toy(6, 300);
    for seed in 0..50 {
        let mut r = rng::from_seed(seed);
        let d = augment_delay_embed(&tr, 10, &mut r).unwrap();
        assert_eq!(d.channels(), 6);
        assert!(d.len() >= 300 - 10);

        let c = augment_convex(&tr, 1.0, &mut r).unwrap();
        assert!((3..=10).contains(&c.channels()));
        for t in 0..tr.len() {
            let col = tr.values.column(t);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in c.values.column(t) {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        let a = augment_affine(&tr, 1.0, &mut r).unwrap();
        assert!((3..=10).contains(&a.channels()));
        assert!(a.values.iter().all(|v| v.is_finite()));
    }
    assert!(matches!(augment_delay_embed(&toy(2, 10), 10, &mut rng::from_seed(0)), Err(Error::InvalidInput(_))));

    let m = dirichlet_rows(7, 4, 0.3, &mut rng::from_seed(2)).unwrap();
    for row in m.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }

    // constant input stays constant under a convex map
    let k = Trajectory::new(Array2::from_shape_fn((3, 40), |(i, _)| i as f64 - 1.0), 0.1, 0.0, "c").unwrap();
    let ck = augment_convex(&k, 2.0, &mut rng::from_seed(9)).unwrap();
    for row in ck.values.rows() {
        assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-14 && v.abs() <= 1.0));
    }

    // zero affine map sends everything to zero; equal states map equally
    let z = apply_affine(&tr, &Array2::zeros((4, 7)));
    assert!(z.values.iter().all(|v| *v == 0.0));
    let mut rep = toy(3, 20);
    let col = rep.values.column(2).to_owned();
    rep.values.column_mut(11).assign(&col);
    let ab = affine_matrix(5, 3, 1.0, &mut rng::from_seed(1));
    let out = apply_affine(&rep, &ab);
    assert_eq!(out.values.column(2), out.values.column(11));
}

#[test]
fn affine_entry_variance() {
    let (d, c, sigma) = (4, 3, 1.5);
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for seed in 0..10_000u64 {
        let m = affine_matrix(d, c, sigma, &mut rng::stream(77, "affine", seed));
        for v in m.iter() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let mean = sum / n;
    let var = sq / n - mean * mean;
    let want = sigma * sigma / d as f64;
    assert!((var / want - 1.0).abs() < 0.05, "var {var} want {want}");
}

#[test]
fn delay_embedding_preserves_dimension() {
    let lorenz = founder("lorenz").unwrap();
    let tr = common::reference(&lorenz);
    let cfg = GpConfig::default();
    let full = gp_correlation_dimension(&tr.values, &cfg).unwrap();
    let x = tr.values.row(0).to_owned().insert_axis(ndarray::Axis(0));
    let three = Trajectory::new(
        ndarray::concatenate![ndarray::Axis(0), x, x, x],
        tr.dt,
        tr.t0,
        "lorenz_x",
    )
    .unwrap();
    let emb = delay_embed_with(&three, &[0, 10, 20]).unwrap();
    let d2 = gp_correlation_dimension(&emb.values, &cfg).unwrap();
    assert!((d2 - full).abs() < 0.3, "full {full} delay {d2}");
}

#[test]
fn scaling_splits() {
    let ids: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
    let plan = build_scaling_splits(&ids, 4, 1, &mut rng::from_seed(1)).unwrap();
    let shape: Vec<(usize, usize)> = plan.splits.iter().map(|s| (s.n_sys, s.n_ics)).collect();
    assert_eq!(shape, vec![(96, 1), (48, 2), (24, 4), (12, 8)]);
    for w in plan.splits.windows(2) {
        let a: BTreeSet<_> = w[0].systems.iter().collect();
        assert!(w[1].systems.iter().all(|s| a.contains(s)));
    }
    assert_eq!(plan, build_scaling_splits(&ids, 4, 1, &mut rng::from_seed(1)).unwrap());
    assert!(build_scaling_splits(&ids[..7], 4, 1, &mut rng::from_seed(1)).is_err());

    let mut bad = plan.clone();
    bad.splits[2].n_ics = 5;
    assert!(bad.validate().is_err());
    let mut bad = plan.clone();
    bad.splits[1].systems[0] = "elsewhere".into();
    assert!(bad.validate().is_err());
}

fn tiny_dataset() -> Dataset {
    let f = list_founders();
    let (acc, rep) = evolve_generation(&f, &small_evolve(3), 8).unwrap();
    let specs: Vec<SystemSpec> = acc.iter().map(|a| a.spec.clone()).collect();
    let part = partition_holdout(&f, 2, &specs, &mut rng::from_seed(8)).unwrap();
    Dataset::from_accepted(&acc, &part, Some(rep), 8)
}

#[test]
fn bundle_round_trip_and_corruption() {
    let mut ds = tiny_dataset();
    assert!(ds.manifest.holdout_violations().is_empty());
    let ids: Vec<String> = ds.manifest.systems.iter().map(|e| e.id.clone()).take(1).collect();
    ds.ensure_ics(&ids, 2, &small_evolve(1)).unwrap();
    assert_eq!(ds.system_trajectories(&ids[0]).len(), 2);
    assert_eq!(ds.manifest.n_ics, 2);
    augment_dataset(&mut ds, &AugmentConfig { per_trajectory: 3, ..Default::default() }).unwrap();
    let n_train_traj: usize = ds.manifest.train.iter().map(|id| ds.system_trajectories(id).len()).sum();
    assert_eq!(ds.manifest.augmentations.len(), 3 * n_train_traj);

    let dir = tempfile::tempdir().unwrap();
    write_bundle(&ds, dir.path()).unwrap();
    let back = read_bundle(dir.path()).unwrap();
    assert_eq!(back, ds);

    // a second write is byte-identical
    let dir2 = tempfile::tempdir().unwrap();
    write_bundle(&back, dir2.path()).unwrap();
    assert_eq!(
        std::fs::read(manifest_path(dir.path())).unwrap(),
        std::fs::read(manifest_path(dir2.path())).unwrap()
    );

    let victim = dir.path().join(&ds.manifest.systems[0].bundles[0]);
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::Format { .. })));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&victim, &bad_magic).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::Format { offset: 0, .. })));
    std::fs::write(&victim, &bytes).unwrap();

    let mp = manifest_path(dir.path());
    let text = std::fs::read_to_string(&mp).unwrap();
    std::fs::write(&mp, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::UnsupportedVersion { found: 2, .. })));
    std::fs::remove_file(&mp).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::MissingArtifact(_))));
}

#[test]
fn manifest_audit_flags_violations() {
    let mut ds = tiny_dataset();
    let Some(h) = ds.manifest.held_out.first().cloned() else {
        return;
    };
    ds.manifest.train.push(h.clone());
    assert_eq!(ds.manifest.holdout_violations(), vec![h]);
}
