#![allow(dead_code)]

use ndarray::Array2;
use panda_core::eval::{gp_points, pairwise_distances, GpConfig};
use panda_core::integrate::{integrate, IntegrationConfig};
use panda_core::model::Model;
use panda_core::rng;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use panda_core::systems::{Rhs, SystemSpec};
use panda_core::trajectory::Trajectory;

/// Reference trajectory at the spec's dt from its default IC.
pub fn reference(spec: &SystemSpec) -> Trajectory {
    let cfg = IntegrationConfig::standard(spec);
    let (tr, rep) = integrate(spec, &spec.default_ic, &cfg).unwrap();
    assert_eq!(
        rep.outcome,
        panda_core::integrate::GuardOutcome::Completed,
        "{}: {}",
        spec.id,
        rep.detail
    );
    tr
}

fn jvp<R: Rhs>(rhs: &R, x: &[f64], v: &[f64]) -> Vec<f64> {
    let e = 1e-7;
    let n = x.len();
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + e * b).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - e * b).collect();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    rhs.eval(&xp, &mut fp);
    rhs.eval(&xm, &mut fm);
    fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * e)).collect()
}

/// Largest Lyapunov exponent by tangent-vector renormalization (Benettin),
/// RK4 on the joint state/tangent system.
pub fn benettin(spec: &SystemSpec, x0: &[f64], t_total: f64, h: f64) -> f64 {
    let rhs = spec.compile();
    let n = x0.len();
    let f = |x: &[f64]| {
        let mut o = vec![0.0; n];
        rhs.eval(x, &mut o);
        o
    };
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + s * y).collect()
    };
    let mut x = x0.to_vec();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let steps = (t_total / h) as usize;
    let mut acc = 0.0;
    for _ in 0..steps {
        let k1 = f(&x);
        let l1 = jvp(&rhs, &x, &v);
        let x2 = axpy(&x, h / 2.0, &k1);
        let v2 = axpy(&v, h / 2.0, &l1);
        let k2 = f(&x2);
        let l2 = jvp(&rhs, &x2, &v2);
        let x3 = axpy(&x, h / 2.0, &k2);
        let v3 = axpy(&v, h / 2.0, &l2);
        let k3 = f(&x3);
        let l3 = jvp(&rhs, &x3, &v3);
        let x4 = axpy(&x, h, &k3);
        let v4 = axpy(&v, h, &l3);
        let k4 = f(&x4);
        let l4 = jvp(&rhs, &x4, &v4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            v[i] += h / 6.0 * (l1[i] + 2.0 * l2[i] + 2.0 * l3[i] + l4[i]);
        }
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        acc += nv.ln();
        for a in v.iter_mut() {
            *a /= nv;
        }
    }
    acc / (steps as f64 * h)
}

pub fn circle(n: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::from_seed(seed);
    let th: Vec<f64> = (0..n).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    Array2::from_shape_fn((2, n), |(c, i)| if c == 0 { th[i].cos() } else { th[i].sin() })
}

pub fn ball(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::from_seed(seed);
    let mut out = Array2::zeros((dim, n));
    for i in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rad = r.random::<f64>().powf(1.0 / dim as f64);
        for c in 0..dim {
            out[[c, i]] = v[c] / norm * rad;
        }
    }
    out
}

/// Least-squares slope of ln C(r) against ln r at log-spaced radii spanning
/// the same quantile window as the estimator.
pub fn ls_oracle(values: &Array2<f64>, cfg: &GpConfig) -> f64 {
    let pts = gp_points(values, cfg);
    let mut d = pairwise_distances(pts.view());
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let lo = d[(cfg.lo_quantile * n as f64) as usize];
    let hi = d[(cfg.hi_quantile * n as f64) as usize];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in 0..12 {
        let r = lo * (hi / lo).powf(k as f64 / 11.0);
        let count = d.partition_point(|&v| v < r);
        xs.push(r.ln());
        ys.push((count as f64 / n as f64).ln());
    }
    panda_core::stats::slope(&xs, &ys)
}

/// Randomize every parameter so gains and biases are not at their trivial
/// init values.
pub fn scramble(m: &mut Model, seed: u64) {
    let mut r = rng::from_seed(seed);
    for v in m.params.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += 0.2 * z;
    }
}

pub fn fd_check(m: &Model, f: &dyn Fn(&[f64]) -> f64, analytic: &[f64]) -> (f64, String) {
    let mut p = m.params.clone();
    let mut worst = (0.0, String::new());
    for (name, slot) in &m.layout.names {
        for i in slot.off..slot.off + slot.len() {
            let h = 1e-5 * p[i].abs().max(1.0);
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let dn = f(&p);
            p[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{}] analytic {a:e} fd {fd:e}", i - slot.off));
            }
        }
    }
    worst
}

