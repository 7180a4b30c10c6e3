//! Patched-attention forecaster with hand-written backward passes.
//!
//! Hidden state layout: one row per token, rows ordered channel-major
//! (`c * n_patches + n`), `d_model` columns.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const NORM_EPS: f64 = 1e-6;
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub horizon: usize,
    pub poly_degrees: Vec<usize>,
    pub n_poly: usize,
    pub n_rff: usize,
    pub rff_sigma: f64,
    pub pooling: Pooling,
    pub use_dyn_embed: bool,
    pub use_channel_attn: bool,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Fraction of each head's rotary pairs that carry patch position in
    /// temporal attention, highest frequencies first. 0 is pure NoPE.
    pub rope_fraction: f64,
    /// Seed for initialization and the frozen feature buffers.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            horizon: 64,
            poly_degrees: vec![2, 3],
            n_poly: 56,
            n_rff: 56,
            rff_sigma: 1.0,
            pooling: Pooling::Mean,
            use_dyn_embed: true,
            use_channel_attn: true,
            ffn_mult: 4,
            rope_fraction: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |field: &str, msg: &str| Err(Error::config(format!("model.{field}"), msg));
        if self.patch_size == 0 {
            return f("patch_size", "must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return f("n_heads", "must divide d_model");
        }
        if self.horizon == 0 {
            return f("horizon", "must be positive");
        }
        if self.n_layers == 0 {
            return f("n_layers", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.rope_fraction) {
            return f("rope_fraction", "must lie in [0, 1]");
        }
        if self.ffn_mult == 0 {
            return f("ffn_mult", "must be positive");
        }
        if self.use_dyn_embed {
            if self.patch_size + self.n_poly + self.n_rff != self.d_model {
                return f("d_model", "must equal patch_size + n_poly + n_rff");
            }
            if self.n_rff % 2 != 0 {
                return f("n_rff", "must be even (sin and cos halves)");
            }
            if self.n_poly > 0 && self.poly_degrees.is_empty() {
                return f("poly_degrees", "must be nonempty");
            }
            if self.poly_degrees.iter().any(|&d| d < 2) {
                return f("poly_degrees", "degrees must be >= 2");
            }
            if !(self.rff_sigma > 0.0) {
                return f("rff_sigma", "must be positive");
            }
        }
        Ok(())
    }

    fn embed_in(&self) -> usize {
        if self.use_dyn_embed {
            self.patch_size + self.n_poly + self.n_rff
        } else {
            self.patch_size
        }
    }

    fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// A contiguous parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn m<'a>(&self, d: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &d[self.off..self.off + self.len()])
            .expect("slot shape")
    }
    fn m_mut<'a>(&self, d: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut d[self.off..self.off + self.len()])
            .expect("slot shape")
    }
    fn v<'a>(&self, d: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&d[self.off..self.off + self.len()])
    }
    fn v_mut<'a>(&self, d: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut d[self.off..self.off + self.len()])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnSlots {
    pub g: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnSlots {
    pub g: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSlots {
    pub ta: AttnSlots,
    pub ca: AttnSlots,
    pub ffn: FfnSlots,
}

/// Named parameter layout over one flat vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embed_w: Slot,
    pub embed_b: Slot,
    pub layers: Vec<LayerSlots>,
    pub final_g: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
    pub mlm_w: Slot,
    pub mlm_b: Slot,
    pub names: Vec<(String, Slot)>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut off = 0usize;
        let mut take = |name: String, rows: usize, cols: usize| {
            let s = Slot { off, rows, cols };
            off += rows * cols;
            names.push((name, s));
            s
        };
        let d = cfg.d_model;
        let embed_w = take("embed.w".into(), cfg.embed_in(), d);
        let embed_b = take("embed.b".into(), 1, d);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let mut attn = |p: &str| AttnSlots {
                g: take(format!("l{l}.{p}.g"), 1, d),
                wq: take(format!("l{l}.{p}.wq"), d, d),
                wk: take(format!("l{l}.{p}.wk"), d, d),
                wv: take(format!("l{l}.{p}.wv"), d, d),
                wo: take(format!("l{l}.{p}.wo"), d, d),
            };
            let ta = attn("ta");
            let ca = attn("ca");
            let ffn = FfnSlots {
                g: take(format!("l{l}.ffn.g"), 1, d),
                w1: take(format!("l{l}.ffn.w1"), d, cfg.d_ff()),
                b1: take(format!("l{l}.ffn.b1"), 1, cfg.d_ff()),
                w2: take(format!("l{l}.ffn.w2"), cfg.d_ff(), d),
                b2: take(format!("l{l}.ffn.b2"), 1, d),
            };
            layers.push(LayerSlots { ta, ca, ffn });
        }
        let final_g = take("final.g".into(), 1, d);
        let head_w = take("head.w".into(), d, cfg.horizon);
        let head_b = take("head.b".into(), 1, cfg.horizon);
        let mlm_w = take("mlm.w".into(), d, cfg.patch_size);
        let mlm_b = take("mlm.b".into(), 1, cfg.patch_size);
        Layout {
            embed_w,
            embed_b,
            layers,
            final_g,
            head_w,
            head_b,
            mlm_w,
            mlm_b,
            names,
            total: off,
        }
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    /// Slots of the encoder (embedding, layers, final norm): everything
    /// except the two heads.
    pub fn encoder_range(&self) -> std::ops::Range<usize> {
        0..self.head_w.off
    }
}

/// Non-learned feature buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub poly_idx: Vec<Vec<usize>>,
    /// `patch_size × n_rff/2`.
    pub rff_w: Array2<f64>,
    pub rff_b: Array1<f64>,
}

impl Frozen {
    /// The buffers a model built from `cfg` would carry.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self::new(cfg)
    }

    fn new(cfg: &ModelConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "frozen", 0);
        let p = cfg.patch_size;
        let mut poly_idx = Vec::new();
        if cfg.use_dyn_embed && cfg.n_poly > 0 {
            let nd = cfg.poly_degrees.len();
            for i in 0..cfg.n_poly {
                // Even split across degrees, in order.
                let deg = cfg.poly_degrees[(i * nd) / cfg.n_poly];
                poly_idx.push((0..deg).map(|_| r.random_range(0..p)).collect());
            }
        }
        let nf = if cfg.use_dyn_embed { cfg.n_rff / 2 } else { 0 };
        let wdist = Normal::new(0.0, 1.0 / cfg.rff_sigma.max(1e-12)).expect("finite sigma");
        let rff_w = Array2::from_shape_fn((p, nf), |_| wdist.sample(&mut r));
        let rff_b = Array1::from_shape_fn(nf, |_| r.random_range(0.0..2.0 * std::f64::consts::PI));
        Frozen {
            poly_idx,
            rff_w,
            rff_b,
        }
    }
}

/// Standardized, non-overlapping patches (`C × N × P`).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub tokens: Array3<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn channel_stats(x: ArrayView1<f64>, keep: Option<&[bool]>) -> (f64, f64) {
    let vals: Vec<f64> = match keep {
        Some(k) => x.iter().zip(k).filter(|(_, &k)| k).map(|(v, _)| *v).collect(),
        None => x.to_vec(),
    };
    if vals.is_empty() {
        return (0.0, 1.0);
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
    let s = var.sqrt();
    (m, if s > STD_FLOOR { s } else { 1.0 })
}

/// Splits `C × T` into stride-`P` patches after dropping the leading
/// `T mod P` samples, standardizing each channel over what remains.
pub fn patchify(values: &Array2<f64>, p: usize) -> Result<PatchTokens> {
    patchify_masked(values, p, None)
}

/// As [`patchify`], with statistics taken only from unmasked patches.
pub fn patchify_masked(values: &Array2<f64>, p: usize, mask: Option<&Array2<bool>>) -> Result<PatchTokens> {
    let (c, t) = values.dim();
    if p == 0 || t < p {
        return Err(Error::invalid(format!("context of {t} steps is shorter than patch size {p}")));
    }
    let n = t / p;
    let start = t - n * p;
    let used = values.slice(s![.., start..]);
    let mut tokens = Array3::zeros((c, n, p));
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let keep: Option<Vec<bool>> = mask.map(|m| (0..n * p).map(|i| !m[[ch, i / p]]).collect());
        let (mu, sd) = channel_stats(used.row(ch), keep.as_deref());
        for k in 0..n {
            for j in 0..p {
                tokens[[ch, k, j]] = (used[[ch, k * p + j]] - mu) / sd;
            }
        }
        mean.push(mu);
        std.push(sd);
    }
    Ok(PatchTokens { tokens, mean, std })
}

pub fn unpatchify(pt: &PatchTokens) -> Array2<f64> {
    let (c, n, p) = pt.tokens.dim();
    Array2::from_shape_fn((c, n * p), |(ch, i)| pt.tokens[[ch, i / p, i % p]] * pt.std[ch] + pt.mean[ch])
}

/// `[raw | poly | sin | cos]` features, one row per token.
pub fn dynamics_embed(tokens: &Array3<f64>, frozen: &Frozen, cfg: &ModelConfig) -> Array2<f64> {
    let (c, n, p) = tokens.dim();
    let width = cfg.embed_in();
    let mut out = Array2::zeros((c * n, width));
    let nf = frozen.rff_b.len();
    for ch in 0..c {
        for k in 0..n {
            let row_i = ch * n + k;
            let patch = tokens.slice(s![ch, k, ..]);
            let mut row = out.row_mut(row_i);
            for j in 0..p {
                row[j] = patch[j];
            }
            if !cfg.use_dyn_embed {
                continue;
            }
            for (i, idx) in frozen.poly_idx.iter().enumerate() {
                row[p + i] = idx.iter().map(|&j| patch[j]).product();
            }
            let base = p + frozen.poly_idx.len();
            for f in 0..nf {
                let mut a = frozen.rff_b[f];
                for j in 0..p {
                    a += patch[j] * frozen.rff_w[[j, f]];
                }
                row[base + f] = a.sin();
                row[base + nf + f] = a.cos();
            }
        }
    }
    out
}

fn rmsnorm(z: &Array2<f64>, g: ArrayView1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = z.ncols() as f64;
    let r = z.map_axis(Axis(1), |row| (row.iter().map(|v| v * v).sum::<f64>() / d + NORM_EPS).sqrt());
    let mut u = z.clone();
    for (mut row, ri) in u.rows_mut().into_iter().zip(r.iter()) {
        row.zip_mut_with(&g, |a, gi| *a = *a / ri * gi);
    }
    (u, r)
}

/// Backward of `u = g ⊙ z / r`. Accumulates `dg`, returns `dz`.
fn rmsnorm_back(z: &Array2<f64>, r: &Array1<f64>, g: ArrayView1<f64>, du: &Array2<f64>, mut dg: ArrayViewMut1<f64>) -> Array2<f64> {
    let d = z.ncols() as f64;
    let mut dz = Array2::zeros(z.dim());
    for i in 0..z.nrows() {
        let zi = z.row(i);
        let dui = du.row(i);
        let ri = r[i];
        let mut dot = 0.0;
        for j in 0..z.ncols() {
            dg[j] += dui[j] * zi[j] / ri;
            dot += g[j] * dui[j] * zi[j];
        }
        let mut dzi = dz.row_mut(i);
        for j in 0..z.ncols() {
            dzi[j] = g[j] * dui[j] / ri - zi[j] * dot / (d * ri * ri * ri);
        }
    }
    dz
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let tot = row.sum();
        row.mapv_inplace(|v| v / tot);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rotates pairs `(2i, 2i+1)` of every head by `pos * θ_i`, for the
/// `n_rot` highest-frequency pairs. `sign = -1` applies the inverse.
fn rope(x: &mut Array2<f64>, n_heads: usize, n_rot: usize, sign: f64) {
    if n_rot == 0 {
        return;
    }
    let dh = x.ncols() / n_heads;
    for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
        for h in 0..n_heads {
            for i in 0..n_rot {
                let theta = 10_000f64.powf(-2.0 * i as f64 / dh as f64);
                let (sn, cs) = (sign * pos as f64 * theta).sin_cos();
                let a = h * dh + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cs - x1 * sn;
                row[a + 1] = x0 * sn + x1 * cs;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct AttnCache {
    z: Array2<f64>,
    r: Array1<f64>,
    u: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Vec<Array2<f64>>,
    o: Array2<f64>,
}

/// Pre-norm multi-head softmax self-attention with residual over the rows
/// of `z`. No positional information enters.
fn attn_forward(z: &Array2<f64>, sl: &AttnSlots, p: &[f64], n_heads: usize, n_rot: usize) -> (Array2<f64>, AttnCache) {
    let (u, r) = rmsnorm(z, sl.g.v(p));
    let mut q = u.dot(&sl.wq.m(p));
    let mut k = u.dot(&sl.wk.m(p));
    rope(&mut q, n_heads, n_rot, 1.0);
    rope(&mut k, n_heads, n_rot, 1.0);
    let v = u.dot(&sl.wv.m(p));
    let d = z.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros(z.dim());
    let mut a_all = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut sc);
        o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        a_all.push(sc);
    }
    let y = z + &o.dot(&sl.wo.m(p));
    (
        y,
        AttnCache {
            z: z.clone(),
            r,
            u,
            q,
            k,
            v,
            a: a_all,
            o,
        },
    )
}

fn attn_backward(
    c: &AttnCache,
    dy: &Array2<f64>,
    sl: &AttnSlots,
    p: &[f64],
    g: &mut [f64],
    n_heads: usize,
    n_rot: usize,
) -> Array2<f64> {
    let d = c.z.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    sl.wo.m_mut(g).scaled_add(1.0, &c.o.t().dot(dy));
    let d_o = dy.dot(&sl.wo.m(p).t());
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &c.a[h];
        let doh = d_o.slice(cols);
        let da = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        let mut ds = da;
        for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
            let dot: f64 = row.iter().zip(arow.iter()).map(|(x, y)| x * y).sum();
            row.zip_mut_with(&arow, |x, y| *x = y * (*x - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    rope(&mut dq, n_heads, n_rot, -1.0);
    rope(&mut dk, n_heads, n_rot, -1.0);
    sl.wq.m_mut(g).scaled_add(1.0, &c.u.t().dot(&dq));
    sl.wk.m_mut(g).scaled_add(1.0, &c.u.t().dot(&dk));
    sl.wv.m_mut(g).scaled_add(1.0, &c.u.t().dot(&dv));
    let du = dq.dot(&sl.wq.m(p).t()) + dk.dot(&sl.wk.m(p).t()) + dv.dot(&sl.wv.m(p).t());
    let dz = rmsnorm_back(&c.z, &c.r, sl.g.v(p), &du, sl.g.v_mut(g));
    dz + dy
}

#[derive(Debug, Clone)]
struct FfnCache {
    z: Array2<f64>,
    r: Array1<f64>,
    u: Array2<f64>,
    h: Array2<f64>,
    a: Array2<f64>,
}

fn ffn_forward(z: &Array2<f64>, sl: &FfnSlots, p: &[f64]) -> (Array2<f64>, FfnCache) {
    let (u, r) = rmsnorm(z, sl.g.v(p));
    let h = u.dot(&sl.w1.m(p)) + &sl.b1.v(p);
    let a = h.mapv(gelu);
    let y = z + &(a.dot(&sl.w2.m(p)) + &sl.b2.v(p));
    (
        y,
        FfnCache {
            z: z.clone(),
            r,
            u,
            h,
            a,
        },
    )
}

fn ffn_backward(c: &FfnCache, dy: &Array2<f64>, sl: &FfnSlots, p: &[f64], g: &mut [f64]) -> Array2<f64> {
    sl.w2.m_mut(g).scaled_add(1.0, &c.a.t().dot(dy));
    sl.b2.v_mut(g).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let da = dy.dot(&sl.w2.m(p).t());
    let dh = &da * &c.h.mapv(gelu_grad);
    sl.w1.m_mut(g).scaled_add(1.0, &c.u.t().dot(&dh));
    sl.b1.v_mut(g).scaled_add(1.0, &dh.sum_axis(Axis(0)));
    let du = dh.dot(&sl.w1.m(p).t());
    let dz = rmsnorm_back(&c.z, &c.r, sl.g.v(p), &du, sl.g.v_mut(g));
    dz + dy
}

/// Attention weights from one forward pass. `temporal[l][h][c]` is
/// `N × N`; `channel[l][h][n]` is `C × C` (empty when channel attention is
/// off or skipped).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub temporal: Vec<Vec<Vec<Array2<f64>>>>,
    pub channel: Vec<Vec<Vec<Array2<f64>>>>,
}

impl AttentionRecord {
    /// Head- and channel-averaged temporal map of layer `l`.
    pub fn temporal_mean(&self, l: usize) -> Array2<f64> {
        let heads = &self.temporal[l];
        let mut acc = Array2::<f64>::zeros(heads[0][0].dim());
        let mut cnt = 0.0;
        for h in heads {
            for m in h {
                acc += m;
                cnt += 1.0;
            }
        }
        acc / cnt
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ta: Vec<AttnCache>,
    ca: Vec<AttnCache>,
    ffn: FfnCache,
}

#[derive(Debug, Clone)]
pub struct Cache {
    c: usize,
    n: usize,
    feats: Array2<f64>,
    layers: Vec<LayerCache>,
    pre_final: Array2<f64>,
    final_r: Array1<f64>,
    hidden: Array2<f64>,
    pooled: Array2<f64>,
    argmax: Option<Array2<usize>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `(C·N) × d_model`, after the final norm.
    pub hidden: Array2<f64>,
    /// `C × H`, standardized units.
    pub forecast: Array2<f64>,
    /// `(C·N) × P`, standardized units.
    pub mlm: Array2<f64>,
    pub record: Option<AttentionRecord>,
    pub cache: Option<Cache>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub frozen: Frozen,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let frozen = Frozen::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut r = rng::stream(config.seed, "init", 0);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for (name, slot) in &layout.names {
            let last = name.rsplit('.').next().unwrap_or("");
            let std = match last {
                "g" => {
                    slot.v_mut(&mut params).fill(1.0);
                    continue;
                }
                "b" | "b1" | "b2" => continue,
                "wo" | "w2" => out_scale / (slot.rows as f64).sqrt(),
                _ if name.starts_with("head") || name.starts_with("mlm") => 0.02,
                _ => 1.0 / (slot.rows as f64).sqrt(),
            };
            for v in slot.m_mut(&mut params).iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v = std * z;
            }
        }
        Ok(Model {
            config,
            layout,
            params,
            frozen,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn n_rot(&self) -> usize {
        let half = self.config.d_model / self.config.n_heads / 2;
        (self.config.rope_fraction * half as f64).round() as usize
    }

    fn channel_attn_active(&self, c: usize) -> bool {
        // With one channel the block would only rescale the residual path;
        // skipping it keeps the univariate model identical with the flag on.
        self.config.use_channel_attn && c > 1
    }

    /// Encoder plus both heads on standardized patches.
    pub fn forward(&self, tokens: &Array3<f64>, record: bool, keep_cache: bool) -> ForwardOut {
        self.forward_with(&self.params, tokens, record, keep_cache)
    }

    pub fn forward_with(&self, p: &[f64], tokens: &Array3<f64>, record: bool, keep_cache: bool) -> ForwardOut {
        let cfg = &self.config;
        let (c, n, _) = tokens.dim();
        let nh = cfg.n_heads;
        let feats = dynamics_embed(tokens, &self.frozen, cfg);
        let mut x = feats.dot(&self.layout.embed_w.m(p)) + &self.layout.embed_b.v(p);
        let mut rec = AttentionRecord::default();
        let mut caches = Vec::new();
        for ls in &self.layout.layers {
            let mut ta_c = Vec::new();
            let mut t_rec = vec![Vec::new(); if record { nh } else { 0 }];
            for ch in 0..c {
                let rows = s![ch * n..(ch + 1) * n, ..];
                let (y, cache) = attn_forward(&x.slice(rows).to_owned(), &ls.ta, p, nh, self.n_rot());
                x.slice_mut(rows).assign(&y);
                if record {
                    for (h, a) in cache.a.iter().enumerate() {
                        t_rec[h].push(a.clone());
                    }
                }
                if keep_cache {
                    ta_c.push(cache);
                }
            }
            let mut ca_c = Vec::new();
            let mut c_rec = vec![Vec::new(); if record && self.channel_attn_active(c) { nh } else { 0 }];
            if self.channel_attn_active(c) {
                for k in 0..n {
                    let idx: Vec<usize> = (0..c).map(|ch| ch * n + k).collect();
                    let z = x.select(Axis(0), &idx);
                    let (y, cache) = attn_forward(&z, &ls.ca, p, nh, 0);
                    for (i, &row) in idx.iter().enumerate() {
                        x.row_mut(row).assign(&y.row(i));
                    }
                    if record {
                        for (h, a) in cache.a.iter().enumerate() {
                            c_rec[h].push(a.clone());
                        }
                    }
                    if keep_cache {
                        ca_c.push(cache);
                    }
                }
            }
            let (y, fc) = ffn_forward(&x, &ls.ffn, p);
            x = y;
            if record {
                rec.temporal.push(t_rec);
                rec.channel.push(c_rec);
            }
            if keep_cache {
                caches.push(LayerCache {
                    ta: ta_c,
                    ca: ca_c,
                    ffn: fc,
                });
            }
        }
        let (hidden, final_r) = rmsnorm(&x, self.layout.final_g.v(p));
        let d = cfg.d_model;
        let mut pooled = Array2::zeros((c, d));
        let mut argmax = None;
        match cfg.pooling {
            Pooling::Mean => {
                for ch in 0..c {
                    pooled
                        .row_mut(ch)
                        .assign(&hidden.slice(s![ch * n..(ch + 1) * n, ..]).mean_axis(Axis(0)).expect("n > 0"));
                }
            }
            Pooling::Max => {
                let mut am = Array2::zeros((c, d));
                for ch in 0..c {
                    for j in 0..d {
                        let mut best = (0usize, f64::NEG_INFINITY);
                        for k in 0..n {
                            let v = hidden[[ch * n + k, j]];
                            if v > best.1 {
                                best = (k, v);
                            }
                        }
                        pooled[[ch, j]] = best.1;
                        am[[ch, j]] = best.0;
                    }
                }
                argmax = Some(am);
            }
        }
        let forecast = pooled.dot(&self.layout.head_w.m(p)) + &self.layout.head_b.v(p);
        let mlm = hidden.dot(&self.layout.mlm_w.m(p)) + &self.layout.mlm_b.v(p);
        let cache = keep_cache.then(|| Cache {
            c,
            n,
            feats,
            layers: caches,
            pre_final: x,
            final_r,
            hidden: hidden.clone(),
            pooled,
            argmax,
        });
        ForwardOut {
            hidden,
            forecast,
            mlm,
            record: record.then_some(rec),
            cache,
        }
    }

    /// Accumulates parameter gradients into `g` given output gradients.
    pub fn backward(&self, cache: &Cache, d_forecast: Option<&Array2<f64>>, d_mlm: Option<&Array2<f64>>, g: &mut [f64]) {
        self.backward_with(&self.params, cache, d_forecast, d_mlm, g)
    }

    pub fn backward_with(
        &self,
        p: &[f64],
        cache: &Cache,
        d_forecast: Option<&Array2<f64>>,
        d_mlm: Option<&Array2<f64>>,
        g: &mut [f64],
    ) {
        let cfg = &self.config;
        let lay = &self.layout;
        let (c, n) = (cache.c, cache.n);
        let d = cfg.d_model;
        let mut dh = Array2::zeros((c * n, d));
        if let Some(df) = d_forecast {
            lay.head_w.m_mut(g).scaled_add(1.0, &cache.pooled.t().dot(df));
            lay.head_b.v_mut(g).scaled_add(1.0, &df.sum_axis(Axis(0)));
            let dpool = df.dot(&lay.head_w.m(p).t());
            match (&cfg.pooling, &cache.argmax) {
                (Pooling::Max, Some(am)) => {
                    for ch in 0..c {
                        for j in 0..d {
                            dh[[ch * n + am[[ch, j]], j]] += dpool[[ch, j]];
                        }
                    }
                }
                _ => {
                    for ch in 0..c {
                        for k in 0..n {
                            let mut row = dh.row_mut(ch * n + k);
                            row.scaled_add(1.0 / n as f64, &dpool.row(ch));
                        }
                    }
                }
            }
        }
        if let Some(dm) = d_mlm {
            lay.mlm_w.m_mut(g).scaled_add(1.0, &cache.hidden.t().dot(dm));
            lay.mlm_b.v_mut(g).scaled_add(1.0, &dm.sum_axis(Axis(0)));
            dh += &dm.dot(&lay.mlm_w.m(p).t());
        }
        let mut dx = rmsnorm_back(&cache.pre_final, &cache.final_r, lay.final_g.v(p), &dh, lay.final_g.v_mut(g));
        for (ls, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = ffn_backward(&lc.ffn, &dx, &ls.ffn, p, g);
            if !lc.ca.is_empty() {
                for (k, ac) in lc.ca.iter().enumerate() {
                    let idx: Vec<usize> = (0..c).map(|ch| ch * n + k).collect();
                    let dy = dx.select(Axis(0), &idx);
                    let dz = attn_backward(ac, &dy, &ls.ca, p, g, cfg.n_heads, 0);
                    for (i, &row) in idx.iter().enumerate() {
                        dx.row_mut(row).assign(&dz.row(i));
                    }
                }
            }
            for (ch, ac) in lc.ta.iter().enumerate() {
                let rows = s![ch * n..(ch + 1) * n, ..];
                let dy = dx.slice(rows).to_owned();
                let dz = attn_backward(ac, &dy, &ls.ta, p, g, cfg.n_heads, self.n_rot());
                dx.slice_mut(rows).assign(&dz);
            }
        }
        lay.embed_w.m_mut(g).scaled_add(1.0, &cache.feats.t().dot(&dx));
        lay.embed_b.v_mut(g).scaled_add(1.0, &dx.sum_axis(Axis(0)));
    }

    /// Forecast of the next `H` steps in original units.
    pub fn forecast(&self, context: &Array2<f64>) -> Result<Array2<f64>> {
        let pt = patchify(context, self.config.patch_size)?;
        let out = self.forward(&pt.tokens, false, false);
        Ok(destandardize(&out.forecast, &pt))
    }

    /// Forecast MSE in standardized units; gradients are added to `g`.
    pub fn forecast_loss(&self, context: &Array2<f64>, target: &Array2<f64>, g: Option<&mut [f64]>) -> Result<f64> {
        self.forecast_loss_with(&self.params, context, target, g)
    }

    pub fn forecast_loss_with(&self, p: &[f64], context: &Array2<f64>, target: &Array2<f64>, g: Option<&mut [f64]>) -> Result<f64> {
        let h = self.config.horizon;
        if target.nrows() != context.nrows() || target.ncols() < h {
            return Err(Error::invalid("target must have the context's channels and >= H steps"));
        }
        let pt = patchify(context, self.config.patch_size)?;
        let out = self.forward_with(p, &pt.tokens, false, g.is_some());
        let tgt = standardize(&target.slice(s![.., ..h]).to_owned(), &pt);
        let diff = &out.forecast - &tgt;
        let m = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / m;
        if let Some(g) = g {
            let df = diff * (2.0 / m);
            self.backward_with(p, out.cache.as_ref().expect("cache"), Some(&df), None, g);
        }
        Ok(loss)
    }

    /// Masked-patch MSE (standardized units) with `mask` of shape `C × N`.
    /// Masked input patches are zeroed; statistics use unmasked values.
    pub fn mlm_loss(&self, context: &Array2<f64>, mask: &Array2<bool>, g: Option<&mut [f64]>) -> Result<f64> {
        self.mlm_loss_with(&self.params, context, mask, g)
    }

    pub fn mlm_loss_with(&self, p: &[f64], context: &Array2<f64>, mask: &Array2<bool>, g: Option<&mut [f64]>) -> Result<f64> {
        let pt = patchify_masked(context, self.config.patch_size, Some(mask))?;
        let (c, n, _) = pt.tokens.dim();
        if mask.dim() != (c, n) {
            return Err(Error::invalid("mask shape must be channels × patches"));
        }
        self.mlm_loss_tokens(p, &masked_input(&pt.tokens, mask), &pt.tokens, mask, g)
    }

    /// Masked MSE between the MLM head on `input` and `target`, both
    /// standardized `C × N × P`. Only masked positions of `target` are read.
    pub fn mlm_loss_tokens(
        &self,
        p: &[f64],
        input: &Array3<f64>,
        target: &Array3<f64>,
        mask: &Array2<bool>,
        g: Option<&mut [f64]>,
    ) -> Result<f64> {
        let (c, n, ps) = target.dim();
        if input.dim() != target.dim() || mask.dim() != (c, n) {
            return Err(Error::invalid("input, target and mask shapes disagree"));
        }
        let out = self.forward_with(p, input, false, g.is_some());
        let mut dm = Array2::zeros((c * n, ps));
        let mut count = 0usize;
        let mut loss = 0.0;
        for ((ch, k), _) in mask.indexed_iter().filter(|(_, &m)| m) {
            for j in 0..ps {
                let e = out.mlm[[ch * n + k, j]] - target[[ch, k, j]];
                loss += e * e;
                dm[[ch * n + k, j]] = e;
            }
            count += ps;
        }
        if count == 0 {
            return Ok(0.0);
        }
        let m = count as f64;
        if let Some(g) = g {
            dm *= 2.0 / m;
            self.backward_with(p, out.cache.as_ref().expect("cache"), None, Some(&dm), g);
        }
        Ok(loss / m)
    }

    /// Patches with masked positions replaced by the MLM head's output, in
    /// original units (`C × N·P`, leading remainder dropped).
    pub fn mlm_infill(&self, context: &Array2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
        let pt = patchify_masked(context, self.config.patch_size, Some(mask))?;
        let (c, n, ps) = pt.tokens.dim();
        let out = self.forward(&masked_input(&pt.tokens, mask), false, false);
        let mut filled = pt.clone();
        for ch in 0..c {
            for k in 0..n {
                if mask[[ch, k]] {
                    for j in 0..ps {
                        filled.tokens[[ch, k, j]] = out.mlm[[ch * n + k, j]];
                    }
                }
            }
        }
        Ok(unpatchify(&filled))
    }
}

pub fn masked_input(tokens: &Array3<f64>, mask: &Array2<bool>) -> Array3<f64> {
    let mut input = tokens.clone();
    for ((ch, k), &m) in mask.indexed_iter() {
        if m {
            input.slice_mut(s![ch, k, ..]).fill(0.0);
        }
    }
    input
}

pub fn standardize(x: &Array2<f64>, pt: &PatchTokens) -> Array2<f64> {
    let mut out = x.clone();
    for (ch, mut row) in out.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| (v - pt.mean[ch]) / pt.std[ch]);
    }
    out
}

pub fn destandardize(x: &Array2<f64>, pt: &PatchTokens) -> Array2<f64> {
    let mut out = x.clone();
    for (ch, mut row) in out.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * pt.std[ch] + pt.mean[ch]);
    }
    out
}

/// Standalone temporal attention block of layer `l` on one channel's tokens.
pub fn temporal_attention(model: &Model, l: usize, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (y, c) = attn_forward(x, &model.layout.layers[l].ta, &model.params, model.config.n_heads, model.n_rot());
    (y, c.a)
}

/// Standalone channel attention block of layer `l` on one patch's tokens
/// (rows are channels).
pub fn channel_attention(model: &Model, l: usize, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (y, c) = attn_forward(x, &model.layout.layers[l].ca, &model.params, model.config.n_heads, 0);
    (y, c.a)
}

/// Mean of squared differences.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid("prediction and target shapes differ"));
    }
    let d = pred - target;
    Ok(d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PNDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    metadata: BTreeMap<String, String>,
    n_params: usize,
    poly_idx: Vec<Vec<usize>>,
    n_rff_freq: usize,
}

/// A model plus free-form metadata (training corpus, seeds, task).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = CheckpointHeader {
            config: m.config.clone(),
            metadata: self.metadata.clone(),
            n_params: m.params.len(),
            poly_idx: m.frozen.poly_idx.clone(),
            n_rff_freq: m.frozen.rff_b.len(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        buf.extend_from_slice(&hjson);
        for v in m.params.iter().chain(m.frozen.rff_w.iter()).chain(m.frozen.rff_b.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, detail: &str| Error::Format {
            offset: offset as u64,
            detail: detail.into(),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt(12, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| fmt(20, &e.to_string()))?;
        let mut model = Model::new(header.config.clone())?;
        let p = header.config.patch_size;
        let nf = header.n_rff_freq;
        let need = header.n_params + p * nf + nf;
        if header.n_params != model.params.len() {
            return Err(fmt(20, "parameter count does not match config"));
        }
        if bytes.len() != hend + need * 8 {
            return Err(fmt(bytes.len().min(hend + need * 8), "payload length mismatch"));
        }
        let vals: Vec<f64> = bytes[hend..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(fmt(hend + 8 * i, "non-finite value"));
        }
        model.params.copy_from_slice(&vals[..header.n_params]);
        model.frozen.poly_idx = header.poly_idx;
        model.frozen.rff_w = Array2::from_shape_vec((p, nf), vals[header.n_params..header.n_params + p * nf].to_vec())
            .map_err(|e| fmt(hend, &e.to_string()))?;
        model.frozen.rff_b = Array1::from(vals[header.n_params + p * nf..].to_vec());
        Ok(Checkpoint {
            model,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch_size: 8,
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            horizon: 4,
            n_poly: 12,
            n_rff: 12,
            ffn_mult: 2,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_composition_enforced() {
        let mut c = tiny();
        c.n_poly = 11;
        assert!(c.validate().is_err());
        c.use_dyn_embed = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn patch_count_and_roundtrip() {
        let x = Array2::from_shape_fn((2, 512), |(c, t)| (t as f64 * 0.05 + c as f64).sin() * 3.0 + 1.0);
        let pt = patchify(&x, 16).unwrap();
        assert_eq!(pt.tokens.dim(), (2, 32, 16));
        let back = unpatchify(&pt);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_patch_features() {
        let cfg = tiny();
        let m = Model::new(cfg.clone()).unwrap();
        let f = dynamics_embed(&Array3::zeros((1, 1, 8)), &m.frozen, &cfg);
        let nf = 6;
        for i in 0..12 {
            assert_eq!(f[[0, 8 + i]], 0.0);
        }
        for k in 0..nf {
            assert_eq!(f[[0, 20 + k]], m.frozen.rff_b[k].sin());
            assert_eq!(f[[0, 20 + nf + k]], m.frozen.rff_b[k].cos());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = Model::new(tiny()).unwrap();
        let ck = Checkpoint {
            model: m.clone(),
            metadata: BTreeMap::from([("corpus".into(), "ode".into())]),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.params, m.params);
        assert_eq!(back.model.frozen, m.frozen);
        assert_eq!(back.metadata, ck.metadata);
    }
}
