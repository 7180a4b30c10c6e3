//! Attention rollout, row entropy, the two-tone probe, and cross-channel
//! mixing maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dynamics_embed, patchify, AttentionRecord, Model};

const STOCHASTIC_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RolloutOptions {
    /// Use `(A + I) / 2` per layer instead of `A`.
    pub residual: bool,
}

/// Product of head-averaged temporal attention over layers for one channel,
/// `A_1 A_2 ⋯ A_L`.
pub fn attention_rollout(rec: &AttentionRecord, channel: usize, opts: RolloutOptions) -> Result<Array2<f64>> {
    if rec.temporal.is_empty() {
        return Err(Error::invalid("empty attention record"));
    }
    let mut acc: Option<Array2<f64>> = None;
    for layer in &rec.temporal {
        let heads: Vec<&Array2<f64>> = layer
            .iter()
            .map(|h| h.get(channel).ok_or_else(|| Error::invalid(format!("channel {channel} not recorded"))))
            .collect::<Result<_>>()?;
        let mut a = heads[0].clone();
        for h in &heads[1..] {
            a += *h;
        }
        a /= heads.len() as f64;
        if opts.residual {
            let n = a.nrows();
            a = (a + Array2::<f64>::eye(n)) * 0.5;
        }
        acc = Some(match acc {
            None => a,
            Some(prev) => prev.dot(&a),
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Mean Shannon entropy (nats) of the rows.
pub fn mean_row_entropy(m: ArrayView2<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    let mut tot = 0.0;
    for (i, row) in m.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < -STOCHASTIC_TOL) {
            return Err(Error::invalid(format!("row {i} is not stochastic (sum {sum})")));
        }
        tot -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(tot / m.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_grid: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub t_len: usize,
    /// Sampling interval of the sinusoids.
    pub dt: f64,
    pub residual_rollout: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_grid: 32,
            f_min: 2.0 * std::f64::consts::PI,
            f_max: 5.0 * std::f64::consts::PI,
            t_len: 512,
            dt: 0.01,
            residual_rollout: false,
        }
    }
}

impl ProbeConfig {
    pub fn grid(&self) -> Vec<f64> {
        if self.n_grid == 1 {
            return vec![self.f_min];
        }
        (0..self.n_grid)
            .map(|i| self.f_min + (self.f_max - self.f_min) * i as f64 / (self.n_grid - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub f_grid: Vec<f64>,
    /// `values[a][b]` is the response at `(f_grid[a], f_grid[b])`.
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.f_grid.len();
        let mut v = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    v.push(self.values[a][b]);
                }
            }
        }
        v
    }

    pub fn off_diagonal_variance(&self) -> f64 {
        let v = self.off_diagonal();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    /// Variance left after removing row and column effects, i.e. the
    /// non-additive part of the response.
    pub fn interaction_variance(&self) -> f64 {
        let n = self.f_grid.len();
        let grand: f64 = self.values.iter().flatten().sum::<f64>() / (n * n) as f64;
        let row: Vec<f64> = self.values.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let col: Vec<f64> = (0..n).map(|b| (0..n).map(|a| self.values[a][b]).sum::<f64>() / n as f64).collect();
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                acc += (self.values[a][b] - row[a] - col[b] + grand).powi(2);
            }
        }
        acc / (n * n) as f64
    }

    pub fn to_csv(&self) -> String {
        self.values
            .iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Response at one frequency pair: entropy of each channel's rollout,
/// averaged over the two channels.
pub fn probe_cell(model: &Model, f1: f64, f2: f64, cfg: &ProbeConfig) -> Result<f64> {
    let x = Array2::from_shape_fn((2, cfg.t_len), |(c, t)| {
        let f = if c == 0 { f1 } else { f2 };
        (f * t as f64 * cfg.dt).sin()
    });
    let pt = patchify(&x, model.config.patch_size)?;
    let out = model.forward(&pt.tokens, true, false);
    let rec = out.record.expect("recorded");
    let opts = RolloutOptions {
        residual: cfg.residual_rollout,
    };
    let mut tot = 0.0;
    for c in 0..2 {
        tot += mean_row_entropy(attention_rollout(&rec, c, opts)?.view())?;
    }
    Ok(tot / 2.0)
}

pub fn two_tone_probe(model: &Model, cfg: &ProbeConfig) -> Result<Heatmap> {
    let grid = cfg.grid();
    let lo = 2.0 * std::f64::consts::PI - 1e-9;
    let hi = 5.0 * std::f64::consts::PI + 1e-9;
    if grid.iter().any(|f| *f < lo || *f > hi) {
        return Err(Error::config("probe.f_grid", "frequencies must lie in [2π, 5π]"));
    }
    let n = grid.len();
    let cells: Vec<Result<f64>> = (0..n * n)
        .into_par_iter()
        .map(|k| probe_cell(model, grid[k / n], grid[k % n], cfg))
        .collect();
    let mut values = vec![vec![0.0; n]; n];
    for (k, v) in cells.into_iter().enumerate() {
        values[k / n][k % n] = v?;
    }
    Ok(Heatmap { f_grid: grid, values })
}

/// CSV matrix plus a JSON header describing the grid and checkpoint.
pub fn write_heatmap(dir: &Path, stem: &str, h: &Heatmap, checkpoint_id: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::File::create(dir.join(format!("{stem}.csv")))?.write_all(h.to_csv().as_bytes())?;
    let header = serde_json::json!({
        "f_grid": h.f_grid,
        "rows": "f1",
        "cols": "f2",
        "checkpoint": checkpoint_id,
    });
    fs::File::create(dir.join(format!("{stem}.json")))?.write_all(serde_json::to_string_pretty(&header)?.as_bytes())?;
    Ok(())
}

/// Layer-0 inputs for a context: embedded patches, rows `c * N + n`.
pub fn embedded_patches(model: &Model, context: &Array2<f64>) -> Result<Array2<f64>> {
    let pt = patchify(context, model.config.patch_size)?;
    let f = dynamics_embed(&pt.tokens, &model.frozen, &model.config);
    let l = &model.layout;
    let w = ArrayView2::from_shape(
        (l.embed_w.rows, l.embed_w.cols),
        &model.params[l.embed_w.off..l.embed_w.off + l.embed_w.len()],
    )
    .expect("slot");
    let b = ndarray::ArrayView1::from(&model.params[l.embed_b.off..l.embed_b.off + l.embed_b.len()]);
    Ok(f.dot(&w) + &b)
}

/// Projections of one layer used by the linear-attention analysis.
#[derive(Debug, Clone)]
pub struct MixingProjections {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub ca_wq: Array2<f64>,
    pub ca_wk: Array2<f64>,
}

impl MixingProjections {
    pub fn of(model: &Model, layer: usize) -> Result<Self> {
        if !model.config.use_channel_attn {
            return Err(Error::UnsupportedConfig("model has no channel attention".into()));
        }
        let ls = model
            .layout
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        let m = |s: crate::model::Slot| {
            ArrayView2::from_shape((s.rows, s.cols), &model.params[s.off..s.off + s.len()])
                .expect("slot")
                .to_owned()
        };
        Ok(Self {
            wq: m(ls.ta.wq),
            wk: m(ls.ta.wk),
            wv: m(ls.ta.wv),
            ca_wq: m(ls.ca.wq),
            ca_wk: m(ls.ca.wk),
        })
    }

    /// `W_V (W̄_Q W̄_Kᵀ) W_Vᵀ`.
    pub fn a_ca_tilde(&self) -> Array2<f64> {
        self.wv.dot(&self.ca_wq).dot(&self.ca_wk.t()).dot(&self.wv.t())
    }
}

fn channel_rows(emb: &Array2<f64>, n: usize, c: usize) -> Array2<f64> {
    emb.slice(s![c * n..(c + 1) * n, ..]).to_owned()
}

/// Unscaled `N × N` map with entries `⟨p_j^(k), Ã p_j'^(l)⟩`.
pub fn mixing_map_raw(proj: &MixingProjections, emb: &Array2<f64>, n: usize, k: usize, l: usize) -> Array2<f64> {
    let pk = channel_rows(emb, n, k);
    let pl = channel_rows(emb, n, l);
    pk.dot(&proj.a_ca_tilde()).dot(&pl.t())
}

/// Divides by the largest magnitude; an all-zero map stays zero.
pub fn max_abs_scale(m: &Array2<f64>) -> Array2<f64> {
    let mx = m.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if mx == 0.0 {
        return Array2::zeros(m.dim());
    }
    m / mx
}

/// Scaled cross-channel mixing map of channels `k`, `l` at `layer`, with
/// embeddings `emb` (rows `c * n + patch`).
pub fn cross_channel_mixing_map(model: &Model, emb: &Array2<f64>, n: usize, k: usize, l: usize, layer: usize) -> Result<Array2<f64>> {
    let proj = MixingProjections::of(model, layer)?;
    let c = emb.nrows() / n.max(1);
    if k >= c || l >= c {
        return Err(Error::invalid("channel index out of range"));
    }
    Ok(max_abs_scale(&mixing_map_raw(&proj, emb, n, k, l)))
}

/// `M_i^{kl}` through the map: `p_TA^(k)ᵀ G p_TA^(l)`.
pub fn mixing_element_matrix_form(proj: &MixingProjections, emb: &Array2<f64>, n: usize, k: usize, l: usize, i: usize) -> f64 {
    let g = mixing_map_raw(proj, emb, n, k, l);
    let a_ta = proj.wq.dot(&proj.wk.t());
    let pta = |c: usize| {
        let p = channel_rows(emb, n, c);
        p.dot(&a_ta.t()).dot(&p.row(i))
    };
    pta(k).dot(&g.dot(&pta(l)))
}

/// `M_i^{kl}` by the nested sums: linear temporal attention outputs `φ`,
/// then the channel bilinear form.
pub fn mixing_element_summation(proj: &MixingProjections, emb: &Array2<f64>, n: usize, k: usize, l: usize, i: usize) -> f64 {
    let d = emb.ncols();
    let phi = |c: usize| {
        let mut out = vec![0.0; d];
        let pi = emb.row(c * n + i);
        for j in 0..n {
            let pj = emb.row(c * n + j);
            let q = proj.wq.t().dot(&pi);
            let kk = proj.wk.t().dot(&pj);
            let w = q.dot(&kk);
            let v = proj.wv.t().dot(&pj);
            for a in 0..d {
                out[a] += w * v[a];
            }
        }
        ndarray::Array1::from(out)
    };
    let (fk, fl) = (phi(k), phi(l));
    proj.ca_wq.t().dot(&fk).dot(&proj.ca_wk.t().dot(&fl))
}
