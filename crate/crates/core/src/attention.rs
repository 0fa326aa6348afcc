//! Dense softmax attention and the sampled top-u sparse variant.
//!
//! Matrices are rank-2 tensors: `Q` is `[L_Q, d]`, `K` is `[L_K, d]`, `V` is
//! `[L_K, d_v]`. Scores are `q·k/√d`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::numerics::{gemm, Layout, Tensor};

/// Budget parameters for [`pro_attention`].
///
/// With `n = ln L_Q`, the selected-query count is `u = ceil(c·n)` and the
/// total sampled-score budget is `U = ceil(L_K·n)`. The budget is spread over
/// the queries so that every query gets `floor` or `ceil` of `U/L_Q` keys and
/// the total is exactly `max(U, L_Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub c: f64,
    pub rng_seed: u64,
    /// Replaces `u` when set.
    pub selected: Option<usize>,
    /// Replaces the per-query sample size when set.
    pub samples: Option<usize>,
}

impl AttentionConfig {
    pub fn new(c: f64, rng_seed: u64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            bail!(Config, "sampling factor must be positive, got {c}");
        }
        Ok(Self {
            c,
            rng_seed,
            selected: None,
            samples: None,
        })
    }

    /// Every query selected and every key sampled.
    pub fn dense(rng_seed: u64) -> Self {
        Self {
            c: 1.0,
            rng_seed,
            selected: Some(usize::MAX),
            samples: Some(usize::MAX),
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    /// `u` before clamping to `L_Q` (at least 1).
    pub fn raw_selected_count(&self, lq: usize) -> usize {
        self.selected
            .unwrap_or_else(|| (self.c * (lq as f64).ln()).ceil() as usize)
            .max(1)
    }

    /// `(u, clamped)` with `u ≤ L_Q`.
    pub fn selected_count(&self, lq: usize) -> (usize, bool) {
        let raw = self.raw_selected_count(lq);
        (raw.min(lq), raw > lq)
    }

    /// `U = ceil(L_K · ln L_Q)`.
    pub fn sample_budget(&self, lq: usize, lk: usize) -> usize {
        (lk as f64 * (lq as f64).ln()).ceil() as usize
    }

    /// Keys sampled for each query; each entry lies in `1..=L_K`.
    pub fn samples_per_query(&self, lq: usize, lk: usize) -> Vec<usize> {
        if let Some(s) = self.samples {
            return vec![s.clamp(1, lk); lq];
        }
        let total = self.sample_budget(lq, lk).max(lq).min(lq * lk);
        let (base, extra) = (total / lq, total % lq);
        (0..lq).map(|i| base + usize::from(i < extra)).collect()
    }
}

/// Diagnostics from one [`pro_attention`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    /// Sampled max-mean measure of every query.
    pub measures: Vec<f64>,
    /// Indices of the selected queries, ascending.
    pub selected: Vec<usize>,
    pub dot_products_used: u64,
    /// True when the configured `u` exceeded `L_Q`.
    pub clamped: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (&[lq, d], &[lk, dk], &[lv, dv]) = (q.shape(), k.shape(), v.shape()) else {
        bail!(
            Dimension,
            "attention takes rank-2 Q, K, V; got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        );
    };
    if d != dk {
        bail!(Dimension, "Q has width {d} but K has width {dk}");
    }
    if lk != lv {
        bail!(Dimension, "K has {lk} rows but V has {lv}");
    }
    Ok((lq, lk, d, dv))
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in row.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in row.iter_mut() {
        *s /= total;
    }
}

/// Rows of `Q` processed per block by [`full_attention`].
const DENSE_BLOCK: usize = 256;

/// `softmax(QKᵀ/√d) V`.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (lq, lk, d, dv) = check_shapes(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; lq * dv];
    let mut scores = vec![0.0; DENSE_BLOCK.min(lq) * lk];
    for start in (0..lq).step_by(DENSE_BLOCK) {
        let rows = DENSE_BLOCK.min(lq - start);
        let s = &mut scores[..rows * lk];
        gemm(
            rows,
            d,
            lk,
            &q.data()[start * d..(start + rows) * d],
            Layout::Normal,
            k.data(),
            Layout::Transposed,
            s,
            false,
        );
        for row in s.chunks_mut(lk) {
            row.iter_mut().for_each(|x| *x *= scale);
            softmax_in_place(row);
        }
        gemm(
            rows,
            lk,
            dv,
            s,
            Layout::Normal,
            v.data(),
            Layout::Normal,
            &mut out[start * dv..(start + rows) * dv],
            false,
        );
    }
    Tensor::new(vec![lq, dv], out)
}

/// Log-sum-exp of the scaled scores of `q` against every row of `k`, minus
/// their arithmetic mean.
pub fn exact_sparsity_measure(q: &[f64], k: &Tensor) -> Result<f64> {
    let scores = scaled_scores(q, k)?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Max minus mean of the scaled scores of `q` against the rows of
/// `k_sampled`.
pub fn max_mean_measure(q: &[f64], k_sampled: &Tensor) -> Result<f64> {
    Ok(max_mean(&scaled_scores(q, k_sampled)?))
}

fn max_mean(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max - scores.iter().sum::<f64>() / scores.len() as f64
}

fn scaled_scores(q: &[f64], k: &Tensor) -> Result<Vec<f64>> {
    let &[lk, d] = k.shape() else {
        bail!(Dimension, "keys must be rank 2, got {:?}", k.shape());
    };
    if lk == 0 {
        bail!(Contract, "measure needs at least one key");
    }
    if q.len() != d {
        bail!(Dimension, "query has width {} but keys have width {d}", q.len());
    }
    let scale = 1.0 / (d as f64).sqrt();
    Ok(k.data().chunks(d).map(|row| dot(q, row) * scale).collect())
}

/// Sampled key indices per query. Depends only on the seed and the shapes.
pub(crate) fn draw_samples(cfg: &AttentionConfig, lq: usize, lk: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    cfg.samples_per_query(lq, lk)
        .into_iter()
        .map(|s| {
            if s == lk {
                (0..lk).collect()
            } else {
                rand::seq::index::sample(&mut rng, lk, s).into_vec()
            }
        })
        .collect()
}

/// Indices of the `u` largest values, lowest index first on ties, returned
/// in ascending order.
pub(crate) fn top_u(measures: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..measures.len()).collect();
    order.sort_by(|&a, &b| measures[b].total_cmp(&measures[a]).then(a.cmp(&b)));
    let mut chosen = order[..u].to_vec();
    chosen.sort_unstable();
    chosen
}

/// The query-side work of one sparse attention call on contiguous
/// row-major buffers.
pub(crate) struct SparsePlan {
    pub measures: Vec<f64>,
    pub selected: Vec<usize>,
    /// Softmax weights over all keys, one row per selected query.
    pub probs: Vec<Vec<f64>>,
    pub dot_products: u64,
}

pub(crate) fn plan_sparse(
    q: &[f64],
    k: &[f64],
    d: usize,
    samples: &[Vec<usize>],
    u: usize,
) -> SparsePlan {
    let lk = k.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dots = 0u64;
    let sampled: Vec<Vec<f64>> = samples
        .iter()
        .enumerate()
        .map(|(i, keys)| {
            dots += keys.len() as u64;
            let qi = &q[i * d..(i + 1) * d];
            keys.iter().map(|&j| dot(qi, &k[j * d..(j + 1) * d]) * scale).collect()
        })
        .collect();
    let measures: Vec<f64> = sampled.iter().map(|s| max_mean(s)).collect();
    let selected = top_u(&measures, u);
    let mut probs = Vec::with_capacity(selected.len());
    let mut known = vec![false; lk];
    for &i in &selected {
        let qi = &q[i * d..(i + 1) * d];
        let mut row = vec![0.0; lk];
        known.fill(false);
        for (&j, &s) in samples[i].iter().zip(&sampled[i]) {
            row[j] = s;
            known[j] = true;
        }
        for j in 0..lk {
            if !known[j] {
                row[j] = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                dots += 1;
            }
        }
        softmax_in_place(&mut row);
        probs.push(row);
    }
    SparsePlan {
        measures,
        selected,
        probs,
        dot_products: dots,
    }
}

/// Column means of a row-major `rows × cols` buffer.
pub(crate) fn column_mean(v: &[f64], cols: usize) -> Vec<f64> {
    let rows = v.len() / cols;
    let mut mean = vec![0.0; cols];
    for row in v.chunks(cols) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    mean
}

/// Writes the sparse attention output for one plan into `out`
/// (`L_Q × d_v`, row-major).
pub(crate) fn fill_output(plan: &SparsePlan, v: &[f64], dv: usize, out: &mut [f64]) {
    let mean = column_mean(v, dv);
    for row in out.chunks_mut(dv) {
        row.copy_from_slice(&mean);
    }
    for (&i, p) in plan.selected.iter().zip(&plan.probs) {
        let row = &mut out[i * dv..(i + 1) * dv];
        row.fill(0.0);
        for (j, &w) in p.iter().enumerate() {
            for (o, x) in row.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += w * x;
            }
        }
    }
}

/// Sparse attention: every query is scored by the max-mean measure over a
/// random key sample, the top-u queries receive exact attention over all
/// keys, and the rest receive the column mean of `V`.
pub fn pro_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, SparsityReport)> {
    let (lq, lk, d, dv) = check_shapes(q, k, v)?;
    let (u, clamped) = cfg.selected_count(lq);
    let samples = draw_samples(cfg, lq, lk);
    let plan = plan_sparse(q.data(), k.data(), d, &samples, u);
    let mut out = vec![0.0; lq * dv];
    fill_output(&plan, v.data(), dv, &mut out);
    let report = SparsityReport {
        measures: plan.measures,
        selected: plan.selected,
        dot_products_used: plan.dot_products,
        clamped,
    };
    Ok((Tensor::new(vec![lq, dv], out)?, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dense,
    Pro,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Pro => "pro",
        }
    }
}

/// One row of the scaling benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub length: usize,
    pub method: Method,
    pub dot_products: u64,
    pub wall_time_ns: u128,
    pub seed: u64,
}

/// Runs one attention method at each length with `L_Q = L_K = L` and
/// Gaussian inputs of width `d`.
pub fn complexity_probe(
    lengths: &[usize],
    d: usize,
    method: Method,
    cfg: &AttentionConfig,
) -> Result<Vec<ProbeRow>> {
    if d == 0 {
        bail!(Config, "head width must be positive");
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &l in lengths {
        if l == 0 {
            bail!(Config, "probe lengths must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ l as u64);
        let q = Tensor::randn(vec![l, d], &mut rng);
        let k = Tensor::randn(vec![l, d], &mut rng);
        let v = Tensor::randn(vec![l, d], &mut rng);
        let start = Instant::now();
        let dot_products = match method {
            Method::Dense => {
                std::hint::black_box(full_attention(&q, &k, &v)?);
                (l * l) as u64
            }
            Method::Pro => pro_attention(&q, &k, &v, cfg)?.1.dot_products_used,
        };
        rows.push(ProbeRow {
            length: l,
            method,
            dot_products,
            wall_time_ns: start.elapsed().as_nanos(),
            seed: cfg.rng_seed,
        });
    }
    Ok(rows)
}

pub const PROBE_CSV_HEADER: &str = "L,method,dot_products,wall_time_ns,seed";

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from(PROBE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.length,
            r.method.name(),
            r.dot_products,
            r.wall_time_ns,
            r.seed
        ));
    }
    s
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}
