//! Noise schedule, training objective, guidance and the two-stage sampler.
//!
//! Timesteps run `1..=T`; `ᾱ₀ = 1`. Image batches are `[B, H, W, C]`.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::network::{Bound, Denoiser, TieredCondition};
use crate::numerics::{Tensor, Var};
use crate::spectral::{default_cutoff, high_freq_energy_ratio_with, BandSplitter};

/// Linear-β DDPM schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`.
    alpha_bars: Vec<f64>,
}

/// Posterior `q(x_{t'} | x_t, x₀)` between two timesteps `t' < t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefs {
    pub x0: f64,
    pub xt: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            bail!(Config, "schedule needs at least 2 steps");
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            bail!(Config, "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}");
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            bail!(Contract, "timestep {t} outside 1..={}", self.steps());
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t` for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior from `t` to `prev` (`prev < t`); `prev = t − 1` is the
    /// ordinary single step.
    pub fn posterior_between(&self, t: usize, prev: usize) -> PosteriorCoefs {
        let (ab, ab_prev) = (self.alpha_bars[t], self.alpha_bars[prev]);
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        PosteriorCoefs {
            x0: ab_prev.sqrt() * beta / (1.0 - ab),
            xt: alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            variance: (1.0 - ab_prev) / (1.0 - ab) * beta,
        }
    }

    pub fn posterior(&self, t: usize) -> PosteriorCoefs {
        self.posterior_between(t, t - 1)
    }

    /// Evenly spaced timesteps for a shortened sampler, descending, always
    /// ending at 1. `steps = T` gives `T, T−1, …, 1`.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.steps();
        if steps == 0 || steps > n {
            bail!(Config, "sampler steps must be in 1..={n}, got {steps}");
        }
        let mut ts: Vec<usize> = (1..=steps)
            .map(|i| ((i * n) as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

impl Default for NoiseSchedule {
    /// 200 steps with the usual 1000-step ramp (1e-4 to 0.02) scaled by
    /// 1000/200, so `ᾱ_T ≈ 4.5e-5` and `x_T` is effectively pure noise.
    fn default() -> Self {
        Self::linear(200, 5e-4, 0.1).expect("default schedule is valid")
    }
}

/// Sampler hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub gamma: f64,
    /// Refinement applies while `t <= t_split`; 0 disables it.
    pub t_split: usize,
    pub w_sub: f64,
    pub w_super: f64,
    /// Filter cutoff; `None` uses a default derived from the image size.
    pub d0: Option<f64>,
    /// Sampler steps; `None` uses every timestep.
    pub steps: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            t_split: 40,
            w_sub: 1.0,
            w_super: 1.0,
            d0: None,
            steps: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            bail!(Config, "gamma must be in [0, 1], got {}", self.gamma);
        }
        if self.t_split > schedule.steps() {
            bail!(Config, "t_split {} exceeds T = {}", self.t_split, schedule.steps());
        }
        if !self.w_sub.is_finite() || !self.w_super.is_finite() {
            bail!(Config, "guidance scales must be finite");
        }
        if let Some(d0) = self.d0 {
            if !(d0 > 0.0) || !d0.is_finite() {
                bail!(Config, "d0 must be positive, got {d0}");
            }
        }
        Ok(())
    }

    pub fn cutoff(&self, height: usize, width: usize) -> f64 {
        self.d0.unwrap_or_else(|| default_cutoff(height, width))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kl_temperature: f64,
    /// Adds the two frequency terms; off means noise-prediction loss only.
    pub frequency_terms: bool,
    /// The frequency terms use only batch items with `t <= frequency_max_t`,
    /// the steps where the sampler refines. At or above `T` every item counts.
    pub frequency_max_t: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            kl_temperature: 1.0,
            frequency_terms: true,
            frequency_max_t: 40,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            bail!(Config, "loss weights must be >= 0");
        }
        if !(self.kl_temperature > 0.0) || !self.kl_temperature.is_finite() {
            bail!(Config, "kl_temperature must be positive");
        }
        if self.frequency_max_t == 0 {
            bail!(Config, "frequency_max_t must be >= 1; set frequency_terms = false to drop the terms");
        }
        Ok(())
    }
}

fn per_sample(x: &Tensor, t: &[usize]) -> Result<usize> {
    let b = *x.shape().first().unwrap_or(&0);
    if x.rank() < 2 || b != t.len() {
        bail!(Dimension, "{} timesteps for a batch of shape {:?}", t.len(), x.shape());
    }
    Ok(x.len() / b)
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, one timestep per batch item.
pub fn q_sample(s: &NoiseSchedule, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        bail!(Dimension, "x0 {:?} and noise {:?} differ", x0.shape(), eps.shape());
    }
    let n = per_sample(x0, t)?;
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        s.check(ti)?;
        let (a, b) = (s.alpha_bar(ti).sqrt(), (1.0 - s.alpha_bar(ti)).sqrt());
        for (o, e) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&eps.data()[i * n..]) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// `x_{0|t} = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn estimate_x0(s: &NoiseSchedule, x_t: &Tensor, t: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
    let out = estimate_x0_var(s, &Var::constant(x_t.clone()), t, &Var::constant(eps_hat.clone()))?;
    Ok(out.value().clone())
}

fn coef_column(t: &[usize], f: impl Fn(usize) -> f64) -> Result<Var> {
    Ok(Var::constant(Tensor::new(vec![t.len(), 1], t.iter().map(|&ti| f(ti)).collect())?))
}

pub(crate) fn estimate_x0_var(s: &NoiseSchedule, x_t: &Var, t: &[usize], eps_hat: &Var) -> Result<Var> {
    if x_t.shape() != eps_hat.shape() {
        bail!(Dimension, "x_t {:?} and noise {:?} differ", x_t.shape(), eps_hat.shape());
    }
    per_sample(x_t.value(), t)?;
    for &ti in t {
        s.check(ti)?;
        if s.alpha_bar(ti) == 0.0 {
            bail!(Numeric, "alpha_bar is zero at t = {ti}");
        }
    }
    let noise_scale = coef_column(t, |ti| (1.0 - s.alpha_bar(ti)).sqrt())?;
    let inv = coef_column(t, |ti| 1.0 / s.alpha_bar(ti).sqrt())?;
    x_t.sub(&eps_hat.broadcast_mul(&noise_scale)?)?.broadcast_mul(&inv)
}

/// `γ·x⊙(1 + x̂ʰ) + (1−γ)·x̂ˡ` with the bands of `x`.
pub fn perceptual_refine(x0: &Tensor, gamma: f64, splitter: &BandSplitter) -> Result<Tensor> {
    let (high, low) = splitter.split(x0)?;
    let enhanced = x0.mul(&high.add_scalar(1.0))?;
    enhanced.scale(gamma).add(&low.scale(1.0 - gamma))
}

/// One reverse step from `t` to `prev` using the Gaussian posterior with
/// `x̂₀` in place of `x₀`; `noise` is ignored when the variance is zero.
pub fn posterior_step_between(
    s: &NoiseSchedule,
    x_t: &Tensor,
    x0_target: &Tensor,
    t: usize,
    prev: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    s.check(t)?;
    if prev >= t {
        bail!(Contract, "posterior step must go backwards, got {t} -> {prev}");
    }
    if x_t.shape() != x0_target.shape() || x_t.shape() != noise.shape() {
        bail!(Dimension, "posterior step shapes differ");
    }
    let c = s.posterior_between(t, prev);
    let sigma = c.variance.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(x0_target.data())
        .zip(noise.data())
        .map(|((xt, x0), z)| {
            let mean = c.x0 * x0 + c.xt * xt;
            if sigma > 0.0 {
                mean + sigma * z
            } else {
                mean
            }
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

pub fn posterior_step(
    s: &NoiseSchedule,
    x_t: &Tensor,
    x0_target: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    s.check(t)?;
    posterior_step_between(s, x_t, x0_target, t, t - 1, noise)
}

/// KL between per-channel spatial softmax distributions of two maps,
/// averaged over channels (and batch items for rank-4 input).
pub fn kl_feature(p: &Tensor, q: &Tensor, temperature: f64) -> Result<f64> {
    kl_feature_var(&Var::constant(p.clone()), &Var::constant(q.clone()), temperature)?
        .value()
        .item()
}

pub(crate) fn kl_feature_var(p: &Var, q: &Var, temperature: f64) -> Result<Var> {
    if p.shape() != q.shape() {
        bail!(Dimension, "KL maps differ: {:?} vs {:?}", p.shape(), q.shape());
    }
    if !(temperature > 0.0) {
        bail!(Config, "temperature must be positive");
    }
    let (b, h, w, c) = crate::spectral::image_dims(p.shape())?;
    let shape = vec![b, h * w, c];
    let lp = p.reshape(shape.clone())?.scale(1.0 / temperature)?.log_softmax(1)?;
    let lq = q.reshape(shape)?.scale(1.0 / temperature)?.log_softmax(1)?;
    lp.exp()?.mul(&lp.sub(&lq)?)?.sum_axis(1)?.mean()
}

/// Scalar loss and its reported components.
pub struct LossParts {
    pub total: Var,
    pub org: f64,
    pub high_pix: f64,
    pub rec: f64,
}

impl LossParts {
    pub fn total_value(&self) -> f64 {
        self.total.value().item().expect("loss is scalar")
    }
}

/// One training batch with its sampled timesteps and noise.
pub struct Batch<'a> {
    pub x0: &'a Tensor,
    pub conds: &'a [TieredCondition],
    pub t: &'a [usize],
    pub eps: &'a Tensor,
}

/// Noise-prediction loss plus the enhancement and blend KL terms. The KL
/// terms average over the batch items inside the refinement stage.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    model: &Denoiser,
    params: &Bound,
    batch: &Batch<'_>,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    gamma: f64,
    splitter: &Rc<BandSplitter>,
) -> Result<LossParts> {
    let x_t = q_sample(schedule, batch.x0, batch.t, batch.eps)?;
    let x_t = Var::constant(x_t);
    let eps_hat = model.forward(params, &x_t, batch.t, batch.conds)?;
    let diff = eps_hat.sub(&Var::constant(batch.eps.clone()))?;
    let org = diff.mul(&diff)?.mean()?;
    let stage: Vec<usize> = (0..batch.t.len()).filter(|&i| batch.t[i] <= loss.frequency_max_t).collect();
    if !loss.frequency_terms || stage.is_empty() {
        let v = org.value().item()?;
        return Ok(LossParts {
            total: org,
            org: v,
            high_pix: 0.0,
            rec: 0.0,
        });
    }
    let x0t = estimate_x0_var(schedule, &x_t, batch.t, &eps_hat)?;
    let x0t = if stage.len() == batch.t.len() {
        x0t
    } else {
        let shape = x0t.shape().to_vec();
        let per: usize = shape[1..].iter().product();
        let mut kept = shape.clone();
        kept[0] = stage.len();
        x0t.reshape(vec![shape[0], per])?.gather_rows(&stage)?.reshape(kept)?
    };
    let (high, low) = splitter.split_var(&x0t)?;
    let enhanced = x0t.mul(&high.add_scalar(1.0)?)?;
    let high_pix = kl_feature_var(&enhanced, &x0t, loss.kl_temperature)?;
    let blend = enhanced.scale(gamma)?.add(&low.scale(1.0 - gamma)?)?;
    let rec = kl_feature_var(&blend, &x0t, loss.kl_temperature)?;
    let total = org
        .add(&high_pix.scale(loss.lambda1)?)?
        .add(&rec.scale(loss.lambda2)?)?;
    Ok(LossParts {
        org: org.value().item()?,
        high_pix: high_pix.value().item()?,
        rec: rec.value().item()?,
        total,
    })
}

/// Runs the model on several condition sets for the same `x_t` in one
/// stacked batch and returns one prediction per set.
fn predict_stacked(
    model: &Denoiser,
    params: &Bound,
    x_t: &Tensor,
    t: &[usize],
    sets: &[Vec<TieredCondition>],
) -> Result<Vec<Tensor>> {
    let b = x_t.shape()[0];
    let k = sets.len();
    let mut shape = x_t.shape().to_vec();
    shape[0] = b * k;
    let x = Tensor::new(shape, x_t.data().repeat(k))?;
    let ts = t.repeat(k);
    let conds: Vec<TieredCondition> = sets.concat();
    let y = model.predict(params, &x, &ts, &conds)?;
    let n = x_t.len();
    (0..k)
        .map(|i| Tensor::new(x_t.shape().to_vec(), y.data()[i * n..(i + 1) * n].to_vec()))
        .collect()
}

fn check_batch(x_t: &Tensor, t: &[usize], conds: &[TieredCondition]) -> Result<()> {
    if x_t.rank() != 4 || x_t.shape()[0] != t.len() || t.len() != conds.len() {
        bail!(
            Dimension,
            "batch {:?} with {} timesteps and {} conditions",
            x_t.shape(),
            t.len(),
            conds.len()
        );
    }
    Ok(())
}

/// `ε∅ + ω·(ε_c − ε∅)` where `∅` drops both levels.
pub fn cfg_predict(
    model: &Denoiser,
    params: &Bound,
    x_t: &Tensor,
    t: &[usize],
    conds: &[TieredCondition],
    w: f64,
) -> Result<Tensor> {
    check_batch(x_t, t, conds)?;
    let null = vec![TieredCondition::NULL; conds.len()];
    let e = predict_stacked(model, params, x_t, t, &[null, conds.to_vec()])?;
    combine(&e[0], &[(w, &e[1])])
}

/// `ε∅ + Σ ω·(ε_level − ε∅)` evaluated elementwise in a fixed order.
fn combine(uncond: &Tensor, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut out = uncond.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let u = uncond.data()[i];
        let mut acc = u;
        for (w, e) in terms {
            acc += w * (e.data()[i] - u);
        }
        *o = acc;
    }
    Ok(out)
}

/// Two-direction guidance: subclass-only and superclass-only conditions
/// each steer away from the null prediction with their own scale. The
/// superclass evaluation is skipped when `w_super` is zero, which makes the
/// result identical to [`cfg_predict`] on the subclass-only condition.
pub fn tiered_cfg_predict(
    model: &Denoiser,
    params: &Bound,
    x_t: &Tensor,
    t: &[usize],
    conds: &[TieredCondition],
    w_sub: f64,
    w_super: f64,
) -> Result<Tensor> {
    check_batch(x_t, t, conds)?;
    if let Some(i) = conds.iter().position(|c| c.is_null()) {
        bail!(Contract, "condition {i} has both levels null; use cfg_predict");
    }
    let null = vec![TieredCondition::NULL; conds.len()];
    let sub: Vec<TieredCondition> = conds.iter().map(|c| c.sub_only()).collect();
    if w_super == 0.0 {
        let e = predict_stacked(model, params, x_t, t, &[null, sub])?;
        return combine(&e[0], &[(w_sub, &e[1])]);
    }
    let sup: Vec<TieredCondition> = conds.iter().map(|c| c.super_only()).collect();
    let e = predict_stacked(model, params, x_t, t, &[null, sub, sup])?;
    combine(&e[0], &[(w_sub, &e[1]), (w_super, &e[2])])
}

/// Per-step sampler diagnostics, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub hf_ratio: f64,
    pub x0_min: f64,
    pub x0_max: f64,
}

pub const TRACE_CSV_HEADER: &str = "step,hf_ratio,x0_min,x0_max";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.hf_ratio, r.x0_min, r.x0_max));
    }
    s
}

pub struct SampleOutput {
    pub images: Tensor,
    pub trace: Vec<TraceRow>,
}

pub(crate) fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape is nonempty")
}

fn batch_hf_ratio(x: &Tensor, splitter: &BandSplitter) -> Result<f64> {
    let (b, h, w, c) = crate::spectral::image_dims(x.shape())?;
    let n = h * w * c;
    let mut total = 0.0;
    for i in 0..b {
        let img = Tensor::new(vec![h, w, c], x.data()[i * n..(i + 1) * n].to_vec())?;
        total += high_freq_energy_ratio_with(&img, splitter.high())?;
    }
    Ok(total / b as f64)
}

/// Reverse process from pure noise. Before the perceptual stage the
/// one-shot estimate `x_{0|t}` is the posterior target; once `t <= t_split`
/// it is replaced by [`perceptual_refine`]. Targets are clamped to `[−1, 1]`.
///
/// Draws `x_T` first, then one noise tensor per step that has nonzero
/// posterior variance.
pub fn guided_sample<R: Rng + ?Sized>(
    model: &Denoiser,
    params: &Bound,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    conds: &[TieredCondition],
    rng: &mut R,
) -> Result<SampleOutput> {
    guidance.validate(schedule)?;
    let cfg = model.config();
    let (size, ch) = (cfg.image_size, cfg.channels);
    let splitter = BandSplitter::new(guidance.cutoff(size, size), size, size)?;
    let shape = [conds.len(), size, size, ch];
    let plan = schedule.respaced(guidance.steps.unwrap_or(schedule.steps()))?;
    let mut x = gaussian(&shape, rng);
    let mut trace = Vec::with_capacity(plan.len());
    for (i, &t) in plan.iter().enumerate() {
        let prev = plan.get(i + 1).copied().unwrap_or(0);
        let ts = vec![t; conds.len()];
        let eps = tiered_cfg_predict(model, params, &x, &ts, conds, guidance.w_sub, guidance.w_super)?;
        let x0 = estimate_x0(schedule, &x, &ts, &eps)?;
        let target = if t <= guidance.t_split {
            perceptual_refine(&x0, guidance.gamma, &splitter)?
        } else {
            x0
        };
        trace.push(TraceRow {
            step: t,
            hf_ratio: batch_hf_ratio(&target, &splitter)?,
            x0_min: target.min(),
            x0_max: target.max(),
        });
        let target = target.map(|v| v.clamp(-1.0, 1.0));
        let noise = if schedule.posterior_between(t, prev).variance > 0.0 {
            gaussian(&shape, rng)
        } else {
            Tensor::zeros(shape.to_vec())
        };
        x = posterior_step_between(schedule, &x, &target, t, prev, &noise)?;
        if !x.all_finite() {
            return Err(Error::NonFinite { step: t });
        }
    }
    Ok(SampleOutput { images: x, trace })
}

#[cfg(test)]
mod tests;
