use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mha::multi_head_attention;
use super::params::{ModelParams, Role};
use super::{AttentionMode, EmbedderKind, Hierarchy, ModelConfig, TieredCondition};
use crate::attention::{draw_samples, AttentionConfig};
use crate::error::{bail, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (usize, usize),
    ln2: (usize, usize),
    /// shift, scale, gate for the attention branch, then for the MLP branch.
    modulation: [Linear; 6],
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch: Linear,
    t_fc1: Linear,
    t_fc2: Linear,
    sub_table: usize,
    super_table: Option<usize>,
    blocks: Vec<Block>,
    final_shift: Linear,
    final_scale: Linear,
    final_ln: (usize, usize),
    out: Linear,
}

/// Parameters bound either to a tape (training) or as constants (inference).
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps one variable per parameter, in parameter order. Mixing
    /// tape parameters with constants freezes the constants.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

/// The patch transformer noise predictor.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: ModelConfig,
    hierarchy: Hierarchy,
    params: ModelParams,
    layout: Layout,
    /// Sampled key sets per block and head; depend only on the seed.
    samples: Vec<Vec<Vec<Vec<usize>>>>,
    selected: usize,
    positions: Tensor,
}

struct Builder<'a> {
    params: ModelParams,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(vec![fan_in, fan_out], -bound, bound, self.rng);
        self.linear_with(name, w)
    }

    fn linear_with(&mut self, name: &str, w: Tensor) -> Linear {
        let fan_out = w.shape()[1];
        Linear {
            w: self.params.push(format!("{name}.weight"), Role::Weight, w),
            b: self.params.push(format!("{name}.bias"), Role::Bias, Tensor::zeros(vec![fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        (
            self.params.push(format!("{name}.gain"), Role::NormGain, Tensor::ones(vec![d])),
            self.params.push(format!("{name}.bias"), Role::NormBias, Tensor::zeros(vec![d])),
        )
    }

    fn table(&mut self, name: &str, rows: usize, d: usize) -> usize {
        let t = Tensor::randn(vec![rows, d], self.rng).scale(0.02);
        self.params.push(name, Role::Embedding, t)
    }
}

/// Fixed 2D sine-cosine position code, `[grid², d]`.
fn position_code(grid: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut data = vec![0.0; grid * grid * d];
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut data[(r * grid + c) * d..(r * grid + c + 1) * d];
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                row[i] = (c as f64 * freq).sin();
                row[quarter + i] = (c as f64 * freq).cos();
                row[2 * quarter + i] = (r as f64 * freq).sin();
                row[3 * quarter + i] = (r as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![grid * grid, d], data).expect("extents match")
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub(crate) fn timestep_code(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (cos, sin): (Vec<f64>, Vec<f64>) =
            freqs.map(|f| ((step as f64 * f).cos(), (step as f64 * f).sin())).unzip();
        data.extend(cos);
        data.extend(sin);
    }
    Tensor::new(vec![t.len(), dim], data).expect("extents match")
}

fn linear(x: &Var, p: &Bound, l: Linear) -> Result<Var> {
    let shape = x.shape().to_vec();
    let width = *shape.last().expect("linear input has rank >= 1");
    let rows = x.value().len() / width;
    let w = p.get(l.w);
    let y = x.reshape(vec![rows, width])?.matmul(w)?.add_bias(p.get(l.b))?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = w.shape()[1];
    y.reshape(out_shape)
}

fn modulate(x: &Var, shift: &Var, scale: &Var) -> Result<Var> {
    x.broadcast_mul(&scale.add_scalar(1.0)?)?.broadcast_add(shift)
}

impl Denoiser {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let hierarchy = cfg.hierarchy()?;
        let d = cfg.d_model;
        let pdim = cfg.patch * cfg.patch * cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut b = Builder {
            params: ModelParams::new(),
            rng: &mut rng,
        };
        let patch = b.linear("patch_embed", pdim, d);
        let t_fc1 = b.linear("t_embed.fc1", cfg.time_embed_dim, d);
        let t_fc2 = b.linear("t_embed.fc2", d, d);
        let sub_table = b.table("label.sub_table", hierarchy.n_sub() + 1, d);
        let super_table = match cfg.embedder {
            EmbedderKind::Tiered => Some(b.table("label.super_table", hierarchy.n_super + 1, d)),
            EmbedderKind::SubclassOnly => None,
        };
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = |s: &str| format!("blocks.{i}.{s}");
                Block {
                    ln1: b.norm(&n("ln1"), d),
                    ln2: b.norm(&n("ln2"), d),
                    modulation: ["shift1", "scale1", "gate1", "shift2", "scale2", "gate2"]
                        .map(|m| b.linear(&n(&format!("ada.{m}")), d, d)),
                    q: b.linear(&n("attn.q"), d, d),
                    k: b.linear(&n("attn.k"), d, d),
                    v: b.linear(&n("attn.v"), d, d),
                    proj: b.linear(&n("attn.proj"), d, d),
                    fc1: b.linear(&n("mlp.fc1"), d, hidden),
                    fc2: b.linear(&n("mlp.fc2"), hidden, d),
                }
            })
            .collect();
        let final_shift = b.linear("final.ada.shift", d, d);
        let final_scale = b.linear("final.ada.scale", d, d);
        let final_ln = b.norm("final.ln", d);
        let out = b.linear_with("final.out", Tensor::zeros(vec![d, pdim]));
        let params = b.params;

        let tokens = cfg.tokens();
        let (selected, samples) = match cfg.attention {
            AttentionMode::Pro => {
                let base = AttentionConfig::new(cfg.attention_c, cfg.attention_seed)?;
                let samples = (0..cfg.depth)
                    .map(|blk| {
                        (0..cfg.heads)
                            .map(|h| {
                                let seed = cfg.attention_seed ^ ((blk as u64) << 32 | h as u64);
                                draw_samples(&base.with_seed(seed), tokens, tokens)
                            })
                            .collect()
                    })
                    .collect();
                (base.selected_count(tokens).0, samples)
            }
            AttentionMode::Dense => {
                let all: Vec<Vec<usize>> = vec![(0..tokens).collect(); tokens];
                (tokens, vec![vec![all; cfg.heads]; cfg.depth])
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            hierarchy,
            params,
            layout: Layout {
                patch,
                t_fc1,
                t_fc2,
                sub_table,
                super_table,
                blocks,
                final_shift,
                final_scale,
                final_ln,
                out,
            },
            samples,
            selected,
            positions: position_code(cfg.image_size / cfg.patch, d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Replaces all parameters after checking names, roles and shapes.
    pub fn set_params(&mut self, params: ModelParams) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    /// Queries receiving exact attention in every head.
    pub fn selected_queries(&self) -> usize {
        self.selected
    }

    /// Tracked leaves on `tape`, in parameter order.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Untracked copies for inference.
    pub fn frozen(&self) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| Var::constant(p.value.clone())).collect(),
        }
    }

    fn label_rows(&self, conds: &[TieredCondition]) -> Result<(Vec<usize>, Vec<usize>)> {
        let h = &self.hierarchy;
        let mut subs = Vec::with_capacity(conds.len());
        let mut sups = Vec::with_capacity(conds.len());
        for c in conds {
            c.validate(h)?;
            subs.push(c.sub.unwrap_or(h.n_sub()));
            sups.push(c.sup.unwrap_or(h.n_super));
        }
        Ok((subs, sups))
    }

    /// Label embeddings `[B, d]`: subclass row plus superclass row, with the
    /// null row standing in for an absent level.
    pub fn embed_labels(&self, p: &Bound, conds: &[TieredCondition]) -> Result<Var> {
        let (subs, sups) = self.label_rows(conds)?;
        let e = p.get(self.layout.sub_table).gather_rows(&subs)?;
        match self.layout.super_table {
            Some(t) => e.add(&p.get(t).gather_rows(&sups)?),
            None => Ok(e),
        }
    }

    /// Embedding of one condition after dropping the flagged levels.
    pub fn embed_condition(&self, cond: &TieredCondition, drop: (bool, bool)) -> Result<Tensor> {
        let e = self.embed_labels(&self.frozen_tables(), &[cond.dropped(drop)])?;
        e.value().reshape(vec![self.cfg.d_model])
    }

    /// A binding where only the label tables are real; enough for
    /// [`Denoiser::embed_labels`].
    fn frozen_tables(&self) -> Bound {
        let mut vars: Vec<Var> = vec![Var::constant(Tensor::scalar(0.0)); self.params.len()];
        vars[self.layout.sub_table] = Var::constant(self.params.get(self.layout.sub_table).value.clone());
        if let Some(t) = self.layout.super_table {
            vars[t] = Var::constant(self.params.get(t).value.clone());
        }
        Bound { vars }
    }

    fn patchify(&self, x: &Var) -> Result<Var> {
        let (b, s, p, c) = (x.shape()[0], self.cfg.image_size, self.cfg.patch, self.cfg.channels);
        let g = s / p;
        x.reshape(vec![b, g, p, g, p, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(vec![b, g * g, p * p * c])
    }

    fn unpatchify(&self, x: &Var) -> Result<Var> {
        let (b, s, p, c) = (x.shape()[0], self.cfg.image_size, self.cfg.patch, self.cfg.channels);
        let g = s / p;
        x.reshape(vec![b, g, g, p, p, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(vec![b, s, s, c])
    }

    /// Predicted noise for `x_t: [B, H, W, C]` at timesteps `t` under `conds`.
    pub fn forward(&self, p: &Bound, x_t: &Var, t: &[usize], conds: &[TieredCondition]) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = x_t.shape();
        if shape.len() != 4 || shape[1..] != [cfg.image_size, cfg.image_size, cfg.channels] {
            if shape.len() == 4 && (shape[1] % cfg.patch != 0 || shape[2] % cfg.patch != 0) {
                bail!(Config, "image {shape:?} is not divisible into {}-pixel patches", cfg.patch);
            }
            bail!(
                Dimension,
                "model expects [B, {0}, {0}, {1}], got {shape:?}",
                cfg.image_size,
                cfg.channels
            );
        }
        let batch = shape[0];
        if t.len() != batch || conds.len() != batch {
            bail!(
                Dimension,
                "batch of {batch} images with {} timesteps and {} conditions",
                t.len(),
                conds.len()
            );
        }
        let l = &self.layout;
        let tokens = cfg.tokens();
        let pos = Tensor::new(
            vec![batch, tokens, cfg.d_model],
            self.positions.data().repeat(batch),
        )?;
        let mut x = linear(&self.patchify(x_t)?, p, l.patch)?.add(&Var::constant(pos))?;

        let temb = linear(&Var::constant(timestep_code(t, cfg.time_embed_dim)), p, l.t_fc1)?.silu()?;
        let temb = linear(&temb, p, l.t_fc2)?;
        let c = temb.add(&self.embed_labels(p, conds)?)?.silu()?;

        for (i, blk) in l.blocks.iter().enumerate() {
            let m: Vec<Var> = blk
                .modulation
                .iter()
                .map(|&lin| linear(&c, p, lin))
                .collect::<Result<_>>()?;
            let h = x.layernorm(p.get(blk.ln1.0), p.get(blk.ln1.1), cfg.ln_eps)?;
            let h = modulate(&h, &m[0], &m[1])?;
            let (q, k, v) = (linear(&h, p, blk.q)?, linear(&h, p, blk.k)?, linear(&h, p, blk.v)?);
            let a = multi_head_attention(&q, &k, &v, cfg.heads, &self.samples[i], self.selected)?;
            x = x.add(&linear(&a, p, blk.proj)?.broadcast_mul(&m[2])?)?;

            let h = x.layernorm(p.get(blk.ln2.0), p.get(blk.ln2.1), cfg.ln_eps)?;
            let h = modulate(&h, &m[3], &m[4])?;
            let h = linear(&linear(&h, p, blk.fc1)?.gelu()?, p, blk.fc2)?;
            x = x.add(&h.broadcast_mul(&m[5])?)?;
        }
        let shift = linear(&c, p, l.final_shift)?;
        let scale = linear(&c, p, l.final_scale)?;
        let h = x.layernorm(p.get(l.final_ln.0), p.get(l.final_ln.1), cfg.ln_eps)?;
        let h = linear(&modulate(&h, &shift, &scale)?, p, l.out)?;
        self.unpatchify(&h)
    }

    /// Inference on plain tensors with a prebuilt frozen binding.
    pub fn predict(&self, p: &Bound, x_t: &Tensor, t: &[usize], conds: &[TieredCondition]) -> Result<Tensor> {
        let out = self.forward(p, &Var::constant(x_t.clone()), t, conds)?;
        Ok(out.value().clone())
    }
}
