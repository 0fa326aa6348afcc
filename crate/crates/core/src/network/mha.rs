//! Multi-head sparse attention as a single tape node.

use crate::attention::{fill_output, plan_sparse};
use crate::error::{bail, Result};
use crate::numerics::{CustomBackward, Tensor, Var};

/// Per-(sample, head) state kept for the backward pass.
struct HeadCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    selected: Vec<usize>,
    probs: Vec<Vec<f64>>,
}

struct MhaBackward {
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
    caches: Vec<HeadCache>,
}

fn gather_head(x: &[f64], b: usize, h: usize, len: usize, heads: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = Vec::with_capacity(len * dh);
    for n in 0..len {
        let at = (b * len + n) * d + h * dh;
        out.extend_from_slice(&x[at..at + dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], b: usize, h: usize, len: usize, heads: usize, dh: usize) {
    let d = heads * dh;
    for n in 0..len {
        let at = (b * len + n) * d + h * dh;
        for (o, s) in dst[at..at + dh].iter_mut().zip(&src[n * dh..(n + 1) * dh]) {
            *o += s;
        }
    }
}

/// `q, k, v: [B, L, heads·dh]` → `[B, L, heads·dh]`. `samples[h]` holds the
/// sampled key indices per query for head `h`; `u` queries are selected.
pub(crate) fn multi_head_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    heads: usize,
    samples: &[Vec<Vec<usize>>],
    u: usize,
) -> Result<Var> {
    let shape = q.shape().to_vec();
    let &[batch, len, d] = &shape[..] else {
        bail!(Dimension, "attention input must be [B, L, D], got {shape:?}");
    };
    if k.shape() != shape || v.shape() != shape || d % heads != 0 || samples.len() != heads {
        bail!(Dimension, "attention inputs disagree: q {shape:?}, k {:?}, v {:?}", k.shape(), v.shape());
    }
    let dh = d / heads;
    let mut out = vec![0.0; batch * len * d];
    let mut caches = Vec::with_capacity(batch * heads);
    let mut head_out = vec![0.0; len * dh];
    for b in 0..batch {
        for h in 0..heads {
            let qh = gather_head(q.value().data(), b, h, len, heads, dh);
            let kh = gather_head(k.value().data(), b, h, len, heads, dh);
            let vh = gather_head(v.value().data(), b, h, len, heads, dh);
            let plan = plan_sparse(&qh, &kh, dh, &samples[h], u);
            fill_output(&plan, &vh, dh, &mut head_out);
            scatter_head(&mut out, &head_out, b, h, len, heads, dh);
            caches.push(HeadCache {
                q: qh,
                k: kh,
                v: vh,
                selected: plan.selected,
                probs: plan.probs,
            });
        }
    }
    let value = Tensor::new(shape, out)?;
    Var::custom(
        &[q, k, v],
        value,
        MhaBackward {
            batch,
            len,
            heads,
            dh,
            caches,
        },
    )
}

impl CustomBackward for MhaBackward {
    fn backward(&self, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (len, heads, dh) = (self.len, self.heads, self.dh);
        let total = self.batch * len * heads * dh;
        let (mut gq, mut gk, mut gv) = (vec![0.0; total], vec![0.0; total], vec![0.0; total]);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; len * dh];
        let mut dk = vec![0.0; len * dh];
        let mut dv = vec![0.0; len * dh];
        let mut is_selected = vec![false; len];
        for b in 0..self.batch {
            for h in 0..heads {
                let c = &self.caches[b * heads + h];
                let go = gather_head(grad_out.data(), b, h, len, heads, dh);
                dq.fill(0.0);
                dk.fill(0.0);
                dv.fill(0.0);
                is_selected.fill(false);
                for &i in &c.selected {
                    is_selected[i] = true;
                }
                // Unselected rows output mean(V): each V row receives dO/L.
                let mut unselected_sum = vec![0.0; dh];
                for i in (0..len).filter(|&i| !is_selected[i]) {
                    for (s, g) in unselected_sum.iter_mut().zip(&go[i * dh..(i + 1) * dh]) {
                        *s += g;
                    }
                }
                let share: Vec<f64> = unselected_sum.iter().map(|s| s / len as f64).collect();
                for row in dv.chunks_mut(dh) {
                    row.copy_from_slice(&share);
                }
                for (&i, p) in c.selected.iter().zip(&c.probs) {
                    let goi = &go[i * dh..(i + 1) * dh];
                    let mut dp = vec![0.0; len];
                    for j in 0..len {
                        let vj = &c.v[j * dh..(j + 1) * dh];
                        dp[j] = goi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        for (o, g) in dv[j * dh..(j + 1) * dh].iter_mut().zip(goi) {
                            *o += p[j] * g;
                        }
                    }
                    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = &c.q[i * dh..(i + 1) * dh];
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &c.k[j * dh..(j + 1) * dh];
                        for t in 0..dh {
                            dq[i * dh + t] += ds * kj[t];
                            dk[j * dh + t] += ds * qi[t];
                        }
                    }
                }
                scatter_head(&mut gq, &dq, b, h, len, heads, dh);
                scatter_head(&mut gk, &dk, b, h, len, heads, dh);
                scatter_head(&mut gv, &dv, b, h, len, heads, dh);
            }
        }
        let shape = grad_out.shape().to_vec();
        Ok(vec![
            Some(Tensor::new(shape.clone(), gq)?),
            Some(Tensor::new(shape.clone(), gk)?),
            Some(Tensor::new(shape, gv)?),
        ])
    }
}
