//! Sample-quality metrics: a Fréchet distance between Gaussian feature fits,
//! an inception-style score over class probabilities, and a small probe
//! classifier that supplies both class probabilities and features.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::network::{Hierarchy, ModelParams, Role, TieredCondition};
use crate::numerics::{Tape, Tensor, Var};
use crate::spectral::{fft2, image_dims};
use crate::train::{Optimizer, TrainConfig};

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Fits `[N, D]` features with the unbiased (N − 1) covariance.
    pub fn fit(features: &Tensor) -> Result<Self> {
        let &[n, d] = features.shape() else {
            bail!(Dimension, "features must be [N, D], got {:?}", features.shape());
        };
        if n < 2 {
            bail!(Contract, "need at least two feature rows, got {n}");
        }
        let x = features.data();
        let mut mean = vec![0.0; d];
        for row in x.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for row in x.chunks(d) {
            for i in 0..d {
                let a = row[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += a * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fewer samples than `dim + 1` leave the covariance rank-deficient.
    pub fn underdetermined(&self) -> bool {
        self.count < self.dim() + 1
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if self.cov.len() != d * d {
            bail!(Dimension, "covariance has {} entries for dimension {d}", self.cov.len());
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.cov[i * d + j], self.cov[j * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    bail!(Contract, "covariance is not symmetric at ({i}, {j}): {a} vs {b}");
                }
            }
        }
        Ok(DMatrix::from_row_slice(d, d, &self.cov))
    }
}

/// Square root of a symmetric positive semidefinite matrix, with negative
/// eigenvalues clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
///
/// The trace of `(Σ_a Σ_b)^{1/2}` is taken as the trace of the square root of
/// the symmetric matrix `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, which has the same
/// eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        bail!(Dimension, "feature dimensions differ: {} vs {}", a.dim(), b.dim());
    }
    let (sa, sb) = (a.matrix()?, b.matrix()?);
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = psd_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let cross = psd_sqrt(&inner).trace();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// `exp(mean_i KL(p_i ‖ p̄))` over `[N, K]` probability rows.
pub fn inception_score_like(probs: &Tensor) -> Result<f64> {
    let &[n, k] = probs.shape() else {
        bail!(Dimension, "probabilities must be [N, K], got {:?}", probs.shape());
    };
    if n == 0 {
        bail!(Contract, "no probability rows");
    }
    let mut marginal = vec![0.0; k];
    for (i, row) in probs.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
            bail!(Contract, "row {i} is not a probability vector (sum {sum})");
        }
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p / n as f64;
        }
    }
    let mut kl = 0.0;
    for row in probs.data().chunks(k) {
        for (p, m) in row.iter().zip(&marginal) {
            if *p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
    }
    Ok((kl / n as f64).exp())
}

/// Phase-invariant input features: `ln(1 + |F|)` for every frequency bin.
fn spectral_features(images: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = image_dims(images.shape())?;
    let per = h * w * c;
    let mut out = Vec::with_capacity(b * per);
    for i in 0..b {
        let img = Tensor::new(vec![h, w, c], images.data()[i * per..(i + 1) * per].to_vec())?;
        out.extend(fft2(&img)?.power().into_iter().map(|p| (1.0 + p.sqrt()).ln()));
    }
    Tensor::new(vec![b, per], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 400,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One-hidden-layer classifier over standardized spectral magnitudes,
/// predicting the subclass.
#[derive(Clone, Debug)]
pub struct Probe {
    hierarchy: Hierarchy,
    input_dim: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
    params: ModelParams,
    trained: bool,
}

impl Probe {
    /// Untrained probe with seeded weights; scoring with it is refused.
    pub fn new(hierarchy: Hierarchy, input_dim: usize, cfg: &ProbeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = hierarchy.n_sub();
        let mut params = ModelParams::new();
        let b1 = 1.0 / (input_dim as f64).sqrt();
        let b2 = 1.0 / (cfg.hidden as f64).sqrt();
        params.push("fc1.weight", Role::Weight, Tensor::uniform(vec![input_dim, cfg.hidden], -b1, b1, &mut rng));
        params.push("fc1.bias", Role::Bias, Tensor::zeros(vec![cfg.hidden]));
        params.push("fc2.weight", Role::Weight, Tensor::uniform(vec![cfg.hidden, k], -b2, b2, &mut rng));
        params.push("fc2.bias", Role::Bias, Tensor::zeros(vec![k]));
        Self {
            hierarchy,
            input_dim,
            shift: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
            params,
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn feature_dim(&self) -> usize {
        self.params.get(1).value.len()
    }

    fn inputs(&self, images: &Tensor) -> Result<Tensor> {
        let mut f = spectral_features(images)?;
        if f.shape()[1] != self.input_dim {
            bail!(Dimension, "probe expects {} input features, images give {}", self.input_dim, f.shape()[1]);
        }
        for row in f.data_mut().chunks_mut(self.input_dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(f)
    }

    fn forward(&self, vars: &[Var], x: &Tensor) -> Result<(Var, Var)> {
        let hidden = Var::constant(x.clone()).matmul(&vars[0])?.add_bias(&vars[1])?.gelu()?;
        let logits = hidden.matmul(&vars[2])?.add_bias(&vars[3])?;
        Ok((hidden, logits))
    }

    fn frozen(&self) -> Vec<Var> {
        self.params.iter().map(|p| Var::constant(p.value.clone())).collect()
    }

    fn require_trained(&self) -> Result<()> {
        if !self.trained {
            bail!(Contract, "probe has not been trained");
        }
        Ok(())
    }

    /// Penultimate activations `[B, hidden]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.require_trained()?;
        let (hidden, _) = self.forward(&self.frozen(), &self.inputs(images)?)?;
        Ok(hidden.value().clone())
    }

    /// Subclass probabilities `[B, N_sub]`.
    pub fn probs(&self, images: &Tensor) -> Result<Tensor> {
        self.require_trained()?;
        let (_, logits) = self.forward(&self.frozen(), &self.inputs(images)?)?;
        logits.value().softmax(1)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let p = self.probs(images)?;
        let k = p.shape()[1];
        Ok(p.data()
            .chunks(k)
            .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
            .collect())
    }

    /// Fits the probe to `images` labelled with subclass `labels`.
    pub fn fit(&mut self, images: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<()> {
        let k = self.hierarchy.n_sub();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            bail!(Contract, "subclass label {bad} out of range for {k} subclasses");
        }
        let raw = spectral_features(images)?;
        let n = raw.shape()[0];
        if n != labels.len() || n == 0 {
            bail!(Dimension, "{} labels for {n} images", labels.len());
        }
        let d = self.input_dim;
        self.shift = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for row in raw.data().chunks(d) {
            for j in 0..d {
                self.shift[j] += row[j] / n as f64;
                sq[j] += row[j] * row[j] / n as f64;
            }
        }
        self.scale = (0..d).map(|j| (sq[j] - self.shift[j] * self.shift[j]).max(0.0).sqrt().max(1e-6)).collect();
        let x = self.inputs(images)?;
        let opt_cfg = TrainConfig {
            lr: cfg.lr,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&opt_cfg, &self.params, &vec![true; self.params.len()]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        for _ in 0..cfg.steps {
            let mut idx = Vec::with_capacity(cfg.batch);
            while idx.len() < cfg.batch.min(n) {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let b = idx.len();
            let xb: Vec<f64> = idx.iter().flat_map(|&i| x.data()[i * d..(i + 1) * d].iter().copied()).collect();
            let mut onehot = vec![0.0; b * k];
            for (r, &i) in idx.iter().enumerate() {
                onehot[r * k + labels[i]] = 1.0;
            }
            let tape = Tape::new();
            let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
            let (_, logits) = self.forward(&vars, &Tensor::new(vec![b, d], xb)?)?;
            let loss = logits
                .log_softmax(1)?
                .mul(&Var::constant(Tensor::new(vec![b, k], onehot)?))?
                .sum()?
                .scale(-1.0 / b as f64)?;
            let grads = loss.backward()?;
            let g: Vec<Option<Tensor>> = vars.iter().map(|v| Some(grads.wrt(v))).collect();
            opt.apply(&mut self.params, &g)?;
        }
        self.trained = true;
        Ok(())
    }
}

/// Trains a probe on a labelled image batch `[N, H, W, C]`.
pub fn train_probe(images: &Tensor, labels: &[TieredCondition], hierarchy: Hierarchy, cfg: &ProbeConfig) -> Result<Probe> {
    let subs = labels
        .iter()
        .map(|c| c.sub.ok_or_else(|| crate::Error::Contract("probe training needs subclass labels".into())))
        .collect::<Result<Vec<_>>>()?;
    let (_, h, w, c) = image_dims(images.shape())?;
    let mut probe = Probe::new(hierarchy, h * w * c, cfg);
    probe.fit(images, &subs, cfg)?;
    Ok(probe)
}

/// Fraction of images whose predicted subclass, and whose predicted
/// subclass's parent, match the labels.
pub fn class_accuracy(images: &Tensor, labels: &[TieredCondition], probe: &Probe) -> Result<(f64, f64)> {
    let pred = probe.predict(images)?;
    if pred.len() != labels.len() || pred.is_empty() {
        bail!(Dimension, "{} labels for {} images", labels.len(), pred.len());
    }
    let h = probe.hierarchy();
    let (mut sub_ok, mut sup_ok) = (0usize, 0usize);
    for (p, c) in pred.iter().zip(labels) {
        c.validate(h)?;
        if c.sub == Some(*p) {
            sub_ok += 1;
        }
        let sup = c.sup.or(c.sub.map(|s| h.parent_of(s)));
        if sup == Some(h.parent_of(*p)) {
            sup_ok += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((sub_ok as f64 / n, sup_ok as f64 / n))
}

/// Maps images to feature vectors for the Fréchet distance.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    /// Fixed Gaussian projection `[H·W·C, D]`, entries `N(0, 1/(H·W·C))`.
    RandomProjection(Tensor),
    /// Penultimate activations of a trained probe.
    Probe(Probe),
}

impl FeatureExtractor {
    pub fn random_projection(input_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::randn(vec![input_dim, dim], &mut rng).scale(1.0 / (input_dim as f64).sqrt());
        Self::RandomProjection(m)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::RandomProjection(m) => m.shape()[1],
            Self::Probe(p) => p.feature_dim(),
        }
    }

    /// `[B, H, W, C]` → `[B, D]`.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            Self::RandomProjection(m) => {
                let (b, h, w, c) = image_dims(images.shape())?;
                if h * w * c != m.shape()[0] {
                    bail!(Dimension, "projection expects {} pixels, images have {}", m.shape()[0], h * w * c);
                }
                images.reshape(vec![b, h * w * c])?.matmul(m)
            }
            Self::Probe(p) => p.features(images),
        }
    }

    pub fn stats(&self, images: &Tensor) -> Result<GaussianStats> {
        GaussianStats::fit(&self.extract(images)?)
    }
}
