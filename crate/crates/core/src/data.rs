//! Procedural hierarchical image set and its `EFDD` file format.
//!
//! Superclass `k` is a filled shape (disk, square, triangle, ring) with
//! jittered position and scale. Subclass `j` inside it paints a stripe
//! grating over the shape interior; gratings differ in spatial frequency and
//! orientation, so subclasses of one superclass differ mostly in the high
//! band while superclasses differ in coarse silhouette.
//!
//! ```text
//! "EFDD" version:u32
//! n_super:u32 subs_per_super:u32 samples_per_sub:u32 height:u32 width:u32 channels:u32 seed:u64
//! per sample: sub:u16 super:u16 then height·width·channels f64 values
//! ```

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::error::{bail, Result};
use crate::network::{Hierarchy, TieredCondition};
use crate::numerics::Tensor;
use crate::spectral::image_dims;

const MAGIC: &[u8; 4] = b"EFDD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 6 * 4 + 8;

/// Shape families in superclass order.
pub const SHAPES: [&str; 4] = ["disk", "square", "triangle", "ring"];

const BACKGROUND: f64 = -0.9;
const FILL: f64 = 0.3;
const STRIPE_AMPLITUDE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_super: usize,
    pub subs_per_super: usize,
    pub samples_per_sub: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_super: 4,
            subs_per_super: 5,
            samples_per_sub: 200,
            size: 32,
            channels: 1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Hierarchy::new(self.n_super, self.subs_per_super)
    }

    pub fn len(&self) -> usize {
        self.n_super * self.subs_per_super * self.samples_per_sub
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_super > SHAPES.len() {
            bail!(Config, "only {} shape families exist, n_super = {}", SHAPES.len(), self.n_super);
        }
        self.hierarchy().map_err(|e| crate::Error::Config(e.to_string()))?;
        if self.samples_per_sub == 0 {
            bail!(Config, "samples_per_sub must be positive");
        }
        if self.size < 8 || !self.size.is_power_of_two() {
            bail!(Config, "image size must be a power of two ≥ 8, got {}", self.size);
        }
        if self.channels != 1 && self.channels != 3 {
            bail!(Config, "channels must be 1 or 3, got {}", self.channels);
        }
        Ok(())
    }

    /// Grating frequency (cycles per image width) and orientation for subclass index `j`.
    pub fn texture(&self, j: usize) -> (f64, f64) {
        let n = self.subs_per_super;
        let base = if n > 1 { 4.0 + 8.0 * j as f64 / (n - 1) as f64 } else { 4.0 };
        (base * self.size as f64 / 32.0, PI * j as f64 / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, C]` in [−1, 1].
    pub image: Tensor,
    pub label: TieredCondition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

/// Signed distance to the shape boundary, positive inside.
fn shape_distance(kind: usize, x: f64, y: f64, scale: f64) -> f64 {
    match kind {
        0 => 10.0 * scale - x.hypot(y),
        1 => 8.5 * scale - x.abs().max(y.abs()),
        2 => {
            // Equilateral triangle pointing up, circumradius 12·scale.
            let r = 12.0 * scale;
            let normals = [(0.0, 1.0), (0.866_025_403_784_438_6, -0.5), (-0.866_025_403_784_438_6, -0.5)];
            normals
                .iter()
                .map(|(nx, ny)| r / 2.0 - (x * nx - y * ny))
                .fold(f64::INFINITY, f64::min)
        }
        _ => {
            let d = x.hypot(y);
            (11.0 * scale - d).min(d - 5.5 * scale)
        }
    }
}

fn render(spec: &DatasetSpec, sub: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let kind = sub / spec.subs_per_super;
    let (freq, theta) = spec.texture(sub % spec.subs_per_super);
    let unit = spec.size as f64 / 32.0;
    let cx = spec.size as f64 / 2.0 - 0.5 + rng.random_range(-3.0..3.0) * unit;
    let cy = spec.size as f64 / 2.0 - 0.5 + rng.random_range(-3.0..3.0) * unit;
    let scale = rng.random_range(0.85..1.15) * unit;
    let phase = rng.random_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let n = spec.size;
    let mut data = Vec::with_capacity(spec.pixels());
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 - cx, row as f64 - cy);
            // One-pixel linear ramp across the boundary.
            let mask = (shape_distance(kind, x, y, scale) + 0.5).clamp(0.0, 1.0);
            let along = (col as f64 * c + row as f64 * s) / n as f64;
            let stripe = STRIPE_AMPLITUDE * (2.0 * PI * freq * along + phase).sin();
            let v = BACKGROUND + mask * (FILL - BACKGROUND + stripe);
            data.extend(std::iter::repeat_n(v, spec.channels));
        }
    }
    Tensor::new(vec![n, n, spec.channels], data).expect("pixel count matches shape")
}

/// Builds the full set, ordered by subclass then sample index.
///
/// Sample `i` of every subclass in one superclass shares its ChaCha stream,
/// so those samples share shape geometry and grating phase and differ only
/// in grating frequency and orientation.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let h = spec.hierarchy()?;
    let mut samples = Vec::with_capacity(spec.len());
    for sub in 0..h.n_sub() {
        for i in 0..spec.samples_per_sub {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((sub / spec.subs_per_super) * spec.samples_per_sub + i) as u64);
            samples.push(Sample {
                image: render(spec, sub, &mut rng),
                label: TieredCondition::full(sub, &h),
            });
        }
    }
    Ok(Dataset { spec: *spec, samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn hierarchy(&self) -> Hierarchy {
        self.spec.hierarchy().expect("validated on construction")
    }

    /// Stacks the given samples into `[B, H, W, C]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<TieredCondition>) {
        let s = &self.spec;
        let mut data = Vec::with_capacity(indices.len() * s.pixels());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
            labels.push(self.samples[i].label);
        }
        let shape = vec![indices.len(), s.size, s.size, s.channels];
        (Tensor::new(shape, data).expect("pixel count matches shape"), labels)
    }

    /// Seeded shuffle split; the first part holds `round(fraction · N)` samples.
    pub fn split(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((fraction.clamp(0.0, 1.0) * self.len() as f64).round() as usize).min(self.len());
        let rest = order.split_off(cut);
        (order, rest)
    }

    /// Mean pixel value per subclass.
    pub fn subclass_means(&self) -> Vec<f64> {
        let n_sub = self.hierarchy().n_sub();
        let mut sums = vec![0.0; n_sub];
        let mut counts = vec![0usize; n_sub];
        for s in &self.samples {
            let sub = s.label.sub.expect("dataset labels are complete");
            sums[sub] += s.image.sum();
            counts[sub] += s.image.len();
        }
        sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 + 8 * s.pixels()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [s.n_super, s.subs_per_super, s.samples_per_sub, s.size, s.size, s.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.seed.to_le_bytes());
        for sample in &self.samples {
            let sub = sample.label.sub.expect("dataset labels are complete");
            let sup = sample.label.sup.expect("dataset labels are complete");
            out.extend_from_slice(&(sub as u16).to_le_bytes());
            out.extend_from_slice(&(sup as u16).to_le_bytes());
            for v in sample.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, expected EFDD"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, &format!("unsupported version {version}")));
        }
        let mut field = || r.u32().map(|v| v as usize);
        let (n_super, subs_per_super, samples_per_sub) = (field()?, field()?, field()?);
        let (height, width, channels) = (field()?, field()?, field()?);
        let seed = r.u64()?;
        if height != width {
            return Err(r.error(24, &format!("non-square images {height}×{width}")));
        }
        let spec = DatasetSpec {
            n_super,
            subs_per_super,
            samples_per_sub,
            size: height,
            channels,
            seed,
        };
        let h = Hierarchy::new(n_super, subs_per_super).map_err(|e| r.error(8, &e.to_string()))?;
        let record = 4 + 8 * spec.pixels();
        let count = n_super * subs_per_super * samples_per_sub;
        let expected = count.checked_mul(record).unwrap_or(usize::MAX);
        if r.remaining() < expected {
            return Err(r.error(bytes.len() as u64, "unexpected end of file"));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos as u64;
            let (sub, sup) = (r.u16()? as usize, r.u16()? as usize);
            let label = TieredCondition { sub: Some(sub), sup: Some(sup) };
            if label.validate(&h).is_err() {
                return Err(r.error(at, &format!("inconsistent label pair ({sub}, {sup})")));
            }
            let data = (0..spec.pixels()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let image = Tensor::new(vec![height, width, channels], data).expect("pixel count matches shape");
            samples.push(Sample { image, label });
        }
        if r.remaining() != 0 {
            return Err(r.error(r.pos as u64, "trailing bytes after last sample"));
        }
        Ok(Self { spec, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Maps [−1, 1] to [0, 255], rounding half away from zero; out-of-range
/// values saturate.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (`C = 1`) or PPM (`C = 3`) bytes for one `[H, W, C]` image.
pub fn encode_image(x: &Tensor) -> Result<Vec<u8>> {
    let (b, h, w, c) = image_dims(x.shape())?;
    if b != 1 {
        bail!(Dimension, "expected a single image, got batch of {b}");
    }
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => bail!(Config, "cannot export {c}-channel image, only 1 or 3"),
    };
    if !x.all_finite() {
        bail!(Contract, "image contains non-finite values");
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(x.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn export_image(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_image(x)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
