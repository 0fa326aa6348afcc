//! Two-dimensional Fourier transforms and the Gaussian low/high-pass pair
//! used to split an image into coarse and fine bands.
//!
//! Images are `[H, W, C]` tensors (a rank-2 `[H, W]` tensor is treated as a
//! single channel, a rank-4 `[B, H, W, C]` tensor as a batch). Transforms
//! run per channel; the forward transform is unnormalised and the inverse
//! carries the `1/(H·W)` factor. Spectra keep the zero frequency at index
//! `(0, 0)`.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{bail, Result};
use crate::numerics::{CustomBackward, Tensor, Var};

/// Frequency-domain image in the same `[H, W, C]` layout as its source.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        let n = height * width * channels;
        Self {
            height,
            width,
            channels,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    fn index(&self, u: usize, v: usize, c: usize) -> usize {
        (u * self.width + v) * self.channels + c
    }

    /// `|F|²` at every bin.
    pub fn power(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).collect()
    }

    /// Largest violation of `F(u,v) = conj(F(-u,-v))` over all bins.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for u in 0..self.height {
            for v in 0..self.width {
                let (mu, mv) = ((self.height - u) % self.height, (self.width - v) % self.width);
                for c in 0..self.channels {
                    let (a, b) = (self.index(u, v, c), self.index(mu, mv, c));
                    worst = worst
                        .max((self.re[a] - self.re[b]).abs())
                        .max((self.im[a] + self.im[b]).abs());
                }
            }
        }
        worst
    }
}

/// Output of [`ifft2`]: the real part plus the largest discarded imaginary
/// magnitude, which is round-off for spectra of real images.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Tensor,
    pub max_imag: f64,
}

/// `(batch, height, width, channels)` of an image-shaped tensor.
pub fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w, 1)),
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => bail!(Dimension, "expected an image tensor, got shape {shape:?}"),
    }
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        bail!(Config, "FFT extents must be powers of two, got {h}x{w}");
    }
    Ok(())
}

/// In-place iterative radix-2 transform of one complex sequence.
fn fft_1d(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (s, c) = (step * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Transforms one `h×w` plane stored row-major.
fn fft_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft_1d(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_re[r] = re[r * w + c];
            col_im[r] = im[r * w + c];
        }
        fft_1d(&mut col_re, &mut col_im, inverse);
        for r in 0..h {
            re[r * w + c] = col_re[r];
            im[r * w + c] = col_im[r];
        }
    }
}

fn transform(spec: &mut Spectrum, inverse: bool) {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let mut pr = vec![0.0; h * w];
    let mut pi = vec![0.0; h * w];
    for c in 0..ch {
        for p in 0..h * w {
            pr[p] = spec.re[p * ch + c];
            pi[p] = spec.im[p * ch + c];
        }
        fft_plane(&mut pr, &mut pi, h, w, inverse);
        for p in 0..h * w {
            spec.re[p * ch + c] = pr[p];
            spec.im[p * ch + c] = pi[p];
        }
    }
}

fn fft2_slice(data: &[f64], h: usize, w: usize, c: usize) -> Spectrum {
    let mut spec = Spectrum {
        height: h,
        width: w,
        channels: c,
        re: data.to_vec(),
        im: vec![0.0; data.len()],
    };
    transform(&mut spec, false);
    spec
}

fn ifft2_real(spec: &Spectrum) -> (Vec<f64>, f64) {
    let mut s = spec.clone();
    transform(&mut s, true);
    let norm = 1.0 / (s.height * s.width) as f64;
    let max_imag = s.im.iter().fold(0.0f64, |m, v| m.max((v * norm).abs()));
    (s.re.into_iter().map(|v| v * norm).collect(), max_imag)
}

/// Per-channel 2D DFT of a single image.
pub fn fft2(x: &Tensor) -> Result<Spectrum> {
    let (b, h, w, c) = image_dims(x.shape())?;
    if b != 1 || x.rank() == 4 {
        bail!(Dimension, "fft2 takes a single image, got shape {:?}", x.shape());
    }
    check_pow2(h, w)?;
    Ok(fft2_slice(x.data(), h, w, c))
}

/// Inverse of [`fft2`]; returns an `[H, W, C]` tensor.
pub fn ifft2(s: &Spectrum) -> Reconstruction {
    let (data, max_imag) = ifft2_real(s);
    let image = Tensor::new(vec![s.height, s.width, s.channels], data)
        .expect("spectrum buffers match their extents");
    Reconstruction { image, max_imag }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    LowPass,
    HighPass,
}

/// Isotropic Gaussian frequency mask stored in uncentred layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialFilter {
    kind: FilterKind,
    cutoff: f64,
    height: usize,
    width: usize,
    mask: Vec<f64>,
}

/// Signed frequency of bin `k` in a length-`n` transform.
fn centered(k: usize, n: usize) -> f64 {
    if k < n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Builds the Gaussian low-pass `exp(-D²/2D₀²)` or its complement.
pub fn make_filter(kind: FilterKind, cutoff: f64, height: usize, width: usize) -> Result<RadialFilter> {
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        bail!(Config, "filter cutoff must be positive, got {cutoff}");
    }
    if height == 0 || width == 0 {
        bail!(Config, "filter extents must be positive");
    }
    let mut mask = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            let (du, dv) = (centered(u, height), centered(v, width));
            let low = (-(du * du + dv * dv) / (2.0 * cutoff * cutoff)).exp();
            mask.push(match kind {
                FilterKind::LowPass => low,
                FilterKind::HighPass => 1.0 - low,
            });
        }
    }
    Ok(RadialFilter {
        kind,
        cutoff,
        height,
        width,
        mask,
    })
}

impl RadialFilter {
    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Weights over the `H×W` bins, row-major, zero frequency first.
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.mask[u * self.width + v]
    }

    /// Multiplies every channel of `s` by the mask.
    pub fn apply(&self, s: &Spectrum) -> Result<Spectrum> {
        if (s.height, s.width) != (self.height, self.width) {
            bail!(
                Dimension,
                "filter is {}x{} but spectrum is {}x{}",
                self.height,
                self.width,
                s.height,
                s.width
            );
        }
        let mut out = s.clone();
        for (p, &m) in self.mask.iter().enumerate() {
            for c in 0..s.channels {
                out.re[p * s.channels + c] *= m;
                out.im[p * s.channels + c] *= m;
            }
        }
        Ok(out)
    }
}

/// Complementary Gaussian pair splitting images into high and low bands.
#[derive(Clone, Debug)]
pub struct BandSplitter {
    low: RadialFilter,
    high: RadialFilter,
}

/// Default cutoff, one eighth of the smaller image side.
pub fn default_cutoff(height: usize, width: usize) -> f64 {
    height.min(width) as f64 / 8.0
}

impl BandSplitter {
    pub fn new(cutoff: f64, height: usize, width: usize) -> Result<Self> {
        check_pow2(height, width)?;
        Ok(Self {
            low: make_filter(FilterKind::LowPass, cutoff, height, width)?,
            high: make_filter(FilterKind::HighPass, cutoff, height, width)?,
        })
    }

    pub fn low(&self) -> &RadialFilter {
        &self.low
    }

    pub fn high(&self) -> &RadialFilter {
        &self.high
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        let dims = image_dims(shape)?;
        if (dims.1, dims.2) != self.low.dims() {
            bail!(
                Dimension,
                "image {shape:?} does not match the {}x{} filter pair",
                self.low.height,
                self.low.width
            );
        }
        Ok(dims)
    }

    /// Returns `(high band, low band)`, each shaped like `x`.
    pub fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w, c) = self.check(x.shape())?;
        let plane = h * w * c;
        let mut high = Vec::with_capacity(x.len());
        let mut low = Vec::with_capacity(x.len());
        for i in 0..b {
            let spec = fft2_slice(&x.data()[i * plane..(i + 1) * plane], h, w, c);
            high.extend(ifft2_real(&self.high.apply(&spec)?).0);
            low.extend(ifft2_real(&self.low.apply(&spec)?).0);
        }
        Ok((
            Tensor::new(x.shape().to_vec(), high)?,
            Tensor::new(x.shape().to_vec(), low)?,
        ))
    }

    /// Applies one filter to every image in `x`.
    fn filter_batch(&self, filter: &RadialFilter, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = self.check(x.shape())?;
        let plane = h * w * c;
        let mut out = Vec::with_capacity(x.len());
        for i in 0..b {
            let spec = fft2_slice(&x.data()[i * plane..(i + 1) * plane], h, w, c);
            out.extend(ifft2_real(&filter.apply(&spec)?).0);
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Tracked version of [`BandSplitter::split`].
    ///
    /// Each band is `x ↦ F⁻¹(G·F(x))` with a real, even mask, which is a
    /// symmetric linear map on real images; its backward pass applies the
    /// same filter to the incoming gradient.
    pub fn split_var(self: &Rc<Self>, x: &Var) -> Result<(Var, Var)> {
        let (high, low) = self.split(x.value())?;
        let h = Var::custom(
            &[x],
            high,
            FilterBackward {
                splitter: self.clone(),
                kind: FilterKind::HighPass,
            },
        )?;
        let l = Var::custom(
            &[x],
            low,
            FilterBackward {
                splitter: self.clone(),
                kind: FilterKind::LowPass,
            },
        )?;
        Ok((h, l))
    }
}

struct FilterBackward {
    splitter: Rc<BandSplitter>,
    kind: FilterKind,
}

impl CustomBackward for FilterBackward {
    fn backward(&self, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let filter = match self.kind {
            FilterKind::LowPass => &self.splitter.low,
            FilterKind::HighPass => &self.splitter.high,
        };
        Ok(vec![Some(self.splitter.filter_batch(filter, grad_out)?)])
    }
}

/// Fraction of spectral energy passed by the Gaussian high-pass mask,
/// `Σ G_h·|F|² / Σ |F|²` over all bins and channels; 0 for an all-zero image.
pub fn high_freq_energy_ratio(x: &Tensor, cutoff: f64) -> Result<f64> {
    let (_, h, w, _) = image_dims(x.shape())?;
    let filter = make_filter(FilterKind::HighPass, cutoff, h, w)?;
    high_freq_energy_ratio_with(x, &filter)
}

/// As [`high_freq_energy_ratio`] with a prebuilt high-pass filter.
pub fn high_freq_energy_ratio_with(x: &Tensor, high: &RadialFilter) -> Result<f64> {
    let (b, h, w, c) = image_dims(x.shape())?;
    if b != 1 || x.rank() == 4 {
        bail!(Dimension, "energy ratio takes a single image, got {:?}", x.shape());
    }
    check_pow2(h, w)?;
    if high.dims() != (h, w) {
        bail!(Dimension, "filter does not match image {h}x{w}");
    }
    let power = fft2_slice(x.data(), h, w, c).power();
    let total: f64 = power.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let passed: f64 = power
        .iter()
        .enumerate()
        .map(|(i, p)| p * high.mask[i / c])
        .sum();
    Ok(passed / total)
}
