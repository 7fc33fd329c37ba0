//! Orthogonal 2-D discrete wavelet transforms (Haar, Daubechies-2/3) with
//! periodic boundary extension, multi-level decomposition, and the discrete
//! wavelet loss on color images.
//!
//! The analysis operator along one axis is `a_i = Σ_k ℓ_k x_{(2i+k) mod N}`
//! (and likewise with the high-pass `h`), i.e. multiplication by the
//! orthogonal "shifting-row" matrix `L[i, j] = ℓ_{(j − 2i) mod N}`. Because
//! the filters are orthonormal and the extension is periodic, the transform
//! is orthogonal: the inverse is the adjoint, energy is conserved and the
//! backward pass of [`dwt2`] is just the inverse transform of the upstream
//! gradient.

use crate::backend::fmath;
use crate::error::CoreError;
use crate::tensor::{CustomOp, Tensor};
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

/// Orthonormal wavelet filter pair. `lowpass` sums to √2 with unit L2 norm;
/// `highpass` is derived by the alternating-flip construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletFilter {
    order: usize,
    lowpass: Vec<f64>,
    highpass: Vec<f64>,
}

/// High-pass from low-pass by alternating flip: `h_k = (−1)^k ℓ_{N−1−k}`.
pub fn make_highpass(lowpass: &[f64]) -> Result<Vec<f64>, CoreError> {
    let n = lowpass.len();
    if n == 0 || n % 2 != 0 {
        return Err(CoreError::BadDimension(format!(
            "alternating flip requires an even-length filter, got length {n}"
        )));
    }
    Ok((0..n)
        .map(|k| {
            let v = lowpass[n - 1 - k];
            if k % 2 == 0 {
                v
            } else {
                -v
            }
        })
        .collect())
}

impl WaveletFilter {
    /// Build from low-pass coefficients; validates orthonormality.
    pub fn from_lowpass(lowpass: Vec<f64>) -> Result<WaveletFilter, CoreError> {
        let n = lowpass.len();
        let highpass = make_highpass(&lowpass)?;
        let sum: f64 = lowpass.iter().sum();
        let norm2: f64 = lowpass.iter().map(|v| v * v).sum();
        if (sum - core::f64::consts::SQRT_2).abs() > 1e-12 || (norm2 - 1.0).abs() > 1e-12 {
            return Err(CoreError::BadParameter(format!(
                "low-pass filter is not orthonormal: sum {sum}, squared norm {norm2}"
            )));
        }
        Ok(WaveletFilter {
            order: n / 2,
            lowpass,
            highpass,
        })
    }

    /// Haar: `[1, 1] / √2`.
    pub fn haar() -> WaveletFilter {
        let s = core::f64::consts::SQRT_2;
        WaveletFilter::from_lowpass(vec![1.0 / s, 1.0 / s]).unwrap()
    }

    /// Daubechies-2: `[1+√3, 3+√3, 3−√3, 1−√3] / (4√2)`.
    pub fn db2() -> WaveletFilter {
        let r3 = fmath::sqrt(3.0);
        let f = 4.0 * core::f64::consts::SQRT_2;
        WaveletFilter::from_lowpass(vec![
            (1.0 + r3) / f,
            (3.0 + r3) / f,
            (3.0 - r3) / f,
            (1.0 - r3) / f,
        ])
        .unwrap()
    }

    /// Daubechies-3 from the exact algebraic form
    /// `[1+√10±A, 5+√10±3A, 10−2√10±2A] / (16√2)` with `A = √(5+2√10)`;
    /// the truncated 12-digit values circulating in older tables miss
    /// orthonormality by ~5e-12, which this construction avoids.
    pub fn db3() -> WaveletFilter {
        let r10 = fmath::sqrt(10.0);
        let a = fmath::sqrt(5.0 + 2.0 * r10);
        let f = 16.0 * core::f64::consts::SQRT_2;
        WaveletFilter::from_lowpass(vec![
            (1.0 + r10 + a) / f,
            (5.0 + r10 + 3.0 * a) / f,
            (10.0 - 2.0 * r10 + 2.0 * a) / f,
            (10.0 - 2.0 * r10 - 2.0 * a) / f,
            (5.0 + r10 - 3.0 * a) / f,
            (1.0 + r10 - a) / f,
        ])
        .unwrap()
    }

    pub fn by_name(name: &str) -> Result<WaveletFilter, CoreError> {
        match name {
            "haar" | "db1" => Ok(WaveletFilter::haar()),
            "db2" => Ok(WaveletFilter::db2()),
            "db3" => Ok(WaveletFilter::db3()),
            other => Err(CoreError::BadParameter(format!(
                "unknown wavelet '{other}' (expected haar, db2 or db3)"
            ))),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lowpass
    }

    pub fn highpass(&self) -> &[f64] {
        &self.highpass
    }

    /// Filter support length, `2·order`.
    pub fn support(&self) -> usize {
        self.lowpass.len()
    }
}

/// The four sub-bands of one decomposition level; each is square with half
/// the parent side.
#[derive(Debug, Clone)]
pub struct SubBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub level: usize,
}

/// Per-sub-band weights of the discrete wavelet loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandWeights {
    pub ll: f64,
    pub lh: f64,
    pub hl: f64,
    pub hh: f64,
}

impl BandWeights {
    pub fn validate(&self) -> Result<(), CoreError> {
        for (name, w) in [("ll", self.ll), ("lh", self.lh), ("hl", self.hl), ("hh", self.hh)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(CoreError::BadParameter(format!(
                    "band weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

// --- raw periodic transforms -------------------------------------------------

fn analyze_1d(x: &[f64], lo: &[f64], hi: &[f64], out_lo: &mut [f64], out_hi: &mut [f64]) {
    let n = x.len();
    let half = n / 2;
    for i in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for (k, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            let v = x[(2 * i + k) % n];
            a += l * v;
            d += h * v;
        }
        out_lo[i] = a;
        out_hi[i] = d;
    }
}

fn synthesize_1d(a: &[f64], d: &[f64], lo: &[f64], hi: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.fill(0.0);
    for i in 0..n / 2 {
        for (k, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            out[(2 * i + k) % n] += l * a[i] + h * d[i];
        }
    }
}

/// Single-level 2-D analysis into the packed quadrant layout
/// `[LL LH; HL HH]` (vertical direction first letter, horizontal second).
fn dwt2_packed(x: &[f64], n: usize, f: &WaveletFilter) -> Vec<f64> {
    let half = n / 2;
    let lo = &f.lowpass;
    let hi = &f.highpass;
    // Horizontal pass over rows.
    let mut tmp = vec![0.0; n * n];
    let mut row_lo = vec![0.0; half];
    let mut row_hi = vec![0.0; half];
    for r in 0..n {
        analyze_1d(&x[r * n..(r + 1) * n], lo, hi, &mut row_lo, &mut row_hi);
        tmp[r * n..r * n + half].copy_from_slice(&row_lo);
        tmp[r * n + half..(r + 1) * n].copy_from_slice(&row_hi);
    }
    // Vertical pass over columns.
    let mut out = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for c in 0..n {
        for r in 0..n {
            col[r] = tmp[r * n + c];
        }
        analyze_1d(&col, lo, hi, &mut row_lo, &mut row_hi);
        for r in 0..half {
            out[r * n + c] = row_lo[r];
            out[(half + r) * n + c] = row_hi[r];
        }
    }
    out
}

/// Inverse of [`dwt2_packed`].
fn idwt2_packed(p: &[f64], n: usize, f: &WaveletFilter) -> Vec<f64> {
    let half = n / 2;
    let lo = &f.lowpass;
    let hi = &f.highpass;
    // Vertical synthesis per column.
    let mut tmp = vec![0.0; n * n];
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    let mut col = vec![0.0; n];
    for c in 0..n {
        for r in 0..half {
            a[r] = p[r * n + c];
            d[r] = p[(half + r) * n + c];
        }
        synthesize_1d(&a, &d, lo, hi, &mut col);
        for r in 0..n {
            tmp[r * n + c] = col[r];
        }
    }
    // Horizontal synthesis per row.
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        a.copy_from_slice(&tmp[r * n..r * n + half]);
        d.copy_from_slice(&tmp[r * n + half..(r + 1) * n]);
        synthesize_1d(&a, &d, lo, hi, &mut out[r * n..(r + 1) * n]);
    }
    out
}

fn check_dwt_input(t: &Tensor, f: &WaveletFilter) -> Result<usize, CoreError> {
    let (r, c) = t.shape();
    if r != c {
        return Err(CoreError::BadDimension(format!(
            "dwt2 expects a square image, got {r}x{c}"
        )));
    }
    if r % 2 != 0 || r < f.support() {
        return Err(CoreError::BadDimension(format!(
            "dwt2 side must be even and >= filter support {}, got {r}",
            f.support()
        )));
    }
    Ok(r)
}

struct PackedDwt2 {
    filter: WaveletFilter,
    n: usize,
}

impl CustomOp for PackedDwt2 {
    fn name(&self) -> &'static str {
        "dwt2"
    }

    // The packed transform is orthogonal, so the adjoint of the forward map
    // is the inverse transform applied to the upstream gradient.
    fn backward_into(&self, grad_out: &[f64], idx: usize, sink: &mut [f64]) {
        debug_assert_eq!(idx, 0);
        let g = idwt2_packed(grad_out, self.n, &self.filter);
        for (s, v) in sink.iter_mut().zip(&g) {
            *s += v;
        }
    }
}

/// Differentiable single-level 2-D DWT of a square, even-sided image tensor.
pub fn dwt2(image: &Tensor, filter: &WaveletFilter) -> Result<SubBands, CoreError> {
    let n = check_dwt_input(image, filter)?;
    let packed_data = dwt2_packed(&image.data(), n, filter);
    let packed = Tensor::custom(
        core::slice::from_ref(image),
        Rc::new(PackedDwt2 {
            filter: filter.clone(),
            n,
        }),
        n,
        n,
        packed_data,
    );
    let half = n / 2;
    Ok(SubBands {
        ll: packed.slice_rows(0, half).slice_cols(0, half),
        lh: packed.slice_rows(0, half).slice_cols(half, n),
        hl: packed.slice_rows(half, n).slice_cols(0, half),
        hh: packed.slice_rows(half, n).slice_cols(half, n),
        level: 1,
    })
}

/// Inverse 2-D DWT (perfect reconstruction under periodic extension).
pub fn idwt2(bands: &SubBands, filter: &WaveletFilter) -> Result<Tensor, CoreError> {
    let (hr, hc) = bands.ll.shape();
    for (name, b) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if b.shape() != (hr, hc) {
            return Err(CoreError::BadDimension(format!(
                "idwt2: band {name} is {}x{} but ll is {hr}x{hc}",
                b.rows(),
                b.cols()
            )));
        }
    }
    if hr != hc {
        return Err(CoreError::BadDimension(format!(
            "idwt2: bands must be square, got {hr}x{hc}"
        )));
    }
    let n = hr * 2;
    // Assemble the packed layout, then invert. (Non-differentiable path: the
    // training losses only ever need the forward transform.)
    let mut packed = vec![0.0; n * n];
    let ll = bands.ll.data();
    let lh = bands.lh.data();
    let hl = bands.hl.data();
    let hh = bands.hh.data();
    for r in 0..hr {
        for c in 0..hr {
            packed[r * n + c] = ll[r * hr + c];
            packed[r * n + hr + c] = lh[r * hr + c];
            packed[(hr + r) * n + c] = hl[r * hr + c];
            packed[(hr + r) * n + hr + c] = hh[r * hr + c];
        }
    }
    let img = idwt2_packed(&packed, n, filter);
    Ok(Tensor::from_vec(n, n, img))
}

/// Multi-level decomposition: only the LL band is recursively split, detail
/// bands are kept at every level. Element `k` of the result is level `k+1`.
pub fn dwt2_multilevel(
    image: &Tensor,
    filter: &WaveletFilter,
    levels: usize,
) -> Result<Vec<SubBands>, CoreError> {
    if levels == 0 {
        return Err(CoreError::BadParameter("levels must be >= 1".into()));
    }
    let n = image.rows();
    let div = 1usize << levels;
    if image.rows() != image.cols() || n % div != 0 {
        return Err(CoreError::BadDimension(format!(
            "side {n} is not divisible by 2^{levels}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = image.clone();
    for level in 1..=levels {
        let mut bands = dwt2(&current, filter)?;
        bands.level = level;
        current = bands.ll.clone();
        out.push(bands);
    }
    Ok(out)
}

/// Discrete wavelet loss between two color images (3 channel tensors each):
/// single-level transform per channel, then `Σ_band λ_band · mean(Δ²)` with
/// the mean taken over the band's coefficients of all channels.
pub fn dw_loss(
    pred: &[Tensor; 3],
    gt: &[Tensor; 3],
    weights: &BandWeights,
    filter: &WaveletFilter,
) -> Result<Tensor, CoreError> {
    weights.validate()?;
    let shape = pred[0].shape();
    for t in pred.iter().chain(gt.iter()) {
        if t.shape() != shape {
            return Err(CoreError::BadDimension(format!(
                "dw_loss: channel shape {}x{} differs from {}x{}",
                t.rows(),
                t.cols(),
                shape.0,
                shape.1
            )));
        }
    }
    let mut per_band: [Vec<Tensor>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for ch in 0..3 {
        let bp = dwt2(&pred[ch], filter)?;
        let bg = dwt2(&gt[ch], filter)?;
        per_band[0].push(bp.ll.sub(&bg.ll));
        per_band[1].push(bp.lh.sub(&bg.lh));
        per_band[2].push(bp.hl.sub(&bg.hl));
        per_band[3].push(bp.hh.sub(&bg.hh));
    }
    let lambdas = [weights.ll, weights.lh, weights.hl, weights.hh];
    let mut loss = Tensor::scalar(0.0);
    for (parts, lambda) in per_band.iter().zip(lambdas) {
        let delta = Tensor::concat_rows(parts);
        loss = loss.add(&delta.square().mean_all().mul_scalar(lambda));
    }
    Ok(loss)
}
