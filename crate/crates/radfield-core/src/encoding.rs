//! Input encodings for the field network.
//!
//! * [`hash_encode`] — multiresolution hash-grid encoding of 3-D positions
//!   (trainable feature tables, trilinear interpolation per level, dense
//!   indexing for coarse levels and XOR-prime hashing for fine ones).
//! * [`sh_encode`] — fixed real spherical-harmonics basis (degrees 0..7,
//!   64 values) of unit view directions.
//! * [`hybrid_concat`] — the cross-branch arrangement feeding the two MLP
//!   branches: the position encoding keeps only its first feature column for
//!   the density branch, the remaining columns are concatenated after the
//!   view encoding for the color branch.

use crate::error::CoreError;
use crate::tensor::pool;
use crate::tensor::{CustomOp, Tensor};
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

/// Multiresolution grid layout. Defaults are the desk-scale preset: 16
/// levels of 2 features, 2¹⁴ table entries per level, resolutions growing
/// geometrically from 16 to 512 (growth 2^(1/3)).
#[derive(Debug, Clone, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            features_per_level: 2,
            table_size: 1 << 14,
            base_resolution: 16,
            growth_factor: GROWTH_CUBE_ROOT_2,
        }
    }
}

/// 2^(1/3): doubles the grid resolution every three levels.
pub const GROWTH_CUBE_ROOT_2: f64 = 1.259_921_049_894_873_2;

const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(CoreError::BadParameter(
                "hash grid needs at least one level and one feature".into(),
            ));
        }
        if !self.table_size.is_power_of_two() {
            return Err(CoreError::BadParameter(format!(
                "table_size must be a power of two, got {}",
                self.table_size
            )));
        }
        if self.base_resolution < 1 || self.growth_factor <= 1.0 {
            return Err(CoreError::BadParameter(format!(
                "base_resolution {} / growth_factor {} out of range",
                self.base_resolution, self.growth_factor
            )));
        }
        Ok(())
    }

    /// Grid resolution (cells per axis) of `level`. The tiny epsilon keeps
    /// the intended exact resolutions (e.g. 16·2^(l/3) at l divisible by 3)
    /// from landing one below due to accumulated rounding in `growth^level`.
    pub fn resolution(&self, level: usize) -> usize {
        let mut scale = 1.0f64;
        for _ in 0..level {
            scale *= self.growth_factor;
        }
        (self.base_resolution as f64 * scale + 1e-8) as usize
    }

    /// Whether `level` is small enough to index its (res+1)³ corners
    /// directly instead of hashing.
    pub fn is_dense(&self, level: usize) -> bool {
        let side = self.resolution(level) + 1;
        side * side * side <= self.table_size
    }

    /// Total output feature width, `levels · features_per_level`.
    pub fn feature_width(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Row count of the trainable feature-table tensor.
    pub fn table_rows(&self) -> usize {
        self.levels * self.table_size
    }
}

#[inline]
fn corner_index(cfg: &HashGridConfig, dense: bool, res: usize, ix: u64, iy: u64, iz: u64) -> usize {
    if dense {
        let side = (res + 1) as u64;
        (ix + iy * side + iz * side * side) as usize
    } else {
        let h = ix
            .wrapping_mul(HASH_PRIMES[0])
            ^ iy.wrapping_mul(HASH_PRIMES[1])
            ^ iz.wrapping_mul(HASH_PRIMES[2]);
        (h & (cfg.table_size as u64 - 1)) as usize
    }
}

/// Per-point cell coordinates at one level: base corner and fractions.
#[inline]
fn cell_of(p: &[f64], res: usize) -> ([u64; 3], [f64; 3]) {
    let r = res as f64;
    let mut base = [0u64; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let u = p[a] * r;
        // floor for non-negative input; clamp so x == 1.0 uses the last cell
        let mut i = u as i64;
        if i as f64 > u {
            i -= 1; // defensive; cannot trigger for u >= 0
        }
        let i = (i.max(0) as u64).min(res as u64 - 1);
        base[a] = i;
        frac[a] = u - i as f64;
    }
    (base, frac)
}

struct HashEncodeOp {
    cfg: HashGridConfig,
    n: usize,
    // Trilinear stencil cached by the forward walk, level-major like the
    // forward accumulation: entry (level·n + point)·8 + corner holds the
    // absolute table row and interpolation weight, so backward replays the
    // scatter without redoing any cell or hash arithmetic.
    rows: Vec<u32>,
    weights: Vec<f64>,
}

impl Drop for HashEncodeOp {
    fn drop(&mut self) {
        pool::give_u32(core::mem::take(&mut self.rows));
        pool::give(core::mem::take(&mut self.weights));
    }
}

impl CustomOp for HashEncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward_into(&self, grad_out: &[f64], idx: usize, sink: &mut [f64]) {
        debug_assert_eq!(idx, 0);
        let fpl = self.cfg.features_per_level;
        let width = self.cfg.feature_width();
        for level in 0..self.cfg.levels {
            let cache_base = level * self.n * 8;
            for nidx in 0..self.n {
                let g = &grad_out[nidx * width + level * fpl..nidx * width + (level + 1) * fpl];
                let e = cache_base + nidx * 8;
                for corner in 0..8usize {
                    let row = self.rows[e + corner] as usize;
                    let w = self.weights[e + corner];
                    let t = &mut sink[row * fpl..(row + 1) * fpl];
                    for (ti, gi) in t.iter_mut().zip(g) {
                        *ti += w * gi;
                    }
                }
            }
        }
    }
}

/// Encode a batch of 3-D points (N×3 tensor, all coordinates in [0,1]) into
/// N × `cfg.feature_width()` features by trilinear interpolation of trainable
/// per-level tables (`tables` is `cfg.table_rows()` × `features_per_level`).
/// Differentiable with respect to `tables`.
pub fn hash_encode(
    points: &Tensor,
    cfg: &HashGridConfig,
    tables: &Tensor,
) -> Result<Tensor, CoreError> {
    cfg.validate()?;
    if points.cols() != 3 {
        return Err(CoreError::BadDimension(format!(
            "hash_encode: points must be N x 3, got {}x{}",
            points.rows(),
            points.cols()
        )));
    }
    if tables.shape() != (cfg.table_rows(), cfg.features_per_level) {
        return Err(CoreError::BadDimension(format!(
            "hash_encode: tables must be {}x{}, got {}x{}",
            cfg.table_rows(),
            cfg.features_per_level,
            tables.rows(),
            tables.cols()
        )));
    }
    for (i, v) in points.data().iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(CoreError::BadParameter(format!(
                "hash_encode: coordinate {v} at point {} axis {} is outside [0,1]",
                i / 3,
                i % 3
            )));
        }
    }

    if cfg.table_rows() > u32::MAX as usize {
        return Err(CoreError::BadParameter(format!(
            "hash_encode: {} table rows exceed the supported maximum",
            cfg.table_rows()
        )));
    }

    let n = points.rows();
    let fpl = cfg.features_per_level;
    let width = cfg.feature_width();
    let n_entries = n * cfg.levels * 8;
    let mut rows = pool::take_uninit_u32(n_entries);
    let mut weights = pool::take_uninit(n_entries);
    let mut out = pool::take_uninit(n * width);
    {
        let pts = points.data();
        let table = tables.data();
        // Level-major: keeps each level's table (and for coarse levels the
        // whole dense grid) hot in cache across the batch.
        for level in 0..cfg.levels {
            let res = cfg.resolution(level);
            let dense = cfg.is_dense(level);
            let level_base = level * cfg.table_size;
            let cache_base = level * n * 8;
            for nidx in 0..n {
                let p = &pts[nidx * 3..nidx * 3 + 3];
                let (base, frac) = cell_of(p, res);
                let e = cache_base + nidx * 8;
                let o = &mut out[nidx * width + level * fpl..nidx * width + (level + 1) * fpl];
                for corner in 0..8usize {
                    let dx = (corner & 1) as u64;
                    let dy = ((corner >> 1) & 1) as u64;
                    let dz = ((corner >> 2) & 1) as u64;
                    let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
                    let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
                    let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
                    let w = wx * wy * wz;
                    let idx =
                        corner_index(cfg, dense, res, base[0] + dx, base[1] + dy, base[2] + dz);
                    let row = level_base + idx;
                    rows[e + corner] = row as u32;
                    weights[e + corner] = w;
                    let t = &table[row * fpl..(row + 1) * fpl];
                    if corner == 0 {
                        for (oi, ti) in o.iter_mut().zip(t) {
                            *oi = w * ti;
                        }
                    } else {
                        for (oi, ti) in o.iter_mut().zip(t) {
                            *oi += w * ti;
                        }
                    }
                }
            }
        }
    }
    let op = HashEncodeOp {
        cfg: cfg.clone(),
        n,
        rows,
        weights,
    };
    Ok(Tensor::custom(
        core::slice::from_ref(tables),
        Rc::new(op),
        n,
        width,
        out,
    ))
}

// --- spherical harmonics ------------------------------------------------------

/// Number of basis functions: degrees 0..=7.
pub const SH_BASIS_COUNT: usize = 64;
const SH_MAX_L: usize = 7;

/// Precomputed normalization `K(l,m) = √((2l+1)/(4π) · (l−m)!/(l+m)!)`.
fn sh_norms() -> [f64; SH_BASIS_COUNT] {
    use crate::backend::fmath::sqrt;
    let mut fact = [1.0f64; 2 * SH_MAX_L + 1];
    for i in 1..fact.len() {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut k = [0.0; SH_BASIS_COUNT];
    for l in 0..=SH_MAX_L {
        for m in 0..=l {
            let v = sqrt(
                (2 * l + 1) as f64 / (4.0 * core::f64::consts::PI) * fact[l - m] / fact[l + m],
            );
            k[l * (l + 1) + m] = v; // stored at the m >= 0 slot
        }
    }
    k
}

/// Real spherical-harmonics encoding of unit directions (N×3 tensor) into
/// N×64 fixed features, degrees l = 0..7. Output ordering is `l² + l + m`
/// with sine components at m < 0 and cosine components at m > 0 (no
/// Condon–Shortley phase). Directions must be unit length within 1e-6.
pub fn sh_encode(dirs: &Tensor) -> Result<Tensor, CoreError> {
    if dirs.cols() != 3 {
        return Err(CoreError::BadDimension(format!(
            "sh_encode: directions must be N x 3, got {}x{}",
            dirs.rows(),
            dirs.cols()
        )));
    }
    let n = dirs.rows();
    let d = dirs.data();
    let k = sh_norms();
    let sqrt2 = core::f64::consts::SQRT_2;
    let mut out = pool::take_uninit(n * SH_BASIS_COUNT);

    for i in 0..n {
        let (x, y, z) = (d[i * 3], d[i * 3 + 1], d[i * 3 + 2]);
        let norm = x * x + y * y + z * z;
        if (norm - 1.0).abs() > 2e-6 {
            return Err(CoreError::BadParameter(format!(
                "sh_encode: direction {i} has squared norm {norm}, not unit length"
            )));
        }
        let row = &mut out[i * SH_BASIS_COUNT..(i + 1) * SH_BASIS_COUNT];

        // Associated Legendre values with the sin^m θ factor folded into the
        // azimuthal terms: p[m][l] tracks P_l^m / sin^m θ, and
        // (a_m, b_m) = ((x+iy)^m).(re, im) = sin^m θ · (cos mφ, sin mφ).
        let mut a = 1.0f64; // m = 0
        let mut b = 0.0f64;
        let mut pmm = 1.0f64; // Q_m^m = (2m-1)!!
        for m in 0..=SH_MAX_L {
            // l = m term
            let mut pl_prev = pmm; // Q_m^m
            {
                let kv = k[m * (m + 1) + m];
                if m == 0 {
                    row[0] = kv * pl_prev;
                } else {
                    row[m * (m + 1) + m] = sqrt2 * kv * pl_prev * a;
                    row[m * (m + 1) - m] = sqrt2 * kv * pl_prev * b;
                }
            }
            // l = m + 1 .. SH_MAX_L via the standard three-term recurrence
            let mut pl = z * (2 * m + 1) as f64 * pmm;
            for l in (m + 1)..=SH_MAX_L {
                let kv = k[l * (l + 1) + m];
                if m == 0 {
                    row[l * (l + 1)] = kv * pl;
                } else {
                    row[l * (l + 1) + m] = sqrt2 * kv * pl * a;
                    row[l * (l + 1) - m] = sqrt2 * kv * pl * b;
                }
                if l < SH_MAX_L {
                    let next = ((2 * l + 1) as f64 * z * pl - (l + m) as f64 * pl_prev)
                        / (l + 1 - m) as f64;
                    pl_prev = pl;
                    pl = next;
                }
            }
            // advance m: (a+ib) *= (x+iy); Q_{m+1}^{m+1} = (2m+1) Q_m^m
            let na = x * a - y * b;
            let nb = x * b + y * a;
            a = na;
            b = nb;
            pmm *= (2 * m + 1) as f64;
        }
    }
    Ok(Tensor::from_vec(n, SH_BASIS_COUNT, out))
}

/// Cross-branch arrangement of the two encodings: the position encoding
/// `γx` keeps only feature column 0 for the density branch (`γ'x`, N×1);
/// the view encoding is concatenated with the remaining position features
/// for the color branch (`γ'dx = [γd, γx[:,1..]]`, N×(N_d + N_x − 1)).
pub fn hybrid_concat(gamma_x: &Tensor, gamma_d: &Tensor) -> Result<(Tensor, Tensor), CoreError> {
    if gamma_x.rows() != gamma_d.rows() {
        return Err(CoreError::BadDimension(format!(
            "hybrid_concat: batch mismatch {} vs {}",
            gamma_x.rows(),
            gamma_d.rows()
        )));
    }
    if gamma_x.cols() < 2 {
        return Err(CoreError::BadDimension(format!(
            "hybrid_concat: position encoding needs >= 2 features, got {}",
            gamma_x.cols()
        )));
    }
    let gx_prime = gamma_x.slice_cols(0, 1);
    let rest = gamma_x.slice_cols(1, gamma_x.cols());
    let gdx_prime = Tensor::concat_cols(&[gamma_d.clone(), rest]);
    Ok((gx_prime, gdx_prime))
}
