//! Ray generation, point sampling, the volume-rendering quadrature, and
//! random/patch ray-batch construction.
//!
//! Camera convention: intrinsics `K = [[fx,0,cx],[0,fy,cy],[0,0,1]]` with
//! `u = column`, `v = row`, no half-pixel offset; the camera looks down its
//! local −z axis, so the camera-space direction through pixel (v, u) is
//! `((u−cx)/fx, −(v−cy)/fy, −1)` normalized, rotated to world by the
//! camera-to-world pose.

use crate::encoding::{hash_encode, sh_encode, HashGridConfig};
use crate::error::CoreError;
use crate::field::FieldModel;
use crate::rng::{seeded, RngExt};
use crate::tensor::pool;
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Pinhole camera: 3×3 intrinsics, 4×4 camera-to-world pose (both
/// row-major), and the image size in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub k: [f64; 9],
    pub pose: [f64; 16],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn fx(&self) -> f64 {
        self.k[0]
    }
    pub fn fy(&self) -> f64 {
        self.k[4]
    }
    pub fn cx(&self) -> f64 {
        self.k[2]
    }
    pub fn cy(&self) -> f64 {
        self.k[5]
    }

    /// Camera center in world coordinates (pose translation column).
    pub fn center(&self) -> [f64; 3] {
        [self.pose[3], self.pose[7], self.pose[11]]
    }

    /// Rotate a camera-space vector into world space.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let p = &self.pose;
        [
            p[0] * v[0] + p[1] * v[1] + p[2] * v[2],
            p[4] * v[0] + p[5] * v[1] + p[6] * v[2],
            p[8] * v[0] + p[9] * v[1] + p[10] * v[2],
        ]
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.width == 0 || self.height == 0 {
            return Err(CoreError::BadParameter("camera has zero pixels".into()));
        }
        if self.fx() == 0.0 || self.fy() == 0.0 {
            return Err(CoreError::BadParameter("camera focal length is zero".into()));
        }
        // rotation block orthonormal within 1e-6, determinant +1
        let p = &self.pose;
        let r = [p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|a| r[a * 3 + i] * r[a * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(CoreError::BadParameter(format!(
                        "camera rotation is not orthonormal: RᵀR[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(CoreError::BadParameter(format!(
                "camera rotation determinant is {det}, not +1"
            )));
        }
        if p[12] != 0.0 || p[13] != 0.0 || p[14] != 0.0 || p[15] != 1.0 {
            return Err(CoreError::BadParameter(
                "camera pose bottom row must be [0, 0, 0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// How a batch's rays are arranged.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLayout {
    Random,
    /// `side × side` contiguous pixels in row-major order starting at
    /// `top_left = (row, col)`.
    Patch { side: usize, top_left: (usize, usize) },
}

/// A bundle of rays: per-ray origin, unit direction, and near/far bounds.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub origins: Vec<f64>,    // n × 3
    pub directions: Vec<f64>, // n × 3, unit norm
    pub t_near: Vec<f64>,
    pub t_far: Vec<f64>,
    pub layout: BatchLayout,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Everything the quadrature produces; all tensors stay in the autodiff
/// graph so the regularizers can differentiate through them.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Tensor,         // n × 3 in [0,1]
    pub depth: Tensor,         // n × 1, expected termination distance
    pub weights: Tensor,       // n × samples
    pub transmittance: Tensor, // n × samples
}

/// Axis-aligned bounds mapping world positions into the unit cube the hash
/// grid expects; points outside are clamped to the faces.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn validate(&self) -> Result<(), CoreError> {
        for a in 0..3 {
            if !(self.min[a] < self.max[a]) {
                return Err(CoreError::BadParameter(format!(
                    "scene bounds axis {a}: min {} must be below max {}",
                    self.min[a], self.max[a]
                )));
            }
        }
        Ok(())
    }

    pub fn to_unit(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = [0.0; 3];
        for a in 0..3 {
            q[a] = ((p[a] - self.min[a]) / (self.max[a] - self.min[a])).clamp(0.0, 1.0);
        }
        q
    }
}

/// One training view: camera, row-major h×w×3 RGB pixels in [0,1], and the
/// scene's sampling bounds along each ray.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub pixels: Vec<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl View {
    pub fn rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.camera.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        self.camera.validate()?;
        if self.pixels.len() != self.camera.width * self.camera.height * 3 {
            return Err(CoreError::BadDimension(format!(
                "view pixel buffer has {} values, camera says {}x{}x3",
                self.pixels.len(),
                self.camera.height,
                self.camera.width
            )));
        }
        if !(self.t_near < self.t_far) {
            return Err(CoreError::BadParameter(format!(
                "view needs t_near < t_far, got {} vs {}",
                self.t_near, self.t_far
            )));
        }
        Ok(())
    }
}

/// Shoot one ray per (row, col) pixel through `camera`.
pub fn generate_rays(
    camera: &Camera,
    pixels: &[(usize, usize)],
    t_near: f64,
    t_far: f64,
    layout: BatchLayout,
) -> Result<RayBatch, CoreError> {
    for &(row, col) in pixels {
        if row >= camera.height || col >= camera.width {
            return Err(CoreError::BadParameter(format!(
                "pixel ({row}, {col}) is outside the {}x{} grid",
                camera.height, camera.width
            )));
        }
    }
    let coords: Vec<[f64; 2]> = pixels
        .iter()
        .map(|&(row, col)| [col as f64, row as f64])
        .collect();
    generate_rays_at(camera, &coords, t_near, t_far, layout)
}

/// Rays through fractional pixel coordinates `[u, v]` (u along columns,
/// v along rows) — used when ray positions come from feature matches
/// rather than the integer grid.
pub fn generate_rays_at(
    camera: &Camera,
    coords: &[[f64; 2]],
    t_near: f64,
    t_far: f64,
    layout: BatchLayout,
) -> Result<RayBatch, CoreError> {
    camera.validate()?;
    if !(t_near < t_far) {
        return Err(CoreError::BadParameter(format!(
            "ray bounds need t_near < t_far, got {t_near} vs {t_far}"
        )));
    }
    let n = coords.len();
    let center = camera.center();
    let mut origins = Vec::with_capacity(n * 3);
    let mut directions = Vec::with_capacity(n * 3);
    for &[u, v] in coords {
        let in_grid = u.is_finite()
            && v.is_finite()
            && (0.0..=(camera.width - 1) as f64).contains(&u)
            && (0.0..=(camera.height - 1) as f64).contains(&v);
        if !in_grid {
            return Err(CoreError::BadParameter(format!(
                "pixel coordinate ({u}, {v}) is outside the {}x{} grid",
                camera.height, camera.width
            )));
        }
        let dc = [
            (u - camera.cx()) / camera.fx(),
            -(v - camera.cy()) / camera.fy(),
            -1.0,
        ];
        let d = camera.rotate(dc);
        let norm = crate::backend::fmath::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        origins.extend_from_slice(&center);
        directions.extend([d[0] / norm, d[1] / norm, d[2] / norm]);
    }
    Ok(RayBatch {
        origins,
        directions,
        t_near: vec![t_near; n],
        t_far: vec![t_far; n],
        layout,
    })
}

/// Point samples along every ray of a batch (all plain data, not part of
/// the autodiff graph).
#[derive(Debug, Clone)]
pub struct SampledPoints {
    /// (n·samples) × 3 world positions, ray-major.
    pub positions: Tensor,
    /// n × samples bin widths δ_i.
    pub deltas: Tensor,
    /// n × samples sample parameters t_i (bin midpoints when unstratified).
    pub midpoints: Tensor,
}

/// Partition each ray's [t_near, t_far] into `n_samples` equal bins and
/// place one point per bin: the midpoint, or a uniform draw when
/// `stratified` (one draw per bin, ray-major order, seeded).
pub fn sample_points(
    batch: &RayBatch,
    n_samples: usize,
    stratified: bool,
    seed: u64,
) -> Result<SampledPoints, CoreError> {
    if n_samples == 0 {
        return Err(CoreError::BadParameter("n_samples must be >= 1".into()));
    }
    let n = batch.len();
    let mut rng = seeded(seed);
    let mut positions = pool::take_uninit(n * n_samples * 3);
    let mut deltas = pool::take_uninit(n * n_samples);
    let mut ts = pool::take_uninit(n * n_samples);
    for r in 0..n {
        let (near, far) = (batch.t_near[r], batch.t_far[r]);
        let width = (far - near) / n_samples as f64;
        let o = &batch.origins[r * 3..r * 3 + 3];
        let d = &batch.directions[r * 3..r * 3 + 3];
        for i in 0..n_samples {
            let lo = near + width * i as f64;
            let t = if stratified { lo + rng.uniform() * width } else { lo + 0.5 * width };
            let s = r * n_samples + i;
            deltas[s] = width;
            ts[s] = t;
            positions[s * 3] = o[0] + t * d[0];
            positions[s * 3 + 1] = o[1] + t * d[1];
            positions[s * 3 + 2] = o[2] + t * d[2];
        }
    }
    Ok(SampledPoints {
        positions: Tensor::from_vec(n * n_samples, 3, positions),
        deltas: Tensor::from_vec(n, n_samples, deltas),
        midpoints: Tensor::from_vec(n, n_samples, ts),
    })
}

/// The quadrature of the volume-rendering integral:
/// `T_i = exp(−Σ_{j<i} σ_j δ_j)`, `w_i = T_i (1 − exp(−σ_i δ_i))`,
/// color = Σ w_i c_i, depth = Σ w_i t_i. σ is n×samples, `color_samples`
/// is (n·samples)×3 ray-major; transparent remainder composites onto black.
pub fn volume_render(
    sigma: &Tensor,
    color_samples: &Tensor,
    points: &SampledPoints,
) -> Result<RenderOutput, CoreError> {
    let (n, s) = points.deltas.shape();
    if sigma.shape() != (n, s) {
        return Err(CoreError::BadDimension(format!(
            "volume_render: σ must be {n}x{s}, got {}x{}",
            sigma.rows(),
            sigma.cols()
        )));
    }
    if color_samples.shape() != (n * s, 3) {
        return Err(CoreError::BadDimension(format!(
            "volume_render: colors must be {}x3, got {}x{}",
            n * s,
            color_samples.rows(),
            color_samples.cols()
        )));
    }
    if sigma.data().iter().any(|&v| v < 0.0) {
        return Err(CoreError::BadParameter(
            "volume_render: negative density".into(),
        ));
    }
    if points.deltas.data().iter().any(|&v| !(v > 0.0)) {
        return Err(CoreError::BadParameter(
            "volume_render: deltas must be positive".into(),
        ));
    }

    let sd = sigma.mul(&points.deltas); // n × s
    let transmittance = sd.cumsum_excl_rows().mul_scalar(-1.0).exp();
    let absorb = sd.mul_scalar(-1.0).exp().mul_scalar(-1.0).add_scalar(1.0); // 1 − e^{−σδ}
    let weights = transmittance.mul(&absorb);
    let mut channels = Vec::with_capacity(3);
    for ch in 0..3 {
        let c = color_samples.slice_cols(ch, ch + 1).reshape(n, s);
        channels.push(weights.mul(&c).sum_rows());
    }
    let color = Tensor::concat_cols(&channels);
    let depth = weights.mul(&points.midpoints).sum_rows();
    Ok(RenderOutput { color, depth, weights, transmittance })
}

/// Draw `batch_size` distinct pixels uniformly across all views. Returns the
/// rays, their ground-truth colors (batch × 3), and the (view, row, col)
/// provenance of each ray.
pub fn sample_random_batch(
    views: &[View],
    batch_size: usize,
    seed: u64,
) -> Result<(RayBatch, Tensor, Vec<(usize, usize, usize)>), CoreError> {
    if views.is_empty() {
        return Err(CoreError::BadParameter("no training views".into()));
    }
    let total: usize = views.iter().map(|v| v.camera.width * v.camera.height).sum();
    if batch_size == 0 || batch_size > total {
        return Err(CoreError::BadParameter(format!(
            "batch_size {batch_size} must be in 1..={total}"
        )));
    }
    let mut rng = seeded(seed);
    // partial Fisher–Yates: the first batch_size entries are a uniform
    // without-replacement draw
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..batch_size {
        let j = i + rng.below(total - i);
        idx.swap(i, j);
    }
    let mut origins = Vec::with_capacity(batch_size * 3);
    let mut directions = Vec::with_capacity(batch_size * 3);
    let mut t_near = Vec::with_capacity(batch_size);
    let mut t_far = Vec::with_capacity(batch_size);
    let mut gt = Vec::with_capacity(batch_size * 3);
    let mut provenance = Vec::with_capacity(batch_size);
    for &flat in &idx[..batch_size] {
        let (mut rest, mut view_i) = (flat, 0usize);
        while rest >= views[view_i].camera.width * views[view_i].camera.height {
            rest -= views[view_i].camera.width * views[view_i].camera.height;
            view_i += 1;
        }
        let view = &views[view_i];
        let (row, col) = (rest / view.camera.width, rest % view.camera.width);
        let single = generate_rays(
            &view.camera,
            &[(row, col)],
            view.t_near,
            view.t_far,
            BatchLayout::Random,
        )?;
        origins.extend_from_slice(&single.origins);
        directions.extend_from_slice(&single.directions);
        t_near.push(view.t_near);
        t_far.push(view.t_far);
        gt.extend(view.rgb(row, col));
        provenance.push((view_i, row, col));
    }
    Ok((
        RayBatch { origins, directions, t_near, t_far, layout: BatchLayout::Random },
        Tensor::from_vec(batch_size, 3, gt),
        provenance,
    ))
}

/// Draw one view and one top-left corner uniformly; rays cover a contiguous
/// `side × side` pixel grid in row-major order. Returns the rays, the
/// ground-truth crop (side² × 3), and the chosen view index.
pub fn sample_patch_batch(
    views: &[View],
    side: usize,
    seed: u64,
) -> Result<(RayBatch, Tensor, usize), CoreError> {
    if views.is_empty() {
        return Err(CoreError::BadParameter("no training views".into()));
    }
    if side == 0 || side % 2 != 0 {
        return Err(CoreError::BadParameter(format!(
            "patch side must be even and positive, got {side}"
        )));
    }
    for v in views {
        if side > v.camera.width || side > v.camera.height {
            return Err(CoreError::BadParameter(format!(
                "patch side {side} exceeds a {}x{} view",
                v.camera.height, v.camera.width
            )));
        }
    }
    let mut rng = seeded(seed);
    let view_i = rng.below(views.len());
    let view = &views[view_i];
    let top = rng.below(view.camera.height - side + 1);
    let left = rng.below(view.camera.width - side + 1);
    let mut pixels = Vec::with_capacity(side * side);
    let mut gt = Vec::with_capacity(side * side * 3);
    for dr in 0..side {
        for dc in 0..side {
            pixels.push((top + dr, left + dc));
            gt.extend(view.rgb(top + dr, left + dc));
        }
    }
    let batch = generate_rays(
        &view.camera,
        &pixels,
        view.t_near,
        view.t_far,
        BatchLayout::Patch { side, top_left: (top, left) },
    )?;
    Ok((batch, Tensor::from_vec(side * side, 3, gt), view_i))
}

/// Full differentiable pipeline for one ray batch: sample points, encode,
/// evaluate the field, and integrate. `seed` only matters when `stratified`.
#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    model: &FieldModel,
    grid: &HashGridConfig,
    tables: &Tensor,
    bounds: &SceneBounds,
    batch: &RayBatch,
    n_samples: usize,
    stratified: bool,
    seed: u64,
) -> Result<(RenderOutput, SampledPoints), CoreError> {
    bounds.validate()?;
    let points = sample_points(batch, n_samples, stratified, seed)?;
    let n = batch.len();
    let raw = points.positions.data();
    let mut unit = pool::take_uninit(raw.len());
    for (u, p) in unit.chunks_exact_mut(3).zip(raw.chunks_exact(3)) {
        u.copy_from_slice(&bounds.to_unit([p[0], p[1], p[2]]));
    }
    drop(raw);
    let unit_positions = Tensor::from_vec(n * n_samples, 3, unit);
    let mut dirs = pool::take_uninit(n * n_samples * 3);
    for r in 0..n {
        let d = &batch.directions[r * 3..r * 3 + 3];
        for dst in dirs[r * n_samples * 3..(r + 1) * n_samples * 3].chunks_exact_mut(3) {
            dst.copy_from_slice(d);
        }
    }
    let dirs = Tensor::from_vec(n * n_samples, 3, dirs);
    let gamma_x = hash_encode(&unit_positions, grid, tables)?;
    let gamma_d = sh_encode(&dirs)?;
    let (sigma, c) = model.forward(&gamma_x, &gamma_d)?;
    let out = volume_render(&sigma.reshape(n, n_samples), &c, &points)?;
    Ok((out, points))
}
