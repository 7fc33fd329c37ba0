//! Pose interpolation, depth-based pixel projection between views,
//! differentiable bilinear sampling with out-of-bounds masking, and the
//! novel-pose DW loss.
//!
//! Pixel coordinates are `(u, v)` with `u` the column and `v` the row,
//! matching the camera convention in [`crate::render`]. Depth values fed to
//! [`project_pixels`] are camera-frame z-depths (positive in front of the
//! camera); [`ray_depth_to_z`] converts the renderer's along-ray distances.

use crate::backend::fmath::{acos, sin, sqrt};
use crate::error::CoreError;
use crate::render::{Camera, View};
use crate::tensor::{CustomOp, Tensor};
use crate::wavelet::{dwt2, BandWeights, WaveletFilter};
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

// --- rigid 4×4 helpers --------------------------------------------------------

/// `a · b` for row-major 4×4 matrices.
pub fn pose_compose(a: &[f64; 16], b: &[f64; 16]) -> [f64; 16] {
    let mut out = [0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a[i * 4 + k] * b[k * 4 + j];
            }
            out[i * 4 + j] = s;
        }
    }
    out
}

/// Inverse of a rigid transform: `[Rᵀ | −Rᵀ t]`.
pub fn pose_inverse(p: &[f64; 16]) -> [f64; 16] {
    let mut out = [0.0; 16];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 4 + j] = p[j * 4 + i];
        }
    }
    for i in 0..3 {
        out[i * 4 + 3] = -(out[i * 4] * p[3] + out[i * 4 + 1] * p[7] + out[i * 4 + 2] * p[11]);
    }
    out[15] = 1.0;
    out
}

/// Transform mapping `from`-camera coordinates into `to`-camera coordinates,
/// both given as camera-to-world poses.
pub fn relative_transform(from_c2w: &[f64; 16], to_c2w: &[f64; 16]) -> [f64; 16] {
    pose_compose(&pose_inverse(to_c2w), from_c2w)
}

fn rotation_block(p: &[f64; 16]) -> [f64; 9] {
    [p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]]
}

fn rotation_is_rigid(r: &[f64; 9]) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|a| r[a * 3 + i] * r[a * 3 + j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-6 {
                return false;
            }
        }
    }
    let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
        + r[2] * (r[3] * r[7] - r[4] * r[6]);
    (det - 1.0).abs() <= 1e-6
}

/// Unit quaternion (w, x, y, z) from a row-major rotation matrix.
fn rot_to_quat(r: &[f64; 9]) -> [f64; 4] {
    let tr = r[0] + r[4] + r[8];
    let q = if tr > 0.0 {
        let s = sqrt(tr + 1.0) * 2.0;
        [s / 4.0, (r[7] - r[5]) / s, (r[2] - r[6]) / s, (r[3] - r[1]) / s]
    } else if r[0] > r[4] && r[0] > r[8] {
        let s = sqrt(1.0 + r[0] - r[4] - r[8]) * 2.0;
        [(r[7] - r[5]) / s, s / 4.0, (r[1] + r[3]) / s, (r[2] + r[6]) / s]
    } else if r[4] > r[8] {
        let s = sqrt(1.0 + r[4] - r[0] - r[8]) * 2.0;
        [(r[2] - r[6]) / s, (r[1] + r[3]) / s, s / 4.0, (r[5] + r[7]) / s]
    } else {
        let s = sqrt(1.0 + r[8] - r[0] - r[4]) * 2.0;
        [(r[3] - r[1]) / s, (r[2] + r[6]) / s, (r[5] + r[7]) / s, s / 4.0]
    };
    let n = sqrt(q.iter().map(|v| v * v).sum());
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn quat_to_rot(q: [f64; 4]) -> [f64; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// Interpolate two rigid camera-to-world poses: `α = 1` returns `p_i`
/// verbatim, `α = 0` returns `p_j`. Translation is linear; rotation is a
/// spherical (quaternion) interpolation re-normalized so the result stays
/// rigid.
pub fn interpolate_pose(p_i: &[f64; 16], p_j: &[f64; 16], alpha: f64) -> Result<[f64; 16], CoreError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::BadParameter(format!(
            "pose interpolation weight must lie in [0,1], got {alpha}"
        )));
    }
    let (ri, rj) = (rotation_block(p_i), rotation_block(p_j));
    if !rotation_is_rigid(&ri) || !rotation_is_rigid(&rj) {
        return Err(CoreError::BadParameter(
            "pose interpolation needs rigid rotations (orthonormal, det +1)".into(),
        ));
    }
    if alpha == 1.0 {
        return Ok(*p_i);
    }
    if alpha == 0.0 {
        return Ok(*p_j);
    }
    let qi = rot_to_quat(&ri);
    let mut qj = rot_to_quat(&rj);
    let mut dot: f64 = qi.iter().zip(&qj).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        for v in qj.iter_mut() {
            *v = -*v;
        }
        dot = -dot;
    }
    let q = if dot > 1.0 - 1e-12 {
        // nearly parallel: linear blend, then normalize
        let mut q = [0.0; 4];
        for a in 0..4 {
            q[a] = alpha * qi[a] + (1.0 - alpha) * qj[a];
        }
        q
    } else {
        let theta = acos(dot.min(1.0));
        let (sa, sb) = (sin(alpha * theta), sin((1.0 - alpha) * theta));
        let mut q = [0.0; 4];
        for a in 0..4 {
            q[a] = sa * qi[a] + sb * qj[a];
        }
        q
    };
    let n = sqrt(q.iter().map(|v| v * v).sum());
    let r = quat_to_rot([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
    let mut out = [0.0; 16];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 4 + j] = r[i * 3 + j];
        }
        out[i * 4 + 3] = alpha * p_i[i * 4 + 3] + (1.0 - alpha) * p_j[i * 4 + 3];
    }
    out[15] = 1.0;
    Ok(out)
}

// --- projection ---------------------------------------------------------------

/// Projection of a pixel set from one camera into another.
#[derive(Debug, Clone)]
pub struct Projected {
    /// (u, v) destination-image coordinates; may be out of bounds.
    pub coords: Vec<[f64; 2]>,
    /// Destination-camera z-depth of each projected point.
    pub depths: Vec<f64>,
    /// False where the source depth was non-positive or the point lands
    /// behind the destination camera.
    pub valid: Vec<bool>,
}

/// Convert the renderer's along-ray distance at pixel (u, v) into the
/// camera-frame z-depth the projection formula expects.
pub fn ray_depth_to_z(t: f64, u: f64, v: f64, k: &[f64; 9]) -> f64 {
    let x = (u - k[2]) / k[0];
    let y = (v - k[5]) / k[4];
    t / sqrt(x * x + y * y + 1.0)
}

/// Backproject pixels through their z-depths, move them by the rigid
/// transform `t_rel` (source-camera → destination-camera coordinates), and
/// reproject with the shared intrinsics `k`. Coordinates are returned even
/// when out of the destination grid; only non-positive depth or
/// behind-camera points are flagged invalid.
pub fn project_pixels(
    pixels: &[[f64; 2]],
    depth: &[f64],
    k: &[f64; 9],
    t_rel: &[f64; 16],
) -> Result<Projected, CoreError> {
    if pixels.len() != depth.len() {
        return Err(CoreError::BadDimension(format!(
            "project_pixels: {} pixels vs {} depths",
            pixels.len(),
            depth.len()
        )));
    }
    let (fx, fy, cx, cy) = (k[0], k[4], k[2], k[5]);
    let mut coords = Vec::with_capacity(pixels.len());
    let mut depths = Vec::with_capacity(pixels.len());
    let mut valid = Vec::with_capacity(pixels.len());
    for (p, &z) in pixels.iter().zip(depth) {
        if !(z > 0.0) || !z.is_finite() {
            coords.push([-1.0, -1.0]);
            depths.push(0.0);
            valid.push(false);
            continue;
        }
        // camera looks down −z: backproject with the y/z sign flips
        let xc = (p[0] - cx) / fx * z;
        let yc = -(p[1] - cy) / fy * z;
        let zc = -z;
        let x = t_rel[0] * xc + t_rel[1] * yc + t_rel[2] * zc + t_rel[3];
        let y = t_rel[4] * xc + t_rel[5] * yc + t_rel[6] * zc + t_rel[7];
        let zw = t_rel[8] * xc + t_rel[9] * yc + t_rel[10] * zc + t_rel[11];
        let z_dst = -zw;
        if !(z_dst > 0.0) {
            coords.push([-1.0, -1.0]);
            depths.push(0.0);
            valid.push(false);
            continue;
        }
        coords.push([cx + fx * x / z_dst, cy - fy * y / z_dst]);
        depths.push(z_dst);
        valid.push(true);
    }
    Ok(Projected { coords, depths, valid })
}

// --- differentiable bilinear sampling ------------------------------------------

/// Values sampled from an image plus the in-bounds mask.
#[derive(Debug, Clone)]
pub struct BilinearOutput {
    /// m × channels; masked rows are exactly zero (black).
    pub values: Tensor,
    /// False when any of a sample's four neighbors falls outside the grid.
    pub mask: Vec<bool>,
}

struct BilinearOp {
    height: usize,
    width: usize,
    channels: usize,
    image: Vec<f64>,
    coords: Vec<f64>,
    mask: Vec<bool>,
    grads: RefCell<Option<[Vec<f64>; 2]>>,
}

impl BilinearOp {
    /// Cell decomposition of sample `i`: base corner and fractions, with the
    /// 1e-9 edge tolerance already resolved by the mask.
    fn cell(&self, i: usize) -> (usize, usize, f64, f64) {
        let (w, h) = (self.width, self.height);
        let u = self.coords[i * 2].clamp(0.0, (w - 1) as f64);
        let v = self.coords[i * 2 + 1].clamp(0.0, (h - 1) as f64);
        let x0 = (u as usize).min(w - 2);
        let y0 = (v as usize).min(h - 2);
        (x0, y0, u - x0 as f64, v - y0 as f64)
    }

    fn compute_grads(&self, g: &[f64]) -> [Vec<f64>; 2] {
        let ch = self.channels;
        let w = self.width;
        let mut d_img = vec![0.0; self.image.len()];
        let mut d_coords = vec![0.0; self.coords.len()];
        for i in 0..self.mask.len() {
            if !self.mask[i] {
                continue;
            }
            let (x0, y0, fu, fv) = self.cell(i);
            let idx = [
                (y0 * w + x0) * ch,
                (y0 * w + x0 + 1) * ch,
                ((y0 + 1) * w + x0) * ch,
                ((y0 + 1) * w + x0 + 1) * ch,
            ];
            let wgt = [
                (1.0 - fu) * (1.0 - fv),
                fu * (1.0 - fv),
                (1.0 - fu) * fv,
                fu * fv,
            ];
            let (mut du, mut dv) = (0.0, 0.0);
            for c in 0..ch {
                let go = g[i * ch + c];
                for q in 0..4 {
                    d_img[idx[q] + c] += wgt[q] * go;
                }
                let (i00, i10, i01, i11) = (
                    self.image[idx[0] + c],
                    self.image[idx[1] + c],
                    self.image[idx[2] + c],
                    self.image[idx[3] + c],
                );
                du += go * ((1.0 - fv) * (i10 - i00) + fv * (i11 - i01));
                dv += go * ((1.0 - fu) * (i01 - i00) + fu * (i11 - i10));
            }
            d_coords[i * 2] = du;
            d_coords[i * 2 + 1] = dv;
        }
        [d_img, d_coords]
    }
}

impl CustomOp for BilinearOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward_into(&self, grad_out: &[f64], idx: usize, sink: &mut [f64]) {
        let mut cache = self.grads.borrow_mut();
        let grads = cache.get_or_insert_with(|| self.compute_grads(grad_out));
        for (s, g) in sink.iter_mut().zip(&grads[idx]) {
            *s += g;
        }
    }
}

/// 4-neighbor bilinear interpolation of `image` (h·w rows × channels) at
/// `coords` (m × 2, (u, v)). Differentiable with respect to both inputs.
/// Samples whose support leaves the grid (beyond a 1e-9 edge tolerance) are
/// masked and produce exactly zero.
pub fn bilinear_sample(
    image: &Tensor,
    height: usize,
    width: usize,
    coords: &Tensor,
) -> Result<BilinearOutput, CoreError> {
    if height < 2 || width < 2 {
        return Err(CoreError::BadParameter(format!(
            "bilinear_sample needs at least a 2x2 image, got {height}x{width}"
        )));
    }
    if image.rows() != height * width {
        return Err(CoreError::BadDimension(format!(
            "bilinear_sample: image has {} rows, expected {}x{} = {}",
            image.rows(),
            height,
            width,
            height * width
        )));
    }
    if coords.cols() != 2 {
        return Err(CoreError::BadDimension(format!(
            "bilinear_sample: coords must be m x 2, got {}x{}",
            coords.rows(),
            coords.cols()
        )));
    }
    let ch = image.cols();
    let m = coords.rows();
    let cd = coords.to_vec();
    const EDGE: f64 = 1e-9;
    let mask: Vec<bool> = (0..m)
        .map(|i| {
            let (u, v) = (cd[i * 2], cd[i * 2 + 1]);
            u.is_finite()
                && v.is_finite()
                && u >= -EDGE
                && u <= (width - 1) as f64 + EDGE
                && v >= -EDGE
                && v <= (height - 1) as f64 + EDGE
        })
        .collect();
    let op = BilinearOp {
        height,
        width,
        channels: ch,
        image: image.to_vec(),
        coords: cd,
        mask: mask.clone(),
        grads: RefCell::new(None),
    };
    let mut out = vec![0.0; m * ch];
    for i in 0..m {
        if !mask[i] {
            continue;
        }
        let (x0, y0, fu, fv) = op.cell(i);
        let wgt = [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ];
        let idx = [
            (y0 * width + x0) * ch,
            (y0 * width + x0 + 1) * ch,
            ((y0 + 1) * width + x0) * ch,
            ((y0 + 1) * width + x0 + 1) * ch,
        ];
        for c in 0..ch {
            let mut s = 0.0;
            for q in 0..4 {
                s += wgt[q] * op.image[idx[q] + c];
            }
            out[i * ch + c] = s;
        }
    }
    let values = Tensor::custom(&[image.clone(), coords.clone()], Rc::new(op), m, ch, out);
    Ok(BilinearOutput { values, mask })
}

// --- view warping and the novel-pose DW loss -----------------------------------

/// A known view warped into a novel pose.
#[derive(Debug, Clone)]
pub struct WarpResult {
    /// side² × 3 pseudo ground-truth colors; masked pixels are zero.
    pub image: Tensor,
    /// Per-pixel validity (projection in front of both cameras and the
    /// bilinear support inside the source grid).
    pub mask: Vec<bool>,
    /// Projected (u, v) coordinates in the source view, row-major.
    pub coords: Vec<[f64; 2]>,
    /// Fraction of pixels masked out.
    pub masked_fraction: f64,
}

/// Warp `known` into the novel camera: backproject the patch's pixels
/// through the rendered along-ray depths, project them into the known view,
/// and bilinearly sample its image. The warped colors are supervision data,
/// not graph nodes.
pub fn warp_view(
    novel_cam: &Camera,
    side: usize,
    top_left: (usize, usize),
    ray_depth: &[f64],
    known: &View,
) -> Result<WarpResult, CoreError> {
    novel_cam.validate()?;
    known.validate()?;
    if ray_depth.len() != side * side {
        return Err(CoreError::BadDimension(format!(
            "warp_view: {} depths for a side-{side} patch",
            ray_depth.len()
        )));
    }
    for (a, b) in novel_cam.k.iter().zip(&known.camera.k) {
        if (a - b).abs() > 1e-9 {
            return Err(CoreError::BadParameter(
                "warp_view expects shared intrinsics between the views".into(),
            ));
        }
    }
    let (top, left) = top_left;
    let mut pixels = Vec::with_capacity(side * side);
    let mut z = Vec::with_capacity(side * side);
    for dr in 0..side {
        for dc in 0..side {
            let (u, v) = ((left + dc) as f64, (top + dr) as f64);
            pixels.push([u, v]);
            z.push(ray_depth_to_z(ray_depth[dr * side + dc], u, v, &novel_cam.k));
        }
    }
    let t_rel = relative_transform(&novel_cam.pose, &known.camera.pose);
    let proj = project_pixels(&pixels, &z, &novel_cam.k, &t_rel)?;
    // push invalid projections far out of bounds so sampling masks them
    let mut flat = Vec::with_capacity(side * side * 2);
    for (c, &ok) in proj.coords.iter().zip(&proj.valid) {
        if ok {
            flat.extend(*c);
        } else {
            flat.extend([-10.0, -10.0]);
        }
    }
    let coord_t = Tensor::from_vec(side * side, 2, flat);
    let image_t = Tensor::from_vec(
        known.camera.height * known.camera.width,
        3,
        known.pixels.clone(),
    );
    let sampled = bilinear_sample(&image_t, known.camera.height, known.camera.width, &coord_t)?;
    let mask: Vec<bool> = sampled
        .mask
        .iter()
        .zip(&proj.valid)
        .map(|(&a, &b)| a && b)
        .collect();
    let masked = mask.iter().filter(|&&m| !m).count() as f64 / (side * side) as f64;
    Ok(WarpResult {
        image: sampled.values,
        mask,
        coords: proj.coords,
        masked_fraction: masked,
    })
}

/// Validity of single-level wavelet coefficients: a coefficient survives
/// only if every pixel in its (periodic) filter support is valid.
pub fn coefficient_mask(pixel_mask: &[bool], n: usize, filter: &WaveletFilter) -> Vec<bool> {
    let l = filter.lowpass().len();
    let half = n / 2;
    let mut out = vec![true; half * half];
    for i in 0..half {
        for j in 0..half {
            'support: for k in 0..l {
                for q in 0..l {
                    let r = (2 * i + k) % n;
                    let c = (2 * j + q) % n;
                    if !pixel_mask[r * n + c] {
                        out[i * half + j] = false;
                        break 'support;
                    }
                }
            }
        }
    }
    out
}

/// Sub-band-weighted squared DWT difference restricted to coefficients whose
/// entire support is valid; the mean runs over surviving coefficients across
/// all three channels. Returns the loss and the surviving-coefficient count
/// (zero means the caller should treat the term as absent).
pub fn masked_dw_loss(
    pred: &[Tensor; 3],
    target: &[Tensor; 3],
    pixel_mask: &[bool],
    weights: &BandWeights,
    filter: &WaveletFilter,
) -> Result<(Tensor, usize), CoreError> {
    weights.validate()?;
    let n = pred[0].rows();
    if pixel_mask.len() != n * n {
        return Err(CoreError::BadDimension(format!(
            "masked_dw_loss: mask has {} entries for a {n}x{n} image",
            pixel_mask.len()
        )));
    }
    let cmask = coefficient_mask(pixel_mask, n, filter);
    let count = cmask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let half = n / 2;
    let mask_t = Tensor::from_vec(
        half,
        half,
        cmask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    );
    let lambdas = |b: usize| [weights.ll, weights.lh, weights.hl, weights.hh][b];
    let mut loss = Tensor::scalar(0.0);
    let mut band_sums: [Option<Tensor>; 4] = [None, None, None, None];
    for ch in 0..3 {
        let bp = dwt2(&pred[ch], filter)?;
        let bt = dwt2(&target[ch], filter)?;
        for (b, (p, t)) in [
            (&bp.ll, &bt.ll),
            (&bp.lh, &bt.lh),
            (&bp.hl, &bt.hl),
            (&bp.hh, &bt.hh),
        ]
        .into_iter()
        .enumerate()
        {
            let masked_sq = p.sub(t).mul(&mask_t).square().sum_all();
            band_sums[b] = Some(match band_sums[b].take() {
                Some(acc) => acc.add(&masked_sq),
                None => masked_sq,
            });
        }
    }
    for (b, sum) in band_sums.into_iter().enumerate() {
        let sum = sum.expect("all four bands populated");
        loss = loss.add(&sum.mul_scalar(lambdas(b) / (3.0 * count as f64)));
    }
    Ok((loss, count))
}

/// Outcome of the novel-pose DW loss.
#[derive(Debug, Clone)]
pub struct NovelDwOutcome {
    pub loss: Tensor,
    pub masked_fraction: f64,
    /// True when no wavelet coefficient had a fully valid support; the loss
    /// is zero and should be skipped.
    pub degenerate: bool,
}

/// The frequency-domain supervision at an interpolated pose: warp the known
/// view into the novel camera through the rendered depth, then compare the
/// render against the warped pseudo ground truth with a support-masked,
/// sub-band-weighted DWT loss. Gradients flow into the rendered patch; the
/// warped target is treated as data.
#[allow(clippy::too_many_arguments)]
pub fn novel_dw_loss(
    render: &Tensor,
    ray_depth: &Tensor,
    novel_cam: &Camera,
    side: usize,
    top_left: (usize, usize),
    known: &View,
    weights: &BandWeights,
    filter: &WaveletFilter,
) -> Result<NovelDwOutcome, CoreError> {
    if render.shape() != (side * side, 3) {
        return Err(CoreError::BadDimension(format!(
            "novel_dw_loss: render must be {}x3, got {}x{}",
            side * side,
            render.rows(),
            render.cols()
        )));
    }
    if ray_depth.len() != side * side {
        return Err(CoreError::BadDimension(format!(
            "novel_dw_loss: {} depths for a side-{side} patch",
            ray_depth.len()
        )));
    }
    let warp = warp_view(novel_cam, side, top_left, &ray_depth.to_vec(), known)?;
    if warp.mask.iter().all(|&m| !m) {
        return Ok(NovelDwOutcome {
            loss: Tensor::scalar(0.0),
            masked_fraction: 1.0,
            degenerate: true,
        });
    }
    let pred: [Tensor; 3] = core::array::from_fn(|c| render.slice_cols(c, c + 1).reshape(side, side));
    let warped = warp.image.to_vec(); // detach: supervision data
    let target: [Tensor; 3] = core::array::from_fn(|c| {
        Tensor::from_vec(
            side,
            side,
            (0..side * side).map(|i| warped[i * 3 + c]).collect(),
        )
    });
    let (loss, count) = masked_dw_loss(&pred, &target, &warp.mask, weights, filter)?;
    Ok(NovelDwOutcome {
        loss,
        masked_fraction: warp.masked_fraction,
        degenerate: count == 0,
    })
}
