//! The photometric loss, the four geometry regularizers, the per-row-norm
//! Huber function, the correspondence (MV) loss over externally supplied
//! matches, and assembly of the combined training objective.
//!
//! Every loss returns a scalar [`Tensor`] wired into the autodiff graph of
//! its differentiable inputs; camera poses, match coordinates, and
//! confidences are data.

use crate::backend::fmath::sqrt;
use crate::error::CoreError;
use crate::render::{BatchLayout, Camera, RayBatch, SampledPoints};
use crate::tensor::{CustomOp, Tensor};
use crate::warp::{project_pixels, ray_depth_to_z, relative_transform};
use crate::wavelet::BandWeights;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Default Huber threshold (pixels) for the correspondence loss.
pub const HUBER_DELTA_DEFAULT: f64 = 1.0;
/// Default confidence floor below which matches are discarded.
pub const MIN_CONFIDENCE_DEFAULT: f64 = 0.5;

// --- weights ------------------------------------------------------------------

/// Scale factors for every term of the combined objective. The sub-band
/// weights feed the DW losses; the scalar λs multiply their regularizers.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub band: BandWeights,
    pub dist: f64,
    pub fg: f64,
    pub ds: f64,
    pub kl: f64,
    pub mv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            band: BandWeights { ll: 0.4, lh: 0.2, hl: 0.2, hh: 0.2 },
            dist: 0.001,
            fg: 0.001,
            ds: 0.001,
            kl: 0.001,
            mv: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.band.validate()?;
        for (name, v) in [
            ("dist", self.dist),
            ("fg", self.fg),
            ("ds", self.ds),
            ("kl", self.kl),
            ("mv", self.mv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::BadParameter(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// --- photometric loss -----------------------------------------------------------

/// Mean squared color error over all n·3 entries.
pub fn mse_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor, CoreError> {
    if pred.shape() != gt.shape() {
        return Err(CoreError::BadDimension(format!(
            "mse_loss: {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            gt.rows(),
            gt.cols()
        )));
    }
    Ok(pred.sub(gt).square().mean_all())
}

// --- distortion ----------------------------------------------------------------

/// Per ray `Σ_i Σ_j w_i w_j |m_i − m_j| + (1/3) Σ_i w_i² δ_i`, averaged over
/// rays. Midpoints must be normalized to [0,1] and ascending within each ray
/// (the renderer's sample order), which lets the pairwise term run in O(s)
/// via exclusive prefix sums.
pub fn distortion_loss(
    weights: &Tensor,
    midpoints: &[f64],
    deltas: &[f64],
) -> Result<Tensor, CoreError> {
    let (n, s) = weights.shape();
    if midpoints.len() != n * s || deltas.len() != n * s {
        return Err(CoreError::BadDimension(format!(
            "distortion_loss: weights {n}x{s} need {} midpoints/deltas, got {}/{}",
            n * s,
            midpoints.len(),
            deltas.len()
        )));
    }
    if weights.data().iter().any(|&w| w < 0.0) {
        return Err(CoreError::BadParameter(
            "distortion_loss: negative sample weights".into(),
        ));
    }
    for ray in 0..n {
        let m = &midpoints[ray * s..(ray + 1) * s];
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::BadParameter(format!(
                "distortion_loss: ray {ray} has midpoints outside [0,1]"
            )));
        }
        if m.windows(2).any(|p| p[1] < p[0]) {
            return Err(CoreError::BadParameter(format!(
                "distortion_loss: ray {ray} midpoints are not ascending"
            )));
        }
        if deltas[ray * s..(ray + 1) * s].iter().any(|&d| !(d >= 0.0)) {
            return Err(CoreError::BadParameter(format!(
                "distortion_loss: ray {ray} has negative interval widths"
            )));
        }
    }
    let mc = Tensor::from_vec(n, s, midpoints.to_vec());
    let dc = Tensor::from_vec(n, s, deltas.to_vec());
    // sorted midpoints: Σ_{i<j} w_i w_j (m_j − m_i) = Σ_j w_j (m_j A_j − B_j)
    // with A_j = Σ_{i<j} w_i and B_j = Σ_{i<j} w_i m_i; doubled for both orders
    let pref_a = weights.cumsum_excl_rows();
    let pref_b = weights.mul(&mc).cumsum_excl_rows();
    let pairwise = weights
        .mul(&mc.mul(&pref_a).sub(&pref_b))
        .sum_rows()
        .mul_scalar(2.0);
    let self_term = weights.square().mul(&dc).sum_rows().mul_scalar(1.0 / 3.0);
    Ok(pairwise.add(&self_term).mean_all())
}

/// Midpoints and interval widths of a sampled batch mapped into each ray's
/// normalized [0,1] parameter, ready for [`distortion_loss`].
pub fn normalized_ray_intervals(
    batch: &RayBatch,
    points: &SampledPoints,
) -> (Vec<f64>, Vec<f64>) {
    let (n, s) = points.midpoints.shape();
    let mids = points.midpoints.to_vec();
    let dels = points.deltas.to_vec();
    let mut nm = Vec::with_capacity(n * s);
    let mut nd = Vec::with_capacity(n * s);
    for ray in 0..n {
        let span = batch.t_far[ray] - batch.t_near[ray];
        for i in 0..s {
            nm.push(((mids[ray * s + i] - batch.t_near[ray]) / span).clamp(0.0, 1.0));
            nd.push(dels[ray * s + i] / span);
        }
    }
    (nm, nd)
}

// --- full geometry ---------------------------------------------------------------

/// Mean over rays of `(Σ_i w_i − 1)²`: pushes each ray toward full opacity.
pub fn full_geometry_loss(weights: &Tensor) -> Result<Tensor, CoreError> {
    if weights.is_empty() {
        return Err(CoreError::BadDimension("full_geometry_loss: empty weights".into()));
    }
    Ok(weights.sum_rows().add_scalar(-1.0).square().mean_all())
}

// --- depth smoothness -------------------------------------------------------------

/// Mean squared horizontal plus mean squared vertical neighbor depth
/// difference over a patch render. Random-layout batches have no pixel
/// adjacency and are rejected.
pub fn depth_smoothness_loss(depth: &Tensor, layout: &BatchLayout) -> Result<Tensor, CoreError> {
    let side = match layout {
        BatchLayout::Random => {
            return Err(CoreError::BadParameter(
                "depth_smoothness_loss needs a patch batch; random layouts have no neighbors"
                    .into(),
            ))
        }
        BatchLayout::Patch { side, .. } => *side,
    };
    if depth.len() != side * side {
        return Err(CoreError::BadDimension(format!(
            "depth_smoothness_loss: {} depths for a side-{side} patch",
            depth.len()
        )));
    }
    let d = depth.reshape(side, side);
    let h = d.slice_cols(1, side).sub(&d.slice_cols(0, side - 1));
    let v = d.slice_rows(1, side).sub(&d.slice_rows(0, side - 1));
    Ok(h.square().mean_all().add(&v.square().mean_all()))
}

// --- KL consistency ---------------------------------------------------------------

const KL_EPS: f64 = 1e-10;

fn reject_negative(w: &Tensor, what: &str) -> Result<(), CoreError> {
    if w.data().iter().any(|&v| v < 0.0) {
        return Err(CoreError::BadParameter(format!("{what}: negative weights")));
    }
    Ok(())
}

/// Row-wise KL(p ‖ q) where each row of `a`/`b` is ε-shifted and normalized
/// into a distribution; returns one scalar per row.
fn kl_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = a.shape();
    let p = a.add_scalar(KL_EPS);
    let q = b.add_scalar(KL_EPS);
    let pn = p.div(&p.sum_rows().broadcast_cols(c));
    let qn = q.div(&q.sum_rows().broadcast_cols(c));
    debug_assert_eq!((r, c), pn.shape());
    pn.mul(&pn.div(&qn).ln()).sum_rows()
}

/// KL divergence between the weight distributions of one ray and its
/// neighbor. Both are ε-normalized first, so two all-zero rays compare as
/// identical uniform distributions and contribute zero.
pub fn kl_consistency_loss(ray: &Tensor, neighbor: &Tensor) -> Result<Tensor, CoreError> {
    if ray.len() != neighbor.len() || ray.is_empty() {
        return Err(CoreError::BadDimension(format!(
            "kl_consistency_loss: {} vs {} samples",
            ray.len(),
            neighbor.len()
        )));
    }
    reject_negative(ray, "kl_consistency_loss")?;
    reject_negative(neighbor, "kl_consistency_loss")?;
    let s = ray.len();
    Ok(kl_rows(&ray.reshape(1, s), &neighbor.reshape(1, s)).sum_all())
}

/// KL consistency over a patch batch: every horizontally adjacent ray pair
/// (left row ‖ right row), averaged over pairs.
pub fn kl_patch_loss(weights: &Tensor, layout: &BatchLayout) -> Result<Tensor, CoreError> {
    let side = match layout {
        BatchLayout::Random => {
            return Err(CoreError::BadParameter(
                "kl_patch_loss needs a patch batch; random layouts have no neighbors".into(),
            ))
        }
        BatchLayout::Patch { side, .. } => *side,
    };
    let (n, _s) = weights.shape();
    if n != side * side {
        return Err(CoreError::BadDimension(format!(
            "kl_patch_loss: {n} rays for a side-{side} patch"
        )));
    }
    reject_negative(weights, "kl_patch_loss")?;
    let mut left = Vec::with_capacity(side);
    let mut right = Vec::with_capacity(side);
    for r in 0..side {
        left.push(weights.slice_rows(r * side, r * side + side - 1));
        right.push(weights.slice_rows(r * side + 1, (r + 1) * side));
    }
    let l = Tensor::concat_rows(&left);
    let r = Tensor::concat_rows(&right);
    Ok(kl_rows(&l, &r).mean_all())
}

// --- per-row-norm Huber -------------------------------------------------------------

struct HuberNormOp {
    residuals: Vec<f64>,
    rows: usize,
    cols: usize,
    delta: f64,
}

impl CustomOp for HuberNormOp {
    fn name(&self) -> &'static str {
        "huber_norm"
    }

    fn backward_into(&self, grad_out: &[f64], _idx: usize, sink: &mut [f64]) {
        let (m, k, d) = (self.rows, self.cols, self.delta);
        for i in 0..m {
            let row = &self.residuals[i * k..(i + 1) * k];
            let e = sqrt(row.iter().map(|r| r * r).sum());
            // quadratic branch: ∂(½e²)/∂r = r; linear: ∂(δ(e−½δ))/∂r = δ r/e
            let f = if e <= d { 1.0 } else { d / e };
            for j in 0..k {
                sink[i * k + j] += grad_out[i] * f * row[j];
            }
        }
    }
}

/// Huber penalty of each row's Euclidean norm `e`: `0.5e²` inside the
/// threshold, `δ(e − 0.5δ)` beyond it. Returns one scalar per row.
pub fn huber(residuals: &Tensor, delta: f64) -> Result<Tensor, CoreError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(CoreError::BadParameter(format!(
            "huber: threshold must be positive, got {delta}"
        )));
    }
    let (m, k) = residuals.shape();
    let data = residuals.to_vec();
    let out = (0..m)
        .map(|i| {
            let e = sqrt(data[i * k..(i + 1) * k].iter().map(|r| r * r).sum());
            if e <= delta {
                0.5 * e * e
            } else {
                delta * (e - 0.5 * delta)
            }
        })
        .collect();
    let op = HuberNormOp { residuals: data, rows: m, cols: k, delta };
    Ok(Tensor::custom(&[residuals.clone()], Rc::new(op), m, 1, out))
}

// --- correspondence (MV) loss ---------------------------------------------------------

/// Matched pixel pairs between two views, as read from a match file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub view_i: usize,
    pub view_j: usize,
    /// (u, v) coordinates in view i / view j, one row per match.
    pub pix_i: Vec<[f64; 2]>,
    pub pix_j: Vec<[f64; 2]>,
    /// Per-match confidence in [0, 1].
    pub confidence: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    /// Check the structural invariants against the two cameras' grids.
    pub fn validate(&self, cam_i: &Camera, cam_j: &Camera) -> Result<(), CoreError> {
        if self.pix_i.len() != self.confidence.len() || self.pix_j.len() != self.confidence.len() {
            return Err(CoreError::BadDimension(format!(
                "match set {}->{}: field lengths differ",
                self.view_i, self.view_j
            )));
        }
        let inside = |p: &[f64; 2], cam: &Camera| {
            p[0] >= 0.0
                && p[0] <= (cam.width - 1) as f64
                && p[1] >= 0.0
                && p[1] <= (cam.height - 1) as f64
        };
        for (idx, ((pi, pj), &c)) in self
            .pix_i
            .iter()
            .zip(&self.pix_j)
            .zip(&self.confidence)
            .enumerate()
        {
            if !inside(pi, cam_i) || !inside(pj, cam_j) {
                return Err(CoreError::BadParameter(format!(
                    "match {idx} of {}->{} lies outside the image grid",
                    self.view_i, self.view_j
                )));
            }
            if !(0.0..=1.0).contains(&c) {
                return Err(CoreError::BadParameter(format!(
                    "match {idx} of {}->{} has confidence {c} outside [0,1]",
                    self.view_i, self.view_j
                )));
            }
        }
        Ok(())
    }
}

/// Parse a match file: one `view_i view_j u_i v_i u_j v_j confidence` record
/// per line, `#` comments and blank lines allowed. Records are grouped into
/// one [`MatchSet`] per (view_i, view_j) pair, ordered by pair.
pub fn parse_match_file(text: &str) -> Result<Vec<MatchSet>, CoreError> {
    let mut groups: BTreeMap<(usize, usize), MatchSet> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(CoreError::BadParameter(format!(
                "match file line {}: expected 7 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, CoreError> {
            s.parse::<f64>().map_err(|_| {
                CoreError::BadParameter(format!(
                    "match file line {}: bad {what} '{s}'",
                    lineno + 1
                ))
            })
        };
        let parse_u = |s: &str, what: &str| -> Result<usize, CoreError> {
            s.parse::<usize>().map_err(|_| {
                CoreError::BadParameter(format!(
                    "match file line {}: bad {what} '{s}'",
                    lineno + 1
                ))
            })
        };
        let vi = parse_u(fields[0], "view index")?;
        let vj = parse_u(fields[1], "view index")?;
        let ui = parse_f(fields[2], "coordinate")?;
        let vi_c = parse_f(fields[3], "coordinate")?;
        let uj = parse_f(fields[4], "coordinate")?;
        let vj_c = parse_f(fields[5], "coordinate")?;
        let conf = parse_f(fields[6], "confidence")?;
        if !(0.0..=1.0).contains(&conf) {
            return Err(CoreError::BadParameter(format!(
                "match file line {}: confidence {conf} outside [0,1]",
                lineno + 1
            )));
        }
        let set = groups.entry((vi, vj)).or_insert_with(|| MatchSet {
            view_i: vi,
            view_j: vj,
            pix_i: Vec::new(),
            pix_j: Vec::new(),
            confidence: Vec::new(),
        });
        set.pix_i.push([ui, vi_c]);
        set.pix_j.push([uj, vj_c]);
        set.confidence.push(conf);
    }
    Ok(groups.into_values().collect())
}

/// Result of the correspondence loss: the λ-scaled term plus how many
/// matches survived filtering (zero means the term was skipped and the
/// caller should log a warning).
#[derive(Debug, Clone)]
pub struct MvOutcome {
    pub loss: Tensor,
    pub survivors: usize,
}

/// One direction of the MV loss: project source pixels through their
/// rendered along-ray depths into the destination view and penalize the
/// reprojection error. Differentiable with respect to `depth_src`.
fn mv_one_way(
    pix_src: &[[f64; 2]],
    pix_dst: &[[f64; 2]],
    confidence: &[f64],
    depth_src: &Tensor,
    cam_src: &Camera,
    cam_dst: &Camera,
    min_conf: f64,
) -> Result<(Option<Tensor>, usize), CoreError> {
    let m = pix_src.len();
    if depth_src.len() != m {
        return Err(CoreError::BadDimension(format!(
            "mv loss: {m} matches but {} rendered depths",
            depth_src.len()
        )));
    }
    let k = &cam_src.k;
    let t_rel = relative_transform(&cam_src.pose, &cam_dst.pose);
    let d = depth_src.to_vec();
    let z: Vec<f64> = pix_src
        .iter()
        .zip(&d)
        .map(|(p, &t)| ray_depth_to_z(t, p[0], p[1], k))
        .collect();
    let proj = project_pixels(pix_src, &z, k, &t_rel)?;
    let keep: Vec<usize> = (0..m)
        .filter(|&i| confidence[i] >= min_conf && proj.valid[i])
        .collect();
    let kn = keep.len();
    if kn == 0 {
        return Ok((None, 0));
    }
    // per-survivor constants of the projection chain: the camera direction of
    // each source pixel rotated into the destination frame, the relative
    // translation, and the along-ray → z-depth conversion
    let (fx, fy, cx, cy) = (k[0], k[4], k[2], k[5]);
    let mut sel = vec![0.0; kn * m];
    let mut alpha_x = Vec::with_capacity(kn);
    let mut alpha_y = Vec::with_capacity(kn);
    let mut neg_alpha_z = Vec::with_capacity(kn);
    let mut inv_scale = Vec::with_capacity(kn);
    let mut uj = Vec::with_capacity(kn);
    let mut vj = Vec::with_capacity(kn);
    let mut conf_kept = Vec::with_capacity(kn);
    for (row, &i) in keep.iter().enumerate() {
        sel[row * m + i] = 1.0;
        let a = (pix_src[i][0] - cx) / fx;
        let b = -(pix_src[i][1] - cy) / fy;
        alpha_x.push(t_rel[0] * a + t_rel[1] * b - t_rel[2]);
        alpha_y.push(t_rel[4] * a + t_rel[5] * b - t_rel[6]);
        neg_alpha_z.push(-(t_rel[8] * a + t_rel[9] * b - t_rel[10]));
        inv_scale.push(1.0 / sqrt(a * a + b * b + 1.0));
        uj.push(pix_dst[i][0]);
        vj.push(pix_dst[i][1]);
        conf_kept.push(confidence[i]);
    }
    let gather = Tensor::from_vec(kn, m, sel).matmul(&depth_src.reshape(m, 1));
    let zt = gather.mul(&Tensor::from_vec(kn, 1, inv_scale));
    let c = |v: Vec<f64>| Tensor::from_vec(kn, 1, v);
    let xp = zt.mul(&c(alpha_x)).add_scalar(t_rel[3]);
    let yp = zt.mul(&c(alpha_y)).add_scalar(t_rel[7]);
    let zp = zt.mul(&c(neg_alpha_z)).add_scalar(-t_rel[11]);
    let du = xp.div(&zp).mul_scalar(fx).add_scalar(cx).sub(&c(uj));
    let dv = yp.div(&zp).mul_scalar(-fy).add_scalar(cy).sub(&c(vj));
    let h = huber(&Tensor::concat_cols(&[du, dv]), HUBER_DELTA_DEFAULT)?;
    let loss = h.mul(&c(conf_kept)).mean_all();
    Ok((Some(loss), kn))
}

/// Confidence-filtered, Huber-penalized reprojection error of the matched
/// pixels, λ_MV-scaled. `depth_i` (and `depth_j` when `two_way`) are the
/// rendered along-ray depths at the matched pixels; gradients flow into
/// them. Both views must share intrinsics.
#[allow(clippy::too_many_arguments)]
pub fn mv_correspondence_loss(
    matches: &MatchSet,
    depth_i: &Tensor,
    depth_j: Option<&Tensor>,
    cam_i: &Camera,
    cam_j: &Camera,
    lambda_mv: f64,
    two_way: bool,
    min_conf: f64,
) -> Result<MvOutcome, CoreError> {
    matches.validate(cam_i, cam_j)?;
    for (a, b) in cam_i.k.iter().zip(&cam_j.k) {
        if (a - b).abs() > 1e-9 {
            return Err(CoreError::BadParameter(
                "mv loss expects shared intrinsics between the views".into(),
            ));
        }
    }
    let (fwd, n_fwd) = mv_one_way(
        &matches.pix_i,
        &matches.pix_j,
        &matches.confidence,
        depth_i,
        cam_i,
        cam_j,
        min_conf,
    )?;
    let mut survivors = n_fwd;
    let mut loss = fwd.unwrap_or_else(|| Tensor::scalar(0.0));
    if two_way {
        let dj = depth_j.ok_or_else(|| {
            CoreError::BadParameter("two-way mv loss needs depths for view j".into())
        })?;
        let (bwd, n_bwd) = mv_one_way(
            &matches.pix_j,
            &matches.pix_i,
            &matches.confidence,
            dj,
            cam_j,
            cam_i,
            min_conf,
        )?;
        survivors += n_bwd;
        let b = bwd.unwrap_or_else(|| Tensor::scalar(0.0));
        loss = loss.add(&b).mul_scalar(0.5);
    }
    Ok(MvOutcome { loss: loss.mul_scalar(lambda_mv), survivors })
}

// --- combined objective -----------------------------------------------------------

/// The individual terms of one iteration's objective. `dw` arrives already
/// sub-band-weighted and `mv` already λ_MV-scaled; absent terms are simply
/// skipped (the DW term only exists on scheduled iterations).
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub mse: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub distortion: Option<Tensor>,
    pub full_geometry: Option<Tensor>,
    pub depth_smoothness: Option<Tensor>,
    pub kl: Option<Tensor>,
    pub mv: Option<Tensor>,
}

/// `L = L_MSE + L_DW + λ_dist L_dist + λ_fg L_fg + λ_ds L_ds + λ_KL L_KL +
/// L_MV`, rejecting any enabled term that is not finite (named in the
/// error).
pub fn combined_loss(terms: &LossTerms, w: &LossWeights) -> Result<Tensor, CoreError> {
    w.validate()?;
    let mse = terms
        .mse
        .as_ref()
        .ok_or_else(|| CoreError::BadParameter("combined_loss: the MSE term is mandatory".into()))?;
    let check = |name: &str, t: &Tensor| -> Result<(), CoreError> {
        let v = t.item();
        if !v.is_finite() {
            return Err(CoreError::NonFinite(format!("{name} loss term is {v}")));
        }
        Ok(())
    };
    check("mse", mse)?;
    let mut total = mse.clone();
    for (name, term, lambda) in [
        ("discrete wavelet", &terms.dw, 1.0),
        ("distortion", &terms.distortion, w.dist),
        ("full geometry", &terms.full_geometry, w.fg),
        ("depth smoothness", &terms.depth_smoothness, w.ds),
        ("kl consistency", &terms.kl, w.kl),
        ("mv correspondence", &terms.mv, 1.0),
    ] {
        if let Some(t) = term {
            check(name, t)?;
            total = total.add(&t.mul_scalar(lambda));
        }
    }
    Ok(total)
}

/// Compact `name=value` rendering of the present terms, for logging.
pub fn describe_terms(terms: &LossTerms) -> String {
    let mut parts = Vec::new();
    for (name, t) in [
        ("mse", &terms.mse),
        ("dw", &terms.dw),
        ("dist", &terms.distortion),
        ("fg", &terms.full_geometry),
        ("ds", &terms.depth_smoothness),
        ("kl", &terms.kl),
        ("mv", &terms.mv),
    ] {
        if let Some(v) = t {
            parts.push(format!("{name}={:.6e}", v.item()));
        }
    }
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, RngExt};
    use crate::tensor::gradcheck::max_rel_err;

    #[test]
    fn mse_matches_hand_values_and_a_loop_oracle() {
        let a = Tensor::param(3, 3, (0..9).map(|i| i as f64 / 9.0).collect());
        assert_eq!(mse_loss(&a, &a).unwrap().item(), 0.0);
        let b = a.add_scalar(0.1);
        assert!((mse_loss(&a, &b).unwrap().item() - 0.01).abs() < 1e-15);
        let mut rng = seeded(50);
        let p = Tensor::param(4, 3, (0..12).map(|_| rng.uniform()).collect());
        let g = Tensor::from_vec(4, 3, (0..12).map(|_| rng.uniform()).collect());
        let oracle: f64 = p
            .to_vec()
            .iter()
            .zip(g.to_vec())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 12.0;
        assert!((mse_loss(&p, &g).unwrap().item() - oracle).abs() < 1e-12);
        assert!(mse_loss(&p, &Tensor::zeros(3, 4)).is_err());
    }

    #[test]
    fn mse_gradients_match_finite_differences() {
        let mut rng = seeded(51);
        let p = Tensor::param(4, 3, (0..12).map(|_| rng.uniform()).collect());
        let g = Tensor::from_vec(4, 3, (0..12).map(|_| rng.uniform()).collect());
        let params = [p.clone()];
        let worst = max_rel_err(|| mse_loss(&p, &g).unwrap(), &params, None, 1e-5, &mut rng);
        assert!(worst < 1e-4);
    }

    fn sorted_midpoints(rng: &mut impl RngExt, n: usize, s: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * s);
        for _ in 0..n {
            let mut m: Vec<f64> = (0..s).map(|_| rng.uniform()).collect();
            m.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.extend(m);
        }
        out
    }

    fn distortion_oracle(w: &[f64], m: &[f64], d: &[f64], n: usize, s: usize) -> f64 {
        let mut total = 0.0;
        for ray in 0..n {
            let (w, m, d) = (
                &w[ray * s..(ray + 1) * s],
                &m[ray * s..(ray + 1) * s],
                &d[ray * s..(ray + 1) * s],
            );
            let mut acc = 0.0;
            for i in 0..s {
                for j in 0..s {
                    acc += w[i] * w[j] * (m[i] - m[j]).abs();
                }
                acc += w[i] * w[i] * d[i] / 3.0;
            }
            total += acc;
        }
        total / n as f64
    }

    #[test]
    fn distortion_matches_hand_value_and_brute_force() {
        let w = Tensor::param(1, 1, vec![1.0]);
        let got = distortion_loss(&w, &[0.5], &[0.25]).unwrap().item();
        assert!((got - 1.0 / 12.0).abs() < 1e-15, "{got}");

        let zero = Tensor::param(2, 4, vec![0.0; 8]);
        let m = sorted_midpoints(&mut seeded(52), 2, 4);
        assert_eq!(distortion_loss(&zero, &m, &[0.1; 8]).unwrap().item(), 0.0);

        let mut rng = seeded(53);
        for s in [3usize, 8, 16] {
            let n = 5;
            let w = Tensor::param(n, s, (0..n * s).map(|_| rng.uniform()).collect());
            let m = sorted_midpoints(&mut rng, n, s);
            let d: Vec<f64> = (0..n * s).map(|_| rng.uniform_in(0.0, 0.2)).collect();
            let got = distortion_loss(&w, &m, &d).unwrap().item();
            let want = distortion_oracle(&w.to_vec(), &m, &d, n, s);
            assert!((got - want).abs() < 1e-12, "s={s}: {got} vs {want}");
        }
    }

    #[test]
    fn distortion_rejects_bad_inputs() {
        let w = Tensor::param(1, 2, vec![0.5, -0.1]);
        assert!(distortion_loss(&w, &[0.2, 0.8], &[0.1, 0.1]).is_err());
        let w = Tensor::param(1, 2, vec![0.5, 0.5]);
        assert!(distortion_loss(&w, &[0.8, 0.2], &[0.1, 0.1]).is_err()); // not ascending
        assert!(distortion_loss(&w, &[0.2, 1.4], &[0.1, 0.1]).is_err()); // outside [0,1]
        assert!(distortion_loss(&w, &[0.2], &[0.1, 0.1]).is_err());
    }

    #[test]
    fn distortion_gradients_match_finite_differences() {
        let mut rng = seeded(54);
        let (n, s) = (3, 6);
        let w = Tensor::param(n, s, (0..n * s).map(|_| rng.uniform_in(0.1, 1.0)).collect());
        let m = sorted_midpoints(&mut rng, n, s);
        let d: Vec<f64> = (0..n * s).map(|_| rng.uniform_in(0.05, 0.2)).collect();
        let params = [w.clone()];
        let worst = max_rel_err(
            || distortion_loss(&w, &m, &d).unwrap(),
            &params,
            None,
            1e-6,
            &mut rng,
        );
        assert!(worst < 1e-4, "distortion gradient error {worst}");
    }

    #[test]
    fn full_geometry_hand_values_and_gradients() {
        let unit = Tensor::param(3, 4, vec![0.25; 12]);
        assert!(full_geometry_loss(&unit).unwrap().item().abs() < 1e-30);
        let zero = Tensor::param(2, 4, vec![0.0; 8]);
        assert_eq!(full_geometry_loss(&zero).unwrap().item(), 1.0);
        let half = Tensor::param(2, 2, vec![0.25; 4]);
        assert!((full_geometry_loss(&half).unwrap().item() - 0.25).abs() < 1e-15);

        let mut rng = seeded(55);
        let w = Tensor::param(4, 5, (0..20).map(|_| rng.uniform()).collect());
        let params = [w.clone()];
        let worst = max_rel_err(|| full_geometry_loss(&w).unwrap(), &params, None, 1e-5, &mut rng);
        assert!(worst < 1e-4);
    }

    #[test]
    fn depth_smoothness_hand_values_and_oracle() {
        let patch = BatchLayout::Patch { side: 4, top_left: (0, 0) };
        let flat = Tensor::param(16, 1, vec![2.5; 16]);
        assert_eq!(depth_smoothness_loss(&flat, &patch).unwrap().item(), 0.0);

        // horizontal ramp with slope g: every horizontal diff is g, vertical 0
        let g = 0.3;
        let ramp: Vec<f64> = (0..16).map(|i| (i % 4) as f64 * g).collect();
        let got = depth_smoothness_loss(&Tensor::param(16, 1, ramp), &patch)
            .unwrap()
            .item();
        assert!((got - g * g).abs() < 1e-12, "{got}");

        let mut rng = seeded(56);
        let vals: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let got = depth_smoothness_loss(&Tensor::param(16, 1, vals.clone()), &patch)
            .unwrap()
            .item();
        let (mut h, mut v) = (0.0, 0.0);
        for r in 0..4 {
            for c in 0..3 {
                h += (vals[r * 4 + c + 1] - vals[r * 4 + c]).powi(2);
                v += (vals[(c + 1) * 4 + r] - vals[c * 4 + r]).powi(2);
            }
        }
        let want = h / 12.0 + v / 12.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        assert!(depth_smoothness_loss(&flat, &BatchLayout::Random).is_err());
    }

    #[test]
    fn depth_smoothness_gradients_match_finite_differences() {
        let mut rng = seeded(57);
        let patch = BatchLayout::Patch { side: 4, top_left: (0, 0) };
        let d = Tensor::param(16, 1, (0..16).map(|_| rng.uniform()).collect());
        let params = [d.clone()];
        let worst = max_rel_err(
            || depth_smoothness_loss(&d, &patch).unwrap(),
            &params,
            None,
            1e-5,
            &mut rng,
        );
        assert!(worst < 1e-4);
    }

    #[test]
    fn kl_hand_values_and_gibbs_inequality() {
        let a = Tensor::param(1, 4, vec![0.1, 0.4, 0.3, 0.2]);
        assert!(kl_consistency_loss(&a, &a).unwrap().item().abs() < 1e-12);

        let ray = Tensor::param(1, 2, vec![1.0, 0.0]);
        let nb = Tensor::param(1, 2, vec![0.5, 0.5]);
        let got = kl_consistency_loss(&ray, &nb).unwrap().item();
        assert!((got - core::f64::consts::LN_2).abs() < 1e-6, "{got}");

        let zero = Tensor::param(1, 3, vec![0.0; 3]);
        assert!(kl_consistency_loss(&zero, &zero).unwrap().item().abs() < 1e-12);

        let mut rng = seeded(58);
        for _ in 0..20 {
            let p = Tensor::param(1, 6, (0..6).map(|_| rng.uniform()).collect());
            let q = Tensor::param(1, 6, (0..6).map(|_| rng.uniform()).collect());
            assert!(kl_consistency_loss(&p, &q).unwrap().item() >= -1e-15);
        }
        assert!(kl_consistency_loss(&Tensor::param(1, 2, vec![-0.1, 0.5]), &nb).is_err());
    }

    #[test]
    fn kl_patch_averages_horizontal_pairs() {
        let mut rng = seeded(59);
        let side = 2;
        let s = 5;
        let w = Tensor::param(4, s, (0..4 * s).map(|_| rng.uniform()).collect());
        let layout = BatchLayout::Patch { side, top_left: (0, 0) };
        let got = kl_patch_loss(&w, &layout).unwrap().item();
        // pairs: rays (0,1) and (2,3)
        let pair = |a: usize, b: usize| {
            kl_consistency_loss(
                &Tensor::param(1, s, w.to_vec()[a * s..(a + 1) * s].to_vec()),
                &Tensor::param(1, s, w.to_vec()[b * s..(b + 1) * s].to_vec()),
            )
            .unwrap()
            .item()
        };
        let want = 0.5 * (pair(0, 1) + pair(2, 3));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(kl_patch_loss(&w, &BatchLayout::Random).is_err());
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = seeded(60);
        let p = Tensor::param(1, 5, (0..5).map(|_| rng.uniform_in(0.1, 1.0)).collect());
        let q = Tensor::param(1, 5, (0..5).map(|_| rng.uniform_in(0.1, 1.0)).collect());
        let params = [p.clone(), q.clone()];
        let worst = max_rel_err(
            || kl_consistency_loss(&p, &q).unwrap(),
            &params,
            None,
            1e-6,
            &mut rng,
        );
        assert!(worst < 1e-4, "kl gradient error {worst}");

        let w = Tensor::param(4, 5, (0..20).map(|_| rng.uniform_in(0.1, 1.0)).collect());
        let layout = BatchLayout::Patch { side: 2, top_left: (0, 0) };
        let params = [w.clone()];
        let worst = max_rel_err(
            || kl_patch_loss(&w, &layout).unwrap(),
            &params,
            None,
            1e-6,
            &mut rng,
        );
        assert!(worst < 1e-4, "kl patch gradient error {worst}");
    }

    #[test]
    fn huber_branches_and_continuity() {
        let zero = Tensor::param(1, 3, vec![0.0; 3]);
        assert_eq!(huber(&zero, 1.0).unwrap().item(), 0.0);

        // e = δ: both branches give 0.5 δ²
        let at = Tensor::param(1, 2, vec![0.6, 0.8]); // norm 1
        let got = huber(&at, 1.0).unwrap().item();
        assert!((got - 0.5).abs() < 1e-15);

        let lin = Tensor::param(1, 2, vec![1.2, 1.6]); // norm 2
        assert!((huber(&lin, 1.0).unwrap().item() - 1.5).abs() < 1e-15);

        // per-row, mixed branches, against a loop oracle
        let mut rng = seeded(61);
        let r = Tensor::param(6, 3, (0..18).map(|_| rng.uniform_in(-1.5, 1.5)).collect());
        let out = huber(&r, 1.0).unwrap();
        assert_eq!(out.shape(), (6, 1));
        let d = r.to_vec();
        for i in 0..6 {
            let e = (d[i * 3..(i + 1) * 3].iter().map(|x| x * x).sum::<f64>()).sqrt();
            let want = if e <= 1.0 { 0.5 * e * e } else { e - 0.5 };
            assert!((out.at(i, 0) - want).abs() < 1e-14);
        }
        assert!(huber(&zero, 0.0).is_err());
    }

    #[test]
    fn huber_gradients_match_finite_differences() {
        let mut rng = seeded(62);
        // rows away from the e = δ kink and from e = 0
        let r = Tensor::param(
            5,
            2,
            (0..5)
                .flat_map(|i| {
                    let e = if i % 2 == 0 { 0.5 } else { 2.0 };
                    let ang = rng.uniform_in(0.0, core::f64::consts::TAU);
                    [e * ang.cos(), e * ang.sin()]
                })
                .collect(),
        );
        let params = [r.clone()];
        let worst = max_rel_err(
            || huber(&r, 1.0).unwrap().mean_all(),
            &params,
            None,
            1e-6,
            &mut rng,
        );
        assert!(worst < 1e-4, "huber gradient error {worst}");
    }

    const ID: [f64; 16] = [
        1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ];

    fn cam(pose: [f64; 16]) -> Camera {
        Camera {
            k: [50.0, 0.0, 32.0, 0.0, 50.0, 32.0, 0.0, 0.0, 1.0],
            pose,
            width: 64,
            height: 64,
        }
    }

    /// Along-ray depth of the fronto-parallel plane z = −d at pixel (u, v).
    fn plane_t(u: f64, v: f64, k: &[f64; 9], d: f64) -> f64 {
        let a = (u - k[2]) / k[0];
        let b = (v - k[5]) / k[4];
        d * (a * a + b * b + 1.0).sqrt()
    }

    #[test]
    fn mv_identical_poses_with_self_matches_is_zero() {
        let (ci, cj) = (cam(ID), cam(ID));
        let pix: Vec<[f64; 2]> = vec![[10.0, 20.0], [40.0, 15.0], [33.3, 50.1]];
        let m = MatchSet {
            view_i: 0,
            view_j: 1,
            pix_i: pix.clone(),
            pix_j: pix,
            confidence: vec![1.0, 0.8, 0.6],
        };
        let depth = Tensor::param(3, 1, vec![2.0, 3.0, 4.5]);
        let out =
            mv_correspondence_loss(&m, &depth, None, &ci, &cj, 0.01, false, 0.5).unwrap();
        assert_eq!(out.survivors, 3);
        assert!(out.loss.item().abs() < 1e-18);
    }

    #[test]
    fn mv_matches_a_planar_homography_oracle() {
        // camera j is translated by t; scene is the plane z = −d. A match at
        // pixel p in view i lands at the closed-form disparity-shifted pixel
        // in view j; offsetting the stored match by a known error makes the
        // expected loss computable by hand.
        let d = 4.0;
        let t = [0.6, -0.3, 0.2];
        let mut pose_j = ID;
        pose_j[3] = t[0];
        pose_j[7] = t[1];
        pose_j[11] = t[2];
        let (ci, cj) = (cam(ID), cam(pose_j));
        let k = ci.k;
        let pix_i: Vec<[f64; 2]> = vec![[12.0, 45.0], [30.0, 30.0], [55.0, 8.0]];
        let offsets = [[0.3, -0.4], [0.0, 0.0], [-1.5, 2.0]];
        let conf = [1.0, 0.9, 0.7];
        let mut pix_j = Vec::new();
        for (p, off) in pix_i.iter().zip(&offsets) {
            // independent projection: P = (a d, b d, −d) in cam i; cam j at
            // translation t sees P − t
            let a = (p[0] - k[2]) / k[0];
            let b = -(p[1] - k[5]) / k[4];
            let pc = [a * d - t[0], b * d - t[1], -d - t[2]];
            let zq = -pc[2];
            let u = k[2] + k[0] * pc[0] / zq;
            let v = k[5] - k[4] * pc[1] / zq;
            pix_j.push([u + off[0], v + off[1]]);
        }
        let m = MatchSet {
            view_i: 0,
            view_j: 1,
            pix_i: pix_i.clone(),
            pix_j,
            confidence: conf.to_vec(),
        };
        let depth = Tensor::param(
            3,
            1,
            pix_i.iter().map(|p| plane_t(p[0], p[1], &k, d)).collect(),
        );
        let lambda = 0.02;
        let out =
            mv_correspondence_loss(&m, &depth, None, &ci, &cj, lambda, false, 0.5).unwrap();
        // expected: residual magnitudes are exactly the injected offsets
        let want: f64 = offsets
            .iter()
            .zip(&conf)
            .map(|(o, c)| {
                let e = (o[0] * o[0] + o[1] * o[1]).sqrt();
                let h = if e <= 1.0 { 0.5 * e * e } else { e - 0.5 };
                c * h
            })
            .sum::<f64>()
            / 3.0
            * lambda;
        assert!(
            (out.loss.item() - want).abs() < 1e-9,
            "{} vs {want}",
            out.loss.item()
        );
    }

    #[test]
    fn mv_two_way_averages_the_directions() {
        let d = 3.0;
        let mut pose_j = ID;
        pose_j[3] = 0.5;
        let (ci, cj) = (cam(ID), cam(pose_j));
        let k = ci.k;
        let pix_i: Vec<[f64; 2]> = vec![[20.0, 25.0], [42.0, 40.0]];
        // exact correspondences on the plane, then perturbed depths make both
        // directions nonzero
        let mut pix_j = Vec::new();
        for p in &pix_i {
            let a = (p[0] - k[2]) / k[0];
            let b = -(p[1] - k[5]) / k[4];
            let pc = [a * d - 0.5, b * d, -d];
            pix_j.push([k[2] + k[0] * pc[0] / d, k[5] - k[4] * pc[1] / d]);
        }
        let m = MatchSet {
            view_i: 0,
            view_j: 1,
            pix_i: pix_i.clone(),
            pix_j: pix_j.clone(),
            confidence: vec![1.0, 1.0],
        };
        let di = Tensor::param(
            2,
            1,
            pix_i.iter().map(|p| plane_t(p[0], p[1], &k, d) * 1.1).collect(),
        );
        let dj = Tensor::param(
            2,
            1,
            pix_j.iter().map(|p| plane_t(p[0], p[1], &k, d) * 0.9).collect(),
        );
        let both = mv_correspondence_loss(&m, &di, Some(&dj), &ci, &cj, 1.0, true, 0.5)
            .unwrap();
        let fwd = mv_correspondence_loss(&m, &di, None, &ci, &cj, 1.0, false, 0.5).unwrap();
        let rev = MatchSet {
            view_i: 1,
            view_j: 0,
            pix_i: pix_j,
            pix_j: pix_i,
            confidence: vec![1.0, 1.0],
        };
        let bwd = mv_correspondence_loss(&rev, &dj, None, &cj, &ci, 1.0, false, 0.5).unwrap();
        let want = 0.5 * (fwd.loss.item() + bwd.loss.item());
        assert!((both.loss.item() - want).abs() < 1e-15);
        assert!(both.loss.item() > 0.0);
    }

    #[test]
    fn mv_filters_by_confidence_and_reports_zero_survivors() {
        let (ci, cj) = (cam(ID), cam(ID));
        let m = MatchSet {
            view_i: 0,
            view_j: 1,
            pix_i: vec![[10.0, 10.0], [20.0, 20.0]],
            pix_j: vec![[11.0, 10.0], [20.0, 22.0]],
            confidence: vec![0.2, 0.4],
        };
        let depth = Tensor::param(2, 1, vec![2.0, 2.0]);
        let out =
            mv_correspondence_loss(&m, &depth, None, &ci, &cj, 1.0, false, 0.5).unwrap();
        assert_eq!(out.survivors, 0);
        assert_eq!(out.loss.item(), 0.0);
        // lowering the floor brings them back
        let out =
            mv_correspondence_loss(&m, &depth, None, &ci, &cj, 1.0, false, 0.1).unwrap();
        assert_eq!(out.survivors, 2);
        assert!(out.loss.item() > 0.0);
    }

    #[test]
    fn mv_gradients_match_finite_differences() {
        let mut rng = seeded(63);
        let d = 3.5;
        let mut pose_j = ID;
        pose_j[3] = 0.4;
        pose_j[11] = -0.2;
        let (ci, cj) = (cam(ID), cam(pose_j));
        let k = ci.k;
        let pix_i: Vec<[f64; 2]> = (0..4)
            .map(|_| [rng.uniform_in(10.0, 54.0), rng.uniform_in(10.0, 54.0)])
            .collect();
        let pix_j: Vec<[f64; 2]> = pix_i
            .iter()
            .map(|p| [p[0] + rng.uniform_in(-2.0, 2.0), p[1] + rng.uniform_in(-2.0, 2.0)])
            .collect();
        let m = MatchSet {
            view_i: 0,
            view_j: 1,
            pix_i: pix_i.clone(),
            pix_j: pix_j.clone(),
            confidence: vec![0.9, 0.7, 1.0, 0.6],
        };
        let di = Tensor::param(
            4,
            1,
            pix_i
                .iter()
                .map(|p| plane_t(p[0], p[1], &k, d) * rng.uniform_in(0.9, 1.1))
                .collect(),
        );
        let dj = Tensor::param(
            4,
            1,
            pix_j
                .iter()
                .map(|p| plane_t(p[0], p[1], &k, d) * rng.uniform_in(0.9, 1.1))
                .collect(),
        );
        let params = [di.clone(), dj.clone()];
        let worst = max_rel_err(
            || {
                mv_correspondence_loss(&m, &di, Some(&dj), &ci, &cj, 1.0, true, 0.5)
                    .unwrap()
                    .loss
            },
            &params,
            None,
            1e-5,
            &mut rng,
        );
        assert!(worst < 1e-4, "mv gradient error {worst}");
    }

    #[test]
    fn match_file_parsing_groups_and_validates() {
        let text = "\
# two pairs, comments and blanks allowed
0 1 10.0 20.0 11.5 20.5 0.9
0 1 30.0 40.0 31.0 41.0 0.8  # trailing comment

1 2 5.0 6.0 7.0 8.0 1.0
";
        let sets = parse_match_file(text).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!((sets[0].view_i, sets[0].view_j), (0, 1));
        assert_eq!(sets[0].len(), 2);
        assert_eq!(sets[0].pix_i[1], [30.0, 40.0]);
        assert_eq!(sets[1].confidence, vec![1.0]);

        assert!(parse_match_file("0 1 2 3 4 5").is_err()); // six fields
        assert!(parse_match_file("0 1 1 1 1 1 1.5").is_err()); // confidence
        assert!(parse_match_file("a 1 1 1 1 1 0.5").is_err()); // view index

        let c = cam(ID);
        let bad = MatchSet {
            view_i: 0,
            view_j: 1,
            pix_i: vec![[100.0, 10.0]],
            pix_j: vec![[10.0, 10.0]],
            confidence: vec![0.9],
        };
        assert!(bad.validate(&c, &c).is_err());
    }

    #[test]
    fn combined_loss_is_the_weighted_sum_of_its_terms() {
        let mut w = LossWeights::default();
        let mse = Tensor::scalar(0.25);
        let only = LossTerms { mse: Some(mse.clone()), ..Default::default() };
        let zeroed = LossWeights { dist: 0.0, fg: 0.0, ds: 0.0, kl: 0.0, mv: 0.0, ..w.clone() };
        assert_eq!(combined_loss(&only, &zeroed).unwrap().item(), 0.25);

        w.dist = 0.01;
        let one = LossTerms {
            mse: Some(mse.clone()),
            distortion: Some(Tensor::scalar(3.0)),
            ..Default::default()
        };
        assert!((combined_loss(&one, &w).unwrap().item() - (0.25 + 0.03)).abs() < 1e-15);

        let full = LossTerms {
            mse: Some(Tensor::scalar(0.5)),
            dw: Some(Tensor::scalar(0.125)),
            distortion: Some(Tensor::scalar(1.5)),
            full_geometry: Some(Tensor::scalar(0.75)),
            depth_smoothness: Some(Tensor::scalar(0.2)),
            kl: Some(Tensor::scalar(0.9)),
            mv: Some(Tensor::scalar(0.05)),
        };
        let w = LossWeights {
            band: BandWeights { ll: 0.4, lh: 0.2, hl: 0.2, hh: 0.2 },
            dist: 0.001,
            fg: 0.002,
            ds: 0.003,
            kl: 0.004,
            mv: 0.005,
        };
        let want = 0.5 + 0.125 + 0.001 * 1.5 + 0.002 * 0.75 + 0.003 * 0.2 + 0.004 * 0.9 + 0.05;
        assert!((combined_loss(&full, &w).unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_rejects_non_finite_terms_by_name() {
        let terms = LossTerms {
            mse: Some(Tensor::scalar(0.1)),
            depth_smoothness: Some(Tensor::scalar(f64::NAN)),
            ..Default::default()
        };
        let err = combined_loss(&terms, &LossWeights::default()).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("depth smoothness"), "{msg}");
        assert!(combined_loss(&LossTerms::default(), &LossWeights::default()).is_err());
    }

    #[test]
    fn describe_terms_lists_present_entries() {
        let terms = LossTerms {
            mse: Some(Tensor::scalar(0.5)),
            kl: Some(Tensor::scalar(0.25)),
            ..Default::default()
        };
        let s = describe_terms(&terms);
        assert!(s.contains("mse=") && s.contains("kl="), "{s}");
    }
}
