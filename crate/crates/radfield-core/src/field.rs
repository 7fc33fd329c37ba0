//! The radiance field: dual MLP branches for density and color wrapped by
//! input-level and output-level multi-head attention.
//!
//! Attention tokens are the rows of the batch (one row per ray sample);
//! attention therefore mixes information *across* rays/samples. The public
//! [`mha`] computes full attention over the whole batch and is the reference
//! semantics. [`mha_windowed`] applies the same operator independently to
//! consecutive fixed-size row windows — this is what [`FieldModel::forward`]
//! uses so the quadratic cost stays bounded at training batch sizes — and is
//! implemented as a single fused graph node with a hand-written backward
//! pass (checked against the composed operator and finite differences).

use crate::backend;
use crate::encoding::hybrid_concat;
use crate::error::CoreError;
use crate::rng::ChaCha8Rng;
use crate::rng::RngExt;
use crate::tensor::pool;
use crate::tensor::{Activation, CustomOp, Tensor};
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

/// Shape of one multi-head attention module. `head_dim` is an explicit
/// per-head width; the concatenated head outputs (`heads · head_dim` wide)
/// are projected back to `model_dim` by the shared output matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.heads < 1 || self.model_dim < 1 || self.head_dim < 1 {
            return Err(CoreError::BadParameter(format!(
                "attention needs heads, model_dim, head_dim >= 1, got {} / {} / {}",
                self.heads, self.model_dim, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Learnable projections: per-head W^Q, W^K, W^V (`model_dim × head_dim`)
/// and the shared W^O (`heads·head_dim × model_dim`).
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

fn uniform_param(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / backend::fmath::sqrt(fan_in as f64);
    Tensor::param(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect(),
    )
}

impl AttentionWeights {
    pub fn init(cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        let wq = (0..cfg.heads)
            .map(|_| uniform_param(cfg.model_dim, cfg.head_dim, cfg.model_dim, rng))
            .collect();
        let wk = (0..cfg.heads)
            .map(|_| uniform_param(cfg.model_dim, cfg.head_dim, cfg.model_dim, rng))
            .collect();
        let wv = (0..cfg.heads)
            .map(|_| uniform_param(cfg.model_dim, cfg.head_dim, cfg.model_dim, rng))
            .collect();
        let wo = uniform_param(
            cfg.heads * cfg.head_dim,
            cfg.model_dim,
            cfg.heads * cfg.head_dim,
            rng,
        );
        AttentionWeights { wq, wk, wv, wo }
    }

    fn check(&self, cfg: &AttentionConfig) -> Result<(), CoreError> {
        let per_head = (cfg.model_dim, cfg.head_dim);
        for (label, set) in [("W^Q", &self.wq), ("W^K", &self.wk), ("W^V", &self.wv)] {
            if set.len() != cfg.heads {
                return Err(CoreError::BadDimension(format!(
                    "attention: {} head count {} != configured {}",
                    label,
                    set.len(),
                    cfg.heads
                )));
            }
            for t in set.iter() {
                if t.shape() != per_head {
                    return Err(CoreError::BadDimension(format!(
                        "attention: {} must be {}x{}, got {}x{}",
                        label, per_head.0, per_head.1, t.rows(), t.cols()
                    )));
                }
            }
        }
        if self.wo.shape() != (cfg.heads * cfg.head_dim, cfg.model_dim) {
            return Err(CoreError::BadDimension(format!(
                "attention: W^O must be {}x{}, got {}x{}",
                cfg.heads * cfg.head_dim,
                cfg.model_dim,
                self.wo.rows(),
                self.wo.cols()
            )));
        }
        Ok(())
    }
}

/// Full multi-head self-attention over the batch axis:
/// `head_i = softmax(Q W_i^Q (K W_i^K)ᵀ / √head_dim) · V W_i^V` with
/// Q = K = V = `tokens`, heads concatenated and projected by W^O.
pub fn mha(
    tokens: &Tensor,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
) -> Result<Tensor, CoreError> {
    cfg.validate()?;
    w.check(cfg)?;
    if tokens.cols() != cfg.model_dim {
        return Err(CoreError::BadDimension(format!(
            "mha: tokens are {}x{} but model_dim is {}",
            tokens.rows(),
            tokens.cols(),
            cfg.model_dim
        )));
    }
    let scale = 1.0 / backend::fmath::sqrt(cfg.head_dim as f64);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = tokens.matmul(&w.wq[h]);
        let k = tokens.matmul(&w.wk[h]);
        let v = tokens.matmul(&w.wv[h]);
        let attn = q.matmul(&k.transpose()).mul_scalar(scale).softmax_rows();
        heads.push(attn.matmul(&v));
    }
    let cat = Tensor::concat_cols(&heads);
    Ok(cat.matmul(&w.wo))
}

/// Row-wise max-shifted softmax of an n×n scratch block, matching the
/// tensor engine's softmax exactly (same shift, same [`backend::fexp`]).
fn softmax_rows_inplace(buf: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut buf[r * cols..(r + 1) * cols];
        let mut m = f64::NEG_INFINITY;
        for &x in row.iter() {
            if x > m {
                m = x;
            }
        }
        // Shift + exponentiate in a branch-free pass the compiler can
        // vectorize; the reduction stays serial so the sum order matches the
        // graph-level softmax exactly.
        for x in row.iter_mut() {
            *x = backend::fexp(*x - m);
        }
        let mut sum = 0.0;
        for &x in row.iter() {
            sum += x;
        }
        let inv = 1.0 / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// One fused graph node computing windowed multi-head attention. Parent
/// order: `[tokens, wq_0..wq_H, wk_0.., wv_0.., wo]`. The full backward pass
/// is computed once on the first `backward_into` call and cached per parent.
///
/// Inputs and projection weights are held as cheap tensor handles (shared
/// with the parent list) rather than copies; the per-head intermediates are
/// recycled through the buffer pool when the node drops.
struct WindowedMhaOp {
    heads: usize,
    head_dim: usize,
    model_dim: usize,
    window: usize,
    n: usize,
    tokens: Tensor,        // n × model_dim
    wq: Vec<Tensor>,       // per head, model_dim × head_dim
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Tensor,            // heads·head_dim × model_dim
    q: Vec<Vec<f64>>,      // per head, n × head_dim
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,   // per head, n × window (only the live prefix of
    // each row is ever read back, so tails stay unwritten)
    concat: Vec<f64>,      // n × heads·head_dim
    grads: RefCell<Option<Vec<Vec<f64>>>>,
}

impl Drop for WindowedMhaOp {
    fn drop(&mut self) {
        for b in self
            .q
            .drain(..)
            .chain(self.k.drain(..))
            .chain(self.v.drain(..))
            .chain(self.attn.drain(..))
        {
            pool::give(b);
        }
        pool::give(core::mem::take(&mut self.concat));
        if let Some(gs) = self.grads.get_mut().take() {
            for g in gs {
                pool::give(g);
            }
        }
    }
}

impl WindowedMhaOp {
    fn windows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (n, w) = (self.n, self.window);
        (0..n).step_by(w).map(move |start| (start, w.min(n - start)))
    }

    fn compute_grads(&self, dy: &[f64]) -> Vec<Vec<f64>> {
        let (h_all, hd, d, n) = (self.heads, self.head_dim, self.model_dim, self.n);
        let cat_w = h_all * hd;
        let scale = 1.0 / backend::fmath::sqrt(hd as f64);

        let tokens = self.tokens.data();
        let mut d_tokens = pool::take_uninit(n * d);
        let mut d_wq = vec![vec![0.0; d * hd]; h_all];
        let mut d_wk = vec![vec![0.0; d * hd]; h_all];
        let mut d_wv = vec![vec![0.0; d * hd]; h_all];
        let mut d_wo = vec![0.0; cat_w * d];

        // y = concat · W^O
        backend::gemm_tn(cat_w, n, d, &self.concat, dy, &mut d_wo, false);
        let mut d_cat = pool::take_uninit(n * cat_w);
        backend::gemm_nt(n, d, cat_w, dy, &self.wo.data(), &mut d_cat, false);

        let wmax = self.window;
        let mut d_o = pool::take_uninit(n * hd);
        let mut d_q = pool::take_uninit(n * hd);
        let mut d_k = pool::take_uninit(n * hd);
        let mut d_v = pool::take_uninit(n * hd);
        let mut a_blk = vec![0.0; wmax * wmax];
        let mut da_blk = vec![0.0; wmax * wmax];
        let mut first_tok = true;
        for h in 0..h_all {
            for r in 0..n {
                d_o[r * hd..(r + 1) * hd]
                    .copy_from_slice(&d_cat[r * cat_w + h * hd..r * cat_w + (h + 1) * hd]);
            }
            let (q, k, v, attn) = (&self.q[h], &self.k[h], &self.v[h], &self.attn[h]);
            // The windows partition the rows, so each d_q/d_k/d_v range is
            // written by exactly one window and the gemms can assign.
            for (start, len) in self.windows() {
                let rows = start * hd..(start + len) * hd;
                let (q_w, k_w, v_w) = (&q[rows.clone()], &k[rows.clone()], &v[rows.clone()]);
                let do_w = &d_o[rows.clone()];
                // unpad the saved softmax block
                for r in 0..len {
                    a_blk[r * len..(r + 1) * len]
                        .copy_from_slice(&attn[(start + r) * wmax..(start + r) * wmax + len]);
                }
                let a = &a_blk[..len * len];
                // d(attn) = d(o) vᵀ ; dv = attnᵀ d(o)
                backend::gemm_nt(len, hd, len, do_w, v_w, &mut da_blk[..len * len], false);
                backend::gemm_tn(len, len, hd, a, do_w, &mut d_v[rows.clone()], false);
                // softmax backward, then the 1/√head_dim chain factor
                for r in 0..len {
                    let (ar, dar) = (&a[r * len..(r + 1) * len], &mut da_blk[r * len..(r + 1) * len]);
                    let dot: f64 = ar.iter().zip(dar.iter()).map(|(x, y)| x * y).sum();
                    for (ds, &av) in dar.iter_mut().zip(ar) {
                        *ds = av * (*ds - dot) * scale;
                    }
                }
                let ds = &da_blk[..len * len];
                // s = scale · q kᵀ  ⇒  dq = ds k, dk = dsᵀ q
                backend::gemm_nn(len, len, hd, ds, k_w, &mut d_q[rows.clone()], false);
                backend::gemm_tn(len, len, hd, ds, q_w, &mut d_k[rows.clone()], false);
            }
            // back through the projections
            backend::gemm_tn(d, n, hd, &tokens, &d_q, &mut d_wq[h], false);
            backend::gemm_tn(d, n, hd, &tokens, &d_k, &mut d_wk[h], false);
            backend::gemm_tn(d, n, hd, &tokens, &d_v, &mut d_wv[h], false);
            backend::gemm_nt(n, hd, d, &d_q, &self.wq[h].data(), &mut d_tokens, !first_tok);
            first_tok = false;
            backend::gemm_nt(n, hd, d, &d_k, &self.wk[h].data(), &mut d_tokens, true);
            backend::gemm_nt(n, hd, d, &d_v, &self.wv[h].data(), &mut d_tokens, true);
        }
        pool::give(d_cat);
        pool::give(d_o);
        pool::give(d_q);
        pool::give(d_k);
        pool::give(d_v);

        let mut out = Vec::with_capacity(2 + 3 * h_all);
        out.push(d_tokens);
        out.extend(d_wq);
        out.extend(d_wk);
        out.extend(d_wv);
        out.push(d_wo);
        out
    }
}

impl CustomOp for WindowedMhaOp {
    fn name(&self) -> &'static str {
        "mha_windowed"
    }

    fn backward_into(&self, grad_out: &[f64], idx: usize, sink: &mut [f64]) {
        let mut cache = self.grads.borrow_mut();
        let grads = cache.get_or_insert_with(|| self.compute_grads(grad_out));
        for (s, g) in sink.iter_mut().zip(&grads[idx]) {
            *s += g;
        }
    }

    fn backward_assign(&self, grad_out: &[f64], idx: usize, sink: &mut [f64]) -> bool {
        let mut cache = self.grads.borrow_mut();
        let grads = cache.get_or_insert_with(|| self.compute_grads(grad_out));
        sink.copy_from_slice(&grads[idx]);
        true
    }
}

/// Multi-head attention applied independently to consecutive `window`-row
/// blocks of the batch (the final block may be shorter). `window >= rows`
/// reproduces [`mha`] exactly. One fused graph node.
pub fn mha_windowed(
    tokens: &Tensor,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    window: usize,
) -> Result<Tensor, CoreError> {
    cfg.validate()?;
    w.check(cfg)?;
    if tokens.cols() != cfg.model_dim {
        return Err(CoreError::BadDimension(format!(
            "mha_windowed: tokens are {}x{} but model_dim is {}",
            tokens.rows(),
            tokens.cols(),
            cfg.model_dim
        )));
    }
    if window == 0 {
        return Err(CoreError::BadParameter("attention window must be >= 1".into()));
    }
    let (n, d, hd, h_all) = (tokens.rows(), cfg.model_dim, cfg.head_dim, cfg.heads);
    let window = window.min(n.max(1));
    let cat_w = h_all * hd;
    let scale = 1.0 / backend::fmath::sqrt(hd as f64);

    let tok = tokens.data();
    let mut q: Vec<Vec<f64>> = (0..h_all).map(|_| pool::take_uninit(n * hd)).collect();
    let mut k: Vec<Vec<f64>> = (0..h_all).map(|_| pool::take_uninit(n * hd)).collect();
    let mut v: Vec<Vec<f64>> = (0..h_all).map(|_| pool::take_uninit(n * hd)).collect();
    // Only the first `len` columns of each attention row are ever read back
    // in the backward pass, so the buffers can stay unzeroed.
    let mut attn: Vec<Vec<f64>> = (0..h_all).map(|_| pool::take_uninit(n * window)).collect();
    let mut concat = pool::take_uninit(n * cat_w);
    let mut blk = vec![0.0; window * window];
    let mut o_blk = vec![0.0; window * hd];

    for h in 0..h_all {
        backend::gemm_nn(n, d, hd, &tok, &w.wq[h].data(), &mut q[h], false);
        backend::gemm_nn(n, d, hd, &tok, &w.wk[h].data(), &mut k[h], false);
        backend::gemm_nn(n, d, hd, &tok, &w.wv[h].data(), &mut v[h], false);
        let mut start = 0;
        while start < n {
            let len = window.min(n - start);
            let rows = start * hd..(start + len) * hd;
            let s = &mut blk[..len * len];
            backend::gemm_nt(len, hd, len, &q[h][rows.clone()], &k[h][rows.clone()], s, false);
            s.iter_mut().for_each(|x| *x *= scale);
            softmax_rows_inplace(s, len, len);
            for r in 0..len {
                attn[h][(start + r) * window..(start + r) * window + len]
                    .copy_from_slice(&s[r * len..(r + 1) * len]);
            }
            backend::gemm_nn(len, len, hd, s, &v[h][rows.clone()], &mut o_blk[..len * hd], false);
            for r in 0..len {
                concat[(start + r) * cat_w + h * hd..(start + r) * cat_w + (h + 1) * hd]
                    .copy_from_slice(&o_blk[r * hd..(r + 1) * hd]);
            }
            start += len;
        }
    }
    let mut y = pool::take_uninit(n * d);
    backend::gemm_nn(n, cat_w, d, &concat, &w.wo.data(), &mut y, false);
    drop(tok);

    let op = WindowedMhaOp {
        heads: h_all,
        head_dim: hd,
        model_dim: d,
        window,
        n,
        tokens: tokens.clone(),
        wq: w.wq.clone(),
        wk: w.wk.clone(),
        wv: w.wv.clone(),
        wo: w.wo.clone(),
        q,
        k,
        v,
        attn,
        concat,
        grads: RefCell::new(None),
    };
    let mut parents = Vec::with_capacity(2 + 3 * h_all);
    parents.push(tokens.clone());
    parents.extend(w.wq.iter().cloned());
    parents.extend(w.wk.iter().cloned());
    parents.extend(w.wv.iter().cloned());
    parents.push(w.wo.clone());
    Ok(Tensor::custom(&parents, Rc::new(op), n, d, y))
}

/// One fully connected layer, `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor, // in × out
    pub b: Tensor, // 1 × out
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: uniform_param(inputs, outputs, inputs, rng),
            b: uniform_param(1, outputs, inputs, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.affine(&self.w, &self.b, Activation::Identity)
    }

    pub fn forward_relu(&self, x: &Tensor) -> Tensor {
        x.affine(&self.w, &self.b, Activation::Relu)
    }
}

/// Everything the field needs besides the encodings: branch widths, head
/// shapes, and the attention window. Defaults are the desk-scale preset
/// (hash width 32, SH width 64 → color input 95).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub n_x: usize,
    pub n_d: usize,
    pub hidden: usize,
    pub input_attention: AttentionConfig,
    pub output_attention: AttentionConfig,
    pub window: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            n_x: 32,
            n_d: 64,
            hidden: 64,
            input_attention: AttentionConfig { heads: 1, model_dim: 95, head_dim: 8 },
            output_attention: AttentionConfig { heads: 1, model_dim: 4, head_dim: 4 },
            window: 32,
        }
    }
}

impl FieldConfig {
    /// Width of the color-branch input, N_d + N_x − 1.
    pub fn color_in(&self) -> usize {
        self.n_d + self.n_x - 1
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        self.input_attention.validate()?;
        self.output_attention.validate()?;
        if self.n_x < 2 {
            return Err(CoreError::BadParameter(
                "position encoding must have >= 2 features".into(),
            ));
        }
        if self.input_attention.model_dim != self.color_in() {
            return Err(CoreError::BadDimension(format!(
                "input attention model_dim {} != N_d + N_x - 1 = {}",
                self.input_attention.model_dim,
                self.color_in()
            )));
        }
        if self.output_attention.model_dim != 4 {
            return Err(CoreError::BadDimension(format!(
                "output attention runs on 4-dim [σ, c] tokens, model_dim is {}",
                self.output_attention.model_dim
            )));
        }
        if self.window == 0 {
            return Err(CoreError::BadParameter("attention window must be >= 1".into()));
        }
        Ok(())
    }
}

/// The plenoptic function f: density branch (2 layers, input width 1),
/// color branch (3 layers, input width N_d + N_x − 1), and the two
/// attention modules.
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub cfg: FieldConfig,
    pub density: [Linear; 2],
    pub color: [Linear; 3],
    pub attn_in: AttentionWeights,
    pub attn_out: AttentionWeights,
}

impl FieldModel {
    pub fn new(cfg: FieldConfig, rng: &mut ChaCha8Rng) -> Result<Self, CoreError> {
        cfg.validate()?;
        let h = cfg.hidden;
        let density = [Linear::new(1, h, rng), Linear::new(h, 1, rng)];
        let color = [
            Linear::new(cfg.color_in(), h, rng),
            Linear::new(h, h, rng),
            Linear::new(h, 3, rng),
        ];
        let attn_in = AttentionWeights::init(&cfg.input_attention, rng);
        let attn_out = AttentionWeights::init(&cfg.output_attention, rng);
        Ok(FieldModel { cfg, density, color, attn_in, attn_out })
    }

    /// Stable parameter naming for optimizers and checkpoints.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.density.iter().enumerate() {
            out.push((format!("density.{i}.w"), l.w.clone()));
            out.push((format!("density.{i}.b"), l.b.clone()));
        }
        for (i, l) in self.color.iter().enumerate() {
            out.push((format!("color.{i}.w"), l.w.clone()));
            out.push((format!("color.{i}.b"), l.b.clone()));
        }
        for (prefix, w) in [("attn_in", &self.attn_in), ("attn_out", &self.attn_out)] {
            for h in 0..w.wq.len() {
                out.push((format!("{prefix}.h{h}.wq"), w.wq[h].clone()));
                out.push((format!("{prefix}.h{h}.wk"), w.wk[h].clone()));
                out.push((format!("{prefix}.h{h}.wv"), w.wv[h].clone()));
            }
            out.push((format!("{prefix}.wo"), w.wo.clone()));
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Branch MLPs: σ = softplus(density(γ'x)), c = sigmoid(color(γ''dx)).
    /// `γ''dx` is the attended hybrid encoding.
    pub fn field_forward(
        &self,
        gamma_x_prime: &Tensor,
        gamma_dx_attended: &Tensor,
    ) -> Result<(Tensor, Tensor), CoreError> {
        if gamma_x_prime.cols() != 1 {
            return Err(CoreError::BadDimension(format!(
                "density branch input must be N x 1, got {}x{}",
                gamma_x_prime.rows(),
                gamma_x_prime.cols()
            )));
        }
        if gamma_dx_attended.cols() != self.cfg.color_in() {
            return Err(CoreError::BadDimension(format!(
                "color branch input must be N x {}, got {}x{}",
                self.cfg.color_in(),
                gamma_dx_attended.rows(),
                gamma_dx_attended.cols()
            )));
        }
        let mut x = gamma_x_prime.clone();
        for (i, layer) in self.density.iter().enumerate() {
            x = if i + 1 < self.density.len() {
                layer.forward_relu(&x)
            } else {
                layer.forward(&x)
            };
            ensure_finite(&x, "density", i)?;
        }
        let sigma = x.softplus();
        let mut y = gamma_dx_attended.clone();
        for (i, layer) in self.color.iter().enumerate() {
            y = if i + 1 < self.color.len() {
                layer.forward_relu(&y)
            } else {
                layer.forward(&y)
            };
            ensure_finite(&y, "color", i)?;
        }
        let c = y.sigmoid();
        Ok((sigma, c))
    }

    /// Output-level attention: ζ = [σ, c] (batch × 4 tokens), ζ' = mha(ζ),
    /// then σ' = softplus(ζ'₀), c' = sigmoid(ζ'₁..₃).
    pub fn output_attention(&self, sigma: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor), CoreError> {
        if sigma.cols() != 1 || c.cols() != 3 || sigma.rows() != c.rows() {
            return Err(CoreError::BadDimension(format!(
                "output attention expects σ Nx1 and c Nx3, got {}x{} and {}x{}",
                sigma.rows(),
                sigma.cols(),
                c.rows(),
                c.cols()
            )));
        }
        let zeta = Tensor::concat_cols(&[sigma.clone(), c.clone()]);
        let zeta_p = mha_windowed(&zeta, &self.cfg.output_attention, &self.attn_out, self.cfg.window)?;
        let sigma_p = zeta_p.slice_cols(0, 1).softplus();
        let c_p = zeta_p.slice_cols(1, 4).sigmoid();
        Ok((sigma_p, c_p))
    }

    /// Full pipeline from the raw encodings to the final predictions:
    /// hybrid arrangement → input attention → branch MLPs → output attention.
    pub fn forward(&self, gamma_x: &Tensor, gamma_d: &Tensor) -> Result<(Tensor, Tensor), CoreError> {
        let (gx_p, gdx_p) = hybrid_concat(gamma_x, gamma_d)?;
        let gdx_pp = mha_windowed(&gdx_p, &self.cfg.input_attention, &self.attn_in, self.cfg.window)?;
        let (sigma, c) = self.field_forward(&gx_p, &gdx_pp)?;
        self.output_attention(&sigma, &c)
    }
}

fn ensure_finite(t: &Tensor, branch: &str, layer: usize) -> Result<(), CoreError> {
    // `x * 0.0` is NaN for NaN and ±inf and ±0.0 otherwise, so the running
    // sum is exactly 0.0 iff every element is finite. Unlike an `is_finite`
    // scan this has no per-element branch and vectorizes.
    let data = t.data();
    let mut acc = [0.0f64; 8];
    let mut chunks = data.chunks_exact(8);
    for c in chunks.by_ref() {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x * 0.0;
        }
    }
    let mut total: f64 = acc.iter().sum();
    for x in chunks.remainder() {
        total += x * 0.0;
    }
    if total == 0.0 {
        Ok(())
    } else {
        Err(CoreError::NonFinite(format!(
            "{branch} branch layer {layer} produced a non-finite activation"
        )))
    }
}
