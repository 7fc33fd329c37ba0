//! Central finite-difference verification of reverse-mode gradients.
//!
//! Used by the unit tests of every module and by the acceptance suite; it is
//! public API so downstream crates can gradient-check their own compositions.

use super::Tensor;
use crate::rng::RngExt;
use alloc::vec::Vec;
use rand_core::RngCore;

/// Compare analytic gradients of `loss_fn` against central finite
/// differences and return the worst relative error observed.
///
/// `loss_fn` must rebuild the graph from the given leaf `params` on every
/// call and return a scalar. For each parameter, `samples_per_param` random
/// elements are probed (all of them if `None`). The relative error of one
/// element is `|g − fd| / max(1, |g|, |fd|)`, so tiny absolute noise on tiny
/// gradients does not dominate.
pub fn max_rel_err(
    mut loss_fn: impl FnMut() -> Tensor,
    params: &[Tensor],
    samples_per_param: Option<usize>,
    step: f64,
    rng: &mut dyn RngCore,
) -> f64 {
    assert!(step > 0.0);
    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().expect("gradcheck: parameter gradient missing"))
        .collect();

    let mut worst = 0.0f64;
    for (p, grad) in params.iter().zip(&grads) {
        let n = p.len();
        let indices: Vec<usize> = match samples_per_param {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let x0 = p.data()[idx];
            p.with_data_mut(|d| d[idx] = x0 + step);
            let up = loss_fn().item();
            p.with_data_mut(|d| d[idx] = x0 - step);
            let down = loss_fn().item();
            p.with_data_mut(|d| d[idx] = x0);
            let fd = (up - down) / (2.0 * step);
            let g = grad[idx];
            let rel = (g - fd).abs() / (g.abs().max(fd.abs()).max(1.0));
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
