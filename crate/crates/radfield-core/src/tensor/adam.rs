//! Adam optimizer with bias correction.

use super::Tensor;
use crate::backend::fmath;
use crate::error::CoreError;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Optimizer hyperparameters. The defaults are the standard Adam settings.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Group {
    name: String,
    lr: f64,
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Adam over one or more parameter groups, each with its own learning rate
/// (hash tables and network weights train at different rates).
///
/// Update per parameter element, with `t` the 1-based step counter:
///
/// ```text
/// m ← β1 m + (1−β1) g         m̂ = m / (1 − β1ᵗ)
/// v ← β2 v + (1−β2) g²        v̂ = v / (1 − β2ᵗ)
/// θ ← θ − lr · m̂ / (√v̂ + ε)
/// ```
pub struct Adam {
    hp: AdamParams,
    t: u64,
    groups: Vec<Group>,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Adam {
        Adam {
            hp,
            t: 0,
            groups: Vec::new(),
        }
    }

    /// Register a parameter group. Parameters must be trainable leaves.
    pub fn add_group(&mut self, name: &str, lr: f64, params: Vec<Tensor>) {
        assert!(lr > 0.0, "adam: learning rate must be positive, got {lr}");
        for p in &params {
            assert!(p.requires_grad(), "adam: group '{name}' contains a non-trainable tensor");
        }
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        self.groups.push(Group {
            name: String::from(name),
            lr,
            params,
            m,
            v,
        });
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, group: &str, lr: f64) {
        assert!(lr > 0.0);
        for g in &mut self.groups {
            if g.name == group {
                g.lr = lr;
                return;
            }
        }
        panic!("adam: no group named '{group}'");
    }

    /// Reset the gradient buffers of every registered parameter to zero.
    pub fn zero_grads(&self) {
        for g in &self.groups {
            for p in &g.params {
                p.zero_grad();
            }
        }
    }

    /// Apply one update from the currently accumulated gradients. Parameters
    /// whose gradient buffer was never allocated are skipped. If any gradient
    /// contains a non-finite value the whole step is rejected: an error names
    /// the offending group and no state (moments, counter, parameters) is
    /// modified.
    pub fn step(&mut self) -> Result<(), CoreError> {
        for g in &self.groups {
            for p in &g.params {
                if let Some(grad) = p.grad() {
                    if grad.iter().any(|x| !x.is_finite()) {
                        return Err(CoreError::NonFinite(format!(
                            "gradient in group '{}'; step rejected",
                            g.name
                        )));
                    }
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let b1 = self.hp.beta1;
        let b2 = self.hp.beta2;
        let bc1 = 1.0 - powi(b1, t);
        let bc2 = 1.0 - powi(b2, t);
        for g in &mut self.groups {
            for (i, p) in g.params.iter().enumerate() {
                let Some(grad) = p.grad() else { continue };
                let m = &mut g.m[i];
                let v = &mut g.v[i];
                p.with_data_mut(|theta| {
                    for j in 0..theta.len() {
                        let gj = grad[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        theta[j] -= g.lr * mhat / (fmath::sqrt(vhat) + self.hp.eps);
                    }
                });
            }
        }
        Ok(())
    }
}

fn powi(base: f64, mut n: i32) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    while n > 0 {
        if n & 1 == 1 {
            acc *= b;
        }
        b *= b;
        n >>= 1;
    }
    acc
}
