//! Reconstruction loss and the weight-update compressibility objective.
//!
//! The compressibility objective of an update `d` is
//!
//! ```text
//! comp(d, a) = |d|_1 / |d|_2  +  a * |d|_2^2 / |d|_1
//! ```
//!
//! The first term is the L1/L2 sparsity ratio (1 for a one-hot vector,
//! `sqrt(n)` for `n` equal magnitudes); the second pulls the surviving
//! entries towards small magnitudes. `a` and the mixing weight `gamma` are
//! recomputed from the current values and treated as constants when
//! differentiating.

use crate::error::Result;
use crate::tensor::{ops, Real, Tensor};

/// Mean squared error over all elements.
pub fn mse_loss<T: Real>(reference: &Tensor<T>, reconstructed: &Tensor<T>) -> Result<T> {
    ops::mse(reference, reconstructed)
}

/// `(L1, L2)` accumulated in 64-bit.
pub fn norms<T: Real>(d: &[T]) -> (f64, f64) {
    let (mut l1, mut sq) = (0.0f64, 0.0f64);
    for &v in d {
        let v = v.to_f64();
        l1 += v.abs();
        sq += v * v;
    }
    (l1, sq.sqrt())
}

/// Compressibility objective; zero for an all-zero update.
pub fn comp_loss<T: Real>(d: &[T], alpha: f64) -> f64 {
    let (l1, l2) = norms(d);
    if l1 == 0.0 {
        return 0.0;
    }
    l1 / l2 + alpha * l2 * l2 / l1
}

/// Gradient of [`comp_loss`] with `alpha` held constant:
/// `sign(d)/L2 - L1 d/L2^3 + alpha (2 d/L1 - L2^2 sign(d)/L1^2)`.
pub fn comp_loss_grad<T: Real>(d: &[T], alpha: f64) -> Vec<T> {
    let (l1, l2) = norms(d);
    if l1 == 0.0 {
        return vec![T::ZERO; d.len()];
    }
    let l2_3 = l2 * l2 * l2;
    let l1_2 = l1 * l1;
    d.iter()
        .map(|&v| {
            let v = v.to_f64();
            let s = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            let ratio = s / l2 - l1 * v / l2_3;
            let magnitude = 2.0 * v / l1 - l2 * l2 * s / l1_2;
            T::from_f64(ratio + alpha * magnitude)
        })
        .collect()
}

/// Weight `alpha` that makes the magnitude term exactly `ratio` times the
/// sparsity term: `alpha = ratio * L1^2 / L2^3`. Zero for an all-zero update.
pub fn alpha_rule<T: Real>(d: &[T], ratio: f64) -> f64 {
    let (l1, l2) = norms(d);
    if l1 == 0.0 {
        return 0.0;
    }
    ratio * l1 * l1 / (l2 * l2 * l2)
}

/// `gamma = m * L_mse / L_comp`, so the weighted objective equals `m` times
/// the reconstruction loss at the evaluation point. Zero when `L_comp` is.
pub fn gamma_rule(l_mse: f64, l_comp: f64, m: f64) -> f64 {
    if l_comp == 0.0 {
        0.0
    } else {
        m * l_mse / l_comp
    }
}

pub fn total_loss(l_mse: f64, l_comp: f64, gamma: f64) -> f64 {
    l_mse + gamma * l_comp
}
