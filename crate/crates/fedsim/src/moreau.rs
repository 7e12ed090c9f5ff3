//! Pinball loss and its Moreau-Yosida envelope.
//!
//! With `S(q) = (1-alpha)(v-q)_+ + alpha (q-v)_+`, minimizing `E S(q)` over
//! `q` yields the `(1-alpha)`-quantile of `v`. The envelope with parameter
//! `gamma` replaces the kink by a parabola of curvature `1/gamma` on
//! `[v - gamma(1-alpha), v + gamma alpha]`.

/// Unsmoothed pinball loss.
pub fn pinball_loss(q: f64, v: f64, alpha: f64) -> f64 {
    if q < v {
        (1.0 - alpha) * (v - q)
    } else {
        alpha * (q - v)
    }
}

/// Moreau envelope of [`pinball_loss`]:
///
/// * `(1-alpha)(v-q) - gamma(1-alpha)^2/2` left of the smoothing band,
/// * `(q-v)^2 / (2 gamma)` inside it,
/// * `alpha(q-v) - gamma alpha^2/2` right of it.
pub fn moreau_pinball_loss(q: f64, v: f64, alpha: f64, gamma: f64) -> f64 {
    let lo = v - gamma * (1.0 - alpha);
    let hi = v + gamma * alpha;
    if q < lo {
        (1.0 - alpha) * (v - q) - 0.5 * gamma * (1.0 - alpha).powi(2)
    } else if q > hi {
        alpha * (q - v) - 0.5 * gamma * alpha * alpha
    } else {
        (q - v).powi(2) / (2.0 * gamma)
    }
}

/// Derivative of [`moreau_pinball_loss`] in `q`.
///
/// Both band edges belong to the linear middle branch, where the formula
/// agrees with the constant outer branches, so the gradient is continuous.
pub fn moreau_pinball_grad(q: f64, v: f64, alpha: f64, gamma: f64) -> f64 {
    debug_assert!(gamma > 0.0);
    let lo = v - gamma * (1.0 - alpha);
    let hi = v + gamma * alpha;
    if q < lo {
        -(1.0 - alpha)
    } else if q > hi {
        alpha
    } else {
        // clamp absorbs rounding in the band edges
        ((q - v) / gamma).clamp(-(1.0 - alpha), alpha)
    }
}
