//! The polarization function `g_β(x) = x² / (x² + β)` used to gate
//! interactions. Its fixed points under gradient pressure are 0 and 1, which
//! is what makes the learned gates prunable.

/// `g_β(x)`, in `[0, 1)` for `β > 0`.
#[inline]
pub fn polarize(x: f64, beta: f64) -> f64 {
    let x2 = x * x;
    x2 / (x2 + beta)
}

/// `g′_β(x) = 2xβ / (x² + β)²`.
#[inline]
pub fn polarize_grad(x: f64, beta: f64) -> f64 {
    // A fused x² + β keeps the denominator correctly rounded.
    let d = x.mul_add(x, beta);
    2.0 * x * beta / (d * d)
}

/// Smallest non-negative raw value whose gate reaches `target` (< 1).
pub fn raw_for_gate(target: f64, beta: f64) -> f64 {
    (beta * target / (1.0 - target)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        assert_eq!(polarize(0.0, 0.01), 0.0);
        assert_eq!(polarize(0.1, 0.01), 0.5);
        assert!((polarize(1.0, 0.01) - 1.0 / 1.01).abs() < 1e-15);
        assert_eq!(polarize_grad(0.0, 0.01), 0.0);
        assert_eq!(polarize_grad(0.1, 0.01), 5.0);
        assert!(polarize_grad(-0.3, 0.01) < 0.0 && polarize_grad(0.3, 0.01) > 0.0);
    }

    #[test]
    fn raw_for_gate_inverts_polarize() {
        for target in [0.1, 0.5, 0.99] {
            let x = raw_for_gate(target, 0.01);
            assert!((polarize(x, 0.01) - target).abs() < 1e-12);
        }
    }
}
