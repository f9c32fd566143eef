//! Smooth nonlinearities.

use ndarray::ArrayD;

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// Gaussian-error linear unit (tanh form).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn gelu_map(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(gelu)
}

pub fn gelu_grad_map(dy: &ArrayD<f64>, x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = x.mapv(gelu_grad);
    dx *= dy;
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 3.0).abs() < 1e-2); // saturates to identity
        assert!(gelu(-3.0).abs() < 1e-2); // saturates to zero
    }

    #[test]
    fn grad_matches_central_difference() {
        let h = 1e-6;
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
