//! Spherical linear interpolation between latents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Angles below this are treated as parallel.
const PARALLEL_EPS: f64 = 1e-6;

/// Angle between two latents, `arccos(a.b / (|a||b|))`.
pub fn latent_angle<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    let (na, nb) = (a.norm(), b.norm());
    if na == S::zero() || nb == S::zero() {
        return Err(Error::Degenerate("slerp endpoint has zero norm".into()));
    }
    let cos = a.dot(b)? / (na * nb);
    Ok(cos.max(-S::one()).min(S::one()).acos())
}

/// `sin((1-alpha) theta)/sin(theta) a + sin(alpha theta)/sin(theta) b`.
///
/// Falls back to linear interpolation when the inputs are nearly parallel
/// and rejects nearly antiparallel ones, where the great circle is not
/// unique.
pub fn slerp<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, alpha: S) -> Result<Tensor<S>> {
    if !(alpha >= S::zero() && alpha <= S::one()) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let theta = latent_angle(a, b)?;
    let eps = S::lit(PARALLEL_EPS);
    if theta < eps {
        return a.axpby(S::one() - alpha, b, alpha);
    }
    if S::PI() - theta < eps {
        return Err(Error::Degenerate("slerp endpoints are antiparallel".into()));
    }
    let s = theta.sin();
    let wa = ((S::one() - alpha) * theta).sin() / s;
    let wb = (alpha * theta).sin() / s;
    a.axpby(wa, b, wb)
}

/// `count` evenly spaced interpolation weights covering `[0, 1]`.
pub fn interpolation_weights(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_are_exact() {
        let a = Tensor::from_vec(vec![0.3, -1.2, 0.5]);
        let b = Tensor::from_vec(vec![1.0, 0.4, -0.9]);
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(slerp(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn orthonormal_midpoint() {
        let a = Tensor::from_vec(vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![0.0, 1.0]);
        let m = slerp(&a, &b, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.data()[0] - h).abs() < 1e-15 && (m.data()[1] - h).abs() < 1e-15);
        assert!((m.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parallel_falls_back_to_lerp_and_antiparallel_rejected() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = a.scale(2.0);
        let m = slerp(&a, &b, 0.5).unwrap();
        assert_eq!(m, a.scale(1.5));
        assert!(matches!(slerp(&a, &a.scale(-1.0), 0.5), Err(Error::Degenerate(_))));
        assert!(slerp(&a, &Tensor::zeros(vec![2]), 0.5).is_err());
        assert!(slerp(&a, &b, 1.5).is_err());
    }

    #[test]
    fn eight_weights_span_unit_interval() {
        let w = interpolation_weights(8);
        assert_eq!(w.len(), 8);
        assert_eq!((w[0], w[7]), (0.0, 1.0));
    }

    proptest! {
        #[test]
        fn preserves_norm_between_equal_radius_latents(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
            r in 0.1f64..10.0,
            alpha in 0.0f64..=1.0,
        ) {
            let a = Tensor::from_vec(a);
            let b = Tensor::from_vec(b);
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let a = a.scale(r / a.norm());
            let b = b.scale(r / b.norm());
            let theta = latent_angle(&a, &b).unwrap();
            prop_assume!(theta > 1e-3 && std::f64::consts::PI - theta > 1e-3);
            let m = slerp(&a, &b, alpha).unwrap();
            prop_assert!((m.norm() - r).abs() <= 1e-9 * r.max(1.0));
        }
    }
}
