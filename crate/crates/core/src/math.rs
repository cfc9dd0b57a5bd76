//! Small rotation helpers shared by the head model, anchoring and fitter.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Cross-product matrix `[k]x`, so that `skew(k) * v == k.cross(&v)`.
pub fn skew(k: &Vec3) -> Mat3 {
    Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0)
}

/// Axial vector of the antisymmetric part of `h`, scaled so that
/// `<h, skew(k)> == k.dot(&axial(h))` for every `k`.
pub fn axial(h: &Mat3) -> Vec3 {
    Vec3::new(
        h[(2, 1)] - h[(1, 2)],
        h[(0, 2)] - h[(2, 0)],
        h[(1, 0)] - h[(0, 1)],
    )
}

/// Rodrigues exponential map from an axis-angle vector to a rotation matrix.
pub fn exp_map(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3): `d exp(w) / d w_c * exp(w)^T == skew(J_l(w) e_c)`.
pub fn left_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + k * a + k * k * b
}

/// Re-orthonormalizes a nearly-orthonormal matrix column-wise (Gram-Schmidt),
/// keeping the determinant positive.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let c0 = m.column(0).normalize();
    let c1 = m.column(1) - c0 * c0.dot(&m.column(1));
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Mat3::from_columns(&[c0, c1, c2])
}

/// Numerically stable softmax of three logits.
pub fn softmax3(logits: &[f64; 3]) -> [f64; 3] {
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = [
        (logits[0] - m).exp(),
        (logits[1] - m).exp(),
        (logits[2] - m).exp(),
    ];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

pub fn to_vec3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn to_arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Frobenius norm of `RᵀR - I`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_map_quarter_turn_about_z() {
        let r = exp_map(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let x = r * Vec3::x();
        assert!((x - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let w = Vec3::new(0.3, -0.7, 0.4);
        let r = exp_map(&w);
        let jl = left_jacobian(&w);
        let h = 1e-6;
        for c in 0..3 {
            let mut e = Vec3::zeros();
            e[c] = h;
            let d = (exp_map(&(w + e)) - exp_map(&(w - e))) / (2.0 * h);
            let k = d * r.transpose();
            let expected = jl.column(c).into_owned();
            let got = Vec3::new(k[(2, 1)], k[(0, 2)], k[(1, 0)]);
            assert!((got - expected).norm() < 1e-8, "{c}: {got} vs {expected}");
        }
    }

    #[test]
    fn axial_pairs_with_skew() {
        let h = Mat3::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.95);
        let k = Vec3::new(-0.3, 0.2, 1.1);
        let inner = h.component_mul(&skew(&k)).sum();
        assert!((inner - k.dot(&axial(&h))).abs() < 1e-14);
    }
}
