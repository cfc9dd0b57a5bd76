//! Projection of 3D Gaussians to screen-space splats and SH colour
//! evaluation, with their backward passes.

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use super::camera::{Camera, Projection};
use crate::math::{Mat3, Vec3};

/// Screen-space regulariser added to every projected covariance (px²).
pub const COV2D_BLUR: f64 = 0.3;
/// Gaussians with camera-space depth at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Projected geometry of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGeometry {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// Intermediates of [`project`] needed by [`project_backward`].
#[derive(Debug, Clone, Copy)]
pub struct ProjectCache {
    t: Vec3,
    jac: Matrix2x3<f64>,
    sigma_cam: Mat3,
}

fn jacobian(camera: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    match camera.projection {
        Projection::Perspective => {
            let iz = 1.0 / t.z;
            Matrix2x3::new(
                camera.fx * iz,
                0.0,
                -camera.fx * t.x * iz * iz,
                0.0,
                camera.fy * iz,
                -camera.fy * t.y * iz * iz,
            )
        }
        Projection::Orthographic => Matrix2x3::new(camera.fx, 0.0, 0.0, 0.0, camera.fy, 0.0),
    }
}

/// Projects a Gaussian with world position `u`, rotation `r` and scale `s`.
/// Returns `None` when it lies in front of the near plane (culled).
pub fn project(u: &Vec3, r: &Mat3, s: &Vec3, camera: &Camera) -> Option<(SplatGeometry, ProjectCache)> {
    let t = camera.rot * u + camera.trans;
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let mean = match camera.projection {
        Projection::Perspective => Vector2::new(camera.fx * t.x / t.z + camera.cx, camera.fy * t.y / t.z + camera.cy),
        Projection::Orthographic => Vector2::new(camera.fx * t.x + camera.cx, camera.fy * t.y + camera.cy),
    };
    let d = Mat3::from_diagonal(&s.component_mul(s));
    let sigma = r * d * r.transpose();
    let sigma_cam = camera.rot * sigma * camera.rot.transpose();
    let jac = jacobian(camera, &t);
    let cov = jac * sigma_cam * jac.transpose() + Matrix2::identity() * COV2D_BLUR;
    Some((
        SplatGeometry { mean, cov, depth: t.z },
        ProjectCache {
            t,
            jac,
            sigma_cam,
        },
    ))
}

/// Gradients of a projection with respect to the 3D Gaussian.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectGrads {
    pub u: Vec3,
    pub r: Mat3,
    pub s: Vec3,
}

/// Back-propagates gradients on the splat mean and (full, symmetric)
/// covariance matrix to the Gaussian's position, rotation and scale.
pub fn project_backward(
    r: &Mat3,
    s: &Vec3,
    camera: &Camera,
    cache: &ProjectCache,
    g_mean: &Vector2<f64>,
    g_cov: &Matrix2<f64>,
) -> ProjectGrads {
    let t = cache.t;
    let mut g_t = Vec3::zeros();
    let (fx, fy) = (camera.fx, camera.fy);
    match camera.projection {
        Projection::Perspective => {
            let iz = 1.0 / t.z;
            g_t.x += g_mean.x * fx * iz;
            g_t.y += g_mean.y * fy * iz;
            g_t.z -= (g_mean.x * fx * t.x + g_mean.y * fy * t.y) * iz * iz;
            // cov = J Σc Jᵀ: dL/dJ = (G + Gᵀ) J Σc
            let g_j = (g_cov + g_cov.transpose()) * cache.jac * cache.sigma_cam;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            g_t.x += g_j[(0, 2)] * (-fx * iz2);
            g_t.y += g_j[(1, 2)] * (-fy * iz2);
            g_t.z += g_j[(0, 0)] * (-fx * iz2)
                + g_j[(1, 1)] * (-fy * iz2)
                + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
                + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
        }
        Projection::Orthographic => {
            g_t.x += g_mean.x * fx;
            g_t.y += g_mean.y * fy;
        }
    }
    let g_sigma_cam = cache.jac.transpose() * g_cov * cache.jac;
    let g_sigma = camera.rot.transpose() * g_sigma_cam * camera.rot;
    let g_sym = g_sigma + g_sigma.transpose();
    let d = Mat3::from_diagonal(&s.component_mul(s));
    let g_r = g_sym * r * d;
    let rtgr = r.transpose() * g_sigma * r;
    let g_s = Vec3::new(2.0 * s.x * rtgr[(0, 0)], 2.0 * s.y * rtgr[(1, 1)], 2.0 * s.z * rtgr[(2, 2)]);
    ProjectGrads {
        u: camera.rot.transpose() * g_t,
        r: g_r,
        s: g_s,
    }
}

/// RGB colour of a Gaussian from its SH coefficients (degree 0 or 1),
/// clamped to `[0, 1]`. `kappa_rest` is empty for degree 0.
pub fn sh_color(kappa0: &Vec3, kappa_rest: &[Vec3], u: &Vec3, cam_center: &Vec3) -> Vec3 {
    let mut c = kappa0 * SH_C0 + Vec3::new(0.5, 0.5, 0.5);
    if kappa_rest.len() >= 3 {
        let dir = (u - cam_center).normalize();
        c += -kappa_rest[0] * (SH_C1 * dir.y) + kappa_rest[1] * (SH_C1 * dir.z) - kappa_rest[2] * (SH_C1 * dir.x);
    }
    c.map(|x| x.clamp(0.0, 1.0))
}

/// Gradients of [`sh_color`].
#[derive(Debug, Clone, Default)]
pub struct ShGrads {
    pub kappa0: Vec3,
    pub kappa_rest: Vec<Vec3>,
    pub u: Vec3,
}

pub fn sh_color_backward(kappa0: &Vec3, kappa_rest: &[Vec3], u: &Vec3, cam_center: &Vec3, g_c: &Vec3) -> ShGrads {
    let mut raw = kappa0 * SH_C0 + Vec3::new(0.5, 0.5, 0.5);
    let mut dir = Vec3::zeros();
    let diff = u - cam_center;
    if kappa_rest.len() >= 3 {
        dir = diff.normalize();
        raw += -kappa_rest[0] * (SH_C1 * dir.y) + kappa_rest[1] * (SH_C1 * dir.z) - kappa_rest[2] * (SH_C1 * dir.x);
    }
    let g = Vec3::from_fn(|i, _| if raw[i] > 0.0 && raw[i] < 1.0 { g_c[i] } else { 0.0 });
    let mut out = ShGrads {
        kappa0: g * SH_C0,
        kappa_rest: vec![Vec3::zeros(); kappa_rest.len()],
        u: Vec3::zeros(),
    };
    if kappa_rest.len() >= 3 {
        out.kappa_rest[0] = g * (-SH_C1 * dir.y);
        out.kappa_rest[1] = g * (SH_C1 * dir.z);
        out.kappa_rest[2] = g * (-SH_C1 * dir.x);
        let g_dir = Vec3::new(
            -SH_C1 * kappa_rest[2].dot(&g),
            -SH_C1 * kappa_rest[0].dot(&g),
            SH_C1 * kappa_rest[1].dot(&g),
        );
        let n = diff.norm();
        out.u = (g_dir - dir * dir.dot(&g_dir)) / n;
    }
    out
}
