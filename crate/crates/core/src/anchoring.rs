//! Triangle-local frames, Gaussians bound to them, and the speaker-specific
//! blendshape compensation driven by a latent pose.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{axial, exp_map, left_jacobian, softmax3, Mat3, Vec3};

/// Local coordinate system of one triangle: origin, orientation and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleFrame {
    pub origin: Vec3,
    pub rot: Mat3,
    pub scale: f64,
}

/// A Gaussian whose position, rotation and scale live in the frame of its
/// parent triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundGaussian {
    pub u_local: Vec3,
    pub r_local: Mat3,
    pub s_local: Vec3,
    pub alpha: f64,
    /// Zeroth-order SH coefficient per colour channel.
    pub kappa0: Vec3,
    /// Higher-order SH coefficients, one RGB triple per basis function.
    pub kappa_rest: Vec<Vec3>,
    pub parent: usize,
    /// Softmax of these gives the barycentric weights η.
    pub eta_logits: [f64; 3],
}

impl BoundGaussian {
    /// Freshly anchored Gaussian: at the frame origin, unrotated, unit scale.
    pub fn anchored(parent: usize, sh_degree: u32) -> Self {
        BoundGaussian {
            u_local: Vec3::zeros(),
            r_local: Mat3::identity(),
            s_local: Vec3::new(1.0, 1.0, 1.0),
            alpha: 0.5,
            kappa0: Vec3::zeros(),
            kappa_rest: vec![Vec3::zeros(); sh_rest_len(sh_degree)],
            parent,
            eta_logits: [0.0; 3],
        }
    }

    pub fn eta(&self) -> [f64; 3] {
        softmax3(&self.eta_logits)
    }
}

/// Number of higher-order SH coefficients for a given degree.
pub fn sh_rest_len(degree: u32) -> usize {
    let n = (degree as usize + 1) * (degree as usize + 1);
    n - 1
}

/// Two-layer perceptron mapping the pose coefficients ψ to the latent pose γ:
/// `γ = W2 · tanh(W1 · ψ + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMlp {
    pub psi_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Row-major `hidden × psi_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `latent × hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl LatentMlp {
    pub fn zeros(psi_dim: usize, hidden: usize, latent: usize) -> Self {
        LatentMlp {
            psi_dim,
            hidden,
            latent,
            w1: vec![0.0; hidden * psi_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; latent * hidden],
            b2: vec![0.0; latent],
        }
    }

    /// Xavier-style uniform initialisation with zero biases.
    pub fn random<R: Rng>(psi_dim: usize, hidden: usize, latent: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(psi_dim, hidden, latent);
        let a1 = (6.0 / (psi_dim + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + latent) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        m.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        m
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in `w1, b1, w2, b2` order.
    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        Error::check_dim("latent mlp params", self.n_params(), flat.len())?;
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
        Ok(())
    }

    fn check(&self) -> Result<()> {
        Error::check_dim("latent mlp w1", self.hidden * self.psi_dim, self.w1.len())?;
        Error::check_dim("latent mlp b1", self.hidden, self.b1.len())?;
        Error::check_dim("latent mlp w2", self.latent * self.hidden, self.w2.len())?;
        Error::check_dim("latent mlp b2", self.latent, self.b2.len())
    }
}

/// Per-Gaussian blendshape banks (`L × 3` each) plus the latent-pose network.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerBlendShapes {
    pub mlp: LatentMlp,
    pub w_pos: Vec<f64>,
    pub w_rot: Vec<f64>,
    pub w_color: Vec<f64>,
}

/// One Gaussian's slice of the three banks.
#[derive(Debug, Clone, Copy)]
pub struct BankRow<'a> {
    pub pos: &'a [f64],
    pub rot: &'a [f64],
    pub color: &'a [f64],
}

impl SpeakerBlendShapes {
    pub fn zeros(mlp: LatentMlp, rows: usize) -> Self {
        let n = rows * mlp.latent * 3;
        SpeakerBlendShapes {
            mlp,
            w_pos: vec![0.0; n],
            w_rot: vec![0.0; n],
            w_color: vec![0.0; n],
        }
    }

    pub fn latent(&self) -> usize {
        self.mlp.latent
    }

    pub fn row_len(&self) -> usize {
        self.mlp.latent * 3
    }

    pub fn rows(&self) -> usize {
        if self.row_len() == 0 {
            0
        } else {
            self.w_pos.len() / self.row_len()
        }
    }

    pub fn row(&self, gaussian: usize) -> Result<BankRow<'_>> {
        let n = self.row_len();
        if gaussian >= self.rows() {
            return Err(Error::MissingBankRow { gaussian });
        }
        let r = gaussian * n..(gaussian + 1) * n;
        Ok(BankRow {
            pos: &self.w_pos[r.clone()],
            rot: &self.w_rot[r.clone()],
            color: &self.w_color[r],
        })
    }

    /// Appends a copy of `source`'s row.
    pub fn push_copy(&mut self, source: usize) -> Result<()> {
        let n = self.row_len();
        if source >= self.rows() {
            return Err(Error::MissingBankRow { gaussian: source });
        }
        for bank in [&mut self.w_pos, &mut self.w_rot, &mut self.w_color] {
            bank.extend_from_within(source * n..(source + 1) * n);
        }
        Ok(())
    }

    /// Keeps the rows whose `keep` flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        let n = self.row_len();
        for bank in [&mut self.w_pos, &mut self.w_rot, &mut self.w_color] {
            let old = std::mem::take(bank);
            *bank = old
                .chunks(n)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect();
        }
    }
}

/// Gaussians anchored to a head mesh together with their blendshape banks.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: u32,
    pub gaussians: Vec<BoundGaussian>,
    pub banks: SpeakerBlendShapes,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self, n_triangles: usize) -> Result<()> {
        if self.banks.rows() != self.gaussians.len() {
            return Err(Error::DimensionMismatch {
                what: "bank rows",
                expected: self.gaussians.len(),
                got: self.banks.rows(),
            });
        }
        self.banks.mlp.check()?;
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.parent >= n_triangles {
                return Err(Error::InvalidArgument(format!(
                    "gaussian {i} references triangle {} of {n_triangles}",
                    g.parent
                )));
            }
            if g.kappa_rest.len() != sh_rest_len(self.sh_degree) {
                return Err(Error::DimensionMismatch {
                    what: "kappa_rest",
                    expected: sh_rest_len(self.sh_degree),
                    got: g.kappa_rest.len(),
                });
            }
            if !(0.0..=1.0).contains(&g.alpha) || g.s_local.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidArgument(format!("gaussian {i} has out-of-range opacity or scale")));
            }
        }
        Ok(())
    }

    /// Keeps the Gaussians (and bank rows) whose flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
        self.banks.retain(keep);
    }
}

/// Orientation and scale of a triangle; independent of η.
pub fn triangle_basis(v0: &Vec3, v1: &Vec3, v2: &Vec3, triangle: usize) -> Result<(Mat3, f64)> {
    let e01 = v1 - v0;
    let e02 = v2 - v0;
    let e12 = v2 - v1;
    let c = e01.cross(&e02);
    let cn = c.norm();
    if !(cn > 1e-12) {
        return Err(Error::DegenerateTriangle { triangle });
    }
    let n0 = e01 / e01.norm();
    let n1 = c / cn;
    let n2 = n0.cross(&n1);
    let s = (e01.norm() + e02.norm() + e12.norm()) / 3.0;
    Ok((Mat3::from_columns(&[n0, n1, n2]), s))
}

/// Frame of triangle `(v0, v1, v2)` with origin at barycentric weights `eta`.
pub fn compute_frame(v0: &Vec3, v1: &Vec3, v2: &Vec3, eta: &[f64; 3], triangle: usize) -> Result<TriangleFrame> {
    let (rot, scale) = triangle_basis(v0, v1, v2, triangle)?;
    Ok(TriangleFrame {
        origin: v0 * eta[0] + v1 * eta[1] + v2 * eta[2],
        rot,
        scale,
    })
}

/// Gradient of [`triangle_basis`] outputs back onto the three vertices.
pub fn triangle_basis_backward(v0: &Vec3, v1: &Vec3, v2: &Vec3, g_rot: &Mat3, g_scale: f64) -> [Vec3; 3] {
    let e01 = v1 - v0;
    let e02 = v2 - v0;
    let e12 = v2 - v1;
    let l01 = e01.norm();
    let l02 = e02.norm();
    let l12 = e12.norm();
    let c = e01.cross(&e02);
    let cn = c.norm();
    let n0 = e01 / l01;
    let n1 = c / cn;

    let gn2 = g_rot.column(2).into_owned();
    let gn0 = g_rot.column(0) + n1.cross(&gn2);
    let gn1 = g_rot.column(1) + gn2.cross(&n0);

    let gc = (gn1 - n1 * n1.dot(&gn1)) / cn;
    let ge01 = e02.cross(&gc) + (gn0 - n0 * n0.dot(&gn0)) / l01 + e01 * (g_scale / (3.0 * l01));
    let ge02 = gc.cross(&e01) + e02 * (g_scale / (3.0 * l02));
    let ge12 = e12 * (g_scale / (3.0 * l12));
    [-ge01 - ge02, ge01 - ge12, ge02 + ge12]
}

/// Global position, rotation and scale of a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalAttrs {
    pub u: Vec3,
    pub r: Mat3,
    pub s: Vec3,
}

/// `u = R·ū + P`, `r = R·r̄`, `s = S·s̄`; ū is not scaled by S.
pub fn to_global(u_local: &Vec3, r_local: &Mat3, s_local: &Vec3, f: &TriangleFrame) -> GlobalAttrs {
    GlobalAttrs {
        u: f.rot * u_local + f.origin,
        r: f.rot * r_local,
        s: s_local * f.scale,
    }
}

/// Inverse of [`to_global`].
pub fn from_global(g: &GlobalAttrs, f: &TriangleFrame) -> (Vec3, Mat3, Vec3) {
    let rt = f.rot.transpose();
    (rt * (g.u - f.origin), rt * g.r, g.s / f.scale)
}

/// `γ = W2 · tanh(W1 · ψ + b1) + b2`.
pub fn latent_pose(psi: &[f64], mlp: &LatentMlp) -> Result<Vec<f64>> {
    Ok(latent_pose_with_hidden(psi, mlp)?.0)
}

/// Latent pose plus the hidden activations needed for the backward pass.
pub fn latent_pose_with_hidden(psi: &[f64], mlp: &LatentMlp) -> Result<(Vec<f64>, Vec<f64>)> {
    mlp.check()?;
    Error::check_dim("pose coefficients", mlp.psi_dim, psi.len())?;
    let hidden: Vec<f64> = (0..mlp.hidden)
        .map(|h| {
            let row = &mlp.w1[h * mlp.psi_dim..(h + 1) * mlp.psi_dim];
            (row.iter().zip(psi).map(|(w, x)| w * x).sum::<f64>() + mlp.b1[h]).tanh()
        })
        .collect();
    let gamma = (0..mlp.latent)
        .map(|l| {
            let row = &mlp.w2[l * mlp.hidden..(l + 1) * mlp.hidden];
            row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + mlp.b2[l]
        })
        .collect();
    Ok((gamma, hidden))
}

/// Accumulates the gradients of [`latent_pose`] into `g_params` (flat
/// `w1, b1, w2, b2`) and returns the gradient with respect to ψ.
pub fn latent_pose_backward(psi: &[f64], mlp: &LatentMlp, hidden: &[f64], g_gamma: &[f64], g_params: &mut [f64]) -> Vec<f64> {
    let (p, h, l) = (mlp.psi_dim, mlp.hidden, mlp.latent);
    let (o_b1, o_w2) = (h * p, h * p + h);
    let o_b2 = o_w2 + l * h;
    let mut g_hidden = vec![0.0; h];
    for li in 0..l {
        let g = g_gamma[li];
        if g == 0.0 {
            continue;
        }
        g_params[o_b2 + li] += g;
        for hi in 0..h {
            g_params[o_w2 + li * h + hi] += g * hidden[hi];
            g_hidden[hi] += g * mlp.w2[li * h + hi];
        }
    }
    let mut g_psi = vec![0.0; p];
    for hi in 0..h {
        let g_pre = g_hidden[hi] * (1.0 - hidden[hi] * hidden[hi]);
        if g_pre == 0.0 {
            continue;
        }
        g_params[o_b1 + hi] += g_pre;
        for pi in 0..p {
            g_params[hi * p + pi] += g_pre * psi[pi];
            g_psi[pi] += g_pre * mlp.w1[hi * p + pi];
        }
    }
    g_psi
}

/// Compensated local attributes `(ū', r̄', κ₀')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compensated {
    pub u_local: Vec3,
    pub r_local: Mat3,
    pub kappa0: Vec3,
    /// Axis-angle increment `W_rotᵀ γ`, kept for the backward pass.
    pub rot_increment: Vec3,
}

fn bank_apply(bank: &[f64], gamma: &[f64]) -> Vec3 {
    let mut out = Vec3::zeros();
    for (l, g) in gamma.iter().enumerate() {
        if *g != 0.0 {
            out += Vec3::new(bank[3 * l], bank[3 * l + 1], bank[3 * l + 2]) * *g;
        }
    }
    out
}

/// `ū' = ū + W_posᵀγ`, `r̄' = r̄ · exp(W_rotᵀγ)`, `κ₀' = κ₀ + W_colorᵀγ`.
pub fn compensate(g: &BoundGaussian, index: usize, gamma: &[f64], banks: &SpeakerBlendShapes) -> Result<Compensated> {
    let row = banks.row(index)?;
    Error::check_dim("latent pose", banks.latent(), gamma.len())?;
    let du = bank_apply(row.pos, gamma);
    let w = bank_apply(row.rot, gamma);
    let dc = bank_apply(row.color, gamma);
    let r_local = if w == Vec3::zeros() { g.r_local } else { g.r_local * exp_map(&w) };
    Ok(Compensated {
        u_local: g.u_local + du,
        r_local,
        kappa0: g.kappa0 + dc,
        rot_increment: w,
    })
}

/// Gradients produced by [`compensate_backward`].
#[derive(Debug, Clone, Copy)]
pub struct CompensateGrads {
    pub u_local: Vec3,
    /// Tangent-space gradient for the right perturbation `r̄ · exp(δ)`.
    pub r_tangent: Vec3,
    pub kappa0: Vec3,
}

/// Back-propagates through [`compensate`]. Bank-row gradients are added into
/// the three `g_*` row slices and the latent-pose gradient into `g_gamma`.
#[allow(clippy::too_many_arguments)]
pub fn compensate_backward(
    g: &BoundGaussian,
    comp: &Compensated,
    gamma: &[f64],
    row: BankRow<'_>,
    g_u: &Vec3,
    g_r: &Mat3,
    g_k0: &Vec3,
    g_pos: &mut [f64],
    g_rot: &mut [f64],
    g_color: &mut [f64],
    g_gamma: &mut [f64],
) -> CompensateGrads {
    let e = exp_map(&comp.rot_increment);
    // r̄' = r̄ E(w): right perturbation of r̄, and of w through J_r = J_lᵀ.
    let r_tangent = axial(&(g.r_local.transpose() * g_r * e.transpose()));
    let g_w = left_jacobian(&comp.rot_increment) * axial(&(comp.r_local.transpose() * g_r));
    for (l, gl) in gamma.iter().enumerate() {
        for c in 0..3 {
            g_pos[3 * l + c] += gl * g_u[c];
            g_rot[3 * l + c] += gl * g_w[c];
            g_color[3 * l + c] += gl * g_k0[c];
        }
        g_gamma[l] += Vec3::new(row.pos[3 * l], row.pos[3 * l + 1], row.pos[3 * l + 2]).dot(g_u)
            + Vec3::new(row.rot[3 * l], row.rot[3 * l + 1], row.rot[3 * l + 2]).dot(&g_w)
            + Vec3::new(row.color[3 * l], row.color[3 * l + 1], row.color[3 * l + 2]).dot(g_k0);
    }
    CompensateGrads {
        u_local: *g_u,
        r_tangent,
        kappa0: *g_k0,
    }
}

/// Right-multiplies `r` by `exp(delta)` and re-orthonormalizes.
pub fn perturb_rotation(r: &Mat3, delta: &Vec3) -> Mat3 {
    crate::math::orthonormalize(&(r * exp_map(delta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensifyMode {
    Clone,
    Split,
}

/// Scale divisor applied to split children.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Appends the derivatives of Gaussian `index` (one for clone, two for split)
/// with fresh bank rows copied from the parent's. Derivatives keep the
/// parent's triangle and η. Split leaves the parent in place; the caller
/// removes it.
pub fn densify<R: Rng>(set: &mut GaussianSet, index: usize, mode: DensifyMode, rng: &mut R) -> Result<std::ops::Range<usize>> {
    let parent = set
        .gaussians
        .get(index)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("no gaussian {index}")))?;
    let start = set.gaussians.len();
    match mode {
        DensifyMode::Clone => {
            set.gaussians.push(parent);
            set.banks.push_copy(index)?;
        }
        DensifyMode::Split => {
            for _ in 0..2 {
                let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                let offset = parent.r_local * parent.s_local.component_mul(&z);
                let mut child = parent.clone();
                child.u_local += offset;
                child.s_local /= SPLIT_SCALE_DIVISOR;
                set.gaussians.push(child);
                set.banks.push_copy(index)?;
            }
        }
    }
    Ok(start..set.gaussians.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::orthonormality_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec<R: Rng>(rng: &mut R, a: f64) -> Vec3 {
        Vec3::new(rng.random_range(-a..a), rng.random_range(-a..a), rng.random_range(-a..a))
    }

    #[test]
    fn right_triangle_frame() {
        let f = compute_frame(&Vec3::zeros(), &Vec3::x(), &Vec3::y(), &[1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(f.origin, Vec3::zeros());
        assert!((f.rot.column(0) - Vec3::x()).norm() < 1e-15);
        assert!((f.rot.column(1) - Vec3::z()).norm() < 1e-15);
        assert!((f.rot.column(2) + Vec3::y()).norm() < 1e-15);
        assert!((f.scale - (2.0 + 2f64.sqrt()) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn equilateral_unit_scale() {
        let h = 3f64.sqrt() / 2.0;
        let f = compute_frame(&Vec3::zeros(), &Vec3::x(), &Vec3::new(0.5, h, 0.0), &[0.2, 0.3, 0.5], 0).unwrap();
        assert!((f.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_triangle_is_rejected() {
        let r = compute_frame(&Vec3::zeros(), &Vec3::x(), &(Vec3::x() * 2.0), &[1.0, 0.0, 0.0], 17);
        assert!(matches!(r, Err(Error::DegenerateTriangle { triangle: 17 })));
    }

    #[test]
    fn to_global_cases() {
        let f = TriangleFrame {
            origin: Vec3::new(1.0, 2.0, 3.0),
            rot: exp_map(&Vec3::new(0.1, 0.2, 0.3)),
            scale: 0.7,
        };
        let g = to_global(&Vec3::zeros(), &Mat3::identity(), &Vec3::new(1.0, 1.0, 1.0), &f);
        assert_eq!(g.u, f.origin);
        assert_eq!(g.r, f.rot);
        assert_eq!(g.s, Vec3::new(0.7, 0.7, 0.7));

        let f = TriangleFrame {
            origin: Vec3::new(0.0, 0.0, 5.0),
            rot: exp_map(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)),
            scale: 1.0,
        };
        let g = to_global(&Vec3::x(), &Mat3::identity(), &Vec3::new(1.0, 1.0, 1.0), &f);
        assert!((g.u - Vec3::new(0.0, 1.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_network_gives_zero_latent() {
        let m = LatentMlp::zeros(6, 8, 16);
        assert!(latent_pose(&[0.3; 6], &m).unwrap().iter().all(|&x| x == 0.0));
        assert!(latent_pose(&[0.3; 5], &m).is_err());
    }

    #[test]
    fn identity_network_applies_tanh() {
        let n = 4;
        let mut m = LatentMlp::zeros(n, n, n);
        for i in 0..n {
            m.w1[i * n + i] = 1.0;
            m.w2[i * n + i] = 1.0;
        }
        let psi = [0.3, -1.2, 0.0, 2.5];
        let gamma = latent_pose(&psi, &m).unwrap();
        for i in 0..n {
            assert!((gamma[i] - psi[i].tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_pose_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = LatentMlp::random(6, 5, 4, &mut rng);
        let psi: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let g_gamma: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |m: &LatentMlp, psi: &[f64]| -> f64 {
            latent_pose(psi, m).unwrap().iter().zip(&g_gamma).map(|(a, b)| a * b).sum()
        };
        let (_, hidden) = latent_pose_with_hidden(&psi, &m).unwrap();
        let mut gp = vec![0.0; m.n_params()];
        let g_psi = latent_pose_backward(&psi, &m, &hidden, &g_gamma, &mut gp);
        let h = 1e-6;
        let base = m.params();
        for k in 0..base.len() {
            let mut a = m.clone();
            let mut p = base.clone();
            p[k] += h;
            a.set_params(&p).unwrap();
            let mut b = m.clone();
            p[k] -= 2.0 * h;
            b.set_params(&p).unwrap();
            let fd = (f(&a, &psi) - f(&b, &psi)) / (2.0 * h);
            assert!((fd - gp[k]).abs() < 1e-7, "{k}");
        }
        for k in 0..6 {
            let mut a = psi.clone();
            a[k] += h;
            let mut b = psi.clone();
            b[k] -= h;
            let fd = (f(&m, &a) - f(&m, &b)) / (2.0 * h);
            assert!((fd - g_psi[k]).abs() < 1e-7);
        }
    }

    fn sample_gaussian<R: Rng>(rng: &mut R) -> BoundGaussian {
        BoundGaussian {
            u_local: rand_vec(rng, 0.5),
            r_local: exp_map(&rand_vec(rng, 2.0)),
            s_local: Vec3::new(0.5, 0.8, 1.2),
            alpha: 0.7,
            kappa0: rand_vec(rng, 1.0),
            kappa_rest: vec![],
            parent: 0,
            eta_logits: [0.1, 0.2, -0.3],
        }
    }

    #[test]
    fn zero_latent_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = sample_gaussian(&mut rng);
        let mut banks = SpeakerBlendShapes::zeros(LatentMlp::zeros(6, 4, 3), 1);
        banks.w_pos.iter_mut().chain(banks.w_rot.iter_mut()).chain(banks.w_color.iter_mut()).for_each(|w| *w = rng.random_range(-1.0..1.0));
        let c = compensate(&g, 0, &[0.0; 3], &banks).unwrap();
        assert_eq!(c.u_local, g.u_local);
        assert_eq!(c.kappa0, g.kappa0);
        assert!((c.r_local - g.r_local).norm() < 1e-12);

        let zero = SpeakerBlendShapes::zeros(LatentMlp::zeros(6, 4, 3), 1);
        let c = compensate(&g, 0, &[0.4, -2.0, 1.0], &zero).unwrap();
        assert_eq!((c.u_local, c.r_local, c.kappa0), (g.u_local, g.r_local, g.kappa0));
        assert!(matches!(compensate(&g, 1, &[0.0; 3], &zero), Err(Error::MissingBankRow { gaussian: 1 })));
    }

    #[test]
    fn rotation_increment_about_z() {
        let mut g = sample_gaussian(&mut ChaCha8Rng::seed_from_u64(1));
        g.r_local = Mat3::identity();
        let mut banks = SpeakerBlendShapes::zeros(LatentMlp::zeros(3, 2, 1), 1);
        let theta = 0.83;
        banks.w_rot[2] = 1.0;
        let c = compensate(&g, 0, &[theta], &banks).unwrap();
        // closed-form Rodrigues rotation about z
        let expected = Mat3::new(theta.cos(), -theta.sin(), 0.0, theta.sin(), theta.cos(), 0.0, 0.0, 0.0, 1.0);
        assert!((c.r_local - expected).norm() < 1e-9);
    }

    #[test]
    fn compensate_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = sample_gaussian(&mut rng);
        let l = 3;
        let mut banks = SpeakerBlendShapes::zeros(LatentMlp::zeros(6, 4, l), 1);
        for w in banks.w_pos.iter_mut().chain(banks.w_rot.iter_mut()).chain(banks.w_color.iter_mut()) {
            *w = rng.random_range(-0.5..0.5);
        }
        let gamma: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gu = rand_vec(&mut rng, 1.0);
        let gk = rand_vec(&mut rng, 1.0);
        let gr = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let loss = |g: &BoundGaussian, b: &SpeakerBlendShapes, gamma: &[f64]| {
            let c = compensate(g, 0, gamma, b).unwrap();
            c.u_local.dot(&gu) + c.kappa0.dot(&gk) + c.r_local.component_mul(&gr).sum()
        };
        let comp = compensate(&g, 0, &gamma, &banks).unwrap();
        let n = banks.row_len();
        let (mut gp, mut grot, mut gc, mut gg) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; l]);
        let out = compensate_backward(&g, &comp, &gamma, banks.row(0).unwrap(), &gu, &gr, &gk, &mut gp, &mut grot, &mut gc, &mut gg);
        let h = 1e-6;
        for k in 0..n {
            for (bank_idx, analytic) in [(0, &gp), (1, &grot), (2, &gc)] {
                let mut a = banks.clone();
                let mut b = banks.clone();
                let (pa, pb) = match bank_idx {
                    0 => (&mut a.w_pos, &mut b.w_pos),
                    1 => (&mut a.w_rot, &mut b.w_rot),
                    _ => (&mut a.w_color, &mut b.w_color),
                };
                pa[k] += h;
                pb[k] -= h;
                let fd = (loss(&g, &a, &gamma) - loss(&g, &b, &gamma)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-7, "bank {bank_idx} entry {k}: {fd} vs {}", analytic[k]);
            }
        }
        for k in 0..l {
            let mut a = gamma.clone();
            a[k] += h;
            let mut b = gamma.clone();
            b[k] -= h;
            let fd = (loss(&g, &banks, &a) - loss(&g, &banks, &b)) / (2.0 * h);
            assert!((fd - gg[k]).abs() < 1e-7);
        }
        for c in 0..3 {
            let mut d = Vec3::zeros();
            d[c] = h;
            let mut a = g.clone();
            a.r_local = g.r_local * exp_map(&d);
            let mut b = g.clone();
            b.r_local = g.r_local * exp_map(&-d);
            let fd = (loss(&a, &banks, &gamma) - loss(&b, &banks, &gamma)) / (2.0 * h);
            assert!((fd - out.r_tangent[c]).abs() < 1e-7);
        }
    }

    #[test]
    fn triangle_basis_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = [rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0)];
        let gr = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let gs = 0.37;
        let loss = |v: &[Vec3; 3]| {
            let (r, s) = triangle_basis(&v[0], &v[1], &v[2], 0).unwrap();
            r.component_mul(&gr).sum() + gs * s
        };
        let g = triangle_basis_backward(&v[0], &v[1], &v[2], &gr, gs);
        let h = 1e-6;
        for i in 0..3 {
            for c in 0..3 {
                let mut a = v;
                a[i][c] += h;
                let mut b = v;
                b[i][c] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - g[i][c]).abs() < 1e-7, "v{i}[{c}]: {fd} vs {}", g[i][c]);
            }
        }
    }

    #[test]
    fn densify_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = sample_gaussian(&mut rng);
        g.parent = 3;
        let mut set = GaussianSet {
            sh_degree: 0,
            gaussians: vec![g.clone()],
            banks: SpeakerBlendShapes::zeros(LatentMlp::zeros(6, 4, 2), 1),
        };
        set.banks.w_pos[1] = 0.25;
        let r = densify(&mut set, 0, DensifyMode::Clone, &mut rng).unwrap();
        assert_eq!(r, 1..2);
        assert_eq!(set.gaussians[1].parent, 3);
        assert_eq!(set.gaussians[1].u_local, g.u_local);
        assert_eq!(set.banks.rows(), set.len());
        assert_eq!(set.banks.row(1).unwrap().pos, set.banks.row(0).unwrap().pos);

        let r = densify(&mut set, 0, DensifyMode::Split, &mut rng).unwrap();
        assert_eq!(r, 2..4);
        for c in &set.gaussians[2..4] {
            assert_eq!(c.s_local, g.s_local / 1.6);
            assert_eq!(c.parent, g.parent);
            assert_eq!(c.eta_logits, g.eta_logits);
        }
        assert_eq!(set.banks.rows(), set.len());
        set.retain(&[false, true, true, true]);
        assert_eq!(set.banks.rows(), 3);
    }

    #[test]
    fn orthonormal_after_many_compensations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut banks = SpeakerBlendShapes::zeros(LatentMlp::zeros(6, 4, 4), 1);
        banks.w_rot.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let mut g = sample_gaussian(&mut rng);
        for _ in 0..1000 {
            let gamma: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = compensate(&g, 0, &gamma, &banks).unwrap();
            assert!(orthonormality_error(&c.r_local) < 1e-6);
            assert!((c.r_local.determinant() - 1.0).abs() < 1e-6);
            g.r_local = c.r_local;
        }
    }
}
