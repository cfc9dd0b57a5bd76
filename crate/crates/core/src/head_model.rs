//! Parametric head mesh: blendshapes, joint-based linear blend skinning and
//! rigid attachment groups for the teeth / inner-mouth geometry.
//!
//! The deformation pipeline is
//!
//! ```text
//! v = sync(LBS(v_base + Σ_k p_k B_k, T(ψ), W))
//! ```
//!
//! where `p` is the concatenation `β ++ ε ++ ψ` (the ψ columns only when the
//! asset carries pose correctives) and `sync` moves every attached vertex by
//! the mean displacement of its source lip vertices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{exp_map, left_jacobian, Mat3, Vec3};

/// Semantic category ids stored per triangle.
pub mod category {
    pub const FACE: u32 = 0;
    pub const LIPS: u32 = 1;
    pub const TEETH: u32 = 2;
    pub const OTHER: u32 = 3;
    pub const COUNT: u32 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTemplate {
    /// Rest joint positions.
    pub rest: Vec<Vec3>,
    /// Parent of each joint; parents always precede their children.
    pub parents: Vec<Option<usize>>,
}

impl JointTemplate {
    pub fn len(&self) -> usize {
        self.rest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    /// Whether `j` equals `ancestor` or lies below it in the chain.
    pub fn is_descendant(&self, j: usize, ancestor: usize) -> bool {
        let mut cur = Some(j);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.parents[c];
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttachmentGroup {
    pub attached: Vec<usize>,
    pub sources: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub v_base: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub n_shape: usize,
    pub n_expr: usize,
    /// Whether `bs_basis` carries one corrective column per pose coefficient.
    pub pose_correctives: bool,
    /// One vertex-offset field per blend coefficient, `[param][vertex]`.
    pub bs_basis: Vec<Vec<Vec3>>,
    /// Row-major `[vertex][joint]` skinning weights.
    pub skin_weights: Vec<f64>,
    pub joints: JointTemplate,
    pub triangle_category: Vec<u32>,
    pub attachment_groups: Vec<AttachmentGroup>,
}

/// Per-frame FLAME-style coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub beta: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// One axis-angle triple per joint, radians.
    pub psi: Vec<f64>,
}

/// Dimensionality of a [`MotionParams`] vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamDims {
    pub shape: usize,
    pub expr: usize,
    pub pose: usize,
}

impl ParamDims {
    pub fn total(&self) -> usize {
        self.shape + self.expr + self.pose
    }
}

impl MotionParams {
    pub fn zeros(dims: ParamDims) -> Self {
        MotionParams {
            beta: vec![0.0; dims.shape],
            epsilon: vec![0.0; dims.expr],
            psi: vec![0.0; dims.pose],
        }
    }

    pub fn dims(&self) -> ParamDims {
        ParamDims {
            shape: self.beta.len(),
            expr: self.epsilon.len(),
            pose: self.psi.len(),
        }
    }

    /// `β ++ ε ++ ψ`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims().total());
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.epsilon);
        out.extend_from_slice(&self.psi);
        out
    }

    pub fn from_flat(dims: ParamDims, flat: &[f64]) -> Result<Self> {
        Error::check_dim("flat motion params", dims.total(), flat.len())?;
        let (beta, rest) = flat.split_at(dims.shape);
        let (epsilon, psi) = rest.split_at(dims.expr);
        Ok(MotionParams {
            beta: beta.to_vec(),
            epsilon: epsilon.to_vec(),
            psi: psi.to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// Rigid transform `x -> rot * x + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rot: Mat3::identity(),
            trans: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rot * x + self.trans
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rot == Mat3::identity() && self.trans == Vec3::zeros()
    }
}

impl HeadModel {
    pub fn n_vertices(&self) -> usize {
        self.v_base.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn param_dims(&self) -> ParamDims {
        ParamDims {
            shape: self.n_shape,
            expr: self.n_expr,
            pose: 3 * self.n_joints(),
        }
    }

    /// Number of blendshape columns the asset must carry.
    pub fn n_basis(&self) -> usize {
        self.n_shape + self.n_expr + if self.pose_correctives { 3 * self.n_joints() } else { 0 }
    }

    pub fn skin_row(&self, vertex: usize) -> &[f64] {
        let j = self.n_joints();
        &self.skin_weights[vertex * j..(vertex + 1) * j]
    }

    /// Vertices touched by lip-category triangles (the lip index set M_L),
    /// sorted ascending.
    pub fn lip_vertices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .triangles
            .iter()
            .zip(&self.triangle_category)
            .filter(|(_, &c)| c == category::LIPS)
            .flat_map(|(t, _)| t.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.n_vertices();
        let nj = self.n_joints();
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if nv == 0 {
            return bad("no vertices".into());
        }
        if nj == 0 {
            return bad("no joints".into());
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= nv) {
                return bad(format!("triangle {i} references a vertex >= {nv}"));
            }
        }
        if self.triangle_category.len() != self.triangles.len() {
            return bad("triangle_category length differs from triangle count".into());
        }
        if let Some(c) = self.triangle_category.iter().find(|&&c| c >= category::COUNT) {
            return bad(format!("unknown triangle category {c}"));
        }
        if self.bs_basis.len() != self.n_basis() {
            return bad(format!(
                "bs_basis has {} fields, expected {}",
                self.bs_basis.len(),
                self.n_basis()
            ));
        }
        if self.bs_basis.iter().any(|f| f.len() != nv) {
            return bad("bs_basis field length differs from vertex count".into());
        }
        if self.skin_weights.len() != nv * nj {
            return bad("skin_weights size differs from vertices x joints".into());
        }
        for v in 0..nv {
            let row = self.skin_row(v);
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return bad(format!("skin weight row {v} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("skin weight row {v} sums to {sum}"));
            }
        }
        if self.joints.parents.len() != nj {
            return bad("joint parents length differs from joint count".into());
        }
        for (j, p) in self.joints.parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= j {
                    return bad(format!("joint {j} has parent {p}, parents must precede children"));
                }
            }
        }
        let finite = self.v_base.iter().chain(self.joints.rest.iter()).all(|v| v.iter().all(|x| x.is_finite()))
            && self.bs_basis.iter().flatten().all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return bad("non-finite coordinates".into());
        }
        let lips = self.lip_vertices();
        let mut attached_seen = vec![false; nv];
        for (g, group) in self.attachment_groups.iter().enumerate() {
            if group.sources.is_empty() {
                return Err(Error::EmptySources { group: g });
            }
            for &a in &group.attached {
                if a >= nv {
                    return bad(format!("attachment group {g} references vertex {a}"));
                }
                if std::mem::replace(&mut attached_seen[a], true) {
                    return bad(format!("vertex {a} is attached twice"));
                }
            }
            for &s in &group.sources {
                if lips.binary_search(&s).is_err() {
                    return bad(format!("attachment group {g} source {s} is not a lip vertex"));
                }
            }
        }
        for group in &self.attachment_groups {
            if group.sources.iter().any(|&s| attached_seen[s]) {
                return bad("a source vertex is itself attached".into());
            }
        }
        Ok(())
    }
}

fn check_params(params: &MotionParams, model: &HeadModel) -> Result<()> {
    let dims = model.param_dims();
    Error::check_dim("shape coefficients", dims.shape, params.beta.len())?;
    Error::check_dim("expression coefficients", dims.expr, params.epsilon.len())?;
    Error::check_dim("pose coefficients", dims.pose, params.psi.len())
}

fn blend_coefficients(params: &MotionParams, model: &HeadModel) -> Vec<f64> {
    let mut c = Vec::with_capacity(model.n_basis());
    c.extend_from_slice(&params.beta);
    c.extend_from_slice(&params.epsilon);
    if model.pose_correctives {
        c.extend_from_slice(&params.psi);
    }
    c
}

/// Vertex offsets `Σ_k p_k B_k`.
pub fn blend_shapes(params: &MotionParams, model: &HeadModel) -> Result<Vec<Vec3>> {
    check_params(params, model)?;
    let coeffs = blend_coefficients(params, model);
    let mut out = vec![Vec3::zeros(); model.n_vertices()];
    for (c, field) in coeffs.iter().zip(&model.bs_basis) {
        if *c == 0.0 {
            continue;
        }
        for (o, b) in out.iter_mut().zip(field) {
            *o += b * *c;
        }
    }
    Ok(out)
}

/// World transforms (relative to the rest pose) of every joint: each joint
/// rotates about its rest position, composed down the kinematic chain.
pub fn joint_transforms(psi: &[f64], model: &HeadModel) -> Result<Vec<RigidTransform>> {
    let nj = model.n_joints();
    Error::check_dim("pose coefficients", 3 * nj, psi.len())?;
    let mut out: Vec<RigidTransform> = Vec::with_capacity(nj);
    for j in 0..nj {
        let w = Vec3::new(psi[3 * j], psi[3 * j + 1], psi[3 * j + 2]);
        let local = if w == Vec3::zeros() {
            RigidTransform::identity()
        } else {
            let rot = exp_map(&w);
            let c = model.joints.rest[j];
            RigidTransform {
                rot,
                trans: c - rot * c,
            }
        };
        let world = match model.joints.parents[j] {
            Some(p) if !out[p].is_identity() => out[p].compose(&local),
            _ => local,
        };
        out.push(world);
    }
    Ok(out)
}

/// Linear blend skinning, written in displacement form so identity
/// transforms return the input bit-for-bit.
pub fn lbs(vertices: &[Vec3], transforms: &[RigidTransform], skin_weights: &[f64]) -> Result<Vec<Vec3>> {
    let nj = transforms.len();
    Error::check_dim("skin weights", vertices.len() * nj, skin_weights.len())?;
    Ok(vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let row = &skin_weights[i * nj..(i + 1) * nj];
            let mut d = Vec3::zeros();
            for (w, t) in row.iter().zip(transforms) {
                if *w != 0.0 && !t.is_identity() {
                    d += (t.apply(v) - v) * *w;
                }
            }
            v + d
        })
        .collect())
}

/// Moves every attached vertex by the mean canonical-space displacement of
/// its source lip vertices.
pub fn attachment_sync(model: &HeadModel, v: &[Vec3]) -> Result<Vec<Vec3>> {
    Error::check_dim("vertices", model.n_vertices(), v.len())?;
    let mut out = v.to_vec();
    for (g, group) in model.attachment_groups.iter().enumerate() {
        if group.sources.is_empty() {
            return Err(Error::EmptySources { group: g });
        }
        let mut d = Vec3::zeros();
        for &s in &group.sources {
            d += v[s] - model.v_base[s];
        }
        d /= group.sources.len() as f64;
        for &a in &group.attached {
            out[a] = model.v_base[a] + d;
        }
    }
    Ok(out)
}

/// Full deformation: blendshapes, skinning, then attachment sync.
pub fn deform(model: &HeadModel, params: &MotionParams) -> Result<Vec<Vec3>> {
    let offsets = blend_shapes(params, model)?;
    let shaped: Vec<Vec3> = model.v_base.iter().zip(&offsets).map(|(b, o)| b + o).collect();
    let transforms = joint_transforms(&params.psi, model)?;
    let skinned = lbs(&shaped, &transforms, &model.skin_weights)?;
    attachment_sync(model, &skinned)
}

/// Back-propagates a gradient on the deformed vertices to the flat
/// `β ++ ε ++ ψ` parameter vector.
pub fn deform_backward(model: &HeadModel, params: &MotionParams, grad_v: &[Vec3]) -> Result<Vec<f64>> {
    Error::check_dim("vertex gradient", model.n_vertices(), grad_v.len())?;
    let offsets = blend_shapes(params, model)?;
    let shaped: Vec<Vec3> = model.v_base.iter().zip(&offsets).map(|(b, o)| b + o).collect();
    let transforms = joint_transforms(&params.psi, model)?;
    let nj = model.n_joints();

    // Attachment: attached vertices ignore their skinned position and pass
    // their gradient evenly to the sources.
    let mut g = grad_v.to_vec();
    for group in &model.attachment_groups {
        let mut sum = Vec3::zeros();
        for &a in &group.attached {
            sum += grad_v[a];
        }
        for &a in &group.attached {
            g[a] = Vec3::zeros();
        }
        let share = sum / group.sources.len() as f64;
        for &s in &group.sources {
            g[s] += share;
        }
    }

    let dims = model.param_dims();
    let mut out = vec![0.0; dims.total()];

    // Gradient on the shaped (pre-skinning) vertices.
    let mut g_shaped = vec![Vec3::zeros(); model.n_vertices()];
    for (i, gi) in g.iter().enumerate() {
        if *gi == Vec3::zeros() {
            continue;
        }
        let row = model.skin_row(i);
        let mut blended = Mat3::identity();
        for (w, t) in row.iter().zip(&transforms) {
            if *w != 0.0 {
                blended += (t.rot - Mat3::identity()) * *w;
            }
        }
        g_shaped[i] = blended.transpose() * gi;
    }
    for (k, field) in model.bs_basis.iter().enumerate() {
        let d: f64 = field.iter().zip(&g_shaped).map(|(b, gs)| b.dot(gs)).sum();
        out[k] += d;
    }
    // With correctives the ψ columns follow β and ε, which is exactly where ψ
    // sits in the flat vector, so the loop above already filled them.

    // Pose: d(A_m x)/dω_{j,c} = (Gpar k_c) × (A_m x - q_j) for m below j.
    for j in 0..nj {
        let w = Vec3::new(params.psi[3 * j], params.psi[3 * j + 1], params.psi[3 * j + 2]);
        let parent_rot = match model.joints.parents[j] {
            Some(p) => transforms[p].rot,
            None => Mat3::identity(),
        };
        let pivot = transforms[j].apply(&model.joints.rest[j]);
        let axes = parent_rot * left_jacobian(&w);
        // Σ_i Σ_m w_im (y_im - q) × g_i, contracted with each axis below.
        let mut moment = Vec3::zeros();
        for m in 0..nj {
            if !model.joints.is_descendant(m, j) {
                continue;
            }
            for (i, gi) in g.iter().enumerate() {
                let wim = model.skin_weights[i * nj + m];
                if wim == 0.0 || *gi == Vec3::zeros() {
                    continue;
                }
                let y = transforms[m].apply(&shaped[i]);
                moment += (y - pivot).cross(gi) * wim;
            }
        }
        // g · (a × r) = a · (r × g)
        for c in 0..3 {
            out[dims.shape + dims.expr + 3 * j + c] += axes.column(c).dot(&moment);
        }
    }
    Ok(out)
}

/// Parameters of the synthetic head generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHeadConfig {
    /// Latitude bands of the head sphere.
    pub rings: usize,
    /// Longitude segments of the head sphere.
    pub segments: usize,
    pub n_shape: usize,
    pub n_expr: usize,
    pub pose_correctives: bool,
    pub seed: u64,
}

impl Default for SyntheticHeadConfig {
    fn default() -> Self {
        SyntheticHeadConfig {
            rings: 10,
            segments: 14,
            n_shape: 4,
            n_expr: 10,
            pose_correctives: false,
            seed: 7,
        }
    }
}

/// Mouth centre of the synthetic head in canonical space.
pub const SYNTH_MOUTH: [f64; 3] = [0.0, -0.45, 0.88];

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn bump(v: &Vec3, c: &Vec3, width: f64) -> f64 {
    (-(v - c).norm_squared() / (2.0 * width * width)).exp()
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Builds a sphere-like head with a neck and a jaw joint, a lip region, a
/// small teeth quad attached to the lips, and smooth shape and expression
/// bases. Every value is representable in `f32` so the asset round-trips.
pub fn synthetic_head(cfg: &SyntheticHeadConfig) -> HeadModel {
    assert!(cfg.rings >= 3 && cfg.segments >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mouth = Vec3::new(SYNTH_MOUTH[0], SYNTH_MOUTH[1], SYNTH_MOUTH[2]);
    let stretch_y = 1.15;

    let mut v = Vec::new();
    v.push(Vec3::new(0.0, stretch_y, 0.0));
    for i in 1..cfg.rings {
        let theta = std::f64::consts::PI * i as f64 / cfg.rings as f64;
        for j in 0..cfg.segments {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / cfg.segments as f64;
            v.push(Vec3::new(theta.sin() * phi.sin(), stretch_y * theta.cos(), theta.sin() * phi.cos()));
        }
    }
    v.push(Vec3::new(0.0, -stretch_y, 0.0));
    let bottom = v.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * cfg.segments + (j % cfg.segments);

    let mut tris = Vec::new();
    for j in 0..cfg.segments {
        tris.push([0, ring(1, j + 1), ring(1, j)]);
    }
    for i in 1..cfg.rings - 1 {
        for j in 0..cfg.segments {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            tris.push([a, b, c]);
            tris.push([b, d, c]);
        }
    }
    for j in 0..cfg.segments {
        tris.push([bottom, ring(cfg.rings - 1, j), ring(cfg.rings - 1, j + 1)]);
    }

    let centroid = |t: &[usize; 3], v: &[Vec3]| (v[t[0]] + v[t[1]] + v[t[2]]) / 3.0;
    let mut cats: Vec<u32> = tris
        .iter()
        .map(|t| {
            let c = centroid(t, &v);
            if (c - mouth).norm() < 0.36 {
                category::LIPS
            } else if c.z > 0.25 {
                category::FACE
            } else {
                category::OTHER
            }
        })
        .collect();

    // Teeth quad just behind the lips.
    let teeth_base = v.len();
    v.push(Vec3::new(-0.16, mouth.y + 0.05, mouth.z - 0.12));
    v.push(Vec3::new(0.16, mouth.y + 0.05, mouth.z - 0.12));
    v.push(Vec3::new(-0.16, mouth.y - 0.07, mouth.z - 0.12));
    v.push(Vec3::new(0.16, mouth.y - 0.07, mouth.z - 0.12));
    tris.push([teeth_base, teeth_base + 2, teeth_base + 1]);
    tris.push([teeth_base + 1, teeth_base + 2, teeth_base + 3]);
    cats.push(category::TEETH);
    cats.push(category::TEETH);

    for p in v.iter_mut() {
        *p = p.map(f32_round);
    }
    let nv = v.len();

    // Lip vertices split into upper / lower halves feed the two teeth rows.
    let mut lips: Vec<usize> = tris
        .iter()
        .zip(&cats)
        .filter(|(_, &c)| c == category::LIPS)
        .flat_map(|(t, _)| t.iter().copied())
        .collect();
    lips.sort_unstable();
    lips.dedup();
    let upper: Vec<usize> = lips.iter().copied().filter(|&i| v[i].y >= mouth.y).collect();
    let lower: Vec<usize> = lips.iter().copied().filter(|&i| v[i].y < mouth.y).collect();
    let mut groups = Vec::new();
    if !upper.is_empty() {
        groups.push(AttachmentGroup {
            attached: vec![teeth_base, teeth_base + 1],
            sources: upper,
        });
    }
    if !lower.is_empty() {
        groups.push(AttachmentGroup {
            attached: vec![teeth_base + 2, teeth_base + 3],
            sources: lower,
        });
    }

    // Joints: neck (root) and jaw.
    let joints = JointTemplate {
        rest: vec![Vec3::new(0.0, -1.1, -0.1), Vec3::new(0.0, -0.3, -0.3)],
        parents: vec![None, Some(0)],
    };
    let mut skin = Vec::with_capacity(nv * 2);
    for (i, p) in v.iter().enumerate() {
        let jaw = if i >= teeth_base {
            0.0
        } else {
            f32_round(smoothstep(-0.3, -0.6, p.y) * smoothstep(-0.1, 0.3, p.z))
        };
        skin.push(f32_round(1.0 - jaw));
        skin.push(jaw);
    }

    let mut basis = Vec::new();
    let head_only = |i: usize| i < teeth_base;
    // Shape: anisotropic scalings of the whole head and a jaw-width term.
    for k in 0..cfg.n_shape {
        let field: Vec<Vec3> = v
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if !head_only(i) {
                    return Vec3::zeros();
                }
                match k % 4 {
                    0 => Vec3::new(0.1 * p.x, 0.0, 0.0),
                    1 => Vec3::new(0.0, 0.1 * p.y, 0.0),
                    2 => Vec3::new(0.0, 0.0, 0.1 * p.z),
                    _ => Vec3::new(0.1 * p.x * smoothstep(0.0, -0.8, p.y), 0.0, 0.0),
                }
            })
            .collect();
        basis.push(field);
    }
    // Expression: mouth opening, smile, then localized random bumps.
    for k in 0..cfg.n_expr {
        let field: Vec<Vec3> = match k {
            0 => v
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if !head_only(i) {
                        return Vec3::zeros();
                    }
                    let dir = if p.y < mouth.y { -0.16 } else { 0.06 };
                    Vec3::new(0.0, dir * bump(p, &mouth, 0.25), 0.0)
                })
                .collect(),
            1 => v
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if !head_only(i) {
                        return Vec3::zeros();
                    }
                    let side = p.x.signum() * smoothstep(0.0, 0.25, p.x.abs());
                    Vec3::new(0.08 * side, 0.05, 0.0) * bump(p, &mouth, 0.3)
                })
                .collect(),
            _ => {
                let phi: f64 = rng.random_range(-1.0..1.0);
                let theta: f64 = rng.random_range(1.0..2.2);
                let c = Vec3::new(theta.sin() * phi.sin(), stretch_y * theta.cos(), theta.sin() * phi.cos());
                let d = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
                    * 0.1;
                v.iter()
                    .enumerate()
                    .map(|(i, p)| if head_only(i) { d * bump(p, &c, 0.35) } else { Vec3::zeros() })
                    .collect()
            }
        };
        basis.push(field);
    }
    if cfg.pose_correctives {
        for k in 0..3 * joints.len() {
            let axis = k % 3;
            basis.push(
                v.iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let mut o = Vec3::zeros();
                        if head_only(i) {
                            o[axis] = 0.02 * bump(p, &mouth, 0.4);
                        }
                        o
                    })
                    .collect(),
            );
        }
    }
    for field in basis.iter_mut() {
        for o in field.iter_mut() {
            *o = o.map(f32_round);
        }
    }

    let model = HeadModel {
        v_base: v,
        triangles: tris,
        n_shape: cfg.n_shape,
        n_expr: cfg.n_expr,
        pose_correctives: cfg.pose_correctives,
        bs_basis: basis,
        skin_weights: skin,
        joints: JointTemplate {
            rest: joints.rest.iter().map(|r| r.map(f32_round)).collect(),
            parents: joints.parents,
        },
        triangle_category: cats,
        attachment_groups: groups,
    };
    debug_assert!(model.validate().is_ok());
    model
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> HeadModel {
        synthetic_head(&SyntheticHeadConfig::default())
    }

    fn unit(dims: ParamDims, k: usize) -> MotionParams {
        let mut flat = vec![0.0; dims.total()];
        flat[k] = 1.0;
        MotionParams::from_flat(dims, &flat).unwrap()
    }

    #[test]
    fn synthetic_head_is_valid() {
        let m = model();
        m.validate().unwrap();
        assert_eq!(m.n_joints(), 2);
        assert_eq!(m.n_expr, 10);
        assert_eq!(m.attachment_groups.len(), 2);
        assert!(m.triangle_category.contains(&category::TEETH));
    }

    #[test]
    fn zero_params_give_zero_offsets() {
        let m = model();
        let off = blend_shapes(&MotionParams::zeros(m.param_dims()), &m).unwrap();
        assert!(off.iter().all(|o| *o == Vec3::zeros()));
    }

    #[test]
    fn unit_param_extracts_basis_column() {
        let m = model();
        let dims = m.param_dims();
        for k in 0..m.n_shape + m.n_expr {
            let off = blend_shapes(&unit(dims, k), &m).unwrap();
            assert_eq!(off, m.bs_basis[k]);
        }
    }

    #[test]
    fn blend_shapes_rejects_wrong_dimension() {
        let m = model();
        let mut p = MotionParams::zeros(m.param_dims());
        p.epsilon.pop();
        assert!(matches!(blend_shapes(&p, &m), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_pose_gives_identity_transforms() {
        let m = model();
        let t = joint_transforms(&vec![0.0; 6], &m).unwrap();
        assert!(t.iter().all(|t| t.is_identity()));
    }

    #[test]
    fn root_quarter_turn_rotates_offsets() {
        let mut m = model();
        m.joints = JointTemplate {
            rest: vec![Vec3::new(1.0, 2.0, 3.0)],
            parents: vec![None],
        };
        m.skin_weights = vec![1.0; m.n_vertices()];
        let t = joint_transforms(&[0.0, 0.0, std::f64::consts::FRAC_PI_2], &m).unwrap();
        let c = m.joints.rest[0];
        let moved = t[0].apply(&(c + Vec3::x()));
        assert!((moved - (c + Vec3::y())).norm() < 1e-12);
    }

    #[test]
    fn child_rotation_leaves_root_identity() {
        let m = model();
        let t = joint_transforms(&[0.0, 0.0, 0.0, 0.3, 0.0, 0.0], &m).unwrap();
        assert!(t[0].is_identity());
        assert!(!t[1].is_identity());
    }

    #[test]
    fn lbs_cases() {
        let verts = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 2.0)];
        let id = RigidTransform::identity();
        let shift = RigidTransform {
            rot: Mat3::identity(),
            trans: Vec3::new(0.5, -1.0, 2.0),
        };
        let same = lbs(&verts, &[id, id], &[0.3, 0.7, 1.0, 0.0]).unwrap();
        assert_eq!(same, verts);
        let moved = lbs(&verts, &[shift], &[1.0, 1.0]).unwrap();
        for (a, b) in moved.iter().zip(&verts) {
            assert!((a - b - shift.trans).norm() < 1e-12);
        }
        let half = lbs(&verts, &[id, shift], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        for (a, b) in half.iter().zip(&verts) {
            assert!((a - b - shift.trans * 0.5).norm() < 1e-12);
        }
        assert!(lbs(&verts, &[id], &[1.0]).is_err());
    }

    #[test]
    fn zero_params_reproduce_canonical_vertices() {
        let m = model();
        let a = deform(&m, &MotionParams::zeros(m.param_dims())).unwrap();
        let b = deform(&m, &MotionParams::zeros(m.param_dims())).unwrap();
        assert_eq!(a, m.v_base);
        assert_eq!(a, b);
    }

    #[test]
    fn expression_only_skips_skinning() {
        let m = model();
        let mut p = MotionParams::zeros(m.param_dims());
        p.epsilon[2] = 0.7;
        p.epsilon[5] = -0.4;
        let v = deform(&m, &p).unwrap();
        let off = blend_shapes(&p, &m).unwrap();
        let lip_src: std::collections::BTreeSet<usize> =
            m.attachment_groups.iter().flat_map(|g| g.attached.iter().copied()).collect();
        for i in 0..m.n_vertices() {
            if !lip_src.contains(&i) {
                assert_eq!(v[i], m.v_base[i] + off[i]);
            }
        }
    }

    #[test]
    fn attachment_follows_mean_source_motion() {
        let m = model();
        let g = &m.attachment_groups[0];
        let same = attachment_sync(&m, &m.v_base).unwrap();
        assert_eq!(same, m.v_base);

        let d = Vec3::new(0.01, -0.02, 0.03);
        let mut v = m.v_base.clone();
        for &s in &g.sources {
            v[s] += d;
        }
        let out = attachment_sync(&m, &v).unwrap();
        for &a in &g.attached {
            assert!((out[a] - m.v_base[a] - d).norm() < 1e-12);
        }

        let mut two = m.clone();
        two.attachment_groups = vec![AttachmentGroup {
            attached: g.attached.clone(),
            sources: g.sources[..2].to_vec(),
        }];
        let mut v = m.v_base.clone();
        v[g.sources[0]] += d;
        v[g.sources[1]] -= d;
        let out = attachment_sync(&two, &v).unwrap();
        for &a in &g.attached {
            assert!((out[a] - m.v_base[a]).norm() < 1e-12);
        }

        two.attachment_groups[0].sources.clear();
        assert!(matches!(attachment_sync(&two, &v), Err(Error::EmptySources { group: 0 })));
    }

    #[test]
    fn deform_backward_matches_finite_differences() {
        let mut cfg = SyntheticHeadConfig::default();
        cfg.pose_correctives = true;
        let m = synthetic_head(&cfg);
        let dims = m.param_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flat: Vec<f64> = (0..dims.total()).map(|_| rng.random_range(-0.4..0.4)).collect();
        let p = MotionParams::from_flat(dims, &flat).unwrap();
        let gv: Vec<Vec3> = (0..m.n_vertices())
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let loss = |f: &[f64]| -> f64 {
            let v = deform(&m, &MotionParams::from_flat(dims, f).unwrap()).unwrap();
            v.iter().zip(&gv).map(|(a, b)| a.dot(b)).sum()
        };
        let grad = deform_backward(&m, &p, &gv).unwrap();
        let h = 1e-6;
        for k in 0..dims.total() {
            let mut fp = flat.clone();
            fp[k] += h;
            let mut fm = flat.clone();
            fm[k] -= h;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: fd {fd} vs {}", grad[k]);
        }
    }
}
