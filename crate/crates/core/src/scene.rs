//! Posing bound Gaussians for one frame: mesh deformation, triangle frames,
//! latent-pose compensation and the local-to-global map, plus the reverse
//! pass through the whole chain.

use rayon::prelude::*;

use crate::anchoring::{
    compensate, compensate_backward, compute_frame, latent_pose_with_hidden, latent_pose_backward, to_global,
    triangle_basis_backward, Compensated, GaussianSet, TriangleFrame,
};
use crate::error::{Error, Result};
use crate::head_model::{deform, deform_backward, HeadModel, MotionParams};
use crate::math::{Mat3, Vec3};
use crate::renderer::GaussianInstance;

/// World-space Gaussians for one frame, with the intermediates needed to
/// back-propagate through them.
#[derive(Debug, Clone)]
pub struct PosedScene {
    pub instances: Vec<GaussianInstance>,
    pub vertices: Vec<Vec3>,
    pub gamma: Vec<f64>,
    hidden: Vec<f64>,
    frames: Vec<TriangleFrame>,
    comps: Vec<Compensated>,
}

impl PosedScene {
    pub fn compensated(&self) -> &[Compensated] {
        &self.comps
    }
}

pub fn pose_scene(head: &HeadModel, set: &GaussianSet, params: &MotionParams) -> Result<PosedScene> {
    let vertices = deform(head, params)?;
    let (gamma, hidden) = latent_pose_with_hidden(&params.psi, &set.banks.mlp)?;
    let posed: Vec<(GaussianInstance, TriangleFrame, Compensated)> = set
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let tri = head
                .triangles
                .get(g.parent)
                .ok_or_else(|| Error::InvalidArgument(format!("gaussian {i} references missing triangle {}", g.parent)))?;
            let frame = compute_frame(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]], &g.eta(), g.parent)?;
            let comp = compensate(g, i, &gamma, &set.banks)?;
            let world = to_global(&comp.u_local, &comp.r_local, &g.s_local, &frame);
            let inst = GaussianInstance {
                u: world.u,
                r: world.r,
                s: world.s,
                alpha: g.alpha,
                kappa0: comp.kappa0,
                kappa_rest: g.kappa_rest.clone(),
                category: head.triangle_category[g.parent],
            };
            Ok((inst, frame, comp))
        })
        .collect::<Result<_>>()?;
    let mut instances = Vec::with_capacity(posed.len());
    let mut frames = Vec::with_capacity(posed.len());
    let mut comps = Vec::with_capacity(posed.len());
    for (inst, f, c) in posed {
        instances.push(inst);
        frames.push(f);
        comps.push(c);
    }
    Ok(PosedScene {
        instances,
        vertices,
        gamma,
        hidden,
        frames,
        comps,
    })
}

/// Upstream gradient for one posed Gaussian.
#[derive(Debug, Clone, Default)]
pub struct InstanceUpstream {
    pub u: Vec3,
    pub r: Mat3,
    pub s: Vec3,
    pub alpha: f64,
    pub kappa0: Vec3,
    pub kappa_rest: Vec<Vec3>,
    /// Direct gradient on the compensated local position `ū'`.
    pub u_local: Vec3,
    /// Direct gradient on the local scale `s̄`.
    pub s_local: Vec3,
}

/// Gradients for every trainable quantity of a [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SetGrads {
    pub u_local: Vec<Vec3>,
    /// Right-perturbation tangent gradient of `r̄`.
    pub r_tangent: Vec<Vec3>,
    pub s_local: Vec<Vec3>,
    pub alpha: Vec<f64>,
    pub kappa0: Vec<Vec3>,
    pub kappa_rest: Vec<Vec<Vec3>>,
    pub eta_logits: Vec<[f64; 3]>,
    pub w_pos: Vec<f64>,
    pub w_rot: Vec<f64>,
    pub w_color: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl SetGrads {
    pub fn zeros(set: &GaussianSet) -> Self {
        let n = set.len();
        let nb = set.banks.w_pos.len();
        SetGrads {
            u_local: vec![Vec3::zeros(); n],
            r_tangent: vec![Vec3::zeros(); n],
            s_local: vec![Vec3::zeros(); n],
            alpha: vec![0.0; n],
            kappa0: vec![Vec3::zeros(); n],
            kappa_rest: set.gaussians.iter().map(|g| vec![Vec3::zeros(); g.kappa_rest.len()]).collect(),
            eta_logits: vec![[0.0; 3]; n],
            w_pos: vec![0.0; nb],
            w_rot: vec![0.0; nb],
            w_color: vec![0.0; nb],
            mlp: vec![0.0; set.banks.mlp.n_params()],
        }
    }

    /// Largest absolute entry over all groups.
    pub fn max_abs(&self) -> f64 {
        let v3 = |v: &[Vec3]| v.iter().map(|x| x.amax()).fold(0.0, f64::max);
        let fl = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
        [
            v3(&self.u_local),
            v3(&self.r_tangent),
            v3(&self.s_local),
            fl(&self.alpha),
            v3(&self.kappa0),
            self.kappa_rest.iter().map(|k| v3(k)).fold(0.0, f64::max),
            self.eta_logits.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max),
            fl(&self.w_pos),
            fl(&self.w_rot),
            fl(&self.w_color),
            fl(&self.mlp),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

struct LocalGrad {
    u_local: Vec3,
    r_tangent: Vec3,
    s_local: Vec3,
    kappa0: Vec3,
    eta_logits: [f64; 3],
    bank: [Vec<f64>; 3],
    gamma: Vec<f64>,
    verts: [Vec3; 3],
}

/// Back-propagates per-Gaussian upstream gradients through [`pose_scene`].
/// Set gradients are accumulated into `grads`; the gradient of the flat
/// motion parameters (`β ++ ε ++ ψ`) is returned.
pub fn pose_scene_backward(
    head: &HeadModel,
    set: &GaussianSet,
    params: &MotionParams,
    posed: &PosedScene,
    upstream: &[InstanceUpstream],
    grads: &mut SetGrads,
) -> Result<Vec<f64>> {
    Error::check_dim("upstream gradients", set.len(), upstream.len())?;
    let row_len = set.banks.row_len();
    let gamma = &posed.gamma;
    let locals: Vec<LocalGrad> = set
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let up = &upstream[i];
            let f = &posed.frames[i];
            let comp = &posed.comps[i];
            let tri = head.triangles[g.parent];
            let v = [posed.vertices[tri[0]], posed.vertices[tri[1]], posed.vertices[tri[2]]];
            let rt = f.rot.transpose();
            // u = R ū' + P, r = R r̄', s = S s̄
            let g_ul = rt * up.u + up.u_local;
            let g_rl = rt * up.r;
            let g_sl = up.s * f.scale + up.s_local;
            let g_rot = up.u * comp.u_local.transpose() + up.r * comp.r_local.transpose();
            let g_scale = up.s.dot(&g.s_local);
            let eta = g.eta();
            let mut verts = triangle_basis_backward(&v[0], &v[1], &v[2], &g_rot, g_scale);
            let mut g_eta = [0.0; 3];
            for k in 0..3 {
                verts[k] += up.u * eta[k];
                g_eta[k] = up.u.dot(&v[k]);
            }
            let dot: f64 = (0..3).map(|k| eta[k] * g_eta[k]).sum();
            let eta_logits = [eta[0] * (g_eta[0] - dot), eta[1] * (g_eta[1] - dot), eta[2] * (g_eta[2] - dot)];

            let row = set.banks.row(i).expect("bank rows validated by pose_scene");
            let mut bank = [vec![0.0; row_len], vec![0.0; row_len], vec![0.0; row_len]];
            let mut g_gamma = vec![0.0; gamma.len()];
            let [bp, br, bc] = &mut bank;
            let cg = compensate_backward(g, comp, gamma, row, &g_ul, &g_rl, &up.kappa0, bp, br, bc, &mut g_gamma);
            LocalGrad {
                u_local: cg.u_local,
                r_tangent: cg.r_tangent,
                s_local: g_sl,
                kappa0: cg.kappa0,
                eta_logits,
                bank,
                gamma: g_gamma,
                verts,
            }
        })
        .collect();

    let mut g_vertices = vec![Vec3::zeros(); posed.vertices.len()];
    let mut g_gamma = vec![0.0; gamma.len()];
    for (i, lg) in locals.into_iter().enumerate() {
        let up = &upstream[i];
        grads.u_local[i] += lg.u_local;
        grads.r_tangent[i] += lg.r_tangent;
        grads.s_local[i] += lg.s_local;
        grads.alpha[i] += up.alpha;
        grads.kappa0[i] += lg.kappa0;
        for (a, b) in grads.kappa_rest[i].iter_mut().zip(&up.kappa_rest) {
            *a += b;
        }
        for k in 0..3 {
            grads.eta_logits[i][k] += lg.eta_logits[k];
        }
        let off = i * row_len;
        for (dst, src) in [&mut grads.w_pos, &mut grads.w_rot, &mut grads.w_color].into_iter().zip(&lg.bank) {
            for (a, b) in dst[off..off + row_len].iter_mut().zip(src) {
                *a += b;
            }
        }
        for (a, b) in g_gamma.iter_mut().zip(&lg.gamma) {
            *a += b;
        }
        let tri = head.triangles[set.gaussians[i].parent];
        for k in 0..3 {
            g_vertices[tri[k]] += lg.verts[k];
        }
    }
    let g_psi = latent_pose_backward(&params.psi, &set.banks.mlp, &posed.hidden, &g_gamma, &mut grads.mlp);
    let mut g_params = deform_backward(head, params, &g_vertices)?;
    let off = params.beta.len() + params.epsilon.len();
    for (a, b) in g_params[off..].iter_mut().zip(&g_psi) {
        *a += b;
    }
    Ok(g_params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchoring::{perturb_rotation, BoundGaussian, LatentMlp, SpeakerBlendShapes};
    use crate::head_model::{synthetic_head, SyntheticHeadConfig};
    use crate::math::exp_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (HeadModel, GaussianSet, MotionParams) {
        let head = synthetic_head(&SyntheticHeadConfig {
            pose_correctives: true,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let mlp = LatentMlp::random(head.param_dims().pose, 6, 4, &mut rng);
        let mut banks = SpeakerBlendShapes::zeros(mlp, n);
        for w in banks.w_pos.iter_mut().chain(banks.w_rot.iter_mut()).chain(banks.w_color.iter_mut()) {
            *w = rng.random_range(-0.3..0.3);
        }
        let gaussians = (0..n)
            .map(|_| {
                let mut g = BoundGaussian::anchored(rng.random_range(0..head.triangles.len()), 1);
                g.u_local = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                g.r_local = exp_map(&Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
                g.s_local = Vec3::new(rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
                g.kappa0 = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                g.eta_logits = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                g
            })
            .collect();
        let set = GaussianSet {
            sh_degree: 1,
            gaussians,
            banks,
        };
        let mut params = MotionParams::zeros(head.param_dims());
        for x in params.beta.iter_mut().chain(params.epsilon.iter_mut()).chain(params.psi.iter_mut()) {
            *x = rng.random_range(-0.3..0.3);
        }
        (head, set, params)
    }

    /// Scalar test loss: a fixed random linear functional of every posed
    /// attribute, so the upstream gradient is constant.
    struct Probe {
        w: Vec<InstanceUpstream>,
    }

    impl Probe {
        fn new(n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let w = (0..n)
                .map(|_| InstanceUpstream {
                    u: v(),
                    r: Mat3::from_columns(&[v(), v(), v()]),
                    s: v(),
                    alpha: 0.0,
                    kappa0: v(),
                    kappa_rest: vec![],
                    u_local: v(),
                    s_local: v(),
                })
                .collect();
            Probe { w }
        }

        fn eval(&self, head: &HeadModel, set: &GaussianSet, params: &MotionParams) -> f64 {
            let p = pose_scene(head, set, params).unwrap();
            let mut l = 0.0;
            for (i, (inst, w)) in p.instances.iter().zip(&self.w).enumerate() {
                l += inst.u.dot(&w.u) + inst.r.component_mul(&w.r).sum() + inst.s.dot(&w.s) + inst.kappa0.dot(&w.kappa0);
                l += p.comps[i].u_local.dot(&w.u_local) + set.gaussians[i].s_local.dot(&w.s_local);
            }
            l
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (head, set, params) = setup(1);
        let probe = Probe::new(set.len(), 2);
        let posed = pose_scene(&head, &set, &params).unwrap();
        let mut grads = SetGrads::zeros(&set);
        let g_params = pose_scene_backward(&head, &set, &params, &posed, &probe.w, &mut grads).unwrap();
        let h = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{what}: fd {fd} vs analytic {an}");
        };
        let flat = params.to_flat();
        for k in 0..flat.len() {
            let (mut p, mut m) = (flat.clone(), flat.clone());
            p[k] += h;
            m[k] -= h;
            let pp = MotionParams::from_flat(params.dims(), &p).unwrap();
            let pm = MotionParams::from_flat(params.dims(), &m).unwrap();
            let fd = (probe.eval(&head, &set, &pp) - probe.eval(&head, &set, &pm)) / (2.0 * h);
            check(fd, g_params[k], &format!("param {k}"));
        }
        for i in 0..set.len() {
            for c in 0..3 {
                let fd = |f: &dyn Fn(&mut BoundGaussian, f64)| {
                    let (mut sp, mut sm) = (set.clone(), set.clone());
                    f(&mut sp.gaussians[i], h);
                    f(&mut sm.gaussians[i], -h);
                    (probe.eval(&head, &sp, &params) - probe.eval(&head, &sm, &params)) / (2.0 * h)
                };
                check(fd(&|g, d| g.u_local[c] += d), grads.u_local[i][c], "u_local");
                check(fd(&|g, d| g.s_local[c] += d), grads.s_local[i][c], "s_local");
                check(fd(&|g, d| g.kappa0[c] += d), grads.kappa0[i][c], "kappa0");
                check(fd(&|g, d| g.eta_logits[c] += d), grads.eta_logits[i][c], "eta");
                check(
                    fd(&|g, d| {
                        let mut e = Vec3::zeros();
                        e[c] = d;
                        g.r_local = g.r_local * exp_map(&e);
                    }),
                    grads.r_tangent[i][c],
                    "rotation",
                );
            }
        }
        let banks_fd = |k: usize, which: usize| {
            let (mut sp, mut sm) = (set.clone(), set.clone());
            fn bank(s: &mut GaussianSet, which: usize) -> &mut Vec<f64> {
                match which {
                    0 => &mut s.banks.w_pos,
                    1 => &mut s.banks.w_rot,
                    _ => &mut s.banks.w_color,
                }
            }
            bank(&mut sp, which)[k] += h;
            bank(&mut sm, which)[k] -= h;
            (probe.eval(&head, &sp, &params) - probe.eval(&head, &sm, &params)) / (2.0 * h)
        };
        for k in (0..set.banks.w_pos.len()).step_by(5) {
            check(banks_fd(k, 0), grads.w_pos[k], "w_pos");
            check(banks_fd(k, 1), grads.w_rot[k], "w_rot");
            check(banks_fd(k, 2), grads.w_color[k], "w_color");
        }
        let mp = set.banks.mlp.params();
        for k in 0..mp.len() {
            let (mut sp, mut sm) = (set.clone(), set.clone());
            let (mut a, mut b) = (mp.clone(), mp.clone());
            a[k] += h;
            b[k] -= h;
            sp.banks.mlp.set_params(&a).unwrap();
            sm.banks.mlp.set_params(&b).unwrap();
            let fd = (probe.eval(&head, &sp, &params) - probe.eval(&head, &sm, &params)) / (2.0 * h);
            check(fd, grads.mlp[k], "mlp");
        }
        // the tangent update used by the optimizer is the same perturbation
        let r = perturb_rotation(&set.gaussians[0].r_local, &Vec3::new(1e-3, 0.0, 0.0));
        assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn zero_params_use_canonical_mesh() {
        let (head, set, params) = setup(3);
        let p0 = MotionParams::zeros(params.dims());
        let posed = pose_scene(&head, &set, &p0).unwrap();
        assert_eq!(posed.vertices, head.v_base);
        assert_eq!(posed.instances.len(), set.len());
        for (inst, g) in posed.instances.iter().zip(&set.gaussians) {
            assert_eq!(inst.category, head.triangle_category[g.parent]);
        }
    }
}
