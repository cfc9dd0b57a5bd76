//! Fitting a Gaussian set, its blendshape banks and per-frame motion
//! parameters to target frames.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchoring::{densify, perturb_rotation, DensifyMode, GaussianSet};
use crate::error::{Error, Result};
use crate::head_model::{HeadModel, MotionParams};
use crate::math::Vec3;
use crate::objectives::{attr_loss, renderer_total, rgb_loss, seg_loss, ssim, psnr, LossWeights, RendererLosses};
use crate::renderer::{palette_color, render, sh_color, sh_color_backward, Camera, Image, RenderMode, RenderPass, Style};
use crate::scene::{pose_scene, pose_scene_backward, InstanceUpstream, SetGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    /// Applied to `ln s̄`.
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    /// Bank weights and the latent-pose network.
    pub banks: f64,
    pub eta_logits: f64,
    pub flame_params: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 2e-3,
            rotation: 5e-3,
            scale: 1e-2,
            opacity: 2e-2,
            color: 2e-2,
            banks: 2e-3,
            eta_logits: 1e-2,
            flame_params: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Densify every this many iterations; 0 disables density control.
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Mean view-space positional gradient (NDC units) above which a
    /// Gaussian is densified.
    pub grad_threshold: f64,
    /// Largest local scale component separating clone from split.
    pub scale_threshold: f64,
    pub prune_alpha: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            interval: 100,
            start: 500,
            stop: 2500,
            grad_threshold: 2e-4,
            scale_threshold: 0.3,
            prune_alpha: 0.005,
            max_gaussians: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    /// Every learning rate decays exponentially to this fraction of its
    /// initial value by the last iteration.
    pub lr_final_fraction: f64,
    pub densify: DensifyConfig,
    pub train_flame: bool,
    pub train_banks: bool,
    /// Set from the run configuration's top-level `weights` table.
    #[serde(skip)]
    pub weights: LossWeights,
    /// Set from the run configuration's top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
    /// Set from the run configuration's top-level `style` table.
    #[serde(skip)]
    pub style: Style,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 3000,
            batch_size: 1,
            lr: LearningRates::default(),
            lr_final_fraction: 0.1,
            densify: DensifyConfig::default(),
            weights: LossWeights::default(),
            train_flame: true,
            train_banks: true,
            seed: 0,
            style: Style::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let lr = &self.lr;
        let rates = [
            lr.position,
            lr.rotation,
            lr.scale,
            lr.opacity,
            lr.color,
            lr.banks,
            lr.eta_logits,
            lr.flame_params,
        ];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::Config("lr_final_fraction must lie in (0, 1]".into()));
        }
        let d = &self.densify;
        if !(d.grad_threshold > 0.0 && d.scale_threshold > 0.0 && d.prune_alpha > 0.0) {
            return Err(Error::Config("densify thresholds must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One supervised frame.
#[derive(Debug, Clone)]
pub struct FitFrame {
    pub params: MotionParams,
    pub target: Image,
    pub semantic: Image,
}

/// Everything a single frame contributes to the gradient.
#[derive(Debug, Clone)]
pub struct FrameGradients {
    pub losses: RendererLosses,
    /// Gradient of the flat motion parameters of this frame.
    pub params: Vec<f64>,
    /// Norm of the view-space positional gradient per Gaussian (NDC units).
    pub view_grad: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Renderer objective of one frame. Set gradients are accumulated into
/// `grads`.
#[allow(clippy::too_many_arguments)]
pub fn compute_gradients(
    head: &HeadModel,
    set: &GaussianSet,
    params: &MotionParams,
    frame: &FitFrame,
    camera: &Camera,
    weights: &LossWeights,
    style: &Style,
    grads: &mut SetGrads,
) -> Result<FrameGradients> {
    let posed = pose_scene(head, set, params)?;
    let center = camera.center();
    let colors: Vec<[f64; 6]> = posed
        .instances
        .iter()
        .map(|g| {
            let c = sh_color(&g.kappa0, &g.kappa_rest, &g.u, &center);
            let p = palette_color(&style.palette, g.category)?;
            Ok([c.x, c.y, c.z, p[0], p[1], p[2]])
        })
        .collect::<Result<_>>()?;
    let (b, sb) = (&style.background, &style.semantic_background);
    let bg = [b[0], b[1], b[2], sb[0], sb[1], sb[2]];
    let pass = RenderPass::forward(&posed.instances, camera, colors, bg)?;
    let (rgb, sem) = pass.image().split6();
    let (l_rgb, g_rgb) = rgb_loss(&rgb, &frame.target, weights, None)?;
    let (l_seg, g_seg) = seg_loss(&sem, &frame.semantic, weights)?;
    let u_comp: Vec<Vec3> = posed.compensated().iter().map(|c| c.u_local).collect();
    let s_local: Vec<Vec3> = set.gaussians.iter().map(|g| g.s_local).collect();
    let attr = attr_loss(&u_comp, &s_local, weights)?;
    let losses = RendererLosses {
        rgb: l_rgb,
        attr: attr.loss,
        seg: l_seg,
    };
    if !renderer_total(&losses).is_finite() {
        return Err(Error::NonFinite("renderer loss".into()));
    }
    let grad_pixels: Vec<[f64; 6]> = (0..rgb.len())
        .map(|p| {
            let (a, b) = (&g_rgb[3 * p..3 * p + 3], &g_seg[3 * p..3 * p + 3]);
            [a[0], a[1], a[2], b[0], b[1], b[2]]
        })
        .collect();
    let ig = pass.backward(&posed.instances, camera, &grad_pixels)?;
    let (hw, hh) = (camera.width as f64 / 2.0, camera.height as f64 / 2.0);
    let mut view_grad = Vec::with_capacity(ig.len());
    let mut visible = Vec::with_capacity(ig.len());
    let upstream: Vec<InstanceUpstream> = posed
        .instances
        .iter()
        .zip(&ig)
        .enumerate()
        .map(|(i, (inst, g))| {
            let g_c = Vec3::new(g.color[0], g.color[1], g.color[2]);
            let sh = sh_color_backward(&inst.kappa0, &inst.kappa_rest, &inst.u, &center, &g_c);
            view_grad.push((g.mean2d[0] * hw).hypot(g.mean2d[1] * hh));
            visible.push(pass.prepared.caches[i].is_some());
            InstanceUpstream {
                u: g.u + sh.u,
                r: g.r,
                s: g.s,
                alpha: g.alpha,
                kappa0: sh.kappa0,
                kappa_rest: sh.kappa_rest,
                u_local: attr.u_local[i],
                s_local: attr.s_local[i],
            }
        })
        .collect();
    let g_params = pose_scene_backward(head, set, params, &posed, &upstream, grads)?;
    Ok(FrameGradients {
        losses,
        params: g_params,
        view_grad,
        visible,
    })
}

/// First and second moment estimates of one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn grow(&mut self, n: usize) {
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }

    fn retain(&mut self, keep: &[bool], stride: usize) {
        for buf in [&mut self.m, &mut self.v] {
            let old = std::mem::take(buf);
            *buf = old
                .chunks(stride.max(1))
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect();
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy)]
struct AdamStep {
    lr: f64,
    c1: f64,
    c2: f64,
}

impl AdamStep {
    fn new(lr: f64, t: u64) -> Self {
        AdamStep {
            lr,
            c1: 1.0 - ADAM_B1.powi(t as i32),
            c2: 1.0 - ADAM_B2.powi(t as i32),
        }
    }

    /// Updates moment slot `i` with gradient `g` and returns the parameter
    /// increment.
    #[inline]
    fn delta(&self, mo: &mut Moments, i: usize, g: f64) -> f64 {
        let m = ADAM_B1 * mo.m[i] + (1.0 - ADAM_B1) * g;
        let v = ADAM_B2 * mo.v[i] + (1.0 - ADAM_B2) * g * g;
        mo.m[i] = m;
        mo.v[i] = v;
        if m == 0.0 {
            return 0.0;
        }
        -self.lr * (m / self.c1) / ((v / self.c2).sqrt() + ADAM_EPS)
    }
}

/// Optimizer moments for every trainable group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub position: Moments,
    pub rotation: Moments,
    pub scale: Moments,
    pub opacity: Moments,
    pub kappa0: Moments,
    pub kappa_rest: Moments,
    pub eta_logits: Moments,
    pub w_pos: Moments,
    pub w_rot: Moments,
    pub w_color: Moments,
    pub mlp: Moments,
    pub flame: Moments,
}

impl OptimizerState {
    pub fn new(set: &GaussianSet, frames: &[MotionParams]) -> Self {
        let n = set.len();
        let rest = 3 * crate::anchoring::sh_rest_len(set.sh_degree);
        let row = set.banks.row_len();
        OptimizerState {
            step: 0,
            position: Moments::zeros(3 * n),
            rotation: Moments::zeros(3 * n),
            scale: Moments::zeros(3 * n),
            opacity: Moments::zeros(n),
            kappa0: Moments::zeros(3 * n),
            kappa_rest: Moments::zeros(rest * n),
            eta_logits: Moments::zeros(3 * n),
            w_pos: Moments::zeros(row * n),
            w_rot: Moments::zeros(row * n),
            w_color: Moments::zeros(row * n),
            mlp: Moments::zeros(set.banks.mlp.n_params()),
            flame: Moments::zeros(frames.iter().map(|p| p.dims().total()).sum()),
        }
    }

    fn per_gaussian(&mut self, set: &GaussianSet) -> [(&mut Moments, usize); 10] {
        let rest = 3 * crate::anchoring::sh_rest_len(set.sh_degree);
        let row = set.banks.row_len();
        [
            (&mut self.position, 3),
            (&mut self.rotation, 3),
            (&mut self.scale, 3),
            (&mut self.opacity, 1),
            (&mut self.kappa0, 3),
            (&mut self.kappa_rest, rest),
            (&mut self.eta_logits, 3),
            (&mut self.w_pos, row),
            (&mut self.w_rot, row),
            (&mut self.w_color, row),
        ]
    }

    /// Zero moments for Gaussians appended to `set`.
    fn grow(&mut self, set: &GaussianSet) {
        let n = set.len();
        for (mo, stride) in self.per_gaussian(set) {
            mo.grow(n * stride);
        }
    }

    fn retain(&mut self, set: &GaussianSet, keep: &[bool]) {
        for (mo, stride) in self.per_gaussian(set) {
            mo.retain(keep, stride);
        }
    }
}

/// Mutable fitting state: the model, per-frame parameters and optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub set: GaussianSet,
    pub frame_params: Vec<MotionParams>,
    pub optimizer: OptimizerState,
    pub iteration: usize,
}

impl FitState {
    pub fn new(set: GaussianSet, frame_params: Vec<MotionParams>) -> Self {
        let optimizer = OptimizerState::new(&set, &frame_params);
        FitState {
            set,
            frame_params,
            optimizer,
            iteration: 0,
        }
    }
}

/// Which groups an update may touch.
#[derive(Debug, Clone, Copy)]
pub struct TrainFlags {
    pub flame: bool,
    pub banks: bool,
}

/// One optimizer update. `flame_grads[f]` is the gradient of frame `f`'s
/// flat parameters (empty when the frame was not in the batch).
pub fn step(state: &mut FitState, grads: &SetGrads, flame_grads: &[Vec<f64>], lr: &LearningRates, scale: f64, flags: TrainFlags) {
    let opt = &mut state.optimizer;
    opt.step += 1;
    let t = opt.step;
    let set = &mut state.set;
    let s = |r: f64| AdamStep::new(r * scale, t);
    let (sp, sr, ss, so, sc, se, sb) = (
        s(lr.position),
        s(lr.rotation),
        s(lr.scale),
        s(lr.opacity),
        s(lr.color),
        s(lr.eta_logits),
        s(lr.banks),
    );
    for (i, g) in set.gaussians.iter_mut().enumerate() {
        for c in 0..3 {
            g.u_local[c] += sp.delta(&mut opt.position, 3 * i + c, grads.u_local[i][c]);
            g.kappa0[c] += sc.delta(&mut opt.kappa0, 3 * i + c, grads.kappa0[i][c]);
            g.eta_logits[c] += se.delta(&mut opt.eta_logits, 3 * i + c, grads.eta_logits[i][c]);
        }
        let rest = g.kappa_rest.len();
        for (k, kr) in g.kappa_rest.iter_mut().enumerate() {
            for c in 0..3 {
                kr[c] += sc.delta(&mut opt.kappa_rest, 3 * (i * rest + k) + c, grads.kappa_rest[i][k][c]);
            }
        }
        let mut dr = Vec3::zeros();
        let mut ds = Vec3::zeros();
        for c in 0..3 {
            dr[c] = sr.delta(&mut opt.rotation, 3 * i + c, grads.r_tangent[i][c]);
            // chain rule through s̄ = exp(ln s̄)
            ds[c] = ss.delta(&mut opt.scale, 3 * i + c, grads.s_local[i][c] * g.s_local[c]);
        }
        if dr != Vec3::zeros() {
            g.r_local = perturb_rotation(&g.r_local, &dr);
        }
        for c in 0..3 {
            if ds[c] != 0.0 {
                g.s_local[c] *= ds[c].exp();
            }
        }
        let da = so.delta(&mut opt.opacity, i, grads.alpha[i]);
        if da != 0.0 {
            g.alpha = (g.alpha + da).clamp(0.0, 1.0);
        }
    }
    if flags.banks {
        let banks = &mut set.banks;
        for (w, (g, mo)) in [
            (&mut banks.w_pos, (&grads.w_pos, &mut opt.w_pos)),
            (&mut banks.w_rot, (&grads.w_rot, &mut opt.w_rot)),
            (&mut banks.w_color, (&grads.w_color, &mut opt.w_color)),
        ] {
            for k in 0..w.len() {
                w[k] += sb.delta(mo, k, g[k]);
            }
        }
        let mut p = banks.mlp.params();
        for k in 0..p.len() {
            p[k] += sb.delta(&mut opt.mlp, k, grads.mlp[k]);
        }
        banks.mlp.set_params(&p).expect("parameter count unchanged");
    }
    if flags.flame {
        let sf = s(lr.flame_params);
        let mut off = 0;
        for (params, g) in state.frame_params.iter_mut().zip(flame_grads) {
            let n = params.dims().total();
            if !g.is_empty() {
                let mut flat = params.to_flat();
                for k in 0..n {
                    flat[k] += sf.delta(&mut opt.flame, off + k, g[k]);
                }
                *params = MotionParams::from_flat(params.dims(), &flat).expect("dims unchanged");
            }
            off += n;
        }
    }
}

/// Per-Gaussian accumulators of view-space positional gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, view_grad: &[f64], visible: &[bool]) {
        for i in 0..self.grad_sum.len() {
            if visible[i] {
                self.grad_sum[i] += view_grad[i];
                self.count[i] += 1;
            }
        }
    }
}

/// Outcome counts of a density-control pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large high-gradient Gaussians, then prunes
/// nearly transparent ones and split parents. Never empties the set.
pub fn densify_and_prune(
    state: &mut FitState,
    stats: &DensifyStats,
    config: &DensifyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DensifyOutcome> {
    let n = state.set.len();
    Error::check_dim("densify statistics", n, stats.grad_sum.len())?;
    let mut out = DensifyOutcome::default();
    let mut remove = vec![false; n];
    for i in 0..n {
        if stats.count[i] == 0 || state.set.len() + 2 > config.max_gaussians {
            continue;
        }
        if stats.grad_sum[i] / stats.count[i] as f64 <= config.grad_threshold {
            continue;
        }
        if state.set.gaussians[i].s_local.max() <= config.scale_threshold {
            densify(&mut state.set, i, DensifyMode::Clone, rng)?;
            out.cloned += 1;
        } else {
            densify(&mut state.set, i, DensifyMode::Split, rng)?;
            remove[i] = true;
            out.split += 1;
        }
    }
    state.optimizer.grow(&state.set);
    let mut keep: Vec<bool> = state
        .set
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| !(i < n && remove[i]) && g.alpha >= config.prune_alpha)
        .collect();
    if !keep.iter().any(|k| *k) {
        let best = (0..keep.len())
            .max_by(|&a, &b| state.set.gaussians[a].alpha.total_cmp(&state.set.gaussians[b].alpha))
            .expect("set is never empty");
        keep[best] = true;
    }
    out.pruned = keep.iter().filter(|k| !**k).count() - out.split;
    state.optimizer.retain(&state.set, &keep);
    state.set.retain(&keep);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub rgb: f64,
    pub attr: f64,
    pub seg: f64,
    pub gaussians: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: Vec<IterationRecord>,
    pub densify: Vec<DensifyOutcome>,
    pub heldout: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean renderer loss over all training frames at the end of the fit.
    pub final_loss: f64,
    pub final_gaussians: usize,
    /// Set when the fit stopped on a non-finite loss.
    pub diverged: bool,
    /// Wall-clock seconds; excluded from determinism comparisons.
    #[serde(skip)]
    pub wall_clock: f64,
}

/// Training and held-out frames sharing one camera.
#[derive(Debug, Clone)]
pub struct FitData {
    pub camera: Camera,
    pub train: Vec<FitFrame>,
    pub heldout: Vec<FitFrame>,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mean renderer loss over `frames` using the state's frame parameters.
pub fn evaluate_loss(head: &HeadModel, state: &FitState, data: &FitData, config: &FitConfig) -> Result<f64> {
    let mut total = 0.0;
    for (f, frame) in data.train.iter().enumerate() {
        let mut scratch = SetGrads::zeros(&state.set);
        let fg = compute_gradients(
            head,
            &state.set,
            &state.frame_params[f],
            frame,
            &data.camera,
            &config.weights,
            &config.style,
            &mut scratch,
        )?;
        total += renderer_total(&fg.losses);
    }
    Ok(total / data.train.len().max(1) as f64)
}

/// PSNR/SSIM of the colour render against every held-out frame.
pub fn evaluate_heldout(head: &HeadModel, set: &GaussianSet, data: &FitData, style: &Style) -> Result<Vec<FrameMetrics>> {
    data.heldout
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let posed = pose_scene(head, set, &frame.params)?;
            let img = render(&posed.instances, &data.camera, RenderMode::Color, style)?;
            Ok(FrameMetrics {
                frame: i,
                psnr: psnr(&img, &frame.target)?,
                ssim: ssim(&img, &frame.target)?,
            })
        })
        .collect()
}

/// Runs the optimization from `state.iteration` up to `config.iterations`.
pub fn fit(
    head: &HeadModel,
    mut state: FitState,
    data: &FitData,
    config: &FitConfig,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<(FitState, FitReport)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("fitting needs at least one training frame".into()));
    }
    Error::check_dim("frame parameters", data.train.len(), state.frame_params.len())?;
    let started = Instant::now();
    let flags = TrainFlags {
        flame: config.train_flame,
        banks: config.train_banks,
    };
    let mut report = FitReport {
        iterations: Vec::new(),
        densify: Vec::new(),
        heldout: Vec::new(),
        mean_psnr: 0.0,
        mean_ssim: 0.0,
        final_loss: 0.0,
        final_gaussians: 0,
        diverged: false,
        wall_clock: 0.0,
    };
    let mut stats = DensifyStats::new(state.set.len());
    // State before the latest step, restored if that step diverges.
    let mut previous: Option<FitState> = None;
    let dc = &config.densify;
    let total_iters = config.iterations.max(1) as f64;
    while state.iteration < config.iterations {
        let it = state.iteration;
        let mut rng = iteration_rng(config.seed, it);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let batch = &order[..config.batch_size.min(order.len())];
        let mut grads = SetGrads::zeros(&state.set);
        let mut flame_grads = vec![Vec::new(); data.train.len()];
        let mut losses = RendererLosses::default();
        let inv = 1.0 / batch.len() as f64;
        for &f in batch {
            let fg = match compute_gradients(
                head,
                &state.set,
                &state.frame_params[f],
                &data.train[f],
                &data.camera,
                &config.weights,
                &config.style,
                &mut grads,
            ) {
                Ok(fg) => fg,
                Err(Error::NonFinite(_)) => {
                    report.diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            losses.rgb += fg.losses.rgb * inv;
            losses.attr += fg.losses.attr * inv;
            losses.seg += fg.losses.seg * inv;
            stats.add(&fg.view_grad, &fg.visible);
            flame_grads[f] = fg.params.iter().map(|g| g * inv).collect();
        }
        if report.diverged {
            if let Some(p) = previous.take() {
                state = p;
            }
            break;
        }
        scale_grads(&mut grads, inv);
        let lr_scale = config.lr_final_fraction.powf(it as f64 / total_iters);
        previous = Some(state.clone());
        step(&mut state, &grads, &flame_grads, &config.lr, lr_scale, flags);
        state.iteration += 1;
        let rec = IterationRecord {
            iteration: it,
            total: renderer_total(&losses),
            rgb: losses.rgb,
            attr: losses.attr,
            seg: losses.seg,
            gaussians: state.set.len(),
        };
        on_iteration(&rec);
        report.iterations.push(rec);
        let window = dc.interval > 0
            && state.iteration >= dc.start
            && state.iteration <= dc.stop
            && state.iteration + dc.interval <= config.iterations;
        if window && state.iteration % dc.interval == 0 {
            let mut drng = iteration_rng(config.seed ^ 0xD3E5, it);
            let outcome = densify_and_prune(&mut state, &stats, dc, &mut drng)?;
            report.densify.push(outcome);
            stats = DensifyStats::new(state.set.len());
        }
    }
    let heldout = evaluate_loss(head, &state, data, config)
        .and_then(|loss| Ok((loss, evaluate_heldout(head, &state.set, data, &config.style)?)));
    match heldout {
        Ok((loss, metrics)) => {
            report.final_loss = loss;
            report.heldout = metrics;
        }
        Err(_) if report.diverged => report.final_loss = f64::NAN,
        Err(e) => return Err(e),
    }
    if !report.heldout.is_empty() {
        let n = report.heldout.len() as f64;
        report.mean_psnr = report.heldout.iter().map(|m| m.psnr).sum::<f64>() / n;
        report.mean_ssim = report.heldout.iter().map(|m| m.ssim).sum::<f64>() / n;
    }
    report.final_gaussians = state.set.len();
    report.wall_clock = started.elapsed().as_secs_f64();
    Ok((state, report))
}

fn scale_grads(g: &mut SetGrads, s: f64) {
    if s == 1.0 {
        return;
    }
    for v in g
        .u_local
        .iter_mut()
        .chain(g.r_tangent.iter_mut())
        .chain(g.s_local.iter_mut())
        .chain(g.kappa0.iter_mut())
        .chain(g.kappa_rest.iter_mut().flatten())
    {
        *v *= s;
    }
    for v in g
        .alpha
        .iter_mut()
        .chain(g.eta_logits.iter_mut().flatten())
        .chain(g.w_pos.iter_mut())
        .chain(g.w_rot.iter_mut())
        .chain(g.w_color.iter_mut())
        .chain(g.mlp.iter_mut())
    {
        *v *= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchoring::{BoundGaussian, LatentMlp, SpeakerBlendShapes};
    use crate::head_model::{synthetic_head, SyntheticHeadConfig};

    fn tiny_set(head: &HeadModel, n: usize) -> GaussianSet {
        let mlp = LatentMlp::zeros(head.param_dims().pose, 4, 2);
        let gaussians = (0..n)
            .map(|i| {
                let mut g = BoundGaussian::anchored((i * 37) % head.triangles.len(), 0);
                g.s_local = Vec3::new(0.4, 0.4, 0.1);
                g.alpha = 0.8;
                g
            })
            .collect();
        GaussianSet {
            sh_degree: 0,
            gaussians,
            banks: SpeakerBlendShapes::zeros(mlp, n),
        }
    }

    #[test]
    fn zero_gradients_leave_state_unchanged() {
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let set = tiny_set(&head, 5);
        let mut state = FitState::new(set, vec![MotionParams::zeros(head.param_dims())]);
        let before = state.clone();
        let grads = SetGrads::zeros(&state.set);
        let flags = TrainFlags { flame: true, banks: true };
        step(&mut state, &grads, &[vec![0.0; head.param_dims().total()]], &LearningRates::default(), 1.0, flags);
        assert_eq!(state.set, before.set);
        assert_eq!(state.frame_params, before.frame_params);
    }

    #[test]
    fn positive_opacity_gradient_lowers_opacity() {
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let mut state = FitState::new(tiny_set(&head, 2), vec![]);
        let mut grads = SetGrads::zeros(&state.set);
        grads.alpha[1] = 0.5;
        step(&mut state, &grads, &[], &LearningRates::default(), 1.0, TrainFlags { flame: false, banks: false });
        assert!(state.set.gaussians[1].alpha < 0.8);
        assert_eq!(state.set.gaussians[0].alpha, 0.8);
    }

    #[test]
    fn single_gaussian_color_fit_converges() {
        // a flat, opaque Gaussian filling the view; fit its colour only
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let mut set = tiny_set(&head, 1);
        set.gaussians[0].s_local = Vec3::new(20.0, 20.0, 20.0);
        set.gaussians[0].alpha = 1.0;
        let cam = Camera::looking_at_origin(16, 16, 4.0);
        let params = MotionParams::zeros(head.param_dims());
        // SH degree 0: colour = 0.5 + C0·κ0
        let target_rgb = Vec3::new(0.2, 0.7, 0.45);
        let mut truth = set.clone();
        truth.gaussians[0].kappa0 = (target_rgb - Vec3::repeat(0.5)) / 0.282_094_791_773_878_14;
        let posed = pose_scene(&head, &truth, &params).unwrap();
        let target = render(&posed.instances, &cam, RenderMode::Color, &Style::default()).unwrap();
        let semantic = render(&posed.instances, &cam, RenderMode::Semantic, &Style::default()).unwrap();
        let frame = FitFrame { params: params.clone(), target, semantic };
        let weights = LossWeights {
            lambda_1: 1.0,
            lambda_3: 0.0,
            lambda_s: 0.0,
            ..Default::default()
        };
        let mut state = FitState::new(set, vec![params.clone()]);
        let lr = LearningRates { color: 0.05, ..Default::default() };
        for k in 0..100 {
            let mut grads = SetGrads::zeros(&state.set);
            compute_gradients(&head, &state.set, &params, &frame, &cam, &weights, &Style::default(), &mut grads).unwrap();
            // colour only
            let mut only = SetGrads::zeros(&state.set);
            only.kappa0 = grads.kappa0.clone();
            let decay = 0.01f64.powf(k as f64 / 100.0);
            step(&mut state, &only, &[], &lr, decay, TrainFlags { flame: false, banks: false });
        }
        let posed = pose_scene(&head, &state.set, &params).unwrap();
        let img = render(&posed.instances, &cam, RenderMode::Color, &Style::default()).unwrap();
        for c in 0..3 {
            assert!((img.pixel(8, 8)[c] - frame.target.pixel(8, 8)[c]).abs() < 1e-3, "{:?}", img.pixel(8, 8));
        }
    }

    #[test]
    fn density_control_bookkeeping() {
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let mut set = tiny_set(&head, 4);
        set.gaussians[1].alpha = 0.0;
        set.gaussians[2].s_local = Vec3::new(0.9, 0.5, 0.1);
        set.gaussians[3].s_local = Vec3::new(0.1, 0.1, 0.1);
        let parent2 = set.gaussians[2].clone();
        let mut state = FitState::new(set, vec![]);
        let cfg = DensifyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let quiet = DensifyStats { grad_sum: vec![0.0; 4], count: vec![1; 4] };
        let mut s2 = state.clone();
        s2.set.gaussians[1].alpha = 0.5;
        let before = s2.clone();
        densify_and_prune(&mut s2, &quiet, &cfg, &mut rng).unwrap();
        assert_eq!(s2, before);

        let stats = DensifyStats {
            grad_sum: vec![0.0, 0.0, 1.0, 1.0],
            count: vec![1; 4],
        };
        let out = densify_and_prune(&mut state, &stats, &cfg, &mut rng).unwrap();
        assert_eq!(out, DensifyOutcome { cloned: 1, split: 1, pruned: 1 });
        // kept: 0, 3, clone of 3, two children of 2
        assert_eq!(state.set.len(), 5);
        assert_eq!(state.set.banks.rows(), 5);
        assert_eq!(state.optimizer.position.m.len(), 15);
        let children: Vec<_> = state.set.gaussians.iter().filter(|g| g.parent == parent2.parent && g.s_local != parent2.s_local).collect();
        assert_eq!(children.len(), 2);
        for c in children {
            assert_eq!(c.eta_logits, parent2.eta_logits);
            assert_eq!(c.s_local, parent2.s_local / 1.6);
        }
    }

    #[test]
    fn divergence_keeps_a_finite_state() {
        use crate::assets_io::{make_synthetic_dataset, SynthConfig};
        let synth = SynthConfig {
            n_gaussians: 20,
            n_train: 2,
            n_heldout: 1,
            width: 24,
            height: 24,
            ..SynthConfig::default()
        };
        let ds = make_synthetic_dataset(&synth, &Style::default(), 0).unwrap();
        let config = FitConfig {
            iterations: 50,
            lr: LearningRates {
                position: 1e12,
                scale: 1e12,
                ..LearningRates::default()
            },
            ..FitConfig::default()
        };
        let state = FitState::new(ds.init.clone(), ds.train_params.frames.clone());
        let (state, report) = fit(&ds.head, state, &ds.fit_data(), &config, |_| {}).unwrap();
        assert!(report.diverged);
        assert!(report.iterations.len() < 50);
        assert!(state.set.gaussians.iter().all(|g| g.u_local.iter().chain(g.s_local.iter()).all(|v| v.is_finite())));
        let posed = pose_scene(&ds.head, &state.set, &ds.params.frames[0]).unwrap();
        render(&posed.instances, &ds.camera, RenderMode::Color, &Style::default()).unwrap();
    }

    #[test]
    fn prune_never_empties_the_set() {
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let mut set = tiny_set(&head, 3);
        for (i, g) in set.gaussians.iter_mut().enumerate() {
            g.alpha = 0.001 * i as f64;
        }
        let mut state = FitState::new(set, vec![]);
        let stats = DensifyStats::new(3);
        densify_and_prune(&mut state, &stats, &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(state.set.len(), 1);
        assert_eq!(state.set.gaussians[0].alpha, 0.002);
    }
}
