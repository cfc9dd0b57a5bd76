//! Deterministic synthetic benchmark: a ground-truth Gaussian head rendered
//! through the engine, plus perturbed copies to fit from.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{load_image, quantize_image, save_image};
use super::{load_gaussians, load_head, load_params, save_gaussians, save_head, save_params, ParamSequence};
use crate::anchoring::{perturb_rotation, sh_rest_len, BoundGaussian, GaussianSet, LatentMlp, SpeakerBlendShapes};
use crate::error::{Error, Result};
use crate::fitter::{FitData, FitFrame};
use crate::head_model::{category, synthetic_head, HeadModel, MotionParams, SyntheticHeadConfig};
use crate::math::{exp_map, Vec3};
use crate::renderer::{render, render_with_transmittance, Camera, Image, RenderMode, Style, SH_C0};
use crate::scene::pose_scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_gaussians: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub width: usize,
    pub height: usize,
    /// Camera distance from the head centre.
    pub distance: f64,
    pub frame_rate: f64,
    pub sh_degree: u32,
    pub latent: usize,
    pub hidden: usize,
    /// Multiplier on the ground-truth blendshape banks; 0 disables them.
    pub bank_scale: f64,
    /// Multiplier on the attribute perturbation of the initial set.
    pub attr_noise: f64,
    /// Standard deviation (radians) of the pose noise on training frames;
    /// shape noise uses the same value and expression noise twice it.
    pub param_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_gaussians: 200,
            n_train: 20,
            n_heldout: 5,
            width: 64,
            height: 64,
            distance: 3.0,
            frame_rate: 25.0,
            sh_degree: 0,
            latent: 16,
            hidden: 16,
            bank_scale: 1.0,
            attr_noise: 1.0,
            param_noise: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 || self.n_train == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic dataset needs gaussians, training frames and pixels".into()));
        }
        if !(self.distance > 1.5 && self.frame_rate > 0.0) {
            return Err(Error::Config("camera distance must exceed 1.5 and frame rate be positive".into()));
        }
        if self.sh_degree > 1 || self.latent == 0 || self.hidden == 0 {
            return Err(Error::Config("sh_degree must be 0 or 1; latent and hidden must be positive".into()));
        }
        if [self.bank_scale, self.attr_noise, self.param_noise].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        Camera::looking_at_origin(self.width, self.height, self.distance)
    }

    pub fn n_frames(&self) -> usize {
        self.n_train + self.n_heldout
    }

    /// Held-out frames are spread evenly through the sequence.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let t = self.n_frames();
        let heldout: Vec<usize> = (0..self.n_heldout).map(|k| (2 * k + 1) * t / (2 * self.n_heldout)).collect();
        let train = (0..t).filter(|i| !heldout.contains(i)).collect();
        (train, heldout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub config: SynthConfig,
    pub style: Style,
    pub camera: Camera,
    pub head: HeadModel,
    pub gt: GaussianSet,
    /// Perturbed copy of `gt` with zero banks: the fitting start point.
    pub init: GaussianSet,
    /// Clean parameters of every frame.
    pub params: ParamSequence,
    /// Noisy parameters of the training frames, as a tracker would return.
    pub train_params: ParamSequence,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    pub frames: Vec<Image>,
    pub masks: Vec<Image>,
    pub semantic: Vec<Image>,
}

impl SyntheticDataset {
    /// Training frames use the perturbed parameters, held-out frames the
    /// clean ones.
    pub fn fit_data(&self) -> FitData {
        let frame = |i: usize, params: &MotionParams| FitFrame {
            params: params.clone(),
            target: self.frames[i].clone(),
            semantic: self.semantic[i].clone(),
        };
        FitData {
            camera: self.camera,
            train: self.train.iter().zip(&self.train_params.frames).map(|(&i, p)| frame(i, p)).collect(),
            heldout: self.heldout.iter().map(|&i| frame(i, &self.params.frames[i])).collect(),
        }
    }
}

fn f32r(x: f64) -> f64 {
    x as f32 as f64
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

fn base_color(cat: u32) -> [f64; 3] {
    match cat {
        category::FACE => [0.86, 0.66, 0.55],
        category::LIPS => [0.72, 0.28, 0.32],
        category::TEETH => [0.95, 0.94, 0.88],
        _ => [0.32, 0.22, 0.16],
    }
}

fn motion_sequence(head: &HeadModel, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<ParamSequence> {
    let dims = head.param_dims();
    let t = cfg.n_frames();
    let beta: Vec<f64> = (0..dims.shape).map(|_| rng.random_range(-0.5..0.5)).collect();
    let waves = |rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| -> Vec<(f64, f64, f64)> {
        (0..n)
            .map(|_| {
                (
                    rng.random_range(lo..hi),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect()
    };
    let expr = waves(rng, dims.expr, 0.2, 0.8);
    let pose = waves(rng, dims.pose, 0.03, 0.12);
    let frames = (0..t)
        .map(|i| {
            let s = i as f64 / t as f64 * std::f64::consts::TAU;
            let wave = |&(a, f, p): &(f64, f64, f64)| f32r(a * (f * s + p).sin());
            let mut psi: Vec<f64> = pose.iter().map(wave).collect();
            // Jaw (joint 1) opens about +x only.
            if psi.len() >= 6 {
                psi[3] = f32r(0.14 + 0.12 * (2.0 * s + pose[3].2).sin());
            }
            MotionParams {
                beta: beta.iter().map(|&b| f32r(b)).collect(),
                epsilon: expr.iter().map(wave).collect(),
                psi,
            }
        })
        .collect();
    ParamSequence::new(dims, cfg.frame_rate, frames)
}

/// Front-facing triangles, weighted by area, as anchor candidates.
fn anchor_triangles(head: &HeadModel) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (t, tri) in head.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|k| head.v_base[k]);
        let centroid = (a + b + c) / 3.0;
        let n = (b - a).cross(&(c - a));
        if centroid.z > -0.1 && n.z > -0.2 * n.norm() {
            idx.push(t);
            w.push(0.5 * n.norm() + if head.triangle_category[t] == category::LIPS { 0.03 } else { 0.0 });
        }
    }
    (idx, w)
}

fn ground_truth(head: &HeadModel, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GaussianSet {
    let (cands, weights) = anchor_triangles(head);
    let dist = rand_distr::weighted::WeightedIndex::new(&weights).expect("positive areas");
    let rest = sh_rest_len(cfg.sh_degree);
    let gaussians = (0..cfg.n_gaussians)
        .map(|_| {
            let parent = cands[dist.sample(rng)];
            let base = base_color(head.triangle_category[parent]);
            let jitter = normal(0.06);
            let color = Vec3::from_fn(|i, _| (base[i] + jitter.sample(rng)).clamp(0.05, 0.95));
            let spin = Vec3::new(0.0, rng.random_range(-3.1..3.1), 0.0);
            let tilt = Vec3::new(normal(0.1).sample(rng), 0.0, normal(0.1).sample(rng));
            BoundGaussian {
                u_local: Vec3::from_fn(|_, _| normal(0.03).sample(rng)),
                r_local: exp_map(&(spin + tilt)),
                s_local: Vec3::new(rng.random_range(0.22..0.45), 0.06, rng.random_range(0.22..0.45)),
                alpha: rng.random_range(0.75..0.97),
                kappa0: (color - Vec3::repeat(0.5)) / SH_C0,
                kappa_rest: (0..rest).map(|_| Vec3::from_fn(|_, _| normal(0.1).sample(rng))).collect(),
                parent,
                eta_logits: [0.0; 3].map(|_| normal(0.6).sample(rng)),
            }
        })
        .collect::<Vec<_>>();
    // A steeper latent network and banks that visibly move and recolour
    // the Gaussians, so a fit without banks falls measurably short.
    let mut mlp = LatentMlp::random(head.param_dims().pose, cfg.hidden, cfg.latent, rng);
    mlp.w1.iter_mut().for_each(|w| *w *= 2.0);
    let mut banks = SpeakerBlendShapes::zeros(mlp, gaussians.len());
    let k = cfg.bank_scale;
    banks.w_pos.iter_mut().for_each(|w| *w = normal(0.03 * k).sample(rng));
    banks.w_rot.iter_mut().for_each(|w| *w = normal(0.15 * k).sample(rng));
    banks.w_color.iter_mut().for_each(|w| *w = normal(1.05 * k).sample(rng));
    super::quantize_gaussians(&GaussianSet {
        sh_degree: cfg.sh_degree,
        gaussians,
        banks,
    })
}

fn perturbed(gt: &GaussianSet, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GaussianSet {
    let k = cfg.attr_noise;
    let gaussians = gt
        .gaussians
        .iter()
        .map(|g| {
            let mut p = g.clone();
            p.u_local += Vec3::from_fn(|_, _| normal(0.02 * k).sample(rng));
            p.r_local = perturb_rotation(&g.r_local, &Vec3::from_fn(|_, _| normal(0.15 * k).sample(rng)));
            p.s_local = g.s_local.map(|s| s * normal(0.2 * k).sample(rng).exp());
            p.alpha = (g.alpha + normal(0.1 * k).sample(rng)).clamp(0.3, 1.0);
            p.kappa0 += Vec3::from_fn(|_, _| normal(0.3 * k).sample(rng));
            p.kappa_rest.iter_mut().for_each(|c| *c = Vec3::zeros());
            for l in p.eta_logits.iter_mut() {
                *l += normal(0.3 * k).sample(rng);
            }
            p
        })
        .collect::<Vec<_>>();
    let m = &gt.banks.mlp;
    let mlp = LatentMlp::random(m.psi_dim, m.hidden, m.latent, rng);
    let banks = SpeakerBlendShapes::zeros(mlp, gaussians.len());
    super::quantize_gaussians(&GaussianSet {
        sh_degree: gt.sh_degree,
        gaussians,
        banks,
    })
}

fn noisy_params(clean: &MotionParams, sigma: f64, rng: &mut ChaCha8Rng) -> MotionParams {
    let mut add = |xs: &[f64], s: f64| xs.iter().map(|&x| f32r(x + normal(s).sample(rng))).collect();
    MotionParams {
        beta: add(&clean.beta, sigma),
        epsilon: add(&clean.epsilon, 2.0 * sigma),
        psi: add(&clean.psi, sigma),
    }
}

/// Builds the benchmark. Everything derives from `seed`; the result is
/// identical on every run and thread count.
pub fn make_synthetic_dataset(config: &SynthConfig, style: &Style, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = synthetic_head(&SyntheticHeadConfig {
        seed: rng.random(),
        ..Default::default()
    });
    let params = motion_sequence(&head, config, &mut rng)?;
    let gt = ground_truth(&head, config, &mut rng);
    let init = perturbed(&gt, config, &mut rng);
    let (train, heldout) = config.split();
    let train_frames = train
        .iter()
        .map(|&i| noisy_params(&params.frames[i], config.param_noise, &mut rng))
        .collect();
    let train_params = ParamSequence::new(params.dims, config.frame_rate, train_frames)?;
    let camera = config.camera();

    let mut frames = Vec::new();
    let mut masks = Vec::new();
    let mut semantic = Vec::new();
    for p in &params.frames {
        let posed = pose_scene(&head, &gt, p)?;
        let (img, t) = render_with_transmittance(&posed.instances, &camera, RenderMode::Color, style)?;
        let mask: Vec<[f64; 1]> = t.iter().map(|&t| [if 1.0 - t >= 0.5 { 1.0 } else { 0.0 }]).collect();
        frames.push(img);
        masks.push(Image::from_pixels(camera.width, camera.height, &mask));
        semantic.push(render(&posed.instances, &camera, RenderMode::Semantic, style)?);
    }
    Ok(SyntheticDataset {
        seed,
        config: *config,
        style: *style,
        camera,
        head,
        gt,
        init,
        params,
        train_params,
        train,
        heldout,
        frames,
        masks,
        semantic,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    seed: u64,
    train: Vec<usize>,
    heldout: Vec<usize>,
    synth: SynthConfig,
    style: Style,
}

fn frame_name(dir: &str, i: usize, ext: &str) -> String {
    format!("{dir}/{i:04}.{ext}")
}

/// Writes the dataset directory. Images are stored with 8-bit samples.
pub fn save_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    for sub in ["frames", "masks", "semantic"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let manifest = Manifest {
        seed: ds.seed,
        train: ds.train.clone(),
        heldout: ds.heldout.clone(),
        synth: ds.config,
        style: ds.style,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    super::write(&dir.join("dataset.toml"), text.as_bytes())?;
    save_head(&dir.join("head.bin"), &ds.head)?;
    save_gaussians(&dir.join("gaussians_gt.bin"), &ds.gt)?;
    save_gaussians(&dir.join("gaussians_init.bin"), &ds.init)?;
    save_params(&dir.join("params.bin"), &ds.params)?;
    save_params(&dir.join("params_train.bin"), &ds.train_params)?;
    for i in 0..ds.frames.len() {
        save_image(&dir.join(frame_name("frames", i, "ppm")), &ds.frames[i])?;
        save_image(&dir.join(frame_name("masks", i, "pgm")), &ds.masks[i])?;
        save_image(&dir.join(frame_name("semantic", i, "ppm")), &ds.semantic[i])?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let text = super::read_text(&dir.join("dataset.toml"))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::malformed("dataset.toml", e.message()))?;
    m.synth.validate()?;
    let head = load_head(&dir.join("head.bin"))?;
    let gt = load_gaussians(&dir.join("gaussians_gt.bin"))?;
    let init = load_gaussians(&dir.join("gaussians_init.bin"))?;
    for set in [&gt, &init] {
        set.validate(head.triangles.len()).map_err(|e| Error::malformed("gaussians", e.to_string()))?;
    }
    let params = load_params(&dir.join("params.bin"))?;
    let train_params = load_params(&dir.join("params_train.bin"))?;
    let t = params.frames.len();
    if m.train.len() != train_params.frames.len() || m.train.iter().chain(&m.heldout).any(|&i| i >= t) {
        return Err(Error::malformed("train", "frame split does not match the parameter files"));
    }
    if params.dims != head.param_dims() || train_params.dims != head.param_dims() {
        return Err(Error::malformed("params", "parameter dimensions do not match the head"));
    }
    let camera = m.synth.camera();
    let load = |sub: &str, ext: &str, channels: usize| -> Result<Vec<Image>> {
        (0..t)
            .map(|i| {
                let img = load_image(&dir.join(frame_name(sub, i, ext)))?;
                if img.width != camera.width || img.height != camera.height || img.channels != channels {
                    return Err(Error::malformed(sub, format!("frame {i} has the wrong size")));
                }
                Ok(img)
            })
            .collect()
    };
    Ok(SyntheticDataset {
        seed: m.seed,
        config: m.synth,
        style: m.style,
        camera,
        head,
        gt,
        init,
        params,
        train_params,
        train: m.train,
        heldout: m.heldout,
        frames: load("frames", "ppm", 3)?,
        masks: load("masks", "pgm", 1)?,
        semantic: load("semantic", "ppm", 3)?,
    })
}

/// The dataset as it reads back from disk.
pub fn quantized(ds: &SyntheticDataset) -> SyntheticDataset {
    let q = |v: &[Image]| v.iter().map(quantize_image).collect();
    SyntheticDataset {
        frames: q(&ds.frames),
        masks: q(&ds.masks),
        semantic: q(&ds.semantic),
        ..ds.clone()
    }
}
