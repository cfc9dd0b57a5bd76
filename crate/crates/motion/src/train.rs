//! Supervised training of the identity embedding and decoder on paired
//! audio and motion. The featurizer stays frozen.

use headsplat::head_model::{deform, deform_backward, HeadModel, MotionParams};
use headsplat::math::Vec3;
use headsplat::objectives::{latent_consistency, rec_loss, smooth_loss, LipEncoderStub, LossWeights, TranslatorLosses};
use headsplat::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adam::Adam;
use crate::audio::{encode_audio, Featurizer};
use crate::corpus::Clip;
use crate::model::{MotionDecoder, TranslatorModel};

/// Width of the lip-reading stand-in's output.
pub const LIP_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

/// Fresh identity table and decoder on top of a (pretrained) featurizer.
pub fn init_translator(
    featurizer: Featurizer,
    speakers: usize,
    heads: usize,
    hidden: usize,
    head: &HeadModel,
    frame_rate: f64,
    seed: u64,
) -> Result<TranslatorModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = featurizer.dim;
    let dims = head.param_dims();
    let id = Normal::new(0.0, 1.0 / (d.max(1) as f64).sqrt()).unwrap();
    let model = TranslatorModel {
        identity: (0..speakers * d).map(|_| id.sample(&mut rng)).collect(),
        decoder: MotionDecoder::random(d, heads, hidden, dims.total(), &mut rng),
        featurizer,
        dims,
        frame_rate,
    };
    model.validate()?;
    Ok(model)
}

/// Per-clip data that does not change during training.
struct Prepared<'a> {
    clip: &'a Clip,
    features: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    v: Vec<Vec<Vec3>>,
    lip_target: Vec<Vec<f64>>,
}

fn prepare<'a>(model: &TranslatorModel, clip: &'a Clip, head: &HeadModel, lip: &LipEncoderStub) -> Result<Prepared<'a>> {
    if clip.motion.dims != model.dims {
        return Err(Error::DimensionMismatch {
            what: "clip motion",
            expected: model.dims.total(),
            got: clip.motion.dims.total(),
        });
    }
    Error::check_dim("clip frames", clip.audio.len(), clip.motion.frames.len())?;
    let v = clip.motion.frames.iter().map(|p| deform(head, p)).collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        clip,
        features: encode_audio(&clip.audio, &model.featurizer)?,
        y: clip.motion.frames.iter().map(MotionParams::to_flat).collect(),
        lip_target: v.iter().map(|x| lip.encode(x)).collect(),
        v,
    })
}

/// Losses of one clip; with `grads`, accumulates the gradients scaled by
/// `scale` into the decoder and identity buffers.
fn clip_losses(
    model: &TranslatorModel,
    p: &Prepared,
    head: &HeadModel,
    lip: &LipEncoderStub,
    w: &LossWeights,
    grads: Option<(&mut MotionDecoder, &mut [f64], f64)>,
) -> Result<TranslatorLosses> {
    let (y_hat, cache) = model.decode_raw(&p.features, p.clip.speaker)?;
    let params = y_hat.iter().map(|r| MotionParams::from_flat(model.dims, r)).collect::<Result<Vec<_>>>()?;
    let v_hat = params.iter().map(|q| deform(head, q)).collect::<Result<Vec<_>>>()?;
    let rec = rec_loss(&y_hat, &p.y, &v_hat, &p.v, w)?;
    let (smooth, g_smooth) = smooth_loss(&y_hat, &p.y, w)?;
    let lip_hat: Vec<Vec<f64>> = v_hat.iter().map(|v| lip.encode(v)).collect();
    let (latent, g_lip) = latent_consistency(&p.lip_target, &lip_hat, w)?;
    let losses = TranslatorLosses {
        rec: rec.loss,
        smooth,
        latent,
    };
    if let Some((g_dec, g_id, scale)) = grads {
        let mut g_y = Vec::with_capacity(y_hat.len());
        for t in 0..y_hat.len() {
            let mut gv = rec.v_hat[t].clone();
            lip.backward(&g_lip[t], &mut gv);
            let via_v = deform_backward(head, &params[t], &gv)?;
            g_y.push(
                (0..y_hat[t].len())
                    .map(|j| scale * (rec.y_hat[t][j] + g_smooth[t][j] + via_v[j]))
                    .collect::<Vec<f64>>(),
            );
        }
        let gx = model.decoder.backward(&cache, &g_y, g_dec);
        let d = model.decoder.dim;
        let row = &mut g_id[p.clip.speaker * d..(p.clip.speaker + 1) * d];
        for g in &gx {
            row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok(losses)
}

fn add(a: TranslatorLosses, b: TranslatorLosses, s: f64) -> TranslatorLosses {
    TranslatorLosses {
        rec: a.rec + s * b.rec,
        smooth: a.smooth + s * b.smooth,
        latent: a.latent + s * b.latent,
    }
}

pub fn lip_stub(head: &HeadModel, seed: u64) -> LipEncoderStub {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11b5);
    LipEncoderStub::random(head.lip_vertices(), LIP_DIM, &mut rng)
}

/// Mean losses of `model` over `clips`.
pub fn evaluate_translator(model: &TranslatorModel, clips: &[Clip], head: &HeadModel, w: &LossWeights, seed: u64) -> Result<TranslatorLosses> {
    let lip = lip_stub(head, seed);
    let mut total = TranslatorLosses::default();
    let s = 1.0 / clips.len().max(1) as f64;
    for c in clips {
        let p = prepare(model, c, head, &lip)?;
        total = add(total, clip_losses(model, &p, head, &lip, w, None)?, s);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean losses before each step.
    pub history: Vec<TranslatorLosses>,
}

/// Full-batch Adam on the mean translator loss over `clips`. The lip
/// stand-in encoder is seeded from `cfg.seed` and its target is the stub
/// applied to the ground-truth vertices.
pub fn train_translator(
    start: &TranslatorModel,
    clips: &[Clip],
    head: &HeadModel,
    cfg: &TrainConfig,
) -> Result<(TranslatorModel, TrainReport)> {
    start.validate()?;
    cfg.weights.validate()?;
    let mut model = start.clone();
    let mut report = TrainReport { history: Vec::new() };
    if cfg.steps == 0 {
        return Ok((model, report));
    }
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no training clips".into()));
    }
    let lip = lip_stub(head, cfg.seed);
    let prepared = clips.iter().map(|c| prepare(&model, c, head, &lip)).collect::<Result<Vec<_>>>()?;
    let dec = &model.decoder;
    let mut sizes: Vec<usize> = dec.tensors().iter().map(|t| t.len()).collect();
    sizes.push(model.identity.len());
    let mut opt = Adam::new(&sizes);
    let s = 1.0 / clips.len() as f64;
    for step in 0..cfg.steps {
        let d = &model.decoder;
        let mut g_dec = MotionDecoder::zeros(d.dim, d.heads, d.hidden, d.out);
        let mut g_id = vec![0.0; model.identity.len()];
        let mut total = TranslatorLosses::default();
        for p in &prepared {
            let l = clip_losses(&model, p, head, &lip, &cfg.weights, Some((&mut g_dec, &mut g_id, s)))?;
            total = add(total, l, s);
        }
        if ![total.rec, total.smooth, total.latent].iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("translator loss diverged at step {step}")));
        }
        report.history.push(total);
        let TranslatorModel { decoder, identity, .. } = &mut model;
        let mut params: Vec<&mut [f64]> = decoder.tensors_mut().into_iter().map(|t| t.as_mut_slice()).collect();
        params.push(identity.as_mut_slice());
        let mut grads: Vec<&[f64]> = g_dec.tensors().into_iter().map(|t| t.as_slice()).collect();
        grads.push(&g_id);
        opt.update(&mut params, &grads, cfg.learning_rate);
    }
    Ok((model, report))
}
