//! End-to-end translator training from a run configuration.

use headsplat::assets_io::MotionConfig;
use headsplat::head_model::HeadModel;
use headsplat::objectives::LossWeights;
use headsplat::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{encode_audio, Featurizer, ToyAudio};
use crate::corpus::{mean_lip_aperture, Clip};
use crate::model::{decode_motion, TranslatorModel};
use crate::pretrain::{pretrain_contrastive, PretrainConfig, PretrainReport};
use crate::train::{init_translator, train_translator, TrainConfig, TrainReport};

pub const PRETRAIN_BATCH: usize = 8;

pub fn pretrain_config(cfg: &MotionConfig, tau: f64, seed: u64) -> PretrainConfig {
    PretrainConfig {
        segments: cfg.segments,
        tau,
        steps: cfg.pretrain_steps,
        learning_rate: cfg.learning_rate,
        content_weight: cfg.content_weight,
        batch: PRETRAIN_BATCH,
        seed,
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: TranslatorModel,
    pub pretrain: PretrainReport,
    pub train: TrainReport,
}

/// Random featurizer, contrastive pretraining on the corpus audio, then
/// supervised training of identity and decoder. Seeds for each stage are
/// drawn from `seed`.
pub fn build_translator(
    cfg: &MotionConfig,
    weights: &LossWeights,
    head: &HeadModel,
    clips: &[Clip],
    seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    let first = clips.first().ok_or_else(|| Error::InvalidArgument("no training clips".into()))?;
    if let Some(c) = clips.iter().find(|c| c.speaker >= cfg.speakers) {
        return Err(Error::InvalidArgument(format!("clip speaker {} exceeds {} speakers", c.speaker, cfg.speakers)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let featurizer = Featurizer::random(cfg.vocab, cfg.timbres, cfg.dim, &mut rng);
    let audio: Vec<ToyAudio> = clips.iter().map(|c| c.audio.clone()).collect();
    let (featurizer, pretrain) = pretrain_contrastive(&featurizer, &audio, &pretrain_config(cfg, weights.tau, seed))?;
    let model = init_translator(
        featurizer,
        cfg.speakers,
        cfg.heads,
        cfg.hidden,
        head,
        first.motion.frame_rate,
        seed.wrapping_add(1),
    )?;
    let tc = TrainConfig {
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        weights: *weights,
        seed: seed.wrapping_add(2),
    };
    let (model, train) = train_translator(&model, clips, head, &tc)?;
    Ok(Trained { model, pretrain, train })
}

/// Mean lip aperture of every speaker over the same audio clips.
pub fn speaker_apertures(model: &TranslatorModel, head: &HeadModel, audio: &[ToyAudio]) -> Result<Vec<f64>> {
    if audio.is_empty() {
        return Err(Error::InvalidArgument("no audio clips".into()));
    }
    let mut out = vec![0.0; model.speakers()];
    for a in audio {
        let feats = encode_audio(a, &model.featurizer)?;
        for (s, o) in out.iter_mut().enumerate() {
            *o += mean_lip_aperture(head, &decode_motion(&feats, s, model)?)? / audio.len() as f64;
        }
    }
    Ok(out)
}
