//! Synthetic talking corpora: toy audio paired with the motion a speaker
//! produces for it, and the lip-aperture measurement.

use headsplat::assets_io::{MotionConfig, ParamSequence};
use headsplat::head_model::{deform, HeadModel, MotionParams, ParamDims};
use headsplat::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{random_tokens, ToyAudio, SILENCE};

/// Index of the jaw x-rotation inside `ψ`.
pub const JAW_OPEN: usize = 3;

/// Mouth pose of one token: jaw opening and the first two expression
/// coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viseme {
    pub jaw: f64,
    pub open: f64,
    pub spread: f64,
}

/// One viseme per token; silence is the rest pose. The table depends only
/// on the vocabulary size, so corpora drawn with different seeds share it.
pub fn viseme_table(vocab: usize) -> Vec<Viseme> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x715e_0000 + vocab as u64);
    (0..vocab)
        .map(|t| {
            if t == SILENCE {
                Viseme {
                    jaw: 0.0,
                    open: 0.0,
                    spread: 0.0,
                }
            } else {
                Viseme {
                    jaw: rng.random_range(0.05..0.3),
                    open: rng.random_range(0.2..1.0),
                    spread: rng.random_range(-0.6..0.6),
                }
            }
        })
        .collect()
}

const SMOOTH: [f64; 5] = [1.0, 2.0, 3.0, 2.0, 1.0];

/// Motion of `speaker` saying `tokens`: per-frame viseme targets scaled by
/// the speaker amplitude and smoothed over five frames.
pub fn speaker_motion(tokens: &[usize], visemes: &[Viseme], amplitude: f64, dims: ParamDims) -> Result<Vec<MotionParams>> {
    if dims.pose <= JAW_OPEN || dims.expr < 2 {
        return Err(Error::InvalidArgument("motion needs a jaw joint and two expression coefficients".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= visemes.len()) {
        return Err(Error::InvalidArgument(format!("unknown token {t}")));
    }
    let n = tokens.len() as isize;
    Ok((0..n)
        .map(|t| {
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for (k, w) in SMOOTH.iter().enumerate() {
                let s = t + k as isize - 2;
                if (0..n).contains(&s) {
                    let v = visemes[tokens[s as usize]];
                    acc[0] += w * v.jaw;
                    acc[1] += w * v.open;
                    acc[2] += w * v.spread;
                    wsum += w;
                }
            }
            let mut p = MotionParams::zeros(dims);
            p.psi[JAW_OPEN] = amplitude * acc[0] / wsum;
            p.epsilon[0] = amplitude * acc[1] / wsum;
            p.epsilon[1] = amplitude * acc[2] / wsum;
            p
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub audio: ToyAudio,
    pub speaker: usize,
    pub motion: ParamSequence,
}

/// Clips with random content and timbre, spread evenly over the speakers.
pub fn generate_corpus(cfg: &MotionConfig, dims: ParamDims, frame_rate: f64, seed: u64) -> Result<Vec<Clip>> {
    cfg.validate().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let visemes = viseme_table(cfg.vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.clips)
        .map(|i| {
            let speaker = i % cfg.speakers;
            let audio = ToyAudio {
                tokens: random_tokens(&mut rng, cfg.vocab, cfg.frames),
                timbre: rng.random_range(0..cfg.timbres),
            };
            let frames = speaker_motion(&audio.tokens, &visemes, cfg.amplitudes[speaker], dims)?;
            Ok(Clip {
                audio,
                speaker,
                motion: ParamSequence::new(dims, frame_rate, frames)?,
            })
        })
        .collect()
}

/// Rest-pose split of the lip vertices into upper and lower halves about
/// their mean height.
pub fn lip_halves(head: &HeadModel) -> Result<(Vec<usize>, Vec<usize>)> {
    let lips = head.lip_vertices();
    if lips.is_empty() {
        return Err(Error::InvalidArgument("head has no lip triangles".into()));
    }
    let mid = lips.iter().map(|&i| head.v_base[i].y).sum::<f64>() / lips.len() as f64;
    let (upper, lower): (Vec<usize>, Vec<usize>) = lips.iter().partition(|&&i| head.v_base[i].y >= mid);
    if upper.is_empty() || lower.is_empty() {
        return Err(Error::InvalidArgument("lip region has no vertical extent".into()));
    }
    Ok((upper, lower))
}

fn gap(v: &[headsplat::math::Vec3], upper: &[usize], lower: &[usize]) -> f64 {
    let mean = |ix: &[usize]| ix.iter().map(|&i| v[i].y).sum::<f64>() / ix.len() as f64;
    mean(upper) - mean(lower)
}

/// Vertical gap between the upper and lower lip relative to the rest pose;
/// positive when the mouth is open.
pub fn lip_aperture(head: &HeadModel, params: &MotionParams) -> Result<f64> {
    let (upper, lower) = lip_halves(head)?;
    let rest = deform(head, &MotionParams::zeros(params.dims()))?;
    let v = deform(head, params)?;
    Ok(gap(&v, &upper, &lower) - gap(&rest, &upper, &lower))
}

pub fn mean_lip_aperture(head: &HeadModel, seq: &ParamSequence) -> Result<f64> {
    if seq.frames.is_empty() {
        return Err(Error::InvalidArgument("empty parameter sequence".into()));
    }
    let mut sum = 0.0;
    for f in &seq.frames {
        sum += lip_aperture(head, f)?;
    }
    Ok(sum / seq.frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use headsplat::head_model::{synthetic_head, SyntheticHeadConfig};

    fn head() -> HeadModel {
        synthetic_head(&SyntheticHeadConfig::default())
    }

    #[test]
    fn silence_is_rest() {
        let dims = head().param_dims();
        let v = viseme_table(6);
        let m = speaker_motion(&[0; 7], &v, 1.0, dims).unwrap();
        assert!(m.iter().all(|p| p.to_flat().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn smoothing_of_a_single_token() {
        let dims = head().param_dims();
        let v = viseme_table(4);
        let tokens = [0, 0, 2, 0, 0, 0];
        let m = speaker_motion(&tokens, &v, 1.0, dims).unwrap();
        // Frame 1 sees weights [2,3,2,1] over frames 0..4; the token at frame 2 carries 2.
        assert!((m[1].psi[JAW_OPEN] - 2.0 / 8.0 * v[2].jaw).abs() < 1e-15);
        assert!((m[2].psi[JAW_OPEN] - 3.0 / 9.0 * v[2].jaw).abs() < 1e-15);
        assert!((m[5].psi[JAW_OPEN] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn amplitude_scales_linearly() {
        let dims = head().param_dims();
        let v = viseme_table(5);
        let tokens = [1, 1, 3, 3, 4, 0, 2];
        let a = speaker_motion(&tokens, &v, 1.0, dims).unwrap();
        let b = speaker_motion(&tokens, &v, 0.5, dims).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.to_flat().iter().zip(y.to_flat()) {
                assert!((0.5 * p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn aperture_opens_with_jaw() {
        let h = head();
        let mut p = MotionParams::zeros(h.param_dims());
        assert_eq!(lip_aperture(&h, &p).unwrap(), 0.0);
        p.psi[JAW_OPEN] = 0.2;
        let a1 = lip_aperture(&h, &p).unwrap();
        p.psi[JAW_OPEN] = 0.1;
        let a2 = lip_aperture(&h, &p).unwrap();
        assert!(a1 > a2 && a2 > 0.0, "{a1} {a2}");
    }

    #[test]
    fn corpus_is_deterministic_and_shaped() {
        let cfg = MotionConfig::default();
        let dims = head().param_dims();
        let a = generate_corpus(&cfg, dims, 25.0, 3).unwrap();
        assert_eq!(a, generate_corpus(&cfg, dims, 25.0, 3).unwrap());
        assert_eq!(a.len(), cfg.clips);
        assert!(a.iter().all(|c| c.audio.len() == cfg.frames && c.motion.frames.len() == cfg.frames));
        assert_eq!(a[1].speaker, 1);
    }

    #[test]
    fn unknown_token_rejected() {
        let dims = head().param_dims();
        assert!(speaker_motion(&[9], &viseme_table(3), 1.0, dims).is_err());
    }
}
