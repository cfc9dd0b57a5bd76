//! Toy audio: frame-aligned phoneme tokens spoken with a timbre, and the
//! featurizer that turns them into per-frame features.

use headsplat::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Token 0 is silence.
pub const SILENCE: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyAudio {
    /// One content token per output frame.
    pub tokens: Vec<usize>,
    pub timbre: usize,
}

impl ToyAudio {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Frames `range` of this clip, same timbre.
    pub fn segment(&self, range: std::ops::Range<usize>) -> ToyAudio {
        ToyAudio {
            tokens: self.tokens[range].to_vec(),
            timbre: self.timbre,
        }
    }
}

/// Same content, different voice.
pub fn synthetic_timbre_convert(audio: &ToyAudio, timbre: usize) -> ToyAudio {
    ToyAudio {
        tokens: audio.tokens.clone(),
        timbre,
    }
}

/// Phoneme runs of 2 to 5 frames with occasional silence.
pub fn random_tokens<R: Rng>(rng: &mut R, vocab: usize, frames: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(frames);
    while out.len() < frames {
        let tok = if rng.random_bool(0.15) { SILENCE } else { rng.random_range(1..vocab) };
        let run = rng.random_range(2..=5);
        out.extend(std::iter::repeat_n(tok, run));
    }
    out.truncate(frames);
    out
}

/// Content table plus additive timbre offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub dim: usize,
    /// Row-major `vocab × dim`.
    pub content: Vec<f64>,
    /// Row-major `timbres × dim`.
    pub timbre: Vec<f64>,
}

impl Featurizer {
    pub fn zeros(vocab: usize, timbres: usize, dim: usize) -> Self {
        Featurizer {
            dim,
            content: vec![0.0; vocab * dim],
            timbre: vec![0.0; timbres * dim],
        }
    }

    /// Content rows of unit expected norm and timbre offsets half again as
    /// large, as an untuned speech encoder would produce.
    pub fn random<R: Rng>(vocab: usize, timbres: usize, dim: usize, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let content_dist = Normal::new(0.0, s).unwrap();
        let timbre_dist = Normal::new(0.0, 1.5 * s).unwrap();
        Featurizer {
            dim,
            content: (0..vocab * dim).map(|_| content_dist.sample(rng)).collect(),
            timbre: (0..timbres * dim).map(|_| timbre_dist.sample(rng)).collect(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.content.len() / self.dim.max(1)
    }

    pub fn timbres(&self) -> usize {
        self.timbre.len() / self.dim.max(1)
    }

    pub fn check(&self, audio: &ToyAudio) -> Result<()> {
        if let Some(&t) = audio.tokens.iter().find(|&&t| t >= self.vocab()) {
            return Err(Error::InvalidArgument(format!("unknown token {t}")));
        }
        if audio.timbre >= self.timbres() {
            return Err(Error::InvalidArgument(format!("unknown timbre {}", audio.timbre)));
        }
        Ok(())
    }
}

/// Per-frame feature: content row of the token plus the timbre row.
pub fn encode_audio(audio: &ToyAudio, f: &Featurizer) -> Result<Vec<Vec<f64>>> {
    f.check(audio)?;
    let d = f.dim;
    let off = &f.timbre[audio.timbre * d..(audio.timbre + 1) * d];
    Ok(audio
        .tokens
        .iter()
        .map(|&t| f.content[t * d..(t + 1) * d].iter().zip(off).map(|(c, o)| c + o).collect())
        .collect())
}
