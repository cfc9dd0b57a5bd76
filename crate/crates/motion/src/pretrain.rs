//! Contrastive pretraining of the featurizer: segments of the same clip
//! spoken in another voice must stay closer than other segments.

use headsplat::objectives::info_nce;
use headsplat::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::audio::{encode_audio, synthetic_timbre_convert, Featurizer, ToyAudio};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    /// Negatives per triple; clips are cut into `segments + 1` pieces.
    pub segments: usize,
    pub tau: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub content_weight: f64,
    /// Triples per step.
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub anchor: ToyAudio,
    pub positive: ToyAudio,
    pub negatives: Vec<ToyAudio>,
}

/// Cuts a random clip into `k + 1` equal segments; one is the anchor, its
/// timbre-converted copy the positive and the others the negatives.
pub fn sample_triple<R: Rng>(rng: &mut R, clips: &[ToyAudio], k: usize, timbres: usize) -> Result<Triple> {
    if clips.is_empty() || k == 0 || timbres < 2 {
        return Err(Error::InvalidArgument("triples need clips, k >= 1 and two timbres".into()));
    }
    let clip = &clips[rng.random_range(0..clips.len())];
    let len = clip.len() / (k + 1);
    if len == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}-frame clip cannot be cut into {} segments",
            clip.len(),
            k + 1
        )));
    }
    let segs: Vec<ToyAudio> = (0..=k).map(|i| clip.segment(i * len..(i + 1) * len)).collect();
    let a = rng.random_range(0..=k);
    let mut other = rng.random_range(0..timbres - 1);
    if other >= clip.timbre {
        other += 1;
    }
    Ok(Triple {
        positive: synthetic_timbre_convert(&segs[a], other),
        anchor: segs[a].clone(),
        negatives: segs.iter().enumerate().filter(|(i, _)| *i != a).map(|(_, s)| s.clone()).collect(),
    })
}

/// Unit-length mean of the frame features, and the pre-normalization norm.
fn pooled(audio: &ToyAudio, f: &Featurizer) -> Result<(Vec<f64>, f64)> {
    let frames = encode_audio(audio, f)?;
    let mut m = vec![0.0; f.dim];
    for row in &frames {
        m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let n = frames.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Ok((m.iter().map(|x| x / norm).collect(), norm))
}

pub fn embed(audio: &ToyAudio, f: &Featurizer) -> Result<Vec<f64>> {
    Ok(pooled(audio, f)?.0)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds the table gradients of `g · embed(audio)` into `grad`.
fn embed_backward(audio: &ToyAudio, f: &Featurizer, g: &[f64], grad: &mut Featurizer) -> Result<()> {
    let (z, norm) = pooled(audio, f)?;
    let zg = cosine(&z, g);
    let gm: Vec<f64> = g.iter().zip(&z).map(|(gi, zi)| (gi - zi * zg) / norm).collect();
    let d = f.dim;
    let n = audio.len().max(1) as f64;
    for &t in &audio.tokens {
        grad.content[t * d..(t + 1) * d].iter_mut().zip(&gm).for_each(|(a, b)| *a += b / n);
    }
    grad.timbre[audio.timbre * d..(audio.timbre + 1) * d].iter_mut().zip(&gm).for_each(|(a, b)| *a += b);
    Ok(())
}

/// Mean InfoNCE over `batch` with its gradient accumulated into `grad`.
fn batch_loss(batch: &[Triple], f: &Featurizer, tau: f64, mut grad: Option<&mut Featurizer>) -> Result<f64> {
    let mut total = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for t in batch {
        let a = embed(&t.anchor, f)?;
        let p = embed(&t.positive, f)?;
        let negs = t.negatives.iter().map(|n| embed(n, f)).collect::<Result<Vec<_>>>()?;
        let r = info_nce(&a, &p, &negs, tau)?;
        total += scale * r.loss;
        if let Some(g) = grad.as_deref_mut() {
            let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<f64>>();
            embed_backward(&t.anchor, f, &sc(&r.anchor), g)?;
            embed_backward(&t.positive, f, &sc(&r.positive), g)?;
            for (n, gn) in t.negatives.iter().zip(&r.negatives) {
                embed_backward(n, f, &sc(gn), g)?;
            }
        }
    }
    Ok(total)
}

/// Mean InfoNCE of a fixed batch.
pub fn contrastive_loss(batch: &[Triple], f: &Featurizer, tau: f64) -> Result<f64> {
    batch_loss(batch, f, tau, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Trains the content and timbre tables. The content rows are tied to
/// their starting values by `content_weight · MSE`, which keeps the
/// features usable for the downstream decoder.
pub fn pretrain_contrastive(
    start: &Featurizer,
    clips: &[ToyAudio],
    cfg: &PretrainConfig,
) -> Result<(Featurizer, PretrainReport)> {
    for c in clips {
        start.check(c)?;
    }
    let mut f = start.clone();
    let mut report = PretrainReport {
        first_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    if cfg.steps == 0 {
        return Ok((f, report));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("pretraining batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&[f.content.len(), f.timbre.len()]);
    let n_content = f.content.len().max(1) as f64;
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| sample_triple(&mut rng, clips, cfg.segments, f.timbres()))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Featurizer::zeros(f.vocab(), f.timbres(), f.dim);
        let mut loss = batch_loss(&batch, &f, cfg.tau, Some(&mut g))?;
        for ((gc, c), c0) in g.content.iter_mut().zip(&f.content).zip(&start.content) {
            let d = c - c0;
            loss += cfg.content_weight * d * d / n_content;
            *gc += 2.0 * cfg.content_weight * d / n_content;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        if step == 0 {
            report.first_loss = loss;
        }
        report.final_loss = loss;
        opt.update(&mut [&mut f.content, &mut f.timbre], &[&g.content, &g.timbre], cfg.learning_rate);
    }
    Ok((f, report))
}

/// Fraction of `n` random triples whose anchor is more similar to the
/// positive than to every negative.
pub fn contrastive_accuracy(f: &Featurizer, clips: &[ToyAudio], k: usize, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for _ in 0..n {
        let t = sample_triple(&mut rng, clips, k, f.timbres())?;
        let a = embed(&t.anchor, f)?;
        let sp = cosine(&a, &embed(&t.positive, f)?);
        let mut best = f64::NEG_INFINITY;
        for neg in &t.negatives {
            best = best.max(cosine(&a, &embed(neg, f)?));
        }
        if sp > best {
            hits += 1;
        }
    }
    Ok(hits as f64 / n.max(1) as f64)
}

/// Mean anchor–positive and anchor–negative cosine similarity.
pub fn mean_similarities(f: &Featurizer, clips: &[ToyAudio], k: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg, mut n_neg) = (0.0, 0.0, 0usize);
    for _ in 0..n {
        let t = sample_triple(&mut rng, clips, k, f.timbres())?;
        let a = embed(&t.anchor, f)?;
        pos += cosine(&a, &embed(&t.positive, f)?);
        for x in &t.negatives {
            neg += cosine(&a, &embed(x, f)?);
            n_neg += 1;
        }
    }
    Ok((pos / n.max(1) as f64, neg / n_neg.max(1) as f64))
}
