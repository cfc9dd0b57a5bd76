//! Identity embedding and the motion decoder: one multi-head self-attention
//! block with a residual connection, followed by a two-layer head.

use headsplat::assets_io::ParamSequence;
use headsplat::head_model::{MotionParams, ParamDims};
use headsplat::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::Featurizer;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDecoder {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub out: usize,
    /// `dim × dim` row-major projections.
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    /// `hidden × dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `out × hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `g += a ⊗ b` for a row-major `a.len() × b.len()` matrix.
fn add_outer(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        for (gv, &bc) in g[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *gv += ar * bc;
        }
    }
}

/// `out += wᵀ · x` for a row-major `x.len() × out.len()` matrix.
fn add_matvec_t(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = out.len();
    for (r, &xr) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += wv * xr;
        }
    }
}

/// Sinusoidal position code of frame `t`.
pub fn position_code(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let rate = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            let a = t as f64 * rate;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Intermediate values of a decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    x: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `attn[h][i][j]`.
    attn: Vec<Vec<Vec<f64>>>,
    z: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

impl MotionDecoder {
    pub fn zeros(dim: usize, heads: usize, hidden: usize, out: usize) -> Self {
        MotionDecoder {
            dim,
            heads,
            hidden,
            out,
            wq: vec![0.0; dim * dim],
            wk: vec![0.0; dim * dim],
            wv: vec![0.0; dim * dim],
            wo: vec![0.0; dim * dim],
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out * hidden],
            b2: vec![0.0; out],
        }
    }

    pub fn random<R: Rng>(dim: usize, heads: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(dim, heads, hidden, out);
        let mut fill = |w: &mut Vec<f64>, fan_in: usize, gain: f64| {
            let d = Normal::new(0.0, gain / (fan_in as f64).sqrt()).unwrap();
            w.iter_mut().for_each(|x| *x = d.sample(rng));
        };
        fill(&mut m.wq, dim, 1.0);
        fill(&mut m.wk, dim, 1.0);
        fill(&mut m.wv, dim, 1.0);
        fill(&mut m.wo, dim, 0.5);
        fill(&mut m.w1, dim, 1.0);
        fill(&mut m.w2, hidden, 0.1);
        m
    }

    pub fn tensors(&self) -> [&Vec<f64>; 8] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("dim {d} is not a multiple of {} heads", self.heads)));
        }
        let sizes = [d * d, d * d, d * d, d * d, self.hidden * d, self.hidden, self.out * self.hidden, self.out];
        for (t, n) in self.tensors().iter().zip(sizes) {
            Error::check_dim("decoder weights", n, t.len())?;
        }
        Ok(())
    }

    /// Maps `T × dim` inputs to `T × out` outputs.
    pub fn forward(&self, input: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, DecoderCache)> {
        self.check()?;
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x: Vec<Vec<f64>> = input
            .iter()
            .enumerate()
            .map(|(t, f)| {
                Error::check_dim("decoder input", d, f.len())?;
                Ok(f.iter().zip(position_code(t, d)).map(|(a, b)| a + b).collect())
            })
            .collect::<Result<_>>()?;
        let q: Vec<Vec<f64>> = x.iter().map(|xi| matvec(&self.wq, xi, d)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|xi| matvec(&self.wk, xi, d)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|xi| matvec(&self.wv, xi, d)).collect();
        let n = x.len();
        let mut z = vec![vec![0.0; d]; n];
        let mut attn = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let r = hd * dh..(hd + 1) * dh;
            let mut a_h = Vec::with_capacity(n);
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = e.iter().sum();
                let a: Vec<f64> = e.iter().map(|v| v / sum).collect();
                for (j, aj) in a.iter().enumerate() {
                    for c in r.clone() {
                        z[i][c] += aj * v[j][c];
                    }
                }
                a_h.push(a);
            }
            attn.push(a_h);
        }
        let h: Vec<Vec<f64>> = x
            .iter()
            .zip(&z)
            .map(|(xi, zi)| xi.iter().zip(matvec(&self.wo, zi, d)).map(|(a, b)| a + b).collect())
            .collect();
        let g: Vec<Vec<f64>> = h
            .iter()
            .map(|hi| {
                matvec(&self.w1, hi, self.hidden)
                    .iter()
                    .zip(&self.b1)
                    .map(|(u, b)| (u + b).tanh())
                    .collect()
            })
            .collect();
        let y = g
            .iter()
            .map(|gi| matvec(&self.w2, gi, self.out).iter().zip(&self.b2).map(|(a, b)| a + b).collect())
            .collect();
        Ok((y, DecoderCache { x, q, k, v, attn, z, h, g }))
    }

    /// Accumulates weight gradients into `grads` (same layout as
    /// [`Self::tensors`]) and returns the gradient on the inputs.
    pub fn backward(&self, cache: &DecoderCache, grad_y: &[Vec<f64>], grads: &mut MotionDecoder) -> Vec<Vec<f64>> {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = cache.x.len();
        let mut gx = vec![vec![0.0; d]; n];
        let mut gz = vec![vec![0.0; d]; n];
        for i in 0..n {
            let gy = &grad_y[i];
            add_outer(&mut grads.w2, gy, &cache.g[i]);
            grads.b2.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
            let mut gg = vec![0.0; self.hidden];
            add_matvec_t(&mut gg, &self.w2, gy);
            let gu: Vec<f64> = gg.iter().zip(&cache.g[i]).map(|(g, t)| g * (1.0 - t * t)).collect();
            add_outer(&mut grads.w1, &gu, &cache.h[i]);
            grads.b1.iter_mut().zip(&gu).for_each(|(a, b)| *a += b);
            let mut gh = vec![0.0; d];
            add_matvec_t(&mut gh, &self.w1, &gu);
            gx[i].iter_mut().zip(&gh).for_each(|(a, b)| *a += b);
            add_outer(&mut grads.wo, &gh, &cache.z[i]);
            add_matvec_t(&mut gz[i], &self.wo, &gh);
        }
        let mut gq = vec![vec![0.0; d]; n];
        let mut gk = vec![vec![0.0; d]; n];
        let mut gv = vec![vec![0.0; d]; n];
        for hd in 0..self.heads {
            let r = hd * dh..(hd + 1) * dh;
            for i in 0..n {
                let a = &cache.attn[hd][i];
                let go = &gz[i][r.clone()];
                let ga: Vec<f64> = (0..n).map(|j| go.iter().zip(&cache.v[j][r.clone()]).map(|(x, y)| x * y).sum()).collect();
                let dot: f64 = a.iter().zip(&ga).map(|(x, y)| x * y).sum();
                for j in 0..n {
                    for (c, g) in r.clone().zip(go) {
                        gv[j][c] += a[j] * g;
                    }
                    let gs = a[j] * (ga[j] - dot) * scale;
                    for c in r.clone() {
                        gq[i][c] += gs * cache.k[j][c];
                        gk[j][c] += gs * cache.q[i][c];
                    }
                }
            }
        }
        for i in 0..n {
            add_outer(&mut grads.wq, &gq[i], &cache.x[i]);
            add_outer(&mut grads.wk, &gk[i], &cache.x[i]);
            add_outer(&mut grads.wv, &gv[i], &cache.x[i]);
            add_matvec_t(&mut gx[i], &self.wq, &gq[i]);
            add_matvec_t(&mut gx[i], &self.wk, &gk[i]);
            add_matvec_t(&mut gx[i], &self.wv, &gv[i]);
        }
        gx
    }
}

/// Featurizer, identity embedding and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorModel {
    pub featurizer: Featurizer,
    /// Row-major `speakers × dim`.
    pub identity: Vec<f64>,
    pub decoder: MotionDecoder,
    pub dims: ParamDims,
    pub frame_rate: f64,
}

impl TranslatorModel {
    pub fn speakers(&self) -> usize {
        self.identity.len() / self.decoder.dim.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.check()?;
        let d = self.decoder.dim;
        Error::check_dim("featurizer dim", d, self.featurizer.dim)?;
        Error::check_dim("decoder output", self.dims.total(), self.decoder.out)?;
        if self.identity.len() % d.max(1) != 0 {
            return Err(Error::InvalidArgument("identity table is not a whole number of rows".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::InvalidArgument("frame rate must be positive".into()));
        }
        Ok(())
    }

    fn with_identity(&self, features: &[Vec<f64>], speaker: usize) -> Result<Vec<Vec<f64>>> {
        if speaker >= self.speakers() {
            return Err(Error::InvalidArgument(format!("unknown speaker {speaker}")));
        }
        let d = self.decoder.dim;
        let e = &self.identity[speaker * d..(speaker + 1) * d];
        features
            .iter()
            .map(|f| {
                Error::check_dim("feature dim", d, f.len())?;
                Ok(f.iter().zip(e).map(|(a, b)| a + b).collect())
            })
            .collect()
    }

    /// Raw `T × N` decoder output and its cache.
    pub fn decode_raw(&self, features: &[Vec<f64>], speaker: usize) -> Result<(Vec<Vec<f64>>, DecoderCache)> {
        self.decoder.forward(&self.with_identity(features, speaker)?)
    }
}

/// Adds the identity embedding of `speaker` to every frame and decodes the
/// motion parameters.
pub fn decode_motion(features: &[Vec<f64>], speaker: usize, model: &TranslatorModel) -> Result<ParamSequence> {
    model.validate()?;
    let (y, _) = model.decode_raw(features, speaker)?;
    let frames = y.iter().map(|row| MotionParams::from_flat(model.dims, row)).collect::<Result<_>>()?;
    ParamSequence::new(model.dims, model.frame_rate, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let dec = MotionDecoder::zeros(8, 2, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = dec.forward(&rand_seq(&mut rng, 4, 8)).unwrap();
        assert_eq!(y.len(), 4);
        assert!(y.iter().all(|r| r.len() == 3 && r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_frame_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = MotionDecoder::random(6, 2, 4, 3, &mut rng);
        let f = rand_seq(&mut rng, 1, 6);
        let (y, _) = dec.forward(&f).unwrap();
        // One frame: every softmax has a single entry equal to one.
        let x: Vec<f64> = f[0].iter().zip(position_code(0, 6)).map(|(a, b)| a + b).collect();
        let mv = |w: &[f64], v: &[f64], rows: usize| -> Vec<f64> {
            (0..rows).map(|r| (0..v.len()).map(|c| w[r * v.len() + c] * v[c]).sum()).collect()
        };
        let v = mv(&dec.wv, &x, 6);
        let h: Vec<f64> = x.iter().zip(mv(&dec.wo, &v, 6)).map(|(a, b)| a + b).collect();
        let g: Vec<f64> = mv(&dec.w1, &h, 4).iter().zip(&dec.b1).map(|(u, b)| (u + b).tanh()).collect();
        let out: Vec<f64> = mv(&dec.w2, &g, 3).iter().zip(&dec.b2).map(|(a, b)| a + b).collect();
        for (a, b) in y[0].iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn position_code_first_frame() {
        let p = position_code(0, 4);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dec = MotionDecoder::random(6, 2, 5, 3, &mut rng);
        dec.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        let input = rand_seq(&mut rng, 4, 6);
        let w = rand_seq(&mut rng, 4, 3);
        let loss = |dec: &MotionDecoder, input: &[Vec<f64>]| -> f64 {
            let (y, _) = dec.forward(input).unwrap();
            y.iter().zip(&w).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).sum()
        };
        let (_, cache) = dec.forward(&input).unwrap();
        let mut grads = MotionDecoder::zeros(6, 2, 5, 3);
        let gx = dec.backward(&cache, &w, &mut grads);
        let h = 1e-6;
        let grad_tensors: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in grad_tensors.iter().enumerate() {
            for i in 0..g.len() {
                let mut p = dec.clone();
                p.tensors_mut()[ti][i] += h;
                let mut m = dec.clone();
                m.tensors_mut()[ti][i] -= h;
                let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "tensor {ti}[{i}]: {fd} vs {}", g[i]);
            }
        }
        for t in 0..4 {
            for c in 0..6 {
                let mut p = input.clone();
                p[t][c] += h;
                let mut m = input.clone();
                m[t][c] -= h;
                let fd = (loss(&dec, &p) - loss(&dec, &m)) / (2.0 * h);
                assert!((fd - gx[t][c]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn unknown_speaker_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = ParamDims {
            shape: 1,
            expr: 1,
            pose: 0,
        };
        let model = TranslatorModel {
            featurizer: Featurizer::zeros(3, 2, 4),
            identity: vec![0.0; 8],
            decoder: MotionDecoder::random(4, 2, 3, 2, &mut rng),
            dims,
            frame_rate: 25.0,
        };
        model.validate().unwrap();
        let f = rand_seq(&mut rng, 3, 4);
        assert!(decode_motion(&f, 2, &model).is_err());
        let out = decode_motion(&f, 1, &model).unwrap();
        assert_eq!(out.frames.len(), 3);
        assert_eq!(decode_motion(&f, 1, &model).unwrap(), out);
    }
}
