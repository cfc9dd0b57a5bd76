//! Training objectives for the motion translator and the renderer, with
//! analytic gradients, and the PSNR/SSIM image metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::renderer::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_y: f64,
    pub lambda_v: f64,
    pub lambda_sth: f64,
    pub lambda_lat: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_seg: f64,
    pub eps_p: f64,
    pub eps_s: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_y: 1.0,
            lambda_v: 1.0,
            lambda_sth: 0.5,
            lambda_lat: 0.1,
            lambda_1: 0.8,
            lambda_2: 0.0,
            lambda_3: 0.2,
            lambda_p: 1.0,
            lambda_s: 1.0,
            lambda_seg: 0.1,
            eps_p: 1.0,
            eps_s: 0.6,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_y,
            self.lambda_v,
            self.lambda_sth,
            self.lambda_lat,
            self.lambda_1,
            self.lambda_2,
            self.lambda_3,
            self.lambda_p,
            self.lambda_s,
            self.lambda_seg,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.eps_p > 0.0 && self.eps_s > 0.0 && self.tau > 0.0) {
            return Err(Error::Config("eps_p, eps_s and tau must be positive".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE value and gradients with respect to every input feature.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Contrastive loss over dot-product similarities. The denominator includes
/// the positive, so the loss is never negative.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<InfoNce> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("info_nce needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    Error::check_dim("positive feature", anchor.len(), positive.len())?;
    for n in negatives {
        Error::check_dim("negative feature", anchor.len(), n.len())?;
    }
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().map(|n| n.as_slice()))
        .map(|x| dot(anchor, x) / tau)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let loss = m + z.ln() - logits[0];
    let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    // dL/dlogit_j = p_j - [j == 0]
    let coef: Vec<f64> = p.iter().enumerate().map(|(j, pj)| (pj - if j == 0 { 1.0 } else { 0.0 }) / tau).collect();
    let mut g_anchor = vec![0.0; anchor.len()];
    for (j, x) in std::iter::once(positive).chain(negatives.iter().map(|n| n.as_slice())).enumerate() {
        for (g, xi) in g_anchor.iter_mut().zip(x) {
            *g += coef[j] * xi;
        }
    }
    Ok(InfoNce {
        loss: loss.max(0.0),
        anchor: g_anchor,
        positive: anchor.iter().map(|a| coef[0] * a).collect(),
        negatives: (0..negatives.len()).map(|j| anchor.iter().map(|a| coef[j + 1] * a).collect()).collect(),
    })
}

/// Index of the CTC blank symbol.
pub const CTC_BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log-likelihood and its gradient with respect to the
/// per-step log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Ctc {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
}

/// Negative log-probability that `log_probs` (T steps over `V + 1` symbols,
/// blank at index 0) emits `target` after collapsing repeats and removing
/// blanks. Forward–backward in log space.
pub fn ctc_loss(log_probs: &[Vec<f64>], target: &[usize]) -> Result<Ctc> {
    let t_len = log_probs.len();
    let Some(v) = log_probs.first().map(Vec::len) else {
        return Err(Error::InvalidArgument("ctc needs at least one step".into()));
    };
    for lp in log_probs {
        Error::check_dim("ctc vocabulary", v, lp.len())?;
    }
    if target.iter().any(|&c| c == CTC_BLANK || c >= v) {
        return Err(Error::InvalidArgument("ctc target contains blank or out-of-vocabulary labels".into()));
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if target.len() + repeats > t_len {
        return Err(Error::InvalidArgument(format!(
            "target of length {} needs at least {} steps, got {t_len}",
            target.len(),
            target.len() + repeats
        )));
    }
    let mut ext = vec![CTC_BLANK];
    for &c in target {
        ext.push(c);
        ext.push(CTC_BLANK);
    }
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != CTC_BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = log_probs[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + log_probs[t][ext[s]];
        }
    }
    // beta excludes the emission at its own step
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + log_probs[t + 1][ext[s]];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + log_probs[t + 1][ext[s + 1]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + log_probs[t + 1][ext[s + 2]]);
            }
            beta[t][s] = b;
        }
    }
    let mut log_p = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[t_len - 1][s_len - 2]);
    }
    if log_p == ninf {
        return Err(Error::NonFinite("target has zero probability".into()));
    }
    let mut grad = vec![vec![0.0; v]; t_len];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s];
            if occ > ninf {
                grad[t][ext[s]] -= (occ - log_p).exp();
            }
        }
    }
    Ok(Ctc { loss: -log_p, grad })
}

fn check_seq(what: &'static str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(usize, usize)> {
    Error::check_dim(what, a.len(), b.len())?;
    let n = a.first().map_or(0, Vec::len);
    for (x, y) in a.iter().zip(b) {
        Error::check_dim(what, n, x.len())?;
        Error::check_dim(what, n, y.len())?;
    }
    Ok((a.len(), n))
}

fn check_verts(a: &[Vec<Vec3>], b: &[Vec<Vec3>]) -> Result<(usize, usize)> {
    Error::check_dim("vertex sequence", a.len(), b.len())?;
    let k = a.first().map_or(0, Vec::len);
    for (x, y) in a.iter().zip(b) {
        Error::check_dim("vertex sequence", k, x.len())?;
        Error::check_dim("vertex sequence", k, y.len())?;
    }
    Ok((a.len(), k))
}

/// Reconstruction loss and gradients with respect to `ŷ` and `v̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rec {
    pub loss: f64,
    pub y_hat: Vec<Vec<f64>>,
    pub v_hat: Vec<Vec<Vec3>>,
}

/// `λ_y/(N·T) Σ‖y_t − ŷ_t‖² + λ_v/(K·T) Σ‖v_t − v̂_t‖²`.
pub fn rec_loss(
    y_hat: &[Vec<f64>],
    y: &[Vec<f64>],
    v_hat: &[Vec<Vec3>],
    v: &[Vec<Vec3>],
    w: &LossWeights,
) -> Result<Rec> {
    let (t, n) = check_seq("parameter sequence", y_hat, y)?;
    let (tv, k) = check_verts(v_hat, v)?;
    let cy = if n * t > 0 { w.lambda_y / (n * t) as f64 } else { 0.0 };
    let cv = if k * tv > 0 { w.lambda_v / (k * tv) as f64 } else { 0.0 };
    let mut loss = 0.0;
    let mut gy = Vec::with_capacity(t);
    for (a, b) in y_hat.iter().zip(y) {
        let mut row = Vec::with_capacity(n);
        for (p, q) in a.iter().zip(b) {
            let d = p - q;
            loss += cy * d * d;
            row.push(2.0 * cy * d);
        }
        gy.push(row);
    }
    let mut gv = Vec::with_capacity(tv);
    for (a, b) in v_hat.iter().zip(v) {
        let mut row = Vec::with_capacity(k);
        for (p, q) in a.iter().zip(b) {
            let d = p - q;
            loss += cv * d.norm_squared();
            row.push(d * (2.0 * cv));
        }
        gv.push(row);
    }
    Ok(Rec {
        loss,
        y_hat: gy,
        v_hat: gv,
    })
}

/// `λ_sth/(N·T) Σ_{t≥2} ‖(y_t − y_{t−1}) − (ŷ_t − ŷ_{t−1})‖²` and its
/// gradient with respect to `ŷ`.
pub fn smooth_loss(y_hat: &[Vec<f64>], y: &[Vec<f64>], w: &LossWeights) -> Result<(f64, Vec<Vec<f64>>)> {
    let (t, n) = check_seq("parameter sequence", y_hat, y)?;
    if t < 2 {
        return Err(Error::InvalidArgument("smoothness needs at least two frames".into()));
    }
    let c = w.lambda_sth / (n * t) as f64;
    let mut loss = 0.0;
    let mut g = vec![vec![0.0; n]; t];
    for ti in 1..t {
        for j in 0..n {
            let d = (y[ti][j] - y[ti - 1][j]) - (y_hat[ti][j] - y_hat[ti - 1][j]);
            loss += c * d * d;
            g[ti][j] -= 2.0 * c * d;
            g[ti - 1][j] += 2.0 * c * d;
        }
    }
    Ok((loss, g))
}

/// `λ_lat/(D·T) ‖E_asr − E_lip‖²` over per-frame feature sequences, with
/// the gradient with respect to the lip features.
pub fn latent_consistency(asr: &[Vec<f64>], lip: &[Vec<f64>], w: &LossWeights) -> Result<(f64, Vec<Vec<f64>>)> {
    let (t, d) = check_seq("latent features", asr, lip)?;
    if t * d == 0 {
        return Ok((0.0, vec![vec![0.0; d]; t]));
    }
    let c = w.lambda_lat / (d * t) as f64;
    let mut loss = 0.0;
    let mut g = Vec::with_capacity(t);
    for (a, l) in asr.iter().zip(lip) {
        let mut row = Vec::with_capacity(d);
        for (x, y) in a.iter().zip(l) {
            let diff = y - x;
            loss += c * diff * diff;
            row.push(2.0 * c * diff);
        }
        g.push(row);
    }
    Ok((loss, g))
}

/// Latent consistency with both encoders supplied as functions: `e_asr`
/// maps audio features to the shared space, `e_lip` maps one frame of
/// predicted vertices.
pub fn latent_consistency_with<A, L>(
    audio: &[Vec<f64>],
    vertices_hat: &[Vec<Vec3>],
    e_asr: A,
    e_lip: L,
    w: &LossWeights,
) -> Result<f64>
where
    A: Fn(&[f64]) -> Vec<f64>,
    L: Fn(&[Vec3]) -> Vec<f64>,
{
    Error::check_dim("frames", audio.len(), vertices_hat.len())?;
    let asr: Vec<Vec<f64>> = audio.iter().map(|a| e_asr(a)).collect();
    let lip: Vec<Vec<f64>> = vertices_hat.iter().map(|v| e_lip(v)).collect();
    Ok(latent_consistency(&asr, &lip, w)?.0)
}

/// Frozen linear lip-reading stand-in: a fixed matrix applied to the
/// stacked coordinates of the lip vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct LipEncoderStub {
    pub lip_vertices: Vec<usize>,
    pub dim: usize,
    /// Row-major `dim × 3·|lip_vertices|`.
    pub weights: Vec<f64>,
}

impl LipEncoderStub {
    pub fn random<R: rand::Rng>(lip_vertices: Vec<usize>, dim: usize, rng: &mut R) -> Self {
        let cols = 3 * lip_vertices.len();
        let scale = 1.0 / (cols.max(1) as f64).sqrt();
        let weights = (0..dim * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        LipEncoderStub {
            lip_vertices,
            dim,
            weights,
        }
    }

    pub fn encode(&self, vertices: &[Vec3]) -> Vec<f64> {
        let cols = 3 * self.lip_vertices.len();
        (0..self.dim)
            .map(|d| {
                let row = &self.weights[d * cols..(d + 1) * cols];
                self.lip_vertices
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| row[3 * j] * vertices[v].x + row[3 * j + 1] * vertices[v].y + row[3 * j + 2] * vertices[v].z)
                    .sum()
            })
            .collect()
    }

    /// Adds the vertex gradient of `g_feat · encode(v)` into `g_vertices`.
    pub fn backward(&self, g_feat: &[f64], g_vertices: &mut [Vec3]) {
        let cols = 3 * self.lip_vertices.len();
        for (d, g) in g_feat.iter().enumerate() {
            let row = &self.weights[d * cols..(d + 1) * cols];
            for (j, &v) in self.lip_vertices.iter().enumerate() {
                g_vertices[v] += Vec3::new(row[3 * j], row[3 * j + 1], row[3 * j + 2]) * *g;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TranslatorLosses {
    pub rec: f64,
    pub smooth: f64,
    pub latent: f64,
}

pub fn translator_total(c: &TranslatorLosses) -> f64 {
    c.rec + c.smooth + c.latent
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RendererLosses {
    pub rgb: f64,
    pub attr: f64,
    pub seg: f64,
}

pub fn renderer_total(c: &RendererLosses) -> f64 {
    c.rgb + c.attr + c.seg
}

fn check_images(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )))
    }
}

/// Optional perceptual term: returns its value and gradient with respect
/// to the rendered image.
pub type Perceptual<'a> = &'a dyn Fn(&Image, &Image) -> (f64, Vec<f64>);

/// `λ1·L1 + λ2·L_perc + λ3·(1 − SSIM)` and its gradient with respect to
/// `rendered`. The perceptual term is skipped when absent.
pub fn rgb_loss(rendered: &Image, target: &Image, w: &LossWeights, perceptual: Option<Perceptual>) -> Result<(f64, Vec<f64>)> {
    check_images(rendered, target)?;
    let n = rendered.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; rendered.data.len()];
    if w.lambda_1 != 0.0 {
        let mut l1 = 0.0;
        for (i, (a, b)) in rendered.data.iter().zip(&target.data).enumerate() {
            let d = a - b;
            l1 += d.abs();
            grad[i] += w.lambda_1 * d.signum() * (d != 0.0) as u8 as f64 / n;
        }
        loss += w.lambda_1 * l1 / n;
    }
    if w.lambda_2 != 0.0 {
        if let Some(f) = perceptual {
            let (v, g) = f(rendered, target);
            Error::check_dim("perceptual gradient", grad.len(), g.len())?;
            loss += w.lambda_2 * v;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += w.lambda_2 * b;
            }
        }
    }
    if w.lambda_3 != 0.0 {
        let (s, g) = ssim_with_grad(rendered, target)?;
        loss += w.lambda_3 * (1.0 - s);
        for (a, b) in grad.iter_mut().zip(g) {
            *a -= w.lambda_3 * b;
        }
    }
    Ok((loss, grad))
}

/// Attribute regularizer value and gradients with respect to `ū'` and `s̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attr {
    pub loss: f64,
    pub u_local: Vec<Vec3>,
    pub s_local: Vec<Vec3>,
}

/// `λ_p‖max(0, |ū'| − ε_p)‖² + λ_s‖max(0, s̄ − ε_s)‖²` per Gaussian,
/// componentwise, averaged over Gaussians.
pub fn attr_loss(u_locals: &[Vec3], s_locals: &[Vec3], w: &LossWeights) -> Result<Attr> {
    Error::check_dim("scales", u_locals.len(), s_locals.len())?;
    let n = u_locals.len();
    let mut out = Attr {
        loss: 0.0,
        u_local: vec![Vec3::zeros(); n],
        s_local: vec![Vec3::zeros(); n],
    };
    if n == 0 {
        return Ok(out);
    }
    let inv = 1.0 / n as f64;
    for i in 0..n {
        for c in 0..3 {
            let u = u_locals[i][c];
            let e = u.abs() - w.eps_p;
            if e > 0.0 {
                out.loss += w.lambda_p * e * e * inv;
                out.u_local[i][c] = 2.0 * w.lambda_p * e * u.signum() * inv;
            }
            let e = s_locals[i][c] - w.eps_s;
            if e > 0.0 {
                out.loss += w.lambda_s * e * e * inv;
                out.s_local[i][c] = 2.0 * w.lambda_s * e * inv;
            }
        }
    }
    Ok(out)
}

/// `λ_seg` times the mean squared difference, with gradient w.r.t. `m_aux`.
pub fn seg_loss(m_aux: &Image, m_gt: &Image, w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    check_images(m_aux, m_gt)?;
    let n = m_aux.data.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = m_aux
        .data
        .iter()
        .zip(&m_gt.data)
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * w.lambda_seg * d / n
        })
        .collect();
    Ok((w.lambda_seg * loss / n, grad))
}

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_images(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian window; the 2D window is its outer product.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size plane back to `w × h`.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for j in 0..n {
                tmp[(y + j) * ow + x] += k[j] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for j in 0..n {
                out[y * w + x + j] += k[j] * v;
            }
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean SSIM over all window positions fully inside the image and over
/// channels, plus its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_images(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let k = ssim_kernel();
    let npos = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
    let norm = 1.0 / (npos * a.channels as f64);
    let mut total = 0.0;
    let mut grad = vec![0.0; a.data.len()];
    for c in 0..a.channels {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        let m = mx.len();
        let (mut ga, mut gb, mut gc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for p in 0..m {
            let (ux, uy) = (mx[p], my[p]);
            let vx = sxx[p] - ux * ux;
            let vy = syy[p] - uy * uy;
            let cxy = sxy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            let ds_dux = (2.0 * uy * n2 - s * 2.0 * ux * d2) / (d1 * d2);
            let ds_dvx = -s / d2;
            let ds_dcxy = 2.0 * n1 / (d1 * d2);
            // x enters through μx, E[x²] and E[xy]
            gb[p] = ds_dvx * norm;
            gc[p] = ds_dcxy * norm;
            ga[p] = ds_dux * norm - 2.0 * ux * gb[p] - uy * gc[p];
        }
        let ta = filter_valid_adjoint(&ga, w, h, &k);
        let tb = filter_valid_adjoint(&gb, w, h, &k);
        let tc = filter_valid_adjoint(&gc, w, h, &k);
        for i in 0..w * h {
            grad[i * a.channels + c] = ta[i] + 2.0 * x[i] * tb[i] + y[i] * tc[i];
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad(a, b)?.0)
}
