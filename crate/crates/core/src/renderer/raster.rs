//! Tile-based front-to-back alpha compositing of screen-space splats, the
//! brute-force per-pixel reference, and the backward pass.
//!
//! Both traversals call the same [`shade`] routine with the same depth-sorted
//! candidates; a tile only drops splats that cannot reach the visibility
//! threshold anywhere inside it, so the two are bit-identical.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::project::SplatGeometry;

pub const TILE_SIZE: usize = 16;
/// Upper clamp on a splat's effective opacity.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions with effective opacity below this are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Traversal stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;

/// Screen-space splat ready for compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub mean: [f64; 2],
    /// Inverse covariance entries `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub alpha: f64,
    /// Half-extent of the pixel box outside which the splat is invisible.
    pub extent: [f64; 2],
}

impl Splat {
    pub fn new(geom: &SplatGeometry, alpha: f64) -> Self {
        let c = geom.cov;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        let conic = [c[(1, 1)] / det, -c[(0, 1)] / det, c[(0, 0)] / det];
        // α·exp(-q/2) >= 1/255  <=>  q <= 2 ln(255 α)
        let q_max = 2.0 * (alpha / ALPHA_MIN).ln();
        let extent = if q_max > 0.0 && det > 0.0 {
            [(q_max * c[(0, 0)]).sqrt() + 1.0, (q_max * c[(1, 1)]).sqrt() + 1.0]
        } else {
            [-1.0, -1.0]
        };
        Splat {
            mean: [geom.mean.x, geom.mean.y],
            conic,
            alpha,
            extent,
        }
    }

    pub fn conic_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.conic[0], self.conic[1], self.conic[1], self.conic[2])
    }

    /// Pixel bounding box `(x0, y0, x1, y1)` inclusive, clipped to the image,
    /// or `None` when nothing is visible.
    fn pixel_box(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        if self.extent[0] < 0.0 || !self.mean.iter().all(|m| m.is_finite()) {
            return None;
        }
        let x0 = (self.mean[0] - self.extent[0]).ceil().max(0.0);
        let y0 = (self.mean[1] - self.extent[1]).ceil().max(0.0);
        let x1 = (self.mean[0] + self.extent[0]).floor().min(width as f64 - 1.0);
        let y1 = (self.mean[1] + self.extent[1]).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

/// Effective opacity at pixel `(px, py)` and the Gaussian falloff value, or
/// `None` when the contribution is below [`ALPHA_MIN`].
#[inline]
pub fn evaluate_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, f64)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    let g = (-0.5 * q).exp();
    let a = (s.alpha * g).min(ALPHA_MAX);
    if a < ALPHA_MIN {
        None
    } else {
        Some((a, g))
    }
}

/// Front-to-back compositing of already evaluated contributions.
pub fn composite<const K: usize>(contributions: &[([f64; K], f64)], background: &[f64; K]) -> [f64; K] {
    let mut c = [0.0; K];
    let mut t = 1.0;
    for (color, a) in contributions {
        for k in 0..K {
            c[k] += color[k] * a * t;
        }
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    for k in 0..K {
        c[k] += t * background[k];
    }
    c
}

/// One recorded contribution, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
struct Record {
    /// Position of the splat in the tile's candidate list.
    slot: u32,
    a: f64,
    g: f64,
    t: f64,
}

#[inline]
fn shade<const K: usize>(
    px: f64,
    py: f64,
    candidates: impl Iterator<Item = (u32, usize)>,
    splats: &[Splat],
    colors: &[[f64; K]],
    background: &[f64; K],
    mut records: Option<&mut Vec<Record>>,
) -> ([f64; K], f64) {
    let mut c = [0.0; K];
    let mut t = 1.0;
    for (slot, i) in candidates {
        let Some((a, g)) = evaluate_alpha(&splats[i], px, py) else {
            continue;
        };
        let col = &colors[i];
        for k in 0..K {
            c[k] += col[k] * a * t;
        }
        if let Some(r) = records.as_deref_mut() {
            r.push(Record { slot, a, g, t });
        }
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    for k in 0..K {
        c[k] += t * background[k];
    }
    (c, t)
}

/// Composited image plus per-pixel residual transmittance.
#[derive(Debug, Clone)]
pub struct RasterOutput<const K: usize> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; K]>,
    pub final_t: Vec<f64>,
}

/// Everything the backward pass needs from a tiled forward pass.
#[derive(Debug, Clone)]
pub struct RasterTrace {
    tiles: Vec<TileTrace>,
}

#[derive(Debug, Clone, Default)]
struct TileTrace {
    candidates: Vec<usize>,
    /// Per pixel of the tile (row-major within the tile): record range.
    ranges: Vec<(u32, u32)>,
    records: Vec<Record>,
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize) -> Self {
        TileGrid {
            tiles_x: width.div_ceil(TILE_SIZE),
            tiles_y: height.div_ceil(TILE_SIZE),
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    fn bounds(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, y0, (x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height))
    }
}

fn bin_splats(splats: &[Splat], order: &[usize], width: usize, height: usize, grid: &TileGrid) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); grid.count()];
    for &i in order {
        let Some((x0, y0, x1, y1)) = splats[i].pixel_box(width, height) else {
            continue;
        };
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                lists[ty * grid.tiles_x + tx].push(i);
            }
        }
    }
    lists
}

/// Tile-parallel rasterization. `order` lists visible splats front to back.
pub fn rasterize<const K: usize>(
    splats: &[Splat],
    colors: &[[f64; K]],
    order: &[usize],
    background: &[f64; K],
    width: usize,
    height: usize,
    keep_trace: bool,
) -> (RasterOutput<K>, Option<RasterTrace>) {
    let grid = TileGrid::new(width, height);
    let lists = bin_splats(splats, order, width, height, &grid);
    let tiles: Vec<(Vec<[f64; K]>, Vec<f64>, TileTrace)> = lists
        .into_par_iter()
        .enumerate()
        .map(|(tile, candidates)| {
            let (x0, y0, x1, y1) = grid.bounds(tile, width, height);
            let n = (x1 - x0) * (y1 - y0);
            let mut pix = Vec::with_capacity(n);
            let mut ts = Vec::with_capacity(n);
            let mut trace = TileTrace::default();
            for y in y0..y1 {
                for x in x0..x1 {
                    let start = trace.records.len() as u32;
                    let rec = if keep_trace { Some(&mut trace.records) } else { None };
                    let cands = candidates.iter().enumerate().map(|(s, &i)| (s as u32, i));
                    let (c, t) = shade(x as f64, y as f64, cands, splats, colors, background, rec);
                    pix.push(c);
                    ts.push(t);
                    if keep_trace {
                        trace.ranges.push((start, trace.records.len() as u32 - start));
                    }
                }
            }
            trace.candidates = candidates;
            (pix, ts, trace)
        })
        .collect();

    let mut out = RasterOutput {
        width,
        height,
        pixels: vec![[0.0; K]; width * height],
        final_t: vec![0.0; width * height],
    };
    let mut traces = Vec::with_capacity(tiles.len());
    for (tile, (pix, ts, trace)) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, _) = grid.bounds(tile, width, height);
        let w = x1 - x0;
        for (k, (c, t)) in pix.into_iter().zip(ts).enumerate() {
            let idx = (y0 + k / w) * width + x0 + k % w;
            out.pixels[idx] = c;
            out.final_t[idx] = t;
        }
        traces.push(trace);
    }
    let trace = keep_trace.then_some(RasterTrace { tiles: traces });
    (out, trace)
}

/// Reference rasterizer: every pixel walks the full depth-sorted list.
pub fn rasterize_brute_force<const K: usize>(
    splats: &[Splat],
    colors: &[[f64; K]],
    order: &[usize],
    background: &[f64; K],
    width: usize,
    height: usize,
) -> RasterOutput<K> {
    let mut out = RasterOutput {
        width,
        height,
        pixels: Vec::with_capacity(width * height),
        final_t: Vec::with_capacity(width * height),
    };
    for y in 0..height {
        for x in 0..width {
            let cands = order.iter().map(|&i| (0u32, i));
            let (c, t) = shade(x as f64, y as f64, cands, splats, colors, background, None);
            out.pixels.push(c);
            out.final_t.push(t);
        }
    }
    out
}

/// Per-pixel compositing weights `a_i · T_i` in traversal order, for
/// inspecting the compositing invariants.
pub fn pixel_weights(splats: &[Splat], order: &[usize], px: usize, py: usize) -> (Vec<f64>, f64) {
    let mut w = Vec::new();
    let mut t = 1.0;
    for &i in order {
        let Some((a, _)) = evaluate_alpha(&splats[i], px as f64, py as f64) else {
            continue;
        };
        w.push(a * t);
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    (w, t)
}

/// Gradient of the loss with respect to one splat.
#[derive(Debug, Clone, Copy)]
pub struct SplatGrad<const K: usize> {
    pub mean: Vector2<f64>,
    /// Full-matrix gradient of the conic (off-diagonal entries equal).
    pub conic: Matrix2<f64>,
    pub alpha: f64,
    pub color: [f64; K],
}

impl<const K: usize> Default for SplatGrad<K> {
    fn default() -> Self {
        SplatGrad {
            mean: Vector2::zeros(),
            conic: Matrix2::zeros(),
            alpha: 0.0,
            color: [0.0; K],
        }
    }
}

impl<const K: usize> SplatGrad<K> {
    fn add(&mut self, o: &SplatGrad<K>) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.alpha += o.alpha;
        for k in 0..K {
            self.color[k] += o.color[k];
        }
    }

    /// Gradient with respect to the (full, symmetric) covariance matrix.
    pub fn covariance(&self, splat: &Splat) -> Matrix2<f64> {
        let m = splat.conic_matrix();
        -(m * self.conic * m)
    }
}

/// Back-propagates per-pixel gradients through the compositing recorded in
/// `trace`. Reduction runs in fixed tile order, so the result does not depend
/// on the thread count.
pub fn rasterize_backward<const K: usize>(
    splats: &[Splat],
    colors: &[[f64; K]],
    background: &[f64; K],
    width: usize,
    height: usize,
    trace: &RasterTrace,
    grad_pixels: &[[f64; K]],
) -> Vec<SplatGrad<K>> {
    let grid = TileGrid::new(width, height);
    let locals: Vec<Vec<SplatGrad<K>>> = trace
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, tt)| {
            let (x0, y0, x1, y1) = grid.bounds(tile, width, height);
            let mut local = vec![SplatGrad::<K>::default(); tt.candidates.len()];
            let mut p = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (start, len) = tt.ranges[p];
                    p += 1;
                    let g = &grad_pixels[y * width + x];
                    if len == 0 || g.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let mut acc = *background;
                    for rec in tt.records[start as usize..(start + len) as usize].iter().rev() {
                        let i = tt.candidates[rec.slot as usize];
                        let col = &colors[i];
                        let sg = &mut local[rec.slot as usize];
                        let mut g_a = 0.0;
                        for k in 0..K {
                            sg.color[k] += g[k] * rec.a * rec.t;
                            g_a += g[k] * (col[k] - acc[k]);
                            acc[k] = rec.a * col[k] + (1.0 - rec.a) * acc[k];
                        }
                        g_a *= rec.t;
                        let s = &splats[i];
                        if s.alpha * rec.g > ALPHA_MAX {
                            continue;
                        }
                        sg.alpha += g_a * rec.g;
                        let g_q = -0.5 * rec.g * s.alpha * g_a;
                        let d = Vector2::new(x as f64 - s.mean[0], y as f64 - s.mean[1]);
                        sg.conic += Matrix2::new(d.x * d.x, d.x * d.y, d.x * d.y, d.y * d.y) * g_q;
                        sg.mean += s.conic_matrix() * d * (-2.0 * g_q);
                    }
                }
            }
            local
        })
        .collect();
    let mut out = vec![SplatGrad::<K>::default(); splats.len()];
    for (tt, local) in trace.tiles.iter().zip(&locals) {
        for (slot, &i) in tt.candidates.iter().enumerate() {
            out[i].add(&local[slot]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(mean: [f64; 2], sigma: f64, alpha: f64) -> Splat {
        Splat::new(
            &SplatGeometry {
                mean: Vector2::new(mean[0], mean[1]),
                cov: Matrix2::identity() * (sigma * sigma),
                depth: 1.0,
            },
            alpha,
        )
    }

    #[test]
    fn alpha_at_mean_and_one_sigma() {
        let s = iso([4.0, 5.0], 2.0, 0.8);
        assert_eq!(evaluate_alpha(&s, 4.0, 5.0).unwrap().0, 0.8);
        let s = iso([4.0, 5.0], 2.0, 1.0);
        assert_eq!(evaluate_alpha(&s, 4.0, 5.0).unwrap().0, 0.99);
        let s = iso([0.0, 0.0], 2.0, 0.8);
        let (a, _) = evaluate_alpha(&s, 2.0, 0.0).unwrap();
        assert!((a - 0.8 * (-0.5f64).exp()).abs() < 1e-15);
        let s = iso([0.0, 0.0], 2.0, 0.0);
        assert!(evaluate_alpha(&s, 0.0, 0.0).is_none());
    }

    #[test]
    fn composite_hand_examples() {
        let c = composite(&[([1.0, 0.5, 0.25], 0.99)], &[0.0; 3]);
        assert_eq!(c, [0.99, 0.495, 0.2475]);
        let c = composite(&[([1.0, 0.0, 0.0], 0.5), ([0.0, 1.0, 0.0], 0.5)], &[0.0; 3]);
        assert_eq!(c, [0.5, 0.25, 0.0]);
        assert_eq!(composite::<3>(&[], &[0.2, 0.3, 0.4]), [0.2, 0.3, 0.4]);
    }

    #[test]
    fn extent_bounds_visibility() {
        let s = iso([10.3, 7.7], 1.5, 0.6);
        for y in 0..20 {
            for x in 0..24 {
                if evaluate_alpha(&s, x as f64, y as f64).is_some() {
                    assert!((x as f64 - s.mean[0]).abs() <= s.extent[0]);
                    assert!((y as f64 - s.mean[1]).abs() <= s.extent[1]);
                }
            }
        }
    }
}
