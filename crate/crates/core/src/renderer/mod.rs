//! Differentiable software rasterizer for posed 3D Gaussians.

pub mod camera;
pub mod project;
pub mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head_model::category;
use crate::math::{Mat3, Vec3};

pub use camera::{Camera, Projection};
pub use project::{project, project_backward, sh_color, sh_color_backward, SH_C0, ProjectCache, ProjectGrads, SplatGeometry};
pub use raster::{composite, evaluate_alpha, Splat, SplatGrad};

/// RGB colour per triangle category id.
pub type Palette = [[f64; 3]; category::COUNT as usize];

/// Default semantic colours: face red, lips yellow, teeth white, other blue.
pub const PALETTE: Palette = [
    [1.0, 0.0, 0.0], // face
    [1.0, 1.0, 0.0], // lips
    [1.0, 1.0, 1.0], // teeth
    [0.0, 0.0, 1.0], // other
];

pub fn palette_color(palette: &Palette, category: u32) -> Result<[f64; 3]> {
    palette
        .get(category as usize)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("unknown category id {category}")))
}

/// A Gaussian in world space, ready to be drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInstance {
    pub u: Vec3,
    pub r: Mat3,
    pub s: Vec3,
    pub alpha: f64,
    pub kappa0: Vec3,
    pub kappa_rest: Vec<Vec3>,
    pub category: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Color,
    Semantic,
}

/// Backgrounds for both render modes and the semantic palette.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Style {
    pub background: [f64; 3],
    pub semantic_background: [f64; 3],
    pub palette: Palette,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            background: [0.0; 3],
            semantic_background: [0.0; 3],
            palette: PALETTE,
        }
    }
}

impl Style {
    pub fn background_for(&self, mode: RenderMode) -> &[f64; 3] {
        match mode {
            RenderMode::Color => &self.background,
            RenderMode::Semantic => &self.semantic_background,
        }
    }
}

/// Row-major interleaved image with `channels` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_pixels<const K: usize>(width: usize, height: usize, pixels: &[[f64; K]]) -> Self {
        Image {
            width,
            height,
            channels: K,
            data: pixels.iter().flatten().copied().collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Splits a `3 + 3` channel image into its two RGB halves.
    pub fn split6(&self) -> (Image, Image) {
        assert_eq!(self.channels, 6);
        let mut a = Image::new(self.width, self.height, 3);
        let mut b = Image::new(self.width, self.height, 3);
        for (i, px) in self.data.chunks_exact(6).enumerate() {
            a.data[3 * i..3 * i + 3].copy_from_slice(&px[..3]);
            b.data[3 * i..3 * i + 3].copy_from_slice(&px[3..]);
        }
        (a, b)
    }
}

/// Per-Gaussian colour used for a render mode.
pub fn instance_colors(
    instances: &[GaussianInstance],
    camera: &Camera,
    mode: RenderMode,
    palette: &Palette,
) -> Result<Vec<[f64; 3]>> {
    let center = camera.center();
    instances
        .iter()
        .map(|g| match mode {
            RenderMode::Color => {
                let c = sh_color(&g.kappa0, &g.kappa_rest, &g.u, &center);
                Ok([c.x, c.y, c.z])
            }
            RenderMode::Semantic => palette_color(palette, g.category),
        })
        .collect()
}

/// A projected, depth-sorted scene. Colours are supplied separately so the
/// same geometry can be drawn with any channel layout.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splats: Vec<Splat>,
    pub caches: Vec<Option<ProjectCache>>,
    /// Visible Gaussians front to back, ties broken by index.
    pub order: Vec<usize>,
}

pub fn prepare(instances: &[GaussianInstance], camera: &Camera) -> Result<Prepared> {
    camera.validate()?;
    let mut splats = Vec::with_capacity(instances.len());
    let mut caches = Vec::with_capacity(instances.len());
    let mut keyed = Vec::new();
    for (i, g) in instances.iter().enumerate() {
        if !(g.u.iter().chain(g.s.iter()).all(|v| v.is_finite()) && g.alpha.is_finite()) {
            return Err(Error::NonFinite(format!("gaussian {i}")));
        }
        match project(&g.u, &g.r, &g.s, camera) {
            Some((geom, cache)) => {
                let splat = Splat::new(&geom, g.alpha.clamp(0.0, 1.0));
                keyed.push((geom.depth, i));
                splats.push(splat);
                caches.push(Some(cache));
            }
            None => {
                splats.push(Splat {
                    mean: [0.0; 2],
                    conic: [0.0; 3],
                    alpha: 0.0,
                    extent: [-1.0, -1.0],
                });
                caches.push(None);
            }
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(Prepared {
        splats,
        caches,
        order: keyed.into_iter().map(|(_, i)| i).collect(),
    })
}

fn check_colors<const K: usize>(prep: &Prepared, colors: &[[f64; K]]) -> Result<()> {
    Error::check_dim("per-gaussian colours", prep.splats.len(), colors.len())
}

/// Renders a scene in the given mode with the tiled rasterizer.
pub fn render(instances: &[GaussianInstance], camera: &Camera, mode: RenderMode, style: &Style) -> Result<Image> {
    Ok(render_with_transmittance(instances, camera, mode, style)?.0)
}

/// [`render`] plus the residual transmittance of every pixel.
pub fn render_with_transmittance(
    instances: &[GaussianInstance],
    camera: &Camera,
    mode: RenderMode,
    style: &Style,
) -> Result<(Image, Vec<f64>)> {
    let prep = prepare(instances, camera)?;
    let colors = instance_colors(instances, camera, mode, &style.palette)?;
    let bg = style.background_for(mode);
    let (out, _) = raster::rasterize(&prep.splats, &colors, &prep.order, bg, camera.width, camera.height, false);
    Ok((Image::from_pixels(camera.width, camera.height, &out.pixels), out.final_t))
}

/// Same as [`render`] but every pixel walks every visible Gaussian.
pub fn render_brute_force(instances: &[GaussianInstance], camera: &Camera, mode: RenderMode, style: &Style) -> Result<Image> {
    let prep = prepare(instances, camera)?;
    let colors = instance_colors(instances, camera, mode, &style.palette)?;
    let bg = style.background_for(mode);
    let out = raster::rasterize_brute_force(&prep.splats, &colors, &prep.order, bg, camera.width, camera.height);
    Ok(Image::from_pixels(camera.width, camera.height, &out.pixels))
}

/// A forward pass kept alive for back-propagation.
#[derive(Debug, Clone)]
pub struct RenderPass<const K: usize> {
    pub prepared: Prepared,
    pub colors: Vec<[f64; K]>,
    pub background: [f64; K],
    pub output: raster::RasterOutput<K>,
    trace: raster::RasterTrace,
}

/// Gradient of a render with respect to one world-space Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct InstanceGrad<const K: usize> {
    pub u: Vec3,
    pub r: Mat3,
    pub s: Vec3,
    pub alpha: f64,
    pub color: [f64; K],
    /// Gradient with respect to the projected 2D mean (pixels).
    pub mean2d: [f64; 2],
}

impl<const K: usize> RenderPass<K> {
    pub fn forward(
        instances: &[GaussianInstance],
        camera: &Camera,
        colors: Vec<[f64; K]>,
        background: [f64; K],
    ) -> Result<Self> {
        let prepared = prepare(instances, camera)?;
        check_colors(&prepared, &colors)?;
        let (output, trace) = raster::rasterize(
            &prepared.splats,
            &colors,
            &prepared.order,
            &background,
            camera.width,
            camera.height,
            true,
        );
        Ok(RenderPass {
            prepared,
            colors,
            background,
            output,
            trace: trace.expect("trace requested"),
        })
    }

    pub fn image(&self) -> Image {
        Image::from_pixels(self.output.width, self.output.height, &self.output.pixels)
    }

    /// Back-propagates `grad_pixels` (one `K`-vector per pixel) to every
    /// Gaussian. Culled Gaussians get zero gradient.
    pub fn backward(
        &self,
        instances: &[GaussianInstance],
        camera: &Camera,
        grad_pixels: &[[f64; K]],
    ) -> Result<Vec<InstanceGrad<K>>> {
        Error::check_dim("pixel gradients", self.output.pixels.len(), grad_pixels.len())?;
        Error::check_dim("instances", self.prepared.splats.len(), instances.len())?;
        let sg = raster::rasterize_backward(
            &self.prepared.splats,
            &self.colors,
            &self.background,
            self.output.width,
            self.output.height,
            &self.trace,
            grad_pixels,
        );
        let out = instances
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut grad = InstanceGrad {
                    u: Vec3::zeros(),
                    r: Mat3::zeros(),
                    s: Vec3::zeros(),
                    alpha: 0.0,
                    color: sg[i].color,
                    mean2d: [sg[i].mean.x, sg[i].mean.y],
                };
                if let Some(cache) = &self.prepared.caches[i] {
                    let splat = &self.prepared.splats[i];
                    let g_cov = sg[i].covariance(splat);
                    let pg = project_backward(&g.r, &g.s, camera, cache, &sg[i].mean, &g_cov);
                    grad.u = pg.u;
                    grad.r = pg.r;
                    grad.s = pg.s;
                    if (0.0..=1.0).contains(&g.alpha) {
                        grad.alpha = sg[i].alpha;
                    }
                }
                grad
            })
            .collect();
        Ok(out)
    }
}

/// `I = (1-M)·I_ori + M·F(I_gau + (1-M)·I_ori)`. A single-channel mask is
/// broadcast over colour channels.
pub fn composite_inpaint<F>(i_ori: &Image, i_gau: &Image, mask: &Image, refine: F) -> Result<Image>
where
    F: Fn(&Image) -> Image,
{
    if !i_ori.same_shape(i_gau) {
        return Err(Error::InvalidArgument("original and rendered frames differ in shape".into()));
    }
    if mask.width != i_ori.width || mask.height != i_ori.height || !(mask.channels == 1 || mask.channels == i_ori.channels) {
        return Err(Error::InvalidArgument("mask shape does not match the frame".into()));
    }
    let c = i_ori.channels;
    let m_at = |i: usize| if mask.channels == 1 { mask.data[i / c] } else { mask.data[i] };
    let mut input = i_gau.clone();
    for (i, v) in input.data.iter_mut().enumerate() {
        *v += (1.0 - m_at(i)) * i_ori.data[i];
    }
    let refined = refine(&input);
    if !refined.same_shape(i_ori) {
        return Err(Error::InvalidArgument("refiner changed the frame shape".into()));
    }
    let mut out = i_ori.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let m = m_at(i);
        *v = (1.0 - m) * i_ori.data[i] + m * refined.data[i];
    }
    Ok(out)
}

/// Identity refiner for [`composite_inpaint`].
pub fn identity_refiner(img: &Image) -> Image {
    img.clone()
}
