use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Perspective,
    Orthographic,
}

/// Pinhole (or orthographic) camera. Pixel sample positions are integer
/// coordinates; `rot`/`trans` map world points into camera space, where the
/// camera looks down +z with +y pointing down the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rot: Mat3,
    pub trans: Vec3,
    pub projection: Projection,
}

impl Camera {
    /// Default intrinsics (`fx = fy = width`, centred principal point) looking
    /// at the world origin from `+z` at the given distance, world `+y` up.
    pub fn looking_at_origin(width: usize, height: usize, distance: f64) -> Self {
        Camera {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rot: Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
            trans: Vec3::new(0.0, 0.0, distance),
            projection: Projection::Perspective,
        }
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rot.transpose() * self.trans)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be at least 1x1".into()));
        }
        Ok(())
    }
}
