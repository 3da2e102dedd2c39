//! Pinhole camera with a world-to-camera rigid transform. Camera space looks
//! down +z with +y pointing down the image.

use alloc::format;

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation: `p_cam = rotation * p_world + translation`.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `(0, 0, -distance)` looking at the origin, principal point
    /// at the image center.
    pub fn looking_at_origin(width: usize, height: usize, focal: f64, distance: f64) -> Self {
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            rotation: math::IDENTITY3,
            translation: [0.0, 0.0, distance],
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.near < self.far) || !self.near.is_finite() {
            return Err(Error::invalid(format!(
                "near ({}) must be below far ({})",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("resolution must be at least 1x1"));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        math::add(&math::mat_vec(&self.rotation, p), &self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let t = math::mat_t_vec(&self.rotation, &self.translation);
        [-t[0], -t[1], -t[2]]
    }

    #[inline]
    pub fn project(&self, t: &Vec3) -> [f64; 2] {
        [self.fx * t[0] / t[2] + self.cx, self.fy * t[1] / t[2] + self.cy]
    }
}
