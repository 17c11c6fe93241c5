use serde::{Deserialize, Serialize};

use crate::math::{self, Mat3, Vec3};
use crate::render::RenderError;

/// Pinhole camera. The rotation maps camera axes (x right, y down, z forward)
/// into world axes; pixel `(u, v)` is the pixel whose center sits at those
/// integer image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Unit-direction ray with a parametric range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Self {
        Self { origin, dir: math::normalize(dir), t_near, t_far }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        math::add(self.origin, math::scale(self.dir, t))
    }
}

/// Default parametric range for camera rays; the renderer clips to the grid box.
pub const DEFAULT_NEAR: f64 = 0.0;
pub const DEFAULT_FAR: f64 = 1e3;

impl Camera {
    /// Camera at `eye` looking at `target`, with square pixels and horizontal
    /// field of view `fov_x` (radians).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_x: f64, width: usize, height: usize) -> Self {
        let forward = math::normalize(math::sub(target, eye));
        let right = math::normalize(math::cross(forward, up));
        let down = math::cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            rotation,
            translation: eye,
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let rtr = {
            let t = math::transpose(&self.rotation);
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = math::dot(t[i], t[j]);
                }
            }
            m
        };
        let mut dev: f64 = 0.0;
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((v - id).abs());
            }
        }
        if dev > 1e-9 {
            return Err(RenderError::NonOrthonormal(dev));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::BadIntrinsics { fx: self.fx, fy: self.fy });
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::EmptyImage);
        }
        Ok(())
    }

    pub fn forward(&self) -> Vec3 {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }

    /// World-space unit direction through pixel coordinates `(u, v)`.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        math::normalize(math::mat_vec(&self.rotation, d_cam))
    }

    pub fn ray(&self, x: usize, y: usize, t_near: f64, t_far: f64) -> Ray {
        Ray {
            origin: self.translation,
            dir: self.pixel_direction(x as f64, y as f64),
            t_near,
            t_far,
        }
    }

    /// Same view at a different resolution. Intrinsics scale with the image so
    /// pixel centers keep their angular positions.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }

    /// `[R | t]` as 12 numbers, row-major.
    pub fn camera_to_world(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn from_camera_to_world(m: &[f64; 12], fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }
}

/// One ray per pixel, row-major (`y` outer, `x` inner).
pub fn make_rays(camera: &Camera, t_near: f64, t_far: f64) -> Result<Vec<Ray>, RenderError> {
    camera.validate()?;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            rays.push(camera.ray(x, y, t_near, t_far));
        }
    }
    Ok(rays)
}
