//! Pinhole cameras in the OpenCV convention (+z forward, +y down).

use serde::{Deserialize, Serialize};

use crate::linalg::{Affine, Ray, V3};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    /// Row-major 3×3 intrinsics.
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    /// Row-major 4×4 world-from-camera transform.
    pub world_from_camera: [[f64; 4]; 4],
}

impl Camera {
    /// Camera at `eye` looking at `target` with vertical field of view `fov_y`.
    pub fn look_at(width: usize, height: usize, fov_y: f64, eye: V3, target: V3, up: V3) -> Self {
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(x);
        let m = [
            [x.x, y.x, z.x, eye.x],
            [x.y, y.y, z.y, eye.y],
            [x.z, y.z, z.z, eye.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera {
            width,
            height,
            k: [
                [f, 0.0, 0.5 * width as f64],
                [0.0, f, 0.5 * height as f64],
                [0.0, 0.0, 1.0],
            ],
            world_from_camera: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::schema("camera.width", "image size must be positive"));
        }
        if !(self.k[0][0] > 0.0 && self.k[1][1] > 0.0) {
            return Err(Error::schema("camera.K", "focal lengths must be positive"));
        }
        if self.k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::schema("camera.K", "last row must be [0, 0, 1]"));
        }
        if self.world_from_camera[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::schema("camera.world_from_camera", "last row must be [0, 0, 0, 1]"));
        }
        if !self.extrinsics().is_rigid(1e-6) {
            return Err(Error::schema(
                "camera.world_from_camera",
                "rotation part is not orthonormal",
            ));
        }
        Ok(())
    }

    pub fn extrinsics(&self) -> Affine {
        let m = &self.world_from_camera;
        let mut rows = [0.0; 16];
        for r in 0..4 {
            rows[4 * r..4 * r + 4].copy_from_slice(&m[r]);
        }
        Affine::from_rows(&rows)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through the center of pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize) -> Ray {
        self.ray_at(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Ray through continuous image coordinates.
    pub fn ray_at(&self, u: f64, v: f64) -> Ray {
        let k = &self.k;
        let yc = (v - k[1][2]) / k[1][1];
        let xc = (u - k[0][2] - k[0][1] * yc) / k[0][0];
        let e = self.extrinsics();
        Ray::new(e.trans, e.lin.mul_vec(V3::new(xc, yc, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vec3;

    #[test]
    fn center_ray_points_at_target() {
        let eye = V3::new(0.0, -3.0, 1.0);
        let c = Camera::look_at(64, 48, 0.8, eye, Vec3::ZERO, Vec3::Z);
        c.validate().unwrap();
        let r = c.ray_at(32.0, 24.0);
        assert!((r.origin - eye).norm() < 1e-12);
        assert!((r.dir - (Vec3::ZERO - eye).normalize()).norm() < 1e-12);
        // Image +y points down, so the top row looks up.
        assert!(c.ray(32, 0).dir.z > r.dir.z);
    }
}
