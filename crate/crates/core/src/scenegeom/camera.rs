use crate::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// World half-extent covered by half the image, unless configured otherwise.
pub const DEFAULT_ORTHO_SCALE: f64 = 1.2;

/// Orthographic camera orbiting the origin.
///
/// View space has x to the right, y up and z as depth; smaller depth is
/// closer to the camera. Pixel coordinates grow rightward and downward, and
/// pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    azimuth: f64,
    elevation: f64,
    ortho_scale: f64,
    width: usize,
    height: usize,
    rotation: Mat3,
}

/// A world point mapped into the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl Camera {
    pub fn new(azimuth: f64, elevation: f64, ortho_scale: f64, width: usize, height: usize) -> Result<Self> {
        if !(ortho_scale > 0.0) || !ortho_scale.is_finite() {
            return Err(Error::contract("camera", format!("ortho_scale must be positive, got {ortho_scale}")));
        }
        if width < 8 || height < 8 {
            return Err(Error::contract("camera", format!("image must be at least 8x8, got {width}x{height}")));
        }
        Ok(Self { azimuth, elevation, ortho_scale, width, height, rotation: view_rotation(azimuth, elevation) })
    }

    /// Level camera looking at the origin from `azimuth` radians around the vertical axis.
    pub fn for_azimuth(azimuth: f64, width: usize, height: usize, ortho_scale: f64) -> Result<Self> {
        Self::new(azimuth, 0.0, ortho_scale, width, height)
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn ortho_scale(&self) -> f64 {
        self.ortho_scale
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// World-to-view rotation.
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn to_view(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
    }

    pub fn project(&self, p: Vec3) -> Projection {
        let v = self.to_view(p);
        Projection {
            x: (v[0] / self.ortho_scale + 1.0) * self.width as f64 * 0.5,
            y: (1.0 - v[1] / self.ortho_scale) * self.height as f64 * 0.5,
            depth: v[2],
        }
    }

    /// Derivatives of pixel x and pixel y with respect to the world point.
    pub fn pixel_jacobian(&self) -> (Vec3, Vec3) {
        let (sx, sy) = self.pixels_per_unit();
        let r = &self.rotation;
        ([r[0][0] * sx, r[0][1] * sx, r[0][2] * sx], [-r[1][0] * sy, -r[1][1] * sy, -r[1][2] * sy])
    }

    /// Pixels per world unit along x and y.
    pub fn pixels_per_unit(&self) -> (f64, f64) {
        (self.width as f64 * 0.5 / self.ortho_scale, self.height as f64 * 0.5 / self.ortho_scale)
    }

    /// World-space (x, y) in view coordinates of a pixel position.
    pub fn unproject_xy(&self, px: f64, py: f64) -> (f64, f64) {
        (
            (px / (self.width as f64 * 0.5) - 1.0) * self.ortho_scale,
            (1.0 - py / (self.height as f64 * 0.5)) * self.ortho_scale,
        )
    }
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn view_rotation(azimuth: f64, elevation: f64) -> Mat3 {
    // rotation about the vertical axis by -azimuth
    let (s, c) = (-azimuth).sin_cos();
    let yaw = [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]];
    if elevation == 0.0 {
        return yaw;
    }
    let (se, ce) = elevation.sin_cos();
    let pitch = [[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| pitch[i][k] * yaw[k][j]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: Vec3, b: Vec3) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn azimuth_zero_is_identity() {
        let c = Camera::for_azimuth(0.0, 64, 64, 1.0).unwrap();
        assert_eq!(c.rotation(), &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_turn_maps_x_to_depth() {
        let c = Camera::for_azimuth(FRAC_PI_2, 64, 64, 1.0).unwrap();
        assert!(close(c.to_view([1.0, 0.0, 0.0]), [0.0, 0.0, 1.0]));
        let half = Camera::for_azimuth(PI, 64, 64, 1.0).unwrap();
        assert!(close(half.to_view([1.0, 0.0, 0.0]), [-1.0, 0.0, 0.0]));
    }

    #[test]
    fn projection_examples() {
        let c = Camera::for_azimuth(0.0, 64, 64, 1.0).unwrap();
        assert_eq!(c.project([0.0, 0.0, 0.0]), Projection { x: 32.0, y: 32.0, depth: 0.0 });
        assert_eq!(c.project([1.0, 0.0, 0.0]), Projection { x: 64.0, y: 32.0, depth: 0.0 });
        let q = Camera::for_azimuth(FRAC_PI_2, 64, 64, 1.0).unwrap();
        let p = q.project([1.0, 0.0, 0.0]);
        assert!((p.x - 32.0).abs() < 1e-12 && (p.y - 32.0).abs() < 1e-12 && (p.depth - 1.0).abs() < 1e-12);
    }

    #[test]
    fn y_axis_points_down_in_image() {
        let c = Camera::for_azimuth(0.0, 64, 64, 1.0).unwrap();
        assert!(c.project([0.0, 0.5, 0.0]).y < 32.0);
    }

    #[test]
    fn rotation_is_orthonormal_and_periodic() {
        for k in 0..16 {
            let a = k as f64 * 0.41 - 3.0;
            let c = Camera::new(a, 0.3 * (k as f64 - 8.0) / 8.0, 1.2, 32, 32).unwrap();
            let r = c.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|m| r[m][i] * r[m][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((d - expect).abs() < 1e-12);
                }
            }
            let wrapped = Camera::for_azimuth(a + 2.0 * PI, 32, 32, 1.2).unwrap();
            let base = Camera::for_azimuth(a, 32, 32, 1.2).unwrap();
            for i in 0..3 {
                assert!(close(wrapped.rotation()[i], base.rotation()[i]));
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Camera::new(0.0, 0.0, 0.0, 64, 64).is_err());
        assert!(Camera::new(0.0, 0.0, 1.0, 4, 64).is_err());
    }

    #[test]
    fn jacobian_matches_projection_differences() {
        let c = Camera::for_azimuth(0.7, 64, 48, 1.2).unwrap();
        let (jx, jy) = c.pixel_jacobian();
        let p = [0.2, -0.3, 0.4];
        let base = c.project(p);
        for axis in 0..3 {
            let mut q = p;
            q[axis] += 1.0;
            let moved = c.project(q);
            assert!((moved.x - base.x - jx[axis]).abs() < 1e-9);
            assert!((moved.y - base.y - jy[axis]).abs() < 1e-9);
        }
    }
}
