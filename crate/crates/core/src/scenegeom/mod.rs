//! Cameras, images, point clouds and meshes shared by the renderer, the
//! implicit field, training and evaluation.

mod camera;
mod image;

pub use self::camera::{Camera, Mat3, Projection, Vec3, DEFAULT_ORTHO_SCALE};
pub use self::image::{ImageRgba, SILHOUETTE_THRESHOLD};

use crate::{Error, Result};

/// Points with per-point color and opacity, splatted with a shared world radius.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub radius: f64,
}

impl PointCloud {
    /// Fully opaque cloud.
    pub fn new(positions: Vec<Vec3>, colors: Vec<[f64; 3]>, radius: f64) -> Result<Self> {
        let opacity = vec![1.0; positions.len()];
        Self::with_opacity(positions, colors, opacity, radius)
    }

    pub fn with_opacity(positions: Vec<Vec3>, colors: Vec<[f64; 3]>, opacity: Vec<f64>, radius: f64) -> Result<Self> {
        if positions.len() != colors.len() || positions.len() != opacity.len() {
            return Err(Error::contract(
                "point cloud",
                format!("{} positions, {} colors, {} opacities", positions.len(), colors.len(), opacity.len()),
            ));
        }
        if !(radius > 0.0) {
            return Err(Error::contract("point cloud", format!("radius must be positive, got {radius}")));
        }
        Ok(Self { positions, colors, opacity, radius })
    }

    pub fn empty(radius: f64) -> Self {
        Self { positions: Vec::new(), colors: Vec::new(), opacity: Vec::new(), radius }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Triangle mesh with optional per-vertex colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::contract("mesh", format!("triangle {t} indexes past {n} vertices")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::contract("mesh", format!("triangle {t} is degenerate: {tri:?}")));
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::contract("mesh", "color count differs from vertex count"));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_invariants() {
        assert!(PointCloud::new(vec![[0.0; 3]], vec![], 0.1).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[1.0; 3]], 0.0).is_err());
        assert_eq!(PointCloud::new(vec![[0.0; 3]], vec![[1.0; 3]], 0.1).unwrap().opacity, vec![1.0]);
    }

    #[test]
    fn mesh_validation() {
        let mut m = Mesh { vertices: vec![[0.0; 3]; 3], triangles: vec![[0, 1, 2]], colors: None };
        assert!(m.validate().is_ok());
        m.triangles.push([0, 0, 1]);
        assert!(m.validate().is_err());
        m.triangles[1] = [0, 1, 3];
        assert!(m.validate().is_err());
    }
}
