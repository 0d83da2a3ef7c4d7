//! Marching-cubes surface extraction over an occupancy lattice and OBJ export.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use self::tables::{EDGE_TABLE, TRIANGLE_TABLE};
use crate::par;
use crate::pifield::{lattice, OccupancyField};
use crate::scenegeom::{Mesh, Vec3};
use crate::{Error, Result};

pub const DEFAULT_ISO: f64 = 0.5;

/// Corner offsets of a cube, in table order.
const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Corner pairs of the twelve cube edges, in table order.
const EDGES: [[usize; 2]; 12] =
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Occupancy values at the nodes of a lattice spanning `[-1, 1]³`.
///
/// Values are stored x slowest, z fastest, matching [`lattice`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    resolution: [usize; 3],
    values: Vec<f64>,
    pub iso: f64,
}

impl ScalarGrid {
    pub fn new(resolution: [usize; 3], values: Vec<f64>, iso: f64) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::contract("scalar grid", format!("resolution {resolution:?} below 2")));
        }
        let n: usize = resolution.iter().product();
        if values.len() != n {
            return Err(Error::contract("scalar grid", format!("{} values for {n} nodes", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract("scalar grid", format!("value {v} outside [0, 1]")));
        }
        if !iso.is_finite() {
            return Err(Error::contract("scalar grid", "iso must be finite"));
        }
        Ok(Self { resolution, values, iso })
    }

    /// Samples a field on a cubic `res³` lattice.
    pub fn from_field(field: &dyn OccupancyField, res: usize, iso: f64) -> Result<Self> {
        if res < 2 {
            return Err(Error::contract("scalar grid", format!("resolution {res} below 2")));
        }
        let values = field.occupancy(&lattice(res));
        Self::new([res; 3], values, iso)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.resolution[1] + j) * self.resolution[2] + k
    }

    pub fn value(&self, node: [usize; 3]) -> f64 {
        self.values[self.index(node)]
    }

    pub fn position(&self, node: [usize; 3]) -> Vec3 {
        [0, 1, 2].map(|a| -1.0 + 2.0 * node[a] as f64 / (self.resolution[a] - 1) as f64)
    }

    fn inside(&self, node: [usize; 3]) -> bool {
        self.value(node) >= self.iso
    }

    /// Crossing point on the lattice edge from `node` along `axis`.
    fn crossing(&self, node: [usize; 3], axis: usize) -> Vec3 {
        let mut other = node;
        other[axis] += 1;
        let (a, b) = (self.position(node), self.position(other));
        let (va, vb) = (self.value(node), self.value(other));
        let t = (self.iso - va) / (vb - va);
        [0, 1, 2].map(|c| a[c] + t * (b[c] - a[c]))
    }
}

/// Lattice edge identified by its lower node and axis.
type EdgeKey = (usize, u8);

fn cube_triangles(grid: &ScalarGrid, base: [usize; 3], out: &mut Vec<[EdgeKey; 3]>) {
    let node = |c: usize| [0, 1, 2].map(|a| base[a] + CORNERS[c][a]);
    let mut case = 0usize;
    for c in 0..8 {
        if !grid.inside(node(c)) {
            case |= 1 << c;
        }
    }
    if EDGE_TABLE[case] == 0 {
        return;
    }
    let key = |e: usize| -> EdgeKey {
        let [c0, c1] = EDGES[e];
        let (n0, n1) = (node(c0), node(c1));
        let axis = (0..3).find(|&a| n0[a] != n1[a]).expect("edge spans one axis");
        let low = if n0[axis] < n1[axis] { n0 } else { n1 };
        (grid.index(low), axis as u8)
    };
    for tri in TRIANGLE_TABLE[case].chunks_exact(3).take_while(|t| t[0] >= 0) {
        out.push([key(tri[0] as usize), key(tri[1] as usize), key(tri[2] as usize)]);
    }
}

/// Triangulates the `iso` level set of `grid`.
///
/// Nodes with value `>= iso` are inside. Vertices sit on lattice edges at the
/// linearly interpolated crossing and are shared between adjacent cubes.
/// Triangle normals point toward lower occupancy.
pub fn marching_cubes(grid: &ScalarGrid) -> Mesh {
    let [rx, ry, rz] = grid.resolution;
    let slabs = par::map_indexed(rx - 1, |i| {
        let mut tris = Vec::new();
        for j in 0..ry - 1 {
            for k in 0..rz - 1 {
                cube_triangles(grid, [i, j, k], &mut tris);
            }
        }
        tris
    });
    let mut ids: HashMap<EdgeKey, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let idx = tri.map(|key| {
            *ids.entry(key).or_insert_with(|| {
                let (flat, axis) = key;
                let node = [flat / (ry * rz), (flat / rz) % ry, flat % rz];
                vertices.push(grid.crossing(node, axis as usize));
                vertices.len() - 1
            })
        });
        triangles.push(idx);
    }
    Mesh { vertices, triangles, colors: None }
}

/// Samples `field` on a `res³` lattice and extracts its `iso` surface.
pub fn extract_mesh(field: &dyn OccupancyField, res: usize, iso: f64) -> Result<Mesh> {
    Ok(marching_cubes(&ScalarGrid::from_field(field, res, iso)?))
}

/// Sets per-vertex colors from the field's color prediction.
pub fn colorize(mesh: &mut Mesh, field: &dyn OccupancyField) {
    let colors = if mesh.vertices.is_empty() { Vec::new() } else { field.color(&mesh.vertices) };
    mesh.colors = Some(colors.into_iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect());
}

/// Wavefront OBJ text for a mesh.
pub fn obj_string(mesh: &Mesh) -> Result<String> {
    mesh.validate()?;
    let mut s = String::new();
    let _ = writeln!(s, "# implicit-forge mesh: {} vertices, {} faces", mesh.vertices.len(), mesh.triangles.len());
    for (i, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
        if let Some(c) = &mesh.colors {
            let _ = write!(s, " {:.6} {:.6} {:.6}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    Ok(s)
}

pub fn export_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, obj_string(mesh)?).map_err(|e| Error::io(path, e))
}

/// Parses the subset of OBJ written by [`export_obj`]: `v` lines with optional
/// colors and triangular `f` lines with plain 1-based indices.
pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", n + 1));
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let nums =
                    parts.map(|p| p.parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<Vec<_>>>()?;
                match nums.len() {
                    3 => {}
                    6 => colors.push([nums[3], nums[4], nums[5]]),
                    _ => return Err(bad("vertex needs 3 or 6 numbers")),
                }
                vertices.push([nums[0], nums[1], nums[2]]);
            }
            Some("f") => {
                let idx = parts
                    .map(|p| match p.parse::<usize>() {
                        Ok(i) if i > 0 => Ok(i - 1),
                        _ => Err(bad("bad face index")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() != 3 {
                    return Err(bad("only triangles are supported"));
                }
                triangles.push([idx[0], idx[1], idx[2]]);
            }
            Some(t) if !t.starts_with('#') => return Err(bad("unknown record")),
            _ => {}
        }
    }
    let colors = match colors.len() {
        0 => None,
        c if c == vertices.len() => Some(colors),
        _ => return Err(Error::format(path, "colors given for only some vertices")),
    };
    let mesh = Mesh { vertices, triangles, colors };
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

/// Counts how many triangles use each undirected edge.
pub fn edge_use_counts(mesh: &Mesh) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::new();
    for t in &mesh.triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

pub fn is_watertight(mesh: &Mesh) -> bool {
    !mesh.triangles.is_empty() && edge_use_counts(mesh).values().all(|&c| c == 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Ball {
        radius: f64,
        center: Vec3,
        smooth: bool,
    }

    impl OccupancyField for Ball {
        fn occupancy(&self, points: &[Vec3]) -> Vec<f64> {
            points
                .iter()
                .map(|p| {
                    let d = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>().sqrt();
                    if self.smooth {
                        (0.5 + (self.radius - d)).clamp(0.0, 1.0)
                    } else if d <= self.radius {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        fn color(&self, points: &[Vec3]) -> Vec<[f64; 3]> {
            points.iter().map(|p| [p[0].abs(), 0.25, 1.5]).collect()
        }
    }

    fn sphere(res: usize, smooth: bool) -> Mesh {
        let ball = Ball { radius: 0.5, center: [0.0; 3], smooth };
        extract_mesh(&ball, res, DEFAULT_ISO).unwrap()
    }

    fn constant(v: f64) -> ScalarGrid {
        ScalarGrid::new([6, 6, 6], vec![v; 216], 0.5).unwrap()
    }

    #[test]
    fn tables_agree() {
        for case in 0..256 {
            let mut used = 0u16;
            for e in TRIANGLE_TABLE[case].iter().take_while(|e| **e >= 0) {
                used |= 1 << *e;
            }
            assert_eq!(used, EDGE_TABLE[case], "case {case}");
        }
    }

    #[test]
    fn uniform_fields_have_no_surface() {
        assert!(marching_cubes(&constant(0.0)).is_empty());
        assert!(marching_cubes(&constant(1.0)).is_empty());
        // equal to iso counts as inside everywhere
        assert!(marching_cubes(&constant(0.5)).is_empty());
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(ScalarGrid::new([1, 4, 4], vec![0.0; 16], 0.5).is_err());
        assert!(ScalarGrid::new([2, 2, 2], vec![0.0; 7], 0.5).is_err());
        assert!(ScalarGrid::new([2, 2, 2], vec![1.5; 8], 0.5).is_err());
    }

    #[test]
    fn sphere_vertices_near_radius_and_watertight() {
        let mesh = sphere(32, false);
        assert!(mesh.vertices.len() > 100);
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.5).abs() <= 1.5 * (2.0 / 32.0), "{r}");
        }
        assert!(is_watertight(&mesh));
        mesh.validate().unwrap();
    }

    #[test]
    fn normals_point_toward_lower_occupancy() {
        for smooth in [false, true] {
            let mesh = sphere(24, smooth);
            for t in &mesh.triangles {
                let [a, b, c] = t.map(|i| mesh.vertices[i]);
                let u = [0, 1, 2].map(|k| b[k] - a[k]);
                let w = [0, 1, 2].map(|k| c[k] - a[k]);
                let n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
                let centroid = [0, 1, 2].map(|k| (a[k] + b[k] + c[k]) / 3.0);
                assert!((0..3).map(|k| n[k] * centroid[k]).sum::<f64>() > 0.0);
            }
        }
    }

    #[test]
    fn vertices_interpolate_to_iso() {
        let ball = Ball { radius: 0.45, center: [0.03, -0.02, 0.05], smooth: true };
        let grid = ScalarGrid::from_field(&ball, 20, 0.5).unwrap();
        let mesh = marching_cubes(&grid);
        // the smooth field is linear in distance, so it is close to iso at each vertex
        for v in &mesh.vertices {
            let val = ball.occupancy(&[*v])[0];
            assert!((val - 0.5).abs() < 0.02, "{val}");
        }
        // each vertex lies on a lattice edge: two coordinates are lattice nodes
        let step = 2.0 / 19.0;
        for v in &mesh.vertices {
            let on_node = v.iter().filter(|c| {
                let f = (*c + 1.0) / step;
                (f - f.round()).abs() < 1e-9
            });
            assert!(on_node.count() >= 2);
        }
        assert!(is_watertight(&mesh));
    }

    #[test]
    fn repeated_calls_are_identical() {
        let a = sphere(20, true);
        let b = sphere(20, true);
        assert_eq!(obj_string(&a).unwrap(), obj_string(&b).unwrap());
    }

    #[test]
    fn obj_text_layout() {
        let empty = obj_string(&Mesh::default()).unwrap();
        assert_eq!(empty.lines().count(), 1);
        assert!(empty.starts_with('#'));
        let tri = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.5]],
            triangles: vec![[0, 1, 2]],
            colors: None,
        };
        let s = obj_string(&tri).unwrap();
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert!(s.contains("v 0.000000 -1.000000 0.500000\n"));
        assert!(s.ends_with("f 1 2 3\n"));
        assert!(!s.contains('\r'));
    }

    #[test]
    fn obj_round_trip() {
        let ball = Ball { radius: 0.5, center: [0.0; 3], smooth: false };
        let mut mesh = sphere(16, false);
        colorize(&mut mesh, &ball);
        assert!(mesh.colors.as_ref().unwrap().iter().all(|c| c[2] == 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        export_obj(&mesh, &path).unwrap();
        let back = load_obj(&path).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.triangles, mesh.triangles);
        assert!(back.colors.is_some());
        assert!(parse_obj("v 1 2\n", Path::new("x")).is_err());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n", Path::new("x")).is_err());
    }
}
