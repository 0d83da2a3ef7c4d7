//! Procedural bird-like shapes with analytic occupancy, their ground-truth
//! renders and occupancy query sets, plus loading of real image/mask pairs.

mod dataset;

pub use self::dataset::{read_queries, write_queries, Dataset, DatasetManifest, Sample, MANIFEST_FILE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::pifield::OccupancyField;
use crate::pointrender::{render, render_fixed_views, SplatConfig};
use crate::scenegeom::{Camera, ImageRgba, PointCloud, Vec3, DEFAULT_ORTHO_SCALE};
use crate::{Error, Result};

/// Every primitive must stay inside `[-BOUND, BOUND]³`.
pub const BOUND: f64 = 0.9;
pub const CATALOG_SIZE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64, color: [f64; 3] },
    Ellipsoid { center: Vec3, radii: Vec3, color: [f64; 3] },
    Capsule { a: Vec3, b: Vec3, radius: f64, color: [f64; 3] },
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

impl Primitive {
    pub fn color(&self) -> [f64; 3] {
        match self {
            Self::Sphere { color, .. } | Self::Ellipsoid { color, .. } | Self::Capsule { color, .. } => *color,
        }
    }

    /// Boundary counts as inside.
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Self::Sphere { center, radius, .. } => {
                let d = sub(p, center);
                dot(d, d) <= radius * radius
            }
            Self::Ellipsoid { center, radii, .. } => {
                let d = sub(p, center);
                (0..3).map(|a| (d[a] / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
            Self::Capsule { a, b, radius, .. } => {
                let d = sub(p, closest_on_segment(a, b, p));
                dot(d, d) <= radius * radius
            }
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Self::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Self::Ellipsoid { center, radii, .. } => {
                ([0, 1, 2].map(|k| center[k] - radii[k]), [0, 1, 2].map(|k| center[k] + radii[k]))
            }
            Self::Capsule { a, b, radius, .. } => {
                ([0, 1, 2].map(|k| a[k].min(b[k]) - radius), [0, 1, 2].map(|k| a[k].max(b[k]) + radius))
            }
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Self::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            // Knud Thomsen's approximation
            Self::Ellipsoid { radii: [a, b, c], .. } => {
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
            Self::Capsule { a, b, radius, .. } => 2.0 * PI * radius * norm(sub(b, a)) + 4.0 * PI * radius * radius,
        }
    }

    fn surface_point(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        match *self {
            Self::Sphere { center, radius, .. } => {
                let u = unit_vector(rng);
                [0, 1, 2].map(|k| center[k] + radius * u[k])
            }
            Self::Ellipsoid { center, radii, .. } => {
                let u = unit_vector(rng);
                [0, 1, 2].map(|k| center[k] + radii[k] * u[k])
            }
            Self::Capsule { a, b, radius, .. } => {
                let axis = sub(b, a);
                let len = norm(axis);
                let cyl = 2.0 * PI * radius * len;
                let total = cyl + 4.0 * PI * radius * radius;
                if len > 0.0 && rng.gen::<f64>() * total < cyl {
                    let t: f64 = rng.gen();
                    let dir = axis.map(|v| v / len);
                    // direction orthogonal to the axis
                    let mut u = unit_vector(rng);
                    let along = dot(u, dir);
                    u = [0, 1, 2].map(|k| u[k] - along * dir[k]);
                    let n = norm(u).max(1e-12);
                    [0, 1, 2].map(|k| a[k] + t * axis[k] + radius * u[k] / n)
                } else {
                    let u = unit_vector(rng);
                    let end = if dot(u, axis) > 0.0 { b } else { a };
                    [0, 1, 2].map(|k| end[k] + radius * u[k])
                }
            }
        }
    }
}

fn closest_on_segment(a: Vec3, b: Vec3, p: Vec3) -> Vec3 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    [0, 1, 2].map(|k| a[k] + t * ab[k])
}

/// Union of primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralShape {
    pub name: String,
    pub primitives: Vec<Primitive>,
}

impl ProceduralShape {
    pub fn new(name: impl Into<String>, primitives: Vec<Primitive>) -> Result<Self> {
        let shape = Self { name: name.into(), primitives };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::contract("procedural shape", format!("{} has no primitives", self.name)));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = p.bounds();
            if lo.iter().chain(&hi).any(|v| !v.is_finite() || v.abs() > BOUND) {
                return Err(Error::contract(
                    "procedural shape",
                    format!("{} primitive {i} leaves [-{BOUND}, {BOUND}]^3", self.name),
                ));
            }
            let c = p.color();
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(
                    "procedural shape",
                    format!("{} primitive {i} color out of range", self.name),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.primitives.iter().any(|q| q.contains(p))
    }

    /// Color of the first primitive containing `p`, else of the primitive with the nearest center.
    pub fn color_at(&self, p: Vec3) -> [f64; 3] {
        if let Some(q) = self.primitives.iter().find(|q| q.contains(p)) {
            return q.color();
        }
        let nearest = self
            .primitives
            .iter()
            .min_by(|a, b| center_distance(a, p).total_cmp(&center_distance(b, p)))
            .expect("shape has primitives");
        nearest.color()
    }

    /// Points on the visible surface of the union, colored by their primitive.
    pub fn surface_cloud(&self, density: f64, seed: u64) -> Result<PointCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::new();
        let mut colors = Vec::new();
        for (i, prim) in self.primitives.iter().enumerate() {
            let n = (prim.area() * density).ceil() as usize;
            for _ in 0..n {
                let p = prim.surface_point(&mut rng);
                let buried = self.primitives.iter().enumerate().any(|(j, q)| j != i && strictly_inside(q, p));
                if !buried {
                    positions.push(p);
                    colors.push(prim.color());
                }
            }
        }
        PointCloud::new(positions, colors, 0.5 / density.sqrt())
    }
}

fn center_distance(p: &Primitive, x: Vec3) -> f64 {
    let c = match *p {
        Primitive::Sphere { center, .. } | Primitive::Ellipsoid { center, .. } => center,
        Primitive::Capsule { a, b, .. } => closest_on_segment(a, b, x),
    };
    norm(sub(x, c))
}

fn strictly_inside(q: &Primitive, p: Vec3) -> bool {
    // shrink slightly so points on shared boundaries survive
    const EPS: f64 = 1e-9;
    match *q {
        Primitive::Sphere { center, radius, .. } => norm(sub(p, center)) < radius - EPS,
        Primitive::Ellipsoid { center, radii, .. } => {
            let d = sub(p, center);
            (0..3).map(|a| (d[a] / radii[a]).powi(2)).sum::<f64>() < 1.0 - EPS
        }
        Primitive::Capsule { a, b, radius, .. } => norm(sub(p, closest_on_segment(a, b, p))) < radius - EPS,
    }
}

impl OccupancyField for ProceduralShape {
    fn occupancy(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(|&p| if self.contains(p) { 1.0 } else { 0.0 }).collect()
    }

    fn color(&self, points: &[Vec3]) -> Vec<[f64; 3]> {
        points.iter().map(|&p| self.color_at(p)).collect()
    }
}

/// 1 when `point` is inside the union, boundary included.
pub fn analytic_occupancy(shape: &ProceduralShape, point: Vec3) -> u8 {
    u8::from(shape.contains(point))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Bird `index` of the fixed catalog: body, then head, beak, tail and wing as
/// the primitive count (2 to 5) allows. The body faces +x.
pub fn catalog_shape(index: usize) -> ProceduralShape {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1D5 + index as u64);
    let count = 2 + index % 4;
    let hue = index as f64 / CATALOG_SIZE as f64;
    let body_color = hsv(hue, 0.75, 0.85);
    let rx = rng.gen_range(0.34..0.48);
    let ry = rng.gen_range(0.24..0.32);
    let rz = rng.gen_range(0.22..0.30);
    let body_y = rng.gen_range(-0.12..-0.02);
    let mut prims = vec![Primitive::Ellipsoid { center: [0.0, body_y, 0.0], radii: [rx, ry, rz], color: body_color }];
    let hr = rng.gen_range(0.15..0.21);
    let head = [rx * 0.8, body_y + ry * 0.9 + 0.05, 0.0];
    prims.push(Primitive::Sphere { center: head, radius: hr, color: hsv(hue + 0.5, 0.6, 0.9) });
    if count >= 3 {
        let tip = rng.gen_range(0.12..0.18);
        prims.push(Primitive::Capsule {
            a: [head[0] + 0.8 * hr, head[1], 0.0],
            b: [head[0] + hr + tip, head[1] - 0.04, 0.0],
            radius: 0.045,
            color: [0.95, 0.6, 0.1],
        });
    }
    if count >= 4 {
        let lift = rng.gen_range(0.05..0.2);
        prims.push(Primitive::Capsule {
            a: [-rx * 0.7, body_y, 0.0],
            b: [-rx - 0.22, body_y + lift, 0.0],
            radius: 0.075,
            color: hsv(hue, 0.8, 0.5),
        });
    }
    if count >= 5 {
        prims.push(Primitive::Ellipsoid {
            center: [-0.05, body_y + 0.06, rz * 0.75],
            radii: [rx * 0.7, 0.09, 0.12],
            color: hsv(hue + 0.15, 0.5, 0.95),
        });
    }
    ProceduralShape::new(format!("bird_{index:02}"), prims).expect("catalog shapes fit the bounds")
}

pub fn catalog() -> Vec<ProceduralShape> {
    (0..CATALOG_SIZE).map(catalog_shape).collect()
}

/// Labeled occupancy queries.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub points: Vec<Vec3>,
    pub labels: Vec<u8>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l)).collect()
    }
}

/// `n_uniform` points uniform in `[-1, 1]³` followed by `n_surface` surface
/// points perturbed by isotropic Gaussian noise, all labeled analytically.
pub fn sample_queries(
    shape: &ProceduralShape,
    n_uniform: usize,
    n_surface: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<QuerySet> {
    if n_uniform == 0 || n_surface == 0 {
        return Err(Error::contract("sample_queries", "point counts must be positive"));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::contract("sample_queries", "noise_sd must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec3> = (0..n_uniform).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..=1.0))).collect();
    let weights: Vec<f64> = shape.primitives.iter().map(|p| p.area()).collect();
    let total: f64 = weights.iter().sum();
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::contract("sample_queries", e.to_string()))?;
    for _ in 0..n_surface {
        let mut pick = rng.gen::<f64>() * total;
        let mut idx = 0;
        while idx + 1 < weights.len() && pick >= weights[idx] {
            pick -= weights[idx];
            idx += 1;
        }
        let s = shape.primitives[idx].surface_point(&mut rng);
        points.push([0, 1, 2].map(|k| s[k] + noise.sample(&mut rng)));
    }
    let labels = points.iter().map(|&p| analytic_occupancy(shape, p)).collect();
    Ok(QuerySet { points, labels })
}

/// Ground-truth renders of a shape: the canonical input view and the three fixed views.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub input: ImageRgba,
    pub views: [ImageRgba; 3],
}

/// Ground-truth surface points per unit area: one per square pixel of the
/// default camera's image plane.
pub fn surface_density(width: usize, height: usize) -> f64 {
    let span = 2.0 * DEFAULT_ORTHO_SCALE;
    (width as f64 / span) * (height as f64 / span)
}

pub fn input_camera(size: usize) -> Result<Camera> {
    Camera::for_azimuth(0.0, size, size, DEFAULT_ORTHO_SCALE)
}

pub fn render_ground_truth(
    shape: &ProceduralShape,
    image_size: usize,
    cfg: &SplatConfig,
    seed: u64,
) -> Result<GroundTruth> {
    let cloud = shape.surface_cloud(surface_density(image_size, image_size), seed)?;
    let views = render_fixed_views(&cloud, (image_size, image_size), cfg)?;
    let input = render(&cloud, &input_camera(image_size)?, cfg)?.image;
    let [a, b, c] = views;
    Ok(GroundTruth { input, views: [a.image, b.image, c.image] })
}

/// Renders a shape from an arbitrary camera with the ground-truth cloud.
pub fn render_shape(shape: &ProceduralShape, camera: &Camera, cfg: &SplatConfig, seed: u64) -> Result<ImageRgba> {
    let cloud = shape.surface_cloud(surface_density(camera.width(), camera.height()), seed)?;
    Ok(render(&cloud, camera, cfg)?.image)
}

/// Image plus binary silhouette: RGB zeroed outside the mask, alpha = mask.
pub fn load_real_sample(image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<ImageRgba> {
    let image = ImageRgba::load_png(image_path.as_ref())?;
    let mask_img = ImageRgba::load_png(mask_path.as_ref())?;
    if !image.same_extent(&mask_img) {
        return Err(Error::format(
            mask_path.as_ref(),
            format!(
                "mask is {}x{} but image is {}x{}",
                mask_img.width(),
                mask_img.height(),
                image.width(),
                image.height()
            ),
        ));
    }
    let mask: Vec<bool> = mask_img.rgb().iter().map(|c| (c[0] + c[1] + c[2]) / 3.0 > 0.5).collect();
    Ok(image.with_mask(&mask))
}

/// Every `NAME.png` with a matching `NAME_mask.png` in `dir`, sorted by name.
pub fn load_real_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, ImageRgba)>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(".png") {
            if !stem.ends_with("_mask") && dir.join(format!("{stem}_mask.png")).is_file() {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let img = load_real_sample(dir.join(format!("{n}.png")), dir.join(format!("{n}_mask.png")))?;
            Ok((n, img))
        })
        .collect()
}

/// Writes an image/mask pair in the real-data layout (`NAME.png`, `NAME_mask.png`).
pub fn save_real_sample(image: &ImageRgba, dir: impl AsRef<Path>, name: &str) -> Result<()> {
    let dir = dir.as_ref();
    let opaque = ImageRgba::new(image.width(), image.height(), image.rgb().to_vec(), vec![1.0; image.pixel_count()])?;
    opaque.save_png(dir.join(format!("{name}.png")))?;
    let mask_rgb = image.mask().iter().map(|&m| if m { [1.0; 3] } else { [0.0; 3] }).collect();
    ImageRgba::new(image.width(), image.height(), mask_rgb, vec![1.0; image.pixel_count()])?
        .save_png(dir.join(format!("{name}_mask.png")))
}
