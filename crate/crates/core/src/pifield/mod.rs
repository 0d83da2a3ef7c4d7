//! Pixel-aligned implicit field.
//!
//! A small convolutional encoder turns the input image into a feature grid at
//! a quarter of the image resolution. A 3D query point is projected into the
//! input camera, the grid is sampled bilinearly at that pixel, the view depth
//! is appended, and two MLP heads predict occupancy probability and RGB.

pub mod checkpoint;
mod params;

pub use params::{
    architecture, BoundParams, FieldParams, ParamGroup, ENCODER_CHANNELS, ENCODER_STRIDES, FEATURE_DIM, FEATURE_STRIDE,
    HIDDEN,
};

use crate::diffcalc::{kernels, Graph, Tensor, Var};
use crate::pointrender::DiffCloud;
use crate::scenegeom::{Camera, ImageRgba, PointCloud, Vec3};
use crate::{Error, Result};

/// Points evaluated per batch on the gradient-free path.
const EVAL_BATCH: usize = 8192;

/// Encoder output: one `FEATURE_DIM` vector per cell, stored `[cells, FEATURE_DIM]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid<'g> {
    pub cells: Var<'g>,
    pub width: usize,
    pub height: usize,
}

/// Plain copy of a feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureValues {
    pub data: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

/// Runs the encoder on an image whose extents are divisible by 4.
pub fn encode_image<'g>(graph: &'g Graph, params: &BoundParams<'g>, image: &ImageRgba) -> Result<FeatureGrid<'g>> {
    let (w, h) = (image.width(), image.height());
    if w % FEATURE_STRIDE != 0 || h % FEATURE_STRIDE != 0 {
        return Err(Error::contract("encode_image", format!("extents {w}x{h} must be divisible by {FEATURE_STRIDE}")));
    }
    let mut x = graph.constant(image.to_chw());
    for (l, &stride) in ENCODER_STRIDES.iter().enumerate() {
        let (wt, b) = params.encoder_layer(l);
        x = x.conv2d(wt, b, stride)?;
        if l + 1 < ENCODER_STRIDES.len() {
            x = x.relu();
        }
    }
    let (gw, gh) = (w / FEATURE_STRIDE, h / FEATURE_STRIDE);
    let cells = x.reshape(&[FEATURE_DIM, gw * gh])?.transpose()?;
    Ok(FeatureGrid { cells, width: gw, height: gh })
}

/// Bilinear taps into a `width × height` cell grid for a continuous pixel position.
///
/// Cell `(i, j)` is centered on pixel `((i + 0.5)·4, (j + 0.5)·4)`. Corners
/// outside the grid contribute zero, so far-away queries sample a zero vector.
pub fn bilinear_taps(width: usize, height: usize, px: f64, py: f64) -> Vec<(usize, f64)> {
    let u = px / FEATURE_STRIDE as f64 - 0.5;
    let v = py / FEATURE_STRIDE as f64 - 0.5;
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let mut taps = Vec::with_capacity(4);
    for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
        for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
            let (cu, cv) = (u0 + du, v0 + dv);
            let w = wu * wv;
            if w == 0.0 || cu < 0.0 || cv < 0.0 || cu >= width as f64 || cv >= height as f64 {
                continue;
            }
            taps.push((cv as usize * width + cu as usize, w));
        }
    }
    taps
}

impl<'g> FeatureGrid<'g> {
    /// Differentiable bilinear samples, `[N, FEATURE_DIM]`.
    pub fn sample(&self, pixels: &[(f64, f64)]) -> Result<Var<'g>> {
        let taps = pixels.iter().map(|&(x, y)| bilinear_taps(self.width, self.height, x, y)).collect();
        Ok(self.cells.gather_rows(taps)?)
    }

    pub fn values(&self) -> FeatureValues {
        FeatureValues { data: self.cells.value().into_data(), width: self.width, height: self.height }
    }
}

impl FeatureValues {
    pub fn sample(&self, px: f64, py: f64) -> Vec<f64> {
        let mut out = vec![0.0; FEATURE_DIM];
        for (row, w) in bilinear_taps(self.width, self.height, px, py) {
            let src = &self.data[row * FEATURE_DIM..(row + 1) * FEATURE_DIM];
            out.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
        }
        out
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let row = j * self.width + i;
        &self.data[row * FEATURE_DIM..(row + 1) * FEATURE_DIM]
    }
}

fn pixels_and_depths(camera: &Camera, points: &[Vec3]) -> (Vec<(f64, f64)>, Vec<f64>) {
    points
        .iter()
        .map(|&p| {
            let q = camera.project(p);
            ((q.x, q.y), q.depth)
        })
        .unzip()
}

fn head_forward<'g>(params: &BoundParams<'g>, head: usize, input: Var<'g>) -> Result<Var<'g>> {
    let layers = params.head(head);
    let mut x = input;
    for (l, (w, b)) in layers.iter().enumerate() {
        x = x.matmul(*w)?.add_row_bias(*b)?;
        if l + 1 < layers.len() {
            x = x.relu();
        }
    }
    Ok(x.sigmoid())
}

fn head_input<'g>(graph: &'g Graph, grid: &FeatureGrid<'g>, camera: &Camera, points: &[Vec3]) -> Result<Var<'g>> {
    if points.is_empty() {
        return Err(Error::contract("query", "no query points"));
    }
    let (pixels, depths) = pixels_and_depths(camera, points);
    let feats = grid.sample(&pixels)?;
    let z = graph.constant(Tensor::new(vec![points.len(), 1], depths)?);
    Ok(feats.concat_cols(z)?)
}

/// Differentiable occupancy probabilities `[N]` for world points.
pub fn query_occupancy<'g>(
    graph: &'g Graph,
    params: &BoundParams<'g>,
    grid: &FeatureGrid<'g>,
    camera: &Camera,
    points: &[Vec3],
) -> Result<Var<'g>> {
    let input = head_input(graph, grid, camera, points)?;
    Ok(head_forward(params, 0, input)?.reshape(&[points.len()])?)
}

/// Differentiable occupancy `[N]` and colors `[N×3]` for world points.
pub fn query_field<'g>(
    graph: &'g Graph,
    params: &BoundParams<'g>,
    grid: &FeatureGrid<'g>,
    camera: &Camera,
    points: &[Vec3],
) -> Result<(Var<'g>, Var<'g>)> {
    let input = head_input(graph, grid, camera, points)?;
    let occ = head_forward(params, 0, input)?.reshape(&[points.len()])?;
    let col = head_forward(params, 1, input)?;
    Ok((occ, col))
}

/// Anything that can report occupancy and color at world points.
pub trait OccupancyField {
    fn occupancy(&self, points: &[Vec3]) -> Vec<f64>;
    fn color(&self, points: &[Vec3]) -> Vec<[f64; 3]>;
}

/// Gradient-free evaluator for a fixed image and parameter set.
#[derive(Clone, Debug)]
pub struct FieldEvaluator {
    weights: Vec<Tensor>,
    features: FeatureValues,
    camera: Camera,
}

impl FieldEvaluator {
    pub fn new(params: &FieldParams, image: &ImageRgba, camera: &Camera) -> Result<Self> {
        let graph = Graph::new();
        let bound = params.bind_frozen(&graph);
        let grid = encode_image(&graph, &bound, image)?;
        Ok(Self { weights: params.tensors().cloned().collect(), features: grid.values(), camera: *camera })
    }

    /// Evaluator sharing the values of parameters and features already on a graph.
    pub fn from_bound(params: &BoundParams<'_>, grid: &FeatureGrid<'_>, camera: &Camera) -> Self {
        Self { weights: params.vars.iter().map(|v| v.value()).collect(), features: grid.values(), camera: *camera }
    }

    pub fn features(&self) -> &FeatureValues {
        &self.features
    }

    fn head(&self, head: usize, points: &[Vec3]) -> Vec<f64> {
        let base = 8 + head * 6;
        let mut out = Vec::new();
        for batch in points.chunks(EVAL_BATCH) {
            let rows = batch.len();
            let mut x = Vec::with_capacity(rows * (FEATURE_DIM + 1));
            for &p in batch {
                let q = self.camera.project(p);
                x.extend(self.features.sample(q.x, q.y));
                x.push(q.depth);
            }
            let mut width = FEATURE_DIM + 1;
            for l in 0..3 {
                let (w, b) = (&self.weights[base + 2 * l], &self.weights[base + 2 * l + 1]);
                let n = w.shape()[1];
                let mut y = kernels::matmul(&x, w.data(), rows, width, n);
                for row in y.chunks_mut(n) {
                    for (v, bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                        if l < 2 && *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                x = y;
                width = n;
            }
            out.extend(x.into_iter().map(kernels::sigmoid));
        }
        out
    }
}

impl OccupancyField for FieldEvaluator {
    fn occupancy(&self, points: &[Vec3]) -> Vec<f64> {
        self.head(0, points)
    }

    fn color(&self, points: &[Vec3]) -> Vec<[f64; 3]> {
        self.head(1, points).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }
}

/// Occupancy probability of one world point given the input image (seen from `camera`).
pub fn predict_occupancy(params: &FieldParams, image: &ImageRgba, camera: &Camera, point: Vec3) -> Result<f64> {
    Ok(FieldEvaluator::new(params, image, camera)?.occupancy(&[point])[0])
}

pub fn predict_color(params: &FieldParams, image: &ImageRgba, camera: &Camera, point: Vec3) -> Result<[f64; 3]> {
    Ok(FieldEvaluator::new(params, image, camera)?.color(&[point])[0])
}

/// Node `i` of a `res`-point lattice spanning `[-1, 1]`.
pub fn lattice_coord(i: usize, res: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (res - 1) as f64
}

/// All `res³` lattice nodes over `[-1, 1]³`, x slowest and z fastest.
pub fn lattice(res: usize) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(res * res * res);
    for i in 0..res {
        for j in 0..res {
            for k in 0..res {
                pts.push([lattice_coord(i, res), lattice_coord(j, res), lattice_coord(k, res)]);
            }
        }
    }
    pts
}

fn check_res(grid_res: usize) -> Result<()> {
    if grid_res < 8 {
        return Err(Error::contract("extract_point_cloud", format!("grid_res must be at least 8, got {grid_res}")));
    }
    Ok(())
}

/// Splat radius for a lattice cloud: half the node spacing.
pub fn lattice_radius(grid_res: usize) -> f64 {
    1.0 / (grid_res - 1) as f64
}

/// Lattice nodes with occupancy strictly above `threshold`, colored by the field.
/// Each point's opacity is its occupancy.
pub fn extract_point_cloud(field: &dyn OccupancyField, grid_res: usize, threshold: f64) -> Result<PointCloud> {
    check_res(grid_res)?;
    let nodes = lattice(grid_res);
    let occ = field.occupancy(&nodes);
    let (positions, opacity): (Vec<Vec3>, Vec<f64>) =
        nodes.into_iter().zip(occ).filter(|(_, o)| *o > threshold).unzip();
    let colors = if positions.is_empty() { Vec::new() } else { field.color(&positions) };
    PointCloud::with_opacity(positions, colors, opacity, lattice_radius(grid_res))
}

/// Differentiable counterpart of [`extract_point_cloud`].
///
/// Membership is decided on the gradient-free path; the selected points are
/// then re-evaluated on the graph so their colors and opacities (= occupancy)
/// carry gradients back to the field. Returns `None` when nothing is selected.
pub fn extract_diff_cloud<'g>(
    graph: &'g Graph,
    params: &BoundParams<'g>,
    grid: &FeatureGrid<'g>,
    camera: &Camera,
    grid_res: usize,
    threshold: f64,
) -> Result<Option<DiffCloud<'g>>> {
    check_res(grid_res)?;
    let nodes = lattice(grid_res);
    let eval = FieldEvaluator::from_bound(params, grid, camera);
    let occ = eval.occupancy(&nodes);
    let selected: Vec<Vec3> = nodes.into_iter().zip(occ).filter(|(_, o)| *o > threshold).map(|(p, _)| p).collect();
    if selected.is_empty() {
        return Ok(None);
    }
    let (opacity, colors) = query_field(graph, params, grid, camera, &selected)?;
    let positions = graph.constant(Tensor::new(vec![selected.len(), 3], selected.iter().flatten().copied().collect())?);
    Ok(Some(DiffCloud { positions, colors, opacity }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcalc::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(size: usize) -> Camera {
        Camera::for_azimuth(0.0, size, size, 1.2).unwrap()
    }

    fn random_image(seed: u64, w: usize, h: usize) -> ImageRgba {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = w * h;
        ImageRgba::new(w, h, (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(), vec![1.0; n]).unwrap()
    }

    struct Sphere(f64);

    impl OccupancyField for Sphere {
        fn occupancy(&self, points: &[Vec3]) -> Vec<f64> {
            points
                .iter()
                .map(|p| if p.iter().map(|v| v * v).sum::<f64>() <= self.0 * self.0 { 1.0 } else { 0.0 })
                .collect()
        }
        fn color(&self, points: &[Vec3]) -> Vec<[f64; 3]> {
            vec![[1.0, 0.0, 0.0]; points.len()]
        }
    }

    struct Constant(f64);

    impl OccupancyField for Constant {
        fn occupancy(&self, points: &[Vec3]) -> Vec<f64> {
            vec![self.0; points.len()]
        }
        fn color(&self, points: &[Vec3]) -> Vec<[f64; 3]> {
            vec![[0.5; 3]; points.len()]
        }
    }

    #[test]
    fn encoder_output_extents_and_determinism() {
        let p = FieldParams::init(0);
        let img = random_image(1, 64, 64);
        let run = || {
            let g = Graph::new();
            let b = p.bind_frozen(&g);
            let grid = encode_image(&g, &b, &img).unwrap();
            (grid.width, grid.height, grid.cells.shape(), grid.values())
        };
        let (w, h, shape, v1) = run();
        assert_eq!((w, h), (16, 16));
        assert_eq!(shape, vec![256, FEATURE_DIM]);
        assert_eq!(v1, run().3);
    }

    #[test]
    fn indivisible_extents_rejected() {
        let p = FieldParams::init(0);
        let g = Graph::new();
        let b = p.bind_frozen(&g);
        assert!(encode_image(&g, &b, &random_image(0, 30, 32)).is_err());
    }

    #[test]
    fn bilinear_sampling_rules() {
        let values = FeatureValues {
            data: (0..4 * FEATURE_DIM).map(|i| (i / FEATURE_DIM) as f64).collect(),
            width: 2,
            height: 2,
        };
        // cell (1, 0) center is pixel (6, 2)
        assert_eq!(values.sample(6.0, 2.0), vec![1.0; FEATURE_DIM]);
        // midway between cells (0, 0) and (1, 0)
        assert_eq!(values.sample(4.0, 2.0), vec![0.5; FEATURE_DIM]);
        assert_eq!(values.sample(-10.0, 2.0), vec![0.0; FEATURE_DIM]);
        assert_eq!(values.sample(3.0, 40.0), vec![0.0; FEATURE_DIM]);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let p = FieldParams::init(3);
        let img = random_image(2, 16, 16);
        let others: Vec<Tensor> = p.tensors().cloned().collect();
        let err = grad_check(
            |g, v| {
                let mut vars: Vec<Var<'_>> = others.iter().map(|t| g.constant(t.clone())).collect();
                vars[0] = v[0];
                let bound = BoundParams { vars };
                encode_image(g, &bound, &img)
                    .map_err(|e| crate::diffcalc::DiffError::contract("encode", e.to_string()))?
                    .cells
                    .mean()
            },
            &[others[0].clone()],
            1e-4,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn occupancy_gradients_for_every_group() {
        let p = FieldParams::init(4);
        let img = random_image(5, 16, 16);
        let c = cam(16);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let points: Vec<Vec3> =
            (0..5).map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)]).collect();
        let all: Vec<Tensor> = p.tensors().cloned().collect();
        // one representative tensor per group plus every bias of the heads
        for idx in [0, 2, 7, 8, 9, 12, 13, 14, 19] {
            let err = grad_check(
                |g, v| {
                    let mut vars: Vec<Var<'_>> = all.iter().map(|t| g.constant(t.clone())).collect();
                    vars[idx] = v[0];
                    let bound = BoundParams { vars };
                    let wrap = |e: Error| crate::diffcalc::DiffError::contract("field", e.to_string());
                    let grid = encode_image(g, &bound, &img).map_err(wrap)?;
                    let (o, col) = query_field(g, &bound, &grid, &c, &points).map_err(wrap)?;
                    o.sum().add(col.mean()?)
                },
                &[all[idx].clone()],
                1e-5,
            );
            assert!(err < 1e-4, "param {idx}: {err}");
        }
    }

    #[test]
    fn fresh_outputs_are_near_half_and_in_range() {
        let p = FieldParams::init(7);
        let img = random_image(8, 64, 64);
        let eval = FieldEvaluator::new(&p, &img, &cam(64)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> =
            (0..100).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        for o in eval.occupancy(&pts) {
            assert!((0.3..=0.7).contains(&o), "{o}");
        }
        for c in eval.color(&pts) {
            assert!(c.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let p = FieldParams::init(10);
        let img = random_image(11, 32, 32);
        let c = cam(32);
        let pts = vec![[0.1, 0.2, 0.3], [-0.5, 0.4, -0.2], [0.9, -0.9, 0.0]];
        let g = Graph::new();
        let b = p.bind_frozen(&g);
        let grid = encode_image(&g, &b, &img).unwrap();
        let (o, col) = query_field(&g, &b, &grid, &c, &pts).unwrap();
        let eval = FieldEvaluator::new(&p, &img, &c).unwrap();
        for (a, e) in o.value().data().iter().zip(eval.occupancy(&pts)) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in col.value().data().iter().zip(eval.color(&pts).iter().flatten()) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(predict_occupancy(&p, &img, &c, pts[0]).unwrap(), eval.occupancy(&pts[..1])[0]);
    }

    #[test]
    fn extraction_edge_cases() {
        assert!(extract_point_cloud(&Constant(0.0), 8, 0.5).unwrap().is_empty());
        assert!(extract_point_cloud(&Constant(0.999), 8, 1.0).unwrap().is_empty());
        // strict inequality at the threshold
        assert!(extract_point_cloud(&Constant(0.5), 8, 0.5).unwrap().is_empty());
        assert!(extract_point_cloud(&Constant(0.9), 7, 0.5).is_err());
    }

    #[test]
    fn sphere_extraction_matches_lattice_enumeration() {
        let cloud = extract_point_cloud(&Sphere(0.5), 32, 0.5).unwrap();
        let mut inside = 0;
        for i in 0..32 {
            for j in 0..32 {
                for k in 0..32 {
                    let (x, y, z) = (lattice_coord(i, 32), lattice_coord(j, 32), lattice_coord(k, 32));
                    if x * x + y * y + z * z <= 0.25 {
                        inside += 1;
                    }
                }
            }
        }
        assert_eq!(cloud.len(), inside);
        assert!(cloud.colors.iter().all(|c| *c == [1.0, 0.0, 0.0]));
    }

    #[test]
    fn features_follow_image_translation() {
        // content well inside the frame; cells near the border see zero padding and are skipped
        let (w, h) = (64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut base = vec![[0.0; 3]; w * h];
        for y in 20..44 {
            for x in 16..40 {
                base[y * w + x] = [rng.gen(), rng.gen(), rng.gen()];
            }
        }
        let shifted: Vec<[f64; 3]> = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if x >= 4 {
                    base[y * w + x - 4]
                } else {
                    [0.0; 3]
                }
            })
            .collect();
        let a = ImageRgba::new(w, h, base, vec![1.0; w * h]).unwrap();
        let b = ImageRgba::new(w, h, shifted, vec![1.0; w * h]).unwrap();
        let p = FieldParams::init(13);
        let fa = FieldEvaluator::new(&p, &a, &cam(64)).unwrap();
        let fb = FieldEvaluator::new(&p, &b, &cam(64)).unwrap();
        for j in 3..12 {
            for i in 3..11 {
                let va = fa.features().sample((i as f64 + 0.5) * 4.0 + 1.3, (j as f64 + 0.5) * 4.0 + 0.7);
                let vb = fb.features().sample((i as f64 + 1.5) * 4.0 + 1.3, (j as f64 + 0.5) * 4.0 + 0.7);
                for (x, y) in va.iter().zip(&vb) {
                    assert!((x - y).abs() < 1e-9, "cell ({i},{j})");
                }
            }
        }
    }
}
