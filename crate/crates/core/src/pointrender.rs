//! Differentiable Gaussian splatting of point clouds.
//!
//! Each point covers nearby pixels with weight
//! `w = opacity · exp(-d² / 2σ²)` inside a cutoff radius, where `d` is the
//! pixel-center distance to the projected point. Points are composited
//! front to back:
//!
//! ```text
//! rgb   = Σ wᵢ cᵢ Πⱼ<ᵢ (1 - wⱼ) + background · Πᵢ (1 - wᵢ)
//! alpha = 1 - Πᵢ (1 - wᵢ)
//! ```
//!
//! Gradients flow into colors, opacities and projected centers. The depth
//! order is treated as locally constant.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::diffcalc::{CustomOp, Graph, Tensor, Var};
use crate::par;
use crate::scenegeom::{Camera, ImageRgba, PointCloud, DEFAULT_ORTHO_SCALE};
use crate::{Error, Result};

/// Azimuths of the three consistency views: 0°, 90° and 180°.
pub const FIXED_AZIMUTHS: [f64; 3] = [0.0, FRAC_PI_2, PI];

/// Image rows handled per parallel task.
const ROW_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    pub sigma_px: f64,
    pub cutoff_px: f64,
    pub background: [f64; 3],
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self { sigma_px: 1.0, cutoff_px: 3.0, background: [0.0; 3] }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_px > 0.0) {
            return Err(Error::contract("splat config", "sigma_px must be positive"));
        }
        if !(self.cutoff_px >= 2.0 * self.sigma_px) {
            return Err(Error::contract("splat config", "cutoff_px must be at least 2·sigma_px"));
        }
        if !self.background.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::contract("splat config", "background must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One rendered camera view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub camera: Camera,
    pub image: ImageRgba,
}

/// Cameras for the three consistency views.
pub fn fixed_view_cameras(width: usize, height: usize, ortho_scale: f64) -> Result<[Camera; 3]> {
    let mk = |a| Camera::for_azimuth(a, width, height, ortho_scale);
    Ok([mk(FIXED_AZIMUTHS[0])?, mk(FIXED_AZIMUTHS[1])?, mk(FIXED_AZIMUTHS[2])?])
}

/// Renders a cloud from one camera.
pub fn render(cloud: &PointCloud, camera: &Camera, cfg: &SplatConfig) -> Result<RenderedView> {
    cfg.validate()?;
    let scene = SplatScene::new(&cloud.positions, &cloud.colors, &cloud.opacity, camera, cfg);
    let image = ImageRgba::from_hwc4(camera.width(), camera.height(), &scene.forward())?;
    Ok(RenderedView { camera: *camera, image })
}

/// Renders the cloud at azimuths 0, π/2 and π with the default ortho scale.
pub fn render_fixed_views(
    cloud: &PointCloud,
    image_size: (usize, usize),
    cfg: &SplatConfig,
) -> Result<[RenderedView; 3]> {
    let [a, b, c] = fixed_view_cameras(image_size.0, image_size.1, DEFAULT_ORTHO_SCALE)?;
    Ok([render(cloud, &a, cfg)?, render(cloud, &b, cfg)?, render(cloud, &c, cfg)?])
}

/// Differentiable point set living on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct DiffCloud<'g> {
    /// `[N×3]` world positions.
    pub positions: Var<'g>,
    /// `[N×3]` RGB.
    pub colors: Var<'g>,
    /// `[N]` opacities in `[0, 1]`.
    pub opacity: Var<'g>,
}

/// Differentiable render. Returns a `[H, W, 4]` tensor (rgb + alpha per pixel).
/// `None` for the cloud renders the background with no graph inputs.
pub fn render_var<'g>(
    graph: &'g Graph,
    cloud: Option<DiffCloud<'g>>,
    camera: &Camera,
    cfg: &SplatConfig,
) -> Result<Var<'g>> {
    cfg.validate()?;
    let Some(cloud) = cloud else {
        let bg = ImageRgba::background(camera.width(), camera.height(), cfg.background);
        return Ok(graph.constant(bg.to_hwc4()));
    };
    let n = cloud.positions.shape()[0];
    if cloud.positions.shape() != [n, 3] || cloud.colors.shape() != [n, 3] || cloud.opacity.len() != n {
        return Err(Error::contract("render", "cloud tensors must be [N×3], [N×3] and [N]"));
    }
    let scene = {
        let (p, c, o) = (cloud.positions.value_ref(), cloud.colors.value_ref(), cloud.opacity.value_ref());
        SplatScene::new(&to_vec3(p.data()), &to_vec3(c.data()), o.data(), camera, cfg)
    };
    let out = Tensor::new(vec![camera.height(), camera.width(), 4], scene.forward())?;
    Ok(graph.custom(Box::new(SplatOp { scene }), &[cloud.positions, cloud.colors, cloud.opacity], out))
}

/// Converts a rendered `[H, W, 4]` value into an image.
pub fn image_from_var(var: Var<'_>, camera: &Camera) -> Result<ImageRgba> {
    ImageRgba::from_hwc4(camera.width(), camera.height(), var.value_ref().data())
}

fn to_vec3(data: &[f64]) -> Vec<[f64; 3]> {
    data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Projected splats with a screen-space binning grid.
struct SplatScene {
    width: usize,
    height: usize,
    cfg: SplatConfig,
    jac: ([f64; 3], [f64; 3]),
    sx: Vec<f64>,
    sy: Vec<f64>,
    colors: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    /// Per point, its position in front-to-back order.
    rank: Vec<u32>,
    cell: f64,
    bins_x: usize,
    bins_y: usize,
    /// Point indices per bin, front to back.
    bins: Vec<Vec<u32>>,
}

struct Candidate {
    rank: u32,
    index: u32,
    weight: f64,
    dx: f64,
    dy: f64,
}

impl SplatScene {
    fn new(positions: &[[f64; 3]], colors: &[[f64; 3]], opacity: &[f64], camera: &Camera, cfg: &SplatConfig) -> Self {
        let n = positions.len();
        let proj: Vec<_> = positions.iter().map(|&p| camera.project(p)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            proj[a]
                .depth
                .total_cmp(&proj[b].depth)
                .then_with(|| cmp3(&positions[a], &positions[b]))
                .then_with(|| cmp3(&colors[a], &colors[b]))
                .then_with(|| opacity[a].total_cmp(&opacity[b]))
                .then(a.cmp(&b))
        });
        let mut rank = vec![0u32; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r as u32;
        }

        let (width, height) = (camera.width(), camera.height());
        let cell = cfg.cutoff_px;
        // one padding bin on each side catches splats centered just off-image
        let bins_x = (width as f64 / cell).ceil() as usize + 2;
        let bins_y = (height as f64 / cell).ceil() as usize + 2;
        let mut bins = vec![Vec::new(); bins_x * bins_y];
        for &i in &order {
            let p = proj[i];
            if let Some(b) = bin_of(p.x, p.y, cell, bins_x, bins_y) {
                bins[b].push(i as u32);
            }
        }
        Self {
            width,
            height,
            cfg: *cfg,
            jac: camera.pixel_jacobian(),
            sx: proj.iter().map(|p| p.x).collect(),
            sy: proj.iter().map(|p| p.y).collect(),
            colors: colors.to_vec(),
            opacity: opacity.to_vec(),
            rank,
            cell,
            bins_x,
            bins_y,
            bins,
        }
    }

    fn len(&self) -> usize {
        self.sx.len()
    }

    fn candidates(&self, px: usize, py: usize, out: &mut Vec<Candidate>) {
        out.clear();
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        let Some(b) = bin_of(cx, cy, self.cell, self.bins_x, self.bins_y) else {
            return;
        };
        let (bx, by) = (b % self.bins_x, b / self.bins_x);
        let cut2 = self.cfg.cutoff_px * self.cfg.cutoff_px;
        let inv2s2 = 1.0 / (2.0 * self.cfg.sigma_px * self.cfg.sigma_px);
        for ny in by.saturating_sub(1)..=(by + 1).min(self.bins_y - 1) {
            for nx in bx.saturating_sub(1)..=(bx + 1).min(self.bins_x - 1) {
                for &i in &self.bins[ny * self.bins_x + nx] {
                    let iu = i as usize;
                    let (dx, dy) = (cx - self.sx[iu], cy - self.sy[iu]);
                    let d2 = dx * dx + dy * dy;
                    if d2 > cut2 {
                        continue;
                    }
                    let weight = self.opacity[iu] * (-d2 * inv2s2).exp();
                    out.push(Candidate { rank: self.rank[iu], index: i, weight, dx, dy });
                }
            }
        }
        out.sort_unstable_by_key(|c| c.rank);
    }

    fn forward(&self) -> Vec<f64> {
        let w = self.width;
        let mut out = vec![0.0; w * self.height * 4];
        let bg = self.cfg.background;
        par::for_each_chunk_mut(&mut out, ROW_CHUNK * w * 4, |chunk, dst| {
            let mut cands = Vec::new();
            for (k, px_out) in dst.chunks_mut(4).enumerate() {
                let idx = chunk * ROW_CHUNK * w + k;
                let (px, py) = (idx % w, idx / w);
                self.candidates(px, py, &mut cands);
                let mut t = 1.0;
                let mut rgb = [0.0; 3];
                for c in &cands {
                    let col = self.colors[c.index as usize];
                    for ch in 0..3 {
                        rgb[ch] += c.weight * col[ch] * t;
                    }
                    t *= 1.0 - c.weight;
                }
                for ch in 0..3 {
                    px_out[ch] = rgb[ch] + t * bg[ch];
                }
                px_out[3] = 1.0 - t;
            }
        });
        out
    }

    /// Gradients with respect to (positions, colors, opacities).
    fn backward(&self, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (w, h) = (self.width, self.height);
        let n = self.len();
        let bg = self.cfg.background;
        let inv_s2 = 1.0 / (self.cfg.sigma_px * self.cfg.sigma_px);
        let chunks = h.div_ceil(ROW_CHUNK);
        // Per row chunk: (point, d/dsx, d/dsy, d/dcolor[3], d/dopacity) in pixel order.
        let partial: Vec<Vec<(u32, [f64; 6])>> = par::map_indexed(chunks, |chunk| {
            let mut cands = Vec::new();
            let mut contrib = Vec::new();
            let mut trans = Vec::new();
            for py in chunk * ROW_CHUNK..((chunk + 1) * ROW_CHUNK).min(h) {
                for px in 0..w {
                    let g = &grad_out[(py * w + px) * 4..(py * w + px) * 4 + 4];
                    if g.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    self.candidates(px, py, &mut cands);
                    if cands.is_empty() {
                        continue;
                    }
                    trans.clear();
                    let mut t = 1.0;
                    for c in &cands {
                        trans.push(t);
                        t *= 1.0 - c.weight;
                    }
                    let mut behind = bg;
                    let mut keep = 1.0;
                    for (c, &ti) in cands.iter().zip(&trans).rev() {
                        let col = self.colors[c.index as usize];
                        let mut dw = g[3] * ti * keep;
                        let mut dcol = [0.0; 3];
                        for ch in 0..3 {
                            dw += g[ch] * ti * (col[ch] - behind[ch]);
                            dcol[ch] = g[ch] * c.weight * ti;
                            behind[ch] = c.weight * col[ch] + (1.0 - c.weight) * behind[ch];
                        }
                        keep *= 1.0 - c.weight;
                        let o = self.opacity[c.index as usize];
                        let gauss =
                            if o != 0.0 { c.weight / o } else { (-(c.dx * c.dx + c.dy * c.dy) * 0.5 * inv_s2).exp() };
                        // ∂w/∂sx = w · (px - sx) / σ²
                        let dsx = dw * c.weight * c.dx * inv_s2;
                        let dsy = dw * c.weight * c.dy * inv_s2;
                        contrib.push((c.index, [dsx, dsy, dcol[0], dcol[1], dcol[2], dw * gauss]));
                    }
                }
            }
            contrib
        });
        let mut gpos = vec![0.0; n * 3];
        let mut gcol = vec![0.0; n * 3];
        let mut gop = vec![0.0; n];
        let (jx, jy) = self.jac;
        for (i, v) in partial.into_iter().flatten() {
            let i = i as usize;
            for a in 0..3 {
                gpos[i * 3 + a] += v[0] * jx[a] + v[1] * jy[a];
                gcol[i * 3 + a] += v[2 + a];
            }
            gop[i] += v[5];
        }
        (gpos, gcol, gop)
    }
}

fn bin_of(x: f64, y: f64, cell: f64, bins_x: usize, bins_y: usize) -> Option<usize> {
    let bx = ((x + cell) / cell).floor();
    let by = ((y + cell) / cell).floor();
    if bx < 0.0 || by < 0.0 || bx >= bins_x as f64 || by >= bins_y as f64 {
        return None;
    }
    Some(by as usize * bins_x + bx as usize)
}

fn cmp3(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

struct SplatOp {
    scene: SplatScene,
}

impl CustomOp for SplatOp {
    fn name(&self) -> &'static str {
        "splat"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (gp, gc, go) = self.scene.backward(grad_out);
        vec![Some(gp), Some(gc), Some(go)]
    }
}

/// Finite-difference agreement of render gradients for `MSE(render, target)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderGradCheck {
    pub color: f64,
    pub position: f64,
    pub opacity: f64,
}

/// Checks analytic gradients of `mean((render - target)²)` over all four
/// channels against central differences, one input group at a time.
pub fn render_grad_check(
    cloud: &PointCloud,
    camera: &Camera,
    cfg: &SplatConfig,
    target: &ImageRgba,
    h: f64,
) -> Result<RenderGradCheck> {
    if cloud.is_empty() {
        return Err(Error::contract("render_grad_check", "cloud must be nonempty"));
    }
    let n = cloud.len();
    let pos = Tensor::new(vec![n, 3], cloud.positions.iter().flatten().copied().collect())?;
    let col = Tensor::new(vec![n, 3], cloud.colors.iter().flatten().copied().collect())?;
    let opa = Tensor::new(vec![n], cloud.opacity.clone())?;
    let target = target.to_hwc4();
    let check = |which: usize| {
        crate::diffcalc::grad_check(
            |g, v| {
                let mut parts = [g.constant(pos.clone()), g.constant(col.clone()), g.constant(opa.clone())];
                parts[which] = v[0];
                let img = render_var(
                    g,
                    Some(DiffCloud { positions: parts[0], colors: parts[1], opacity: parts[2] }),
                    camera,
                    cfg,
                )
                .map_err(|e| crate::diffcalc::DiffError::contract("render", e.to_string()))?;
                img.sub(g.constant(target.clone()))?.square().mean()
            },
            &[[&pos, &col, &opa][which].clone()],
            h,
        )
    };
    Ok(RenderGradCheck { position: check(0), color: check(1), opacity: check(2) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::for_azimuth(0.0, 32, 32, 1.2).unwrap()
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cfg = SplatConfig { background: [0.2, 0.3, 0.4], ..Default::default() };
        let v = render(&PointCloud::empty(0.01), &cam(), &cfg).unwrap();
        assert!(v.image.rgb().iter().all(|c| *c == [0.2, 0.3, 0.4]));
        assert!(v.image.alpha().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn single_point_alpha_peaks_at_center_and_falls_off() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[1.0; 3]], 0.01).unwrap();
        let c = Camera::for_azimuth(0.0, 64, 64, 1.2).unwrap();
        let v = render(&cloud, &c, &SplatConfig::default()).unwrap();
        // the splat center (32, 32) sits on the corner shared by four pixels
        let a = |x, y| v.image.alpha_at(x, y);
        let peak = a(31, 31);
        assert!(v.image.alpha().iter().all(|&x| x <= peak));
        let expect = (-(0.5f64 * 0.5 + 0.5 * 0.5) / 2.0).exp();
        assert!((peak - expect).abs() < 1e-12);
        // strictly decreasing along the row until the cutoff
        let row: Vec<f64> = (32..36).map(|x| a(x, 31)).collect();
        assert!(row.windows(2).all(|w| w[1] < w[0]), "{row:?}");
        assert_eq!(a(36, 31), 0.0);
    }

    #[test]
    fn nearer_point_dominates_shared_pixel() {
        // depth is view z; smaller is nearer
        let cloud =
            PointCloud::new(vec![[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]], vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], 0.01)
                .unwrap();
        let v = render(&cloud, &cam(), &SplatConfig::default()).unwrap();
        let c = v.image.rgb_at(15, 15);
        assert!(c[0] > c[2], "{c:?}");
    }

    #[test]
    fn opacity_is_monotone() {
        let base = PointCloud::with_opacity(
            vec![[0.1, 0.0, 0.0], [0.12, 0.03, 0.2]],
            vec![[0.5; 3], [0.2; 3]],
            vec![0.3, 0.6],
            0.01,
        )
        .unwrap();
        let mut more = base.clone();
        more.opacity[0] = 0.9;
        let a = render(&base, &cam(), &SplatConfig::default()).unwrap();
        let b = render(&more, &cam(), &SplatConfig::default()).unwrap();
        assert!(a.image.alpha().iter().zip(b.image.alpha()).all(|(x, y)| y >= x));
    }

    #[test]
    fn permutation_invariant() {
        let pos = vec![[0.1, 0.0, 0.0], [0.12, 0.03, 0.0], [-0.2, 0.1, 0.3], [0.12, 0.03, 0.0]];
        let col = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]];
        let a = PointCloud::new(pos.clone(), col.clone(), 0.01).unwrap();
        let perm = [2, 3, 0, 1];
        let b = PointCloud::new(perm.iter().map(|&i| pos[i]).collect(), perm.iter().map(|&i| col[i]).collect(), 0.01)
            .unwrap();
        let ra = render(&a, &cam(), &SplatConfig::default()).unwrap().image.to_hwc4();
        let rb = render(&b, &cam(), &SplatConfig::default()).unwrap().image.to_hwc4();
        let diff = ra.data().iter().zip(rb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn differentiable_render_matches_plain_render() {
        let cloud = PointCloud::with_opacity(
            vec![[0.1, 0.2, 0.0], [-0.3, 0.1, 0.2]],
            vec![[0.9, 0.1, 0.3], [0.2, 0.7, 0.4]],
            vec![0.8, 0.6],
            0.01,
        )
        .unwrap();
        let plain = render(&cloud, &cam(), &SplatConfig::default()).unwrap().image;
        let g = Graph::new();
        let dc = DiffCloud {
            positions: g
                .constant(Tensor::new(vec![2, 3], cloud.positions.iter().flatten().copied().collect()).unwrap()),
            colors: g.constant(Tensor::new(vec![2, 3], cloud.colors.iter().flatten().copied().collect()).unwrap()),
            opacity: g.constant(Tensor::vector(cloud.opacity.clone())),
        };
        let v = render_var(&g, Some(dc), &cam(), &SplatConfig::default()).unwrap();
        assert_eq!(image_from_var(v, &cam()).unwrap(), plain);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SplatConfig { sigma_px: 2.0, cutoff_px: 3.0, ..Default::default() };
        assert!(render(&PointCloud::empty(0.1), &cam(), &cfg).is_err());
    }

    #[test]
    fn gradients_vanish_at_the_target() {
        let cloud = PointCloud::with_opacity(
            vec![[0.05, 0.02, 0.0], [-0.1, 0.07, 0.1], [0.02, -0.08, -0.2]],
            vec![[0.9, 0.1, 0.3], [0.2, 0.7, 0.4], [0.5, 0.5, 0.1]],
            vec![0.9, 0.7, 0.8],
            0.01,
        )
        .unwrap();
        let target = render(&cloud, &cam(), &SplatConfig::default()).unwrap().image;
        let g = Graph::new();
        let pos = g.param(Tensor::new(vec![3, 3], cloud.positions.iter().flatten().copied().collect()).unwrap());
        let col = g.param(Tensor::new(vec![3, 3], cloud.colors.iter().flatten().copied().collect()).unwrap());
        let opa = g.param(Tensor::vector(cloud.opacity.clone()));
        let img = render_var(
            &g,
            Some(DiffCloud { positions: pos, colors: col, opacity: opa }),
            &cam(),
            &SplatConfig::default(),
        )
        .unwrap();
        let loss = img.sub(g.constant(target.to_hwc4())).unwrap().square().mean().unwrap();
        g.backward(loss).unwrap();
        for v in [pos, col, opa] {
            assert!(v.grad().unwrap().data().iter().all(|x| x.abs() < 1e-9));
        }
    }
}
