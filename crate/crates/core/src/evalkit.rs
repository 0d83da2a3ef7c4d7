//! Silhouette IoU and pixel-wise texture precision/recall between rendered
//! and ground-truth images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::par;
use crate::pifield::{extract_point_cloud, FieldEvaluator, FieldParams};
use crate::pointrender::{render, SplatConfig};
use crate::scenegeom::{Camera, ImageRgba};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.1;
pub const CSV_HEADER: &str = "method,mask_iou,texture_precision,texture_recall";

/// `|a ∧ b| / |a ∨ b|`; two empty masks agree perfectly.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract("mask_iou", format!("mask sizes {} and {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    match (den, other_empty) {
        (0, true) => 1.0,
        (0, false) => 0.0,
        _ => num as f64 / den as f64,
    }
}

/// Precision and recall of color-matched foreground pixels.
///
/// A rendered foreground pixel matches when the truth pixel is foreground too
/// and the Euclidean RGB distance is below `tau`. `tau = 0` accepts only exact
/// color matches.
pub fn texture_pr(rendered: &ImageRgba, truth: &ImageRgba, tau: f64) -> Result<(f64, f64)> {
    if !rendered.same_extent(truth) {
        return Err(Error::contract(
            "texture_pr",
            format!("extents {}x{} and {}x{}", rendered.width(), rendered.height(), truth.width(), truth.height()),
        ));
    }
    let (rm, tm) = (rendered.mask(), truth.mask());
    let mut tp = 0usize;
    for i in 0..rm.len() {
        if rm[i] && tm[i] {
            let (a, b) = (rendered.rgb()[i], truth.rgb()[i]);
            let d2: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
            if d2.sqrt() < tau || (tau == 0.0 && d2 == 0.0) {
                tp += 1;
            }
        }
    }
    let nr = rm.iter().filter(|&&m| m).count();
    let nt = tm.iter().filter(|&&m| m).count();
    Ok((ratio(tp, nr, nt == 0), ratio(tp, nt, nr == 0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub mask_iou: f64,
    pub texture_precision: f64,
    pub texture_recall: f64,
}

pub fn compare(rendered: &ImageRgba, truth: &ImageRgba, tau: f64) -> Result<SampleMetrics> {
    let (p, r) = texture_pr(rendered, truth, tau)?;
    Ok(SampleMetrics { mask_iou: mask_iou(&rendered.mask(), &truth.mask())?, texture_precision: p, texture_recall: r })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub per_sample: Vec<SampleMetrics>,
    pub mask_iou: f64,
    pub texture_precision: f64,
    pub texture_recall: f64,
}

impl EvalReport {
    /// Aggregates per-sample metrics by their arithmetic mean.
    pub fn from_samples(method: impl Into<String>, per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::contract("evaluate", "empty evaluation set"));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            method: method.into(),
            mask_iou: mean(|m| m.mask_iou),
            texture_precision: mean(|m| m.texture_precision),
            texture_recall: mean(|m| m.texture_recall),
            per_sample,
        })
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.method, r.mask_iou, r.texture_precision, r.texture_recall);
    }
    s
}

pub fn per_sample_csv(report: &EvalReport) -> String {
    let mut s = String::from("sample,mask_iou,texture_precision,texture_recall\n");
    for (i, m) in report.per_sample.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.6},{:.6},{:.6}", m.mask_iou, m.texture_precision, m.texture_recall);
    }
    s
}

pub fn write_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, reports_csv(reports)).map_err(|e| Error::io(path, e))
}

/// Fixed-width table with the same columns as the CSV.
pub fn reports_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Methods".len());
    let mut s = String::new();
    let _ =
        writeln!(s, "{:<width$}  {:>8}  {:>17}  {:>14}", "Methods", "Mask IoU", "Texture Precision", "Texture Recall");
    let _ = writeln!(s, "{}", "-".repeat(width + 45));
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.4}  {:>17.4}  {:>14.4}",
            r.method, r.mask_iou, r.texture_precision, r.texture_recall
        );
    }
    s
}

/// Reconstruction settings shared by evaluation and the reconstruct command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructSettings {
    pub grid_res: usize,
    pub threshold: f64,
    pub splat: SplatConfig,
}

/// Reconstructs a point cloud from `input` (seen by the canonical camera) and renders it from `view`.
pub fn render_reconstruction(
    params: &FieldParams,
    input: &ImageRgba,
    input_camera: &Camera,
    view: &Camera,
    settings: &ReconstructSettings,
) -> Result<ImageRgba> {
    let field = FieldEvaluator::new(params, input, input_camera)?;
    let cloud = extract_point_cloud(&field, settings.grid_res, settings.threshold)?;
    Ok(render(&cloud, view, &settings.splat)?.image)
}

/// One evaluation case: the single input view and a ground-truth image seen by `camera`.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub input: ImageRgba,
    pub input_camera: Camera,
    pub camera: Camera,
    pub truth: ImageRgba,
}

pub fn evaluate(
    method: &str,
    params: &FieldParams,
    cases: &[EvalCase],
    settings: &ReconstructSettings,
    tau: f64,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::contract("evaluate", "empty evaluation set"));
    }
    let metrics = par::map_slice(cases, |c| {
        let rendered = render_reconstruction(params, &c.input, &c.input_camera, &c.camera, settings)?;
        compare(&rendered, &c.truth, tau)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(method, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize, rgb: Vec<[f64; 3]>, mask: &[bool]) -> ImageRgba {
        ImageRgba::new(w, h, rgb, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let m = [true, false, true, true];
        assert_eq!(mask_iou(&m, &m).unwrap(), 1.0);
        assert_eq!(mask_iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(mask_iou(&[false; 4], &[false; 4]).unwrap(), 1.0);
        // a = {(0,0),(0,1)}, b = {(0,1),(1,1)} on a 2x2 grid, row-major
        let a = [true, false, true, false];
        let b = [false, false, true, true];
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(mask_iou(&[true], &[true, false]).is_err());
    }

    #[test]
    fn texture_examples() {
        let c = [0.2, 0.4, 0.6];
        let other = [0.9, 0.9, 0.9];
        // truth: 6 fg px; rendered: 4 fg px, 3 matching in color
        let truth_mask = [true, true, true, true, true, true, false, false];
        let rend_mask = [true, true, true, true, false, false, false, false];
        let truth = image(4, 2, vec![c; 8], &truth_mask);
        let mut rgb = vec![c; 8];
        rgb[3] = other;
        let rendered = image(4, 2, rgb, &rend_mask);
        assert_eq!(texture_pr(&rendered, &truth, 0.1).unwrap(), (0.75, 0.5));
        assert_eq!(texture_pr(&truth, &truth, 0.01).unwrap(), (1.0, 1.0));
        let near = image(4, 2, vec![[0.2, 0.4, 0.6001]; 8], &truth_mask);
        assert_eq!(texture_pr(&near, &truth, 0.0).unwrap(), (0.0, 0.0));
        assert_eq!(texture_pr(&truth, &truth, 0.0).unwrap(), (1.0, 1.0));
        let empty = image(4, 2, vec![c; 8], &[false; 8]);
        assert_eq!(texture_pr(&empty, &empty, 0.1).unwrap(), (1.0, 1.0));
        assert_eq!(texture_pr(&empty, &truth, 0.1).unwrap(), (0.0, 0.0));
        assert!(texture_pr(&empty, &image(2, 2, vec![c; 4], &[false; 4]), 0.1).is_err());
    }

    #[test]
    fn report_aggregates_by_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let per: Vec<SampleMetrics> = (0..7)
            .map(|_| SampleMetrics { mask_iou: rng.gen(), texture_precision: rng.gen(), texture_recall: rng.gen() })
            .collect();
        let r = EvalReport::from_samples("ours", per.clone()).unwrap();
        let mean = per.iter().map(|m| m.mask_iou).sum::<f64>() / 7.0;
        assert!((r.mask_iou - mean).abs() < 1e-12);
        assert!(EvalReport::from_samples("x", vec![]).is_err());
        let csv = reports_csv(std::slice::from_ref(&r));
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 2);
        assert!(reports_table(&[r]).contains("Mask IoU"));
    }

    fn masks(n: usize) -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
        (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded((a, b) in masks(64)) {
            let x = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(x, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn iou_ignores_shared_permutations((a, b) in masks(32), seed in any::<u64>()) {
            let mut idx: Vec<usize> = (0..32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..32).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let pa: Vec<bool> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<bool> = idx.iter().map(|&i| b[i]).collect();
            prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&pa, &pb).unwrap());
        }

        #[test]
        fn precision_and_recall_swap((a, b) in masks(16), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut col = |_| [rng.gen_range(0..3) as f64 * 0.05, 0.5, 0.5];
            let x = image(4, 4, (0..16).map(&mut col).collect(), &a);
            let y = image(4, 4, (0..16).map(&mut col).collect(), &b);
            let (p, r) = texture_pr(&x, &y, 0.07).unwrap();
            let (p2, r2) = texture_pr(&y, &x, 0.07).unwrap();
            prop_assert_eq!((p, r), (r2, p2));
        }
    }
}
