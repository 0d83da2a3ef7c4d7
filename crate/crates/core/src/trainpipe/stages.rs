use std::fmt::Write as _;

use super::{loss_multiview, loss_occupancy, optimizer_step, OptimizerState, TrainingConfig};
use crate::diffcalc::{Graph, Tensor, Var};
use crate::pifield::{encode_image, extract_diff_cloud, query_occupancy, FieldParams};
use crate::pointrender::{fixed_view_cameras, render_var};
use crate::scenegeom::{Camera, ImageRgba, Vec3, DEFAULT_ORTHO_SCALE};
use crate::synthgen::{input_camera, Dataset};
use crate::{Error, Result};

/// Losses averaged over the steps of one epoch. Stage 2 reports its image
/// loss under `loss_mv` and zero occupancy loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_occ: f64,
    pub loss_mv: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: FieldParams,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss_occ,loss_mv,total\n");
    for m in metrics {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", m.epoch, m.loss_occ, m.loss_mv, m.total);
    }
    s
}

/// One Stage-1 training example as tensors.
pub struct Stage1Data {
    input: ImageRgba,
    targets: [Tensor; 3],
    points: Vec<Vec3>,
    labels: Vec<f64>,
}

impl Stage1Data {
    pub fn from_dataset(dataset: &Dataset) -> Vec<Self> {
        dataset
            .samples
            .iter()
            .map(|s| Self {
                input: s.input.clone(),
                targets: [0, 1, 2].map(|v| s.views[v].to_hwc4()),
                points: s.queries.points.clone(),
                labels: s.queries.labels_f64(),
            })
            .collect()
    }
}

/// A masked single-view image for Stage 2: RGB zeroed outside the silhouette, alpha = mask.
pub type Stage2Sample = ImageRgba;

struct StepLoss<'g> {
    total: Var<'g>,
    occ: f64,
    mv: f64,
}

fn stage1_loss<'g>(
    graph: &'g Graph,
    params: &crate::pifield::BoundParams<'g>,
    sample: &Stage1Data,
    input_cam: &Camera,
    views: &[Camera; 3],
    cfg: &TrainingConfig,
) -> Result<StepLoss<'g>> {
    let grid = encode_image(graph, params, &sample.input)?;
    let occ = query_occupancy(graph, params, &grid, input_cam, &sample.points)?;
    let loss_occ = loss_occupancy(occ, &sample.labels)?;
    if cfg.lambda_mv == 0.0 {
        return Ok(StepLoss { occ: loss_occ.item(), mv: 0.0, total: loss_occ });
    }
    let cloud = extract_diff_cloud(graph, params, &grid, input_cam, cfg.grid_res, cfg.threshold)?;
    let rendered = views.iter().map(|cam| render_var(graph, cloud, cam, &cfg.splat)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Var<'g>> = sample.targets.iter().map(|t| graph.constant(t.clone())).collect();
    let loss_mv = loss_multiview(&rendered, &targets)?;
    Ok(StepLoss { occ: loss_occ.item(), mv: loss_mv.item(), total: loss_occ.add(loss_mv.scale(cfg.lambda_mv))? })
}

/// Accumulates per-step losses into per-epoch means.
struct EpochLog {
    sums: [f64; 3],
    steps: usize,
}

impl EpochLog {
    fn new() -> Self {
        Self { sums: [0.0; 3], steps: 0 }
    }

    fn add(&mut self, occ: f64, mv: f64, total: f64) {
        self.sums[0] += occ;
        self.sums[1] += mv;
        self.sums[2] += total;
        self.steps += 1;
    }

    fn finish(&self, epoch: usize) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        EpochMetrics { epoch, loss_occ: self.sums[0] / n, loss_mv: self.sums[1] / n, total: self.sums[2] / n }
    }
}

/// Runs the shared epoch/batch loop. `loss` builds the summed loss of one
/// sample on the given graph.
fn run<S, F, O>(
    params: FieldParams,
    samples: &[S],
    epochs: usize,
    lr: f64,
    cfg: &TrainingConfig,
    mut on_epoch: O,
    loss: F,
) -> Result<TrainOutput>
where
    F: for<'g> Fn(&'g Graph, &crate::pifield::BoundParams<'g>, &S) -> Result<StepLoss<'g>>,
    O: FnMut(&EpochMetrics, &FieldParams) -> Result<()>,
{
    let mut params = params;
    let mut state = OptimizerState::new(&params);
    let mut metrics = Vec::new();
    let mut steps = 0usize;
    'epochs: for epoch in 1..=epochs {
        let mut log = EpochLog::new();
        for (b, batch) in samples.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|cap| steps >= cap) {
                if log.steps > 0 {
                    let m = log.finish(epoch);
                    metrics.push(m);
                    on_epoch(&m, &params)?;
                }
                break 'epochs;
            }
            let graph = Graph::new();
            let bound = params.bind(&graph);
            let scale = 1.0 / batch.len() as f64;
            let mut total: Option<Var<'_>> = None;
            let (mut occ, mut mv) = (0.0, 0.0);
            for sample in batch {
                let l = loss(&graph, &bound, sample)?;
                occ += l.occ * scale;
                mv += l.mv * scale;
                total = Some(match total {
                    Some(acc) => acc.add(l.total)?,
                    None => l.total,
                });
            }
            let total = total.expect("batches are non-empty").scale(scale);
            let value = total.item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step: b + 1, loss: value });
            }
            graph.backward(total)?;
            optimizer_step(&mut params, &bound.grads(), &mut state, lr)?;
            steps += 1;
            log.add(occ, mv, value);
        }
        let m = log.finish(epoch);
        metrics.push(m);
        on_epoch(&m, &params)?;
    }
    Ok(TrainOutput { params, metrics, steps })
}

/// Stage 1: occupancy BCE on labeled queries plus `lambda_mv` times the
/// multi-view loss between the fixed-view renders of the extracted cloud and
/// the ground-truth views. Starts from `init`, or from fresh parameters seeded
/// by the config.
pub fn train_stage1(
    dataset: &Dataset,
    cfg: &TrainingConfig,
    init: Option<FieldParams>,
    on_epoch: impl FnMut(&EpochMetrics, &FieldParams) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("train_stage1", "empty dataset"));
    }
    let size = dataset.manifest.image_size;
    let input_cam = input_camera(size)?;
    let views = fixed_view_cameras(size, size, DEFAULT_ORTHO_SCALE)?;
    let data = Stage1Data::from_dataset(dataset);
    let params = init.unwrap_or_else(|| FieldParams::init(cfg.seed));
    run(params, &data, cfg.stage1_epochs, cfg.stage1_lr, cfg, on_epoch, |g, b, s| {
        stage1_loss(g, b, s, &input_cam, &views, cfg)
    })
}

fn stage2_loss<'g>(
    graph: &'g Graph,
    params: &crate::pifield::BoundParams<'g>,
    image: &ImageRgba,
    camera: &Camera,
    cfg: &TrainingConfig,
) -> Result<StepLoss<'g>> {
    let grid = encode_image(graph, params, image)?;
    let cloud = extract_diff_cloud(graph, params, &grid, camera, cfg.mesh_res, cfg.threshold)?;
    let rendered = render_var(graph, cloud, camera, &cfg.splat)?;
    let mask = image.mask();
    let hw = mask.len() as f64;
    let mut target = Vec::with_capacity(mask.len() * 4);
    let mut weight = Vec::with_capacity(mask.len() * 4);
    for (c, &m) in image.rgb().iter().zip(&mask) {
        let mf = if m { 1.0 } else { 0.0 };
        target.extend([c[0] * mf, c[1] * mf, c[2] * mf, mf]);
        weight.extend([mf / (3.0 * hw), mf / (3.0 * hw), mf / (3.0 * hw), 1.0 / hw]);
    }
    let shape = vec![image.height(), image.width(), 4];
    let diff = rendered.sub(graph.constant(Tensor::new(shape.clone(), target)?))?;
    let loss = diff.square().mul(graph.constant(Tensor::new(shape, weight)?))?.sum();
    Ok(StepLoss { occ: 0.0, mv: loss.item(), total: loss })
}

/// Stage 2: per masked image, `MSE(alpha, mask) + MSE(rgb ⊙ mask, image ⊙ mask)`
/// for the render of the extracted cloud from the canonical camera. The cloud
/// is extracted on the inference lattice (`mesh_res`), so the optimized
/// silhouette is the one reconstruction produces.
pub fn train_stage2(
    params: FieldParams,
    samples: &[Stage2Sample],
    cfg: &TrainingConfig,
    on_epoch: impl FnMut(&EpochMetrics, &FieldParams) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("train_stage2", "no samples"));
    }
    let first = &samples[0];
    if samples.iter().any(|s| !s.same_extent(first)) {
        return Err(Error::contract("train_stage2", "samples differ in extent"));
    }
    let camera = Camera::for_azimuth(0.0, first.width(), first.height(), DEFAULT_ORTHO_SCALE)?;
    run(params, samples, cfg.stage2_epochs, cfg.stage2_lr, cfg, on_epoch, |g, b, s| stage2_loss(g, b, s, &camera, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pifield::ParamGroup;
    use crate::synthgen::{catalog_shape, DatasetManifest};

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            image_size: 32,
            grid_res: 12,
            mesh_res: 16,
            num_shapes: 2,
            n_uniform: 16,
            n_surface: 48,
            ..Default::default()
        }
    }

    fn tiny_dataset(cfg: &TrainingConfig) -> Dataset {
        Dataset::generate(DatasetManifest { shapes: vec![catalog_shape(0), catalog_shape(4)], ..cfg.manifest() })
            .unwrap()
    }

    #[test]
    fn every_group_receives_gradient() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let data = Stage1Data::from_dataset(&ds);
        let params = FieldParams::init(0);
        let g = Graph::new();
        let b = params.bind(&g);
        let cam = input_camera(32).unwrap();
        let views = fixed_view_cameras(32, 32, DEFAULT_ORTHO_SCALE).unwrap();
        let l = stage1_loss(&g, &b, &data[0], &cam, &views, &cfg).unwrap();
        assert!(l.mv > 0.0);
        g.backward(l.total).unwrap();
        let grads = b.grads();
        for group in [ParamGroup::Encoder, ParamGroup::Occupancy, ParamGroup::Texture] {
            let any = params
                .names()
                .zip(&grads)
                .any(|(n, t)| ParamGroup::of(n) == group && t.data().iter().any(|v| *v != 0.0));
            assert!(any, "{group:?}");
        }
    }

    #[test]
    fn stage1_is_deterministic_and_logs_epochs() {
        let cfg = TrainingConfig { stage1_epochs: 2, ..tiny_config() };
        let ds = tiny_dataset(&cfg);
        let mut seen = Vec::new();
        let a = train_stage1(&ds, &cfg, None, |m, _| {
            seen.push(m.epoch);
            Ok(())
        })
        .unwrap();
        let b = train_stage1(&ds, &cfg, None, |_, _| Ok(())).unwrap();
        assert_eq!(seen, vec![1, 2]);
        assert_eq!(a.steps, 4);
        assert_eq!(a.params, b.params);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(metrics_csv(&a.metrics).lines().next().unwrap(), "epoch,loss_occ,loss_mv,total");
        assert_ne!(a.params, FieldParams::init(cfg.seed));
    }

    #[test]
    fn step_cap_stops_mid_epoch() {
        let cfg = TrainingConfig { stage1_epochs: 5, max_steps: Some(3), lambda_mv: 0.0, ..tiny_config() };
        let out = train_stage1(&tiny_dataset(&cfg), &cfg, None, |_, _| Ok(())).unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(out.metrics.len(), 2);
    }

    #[test]
    fn stage2_zero_epochs_keeps_params() {
        let cfg = TrainingConfig { stage2_epochs: 0, ..tiny_config() };
        let ds = tiny_dataset(&cfg);
        let p = FieldParams::init(3);
        let out = train_stage2(p.clone(), &[ds.samples[0].input.clone()], &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.params, p);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn stage2_step_lowers_its_loss() {
        let cfg = TrainingConfig { stage2_epochs: 8, stage2_lr: 0.002, ..tiny_config() };
        let ds = tiny_dataset(&cfg);
        let img = ds.samples[1].input.clone();
        let out = train_stage2(FieldParams::init(5), &[img], &cfg, |_, _| Ok(())).unwrap();
        let first = out.metrics.first().unwrap().total;
        let last = out.metrics.last().unwrap().total;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let mut entries: Vec<(String, Tensor)> = FieldParams::init(0).entries().to_vec();
        // huge weights overflow the conv activations to infinity
        entries[0].1 = Tensor::filled(entries[0].1.shape(), 1e300);
        entries[2].1 = Tensor::filled(entries[2].1.shape(), 1e300);
        let p = FieldParams::from_entries(entries).unwrap();
        match train_stage1(&ds, &cfg, Some(p), |_, _| Ok(())) {
            Err(Error::Diverged { epoch: 1, step: 1, .. }) | Err(Error::NonFiniteGrad { .. }) => {}
            other => panic!("{:?}", other.map(|o| o.steps)),
        }
    }
}
