//! Two-stage training: supervised occupancy with multi-view consistency on
//! synthetic shapes, then silhouette and color fine-tuning on masked images.

mod config;
mod stages;

pub use self::config::TrainingConfig;
pub use self::stages::{metrics_csv, train_stage1, train_stage2, EpochMetrics, Stage1Data, Stage2Sample, TrainOutput};

use crate::diffcalc::{Graph, Tensor, Var};
use crate::pifield::FieldParams;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const BCE_EPS: f64 = 1e-7;

/// Mean squared difference over every element of every view.
pub fn loss_multiview<'g>(rendered: &[Var<'g>], targets: &[Var<'g>]) -> Result<Var<'g>> {
    if rendered.len() != targets.len() || rendered.is_empty() {
        return Err(Error::contract(
            "loss_multiview",
            format!("{} rendered views for {} targets", rendered.len(), targets.len()),
        ));
    }
    let mut total: Option<Var<'g>> = None;
    let mut count = 0usize;
    for (r, t) in rendered.iter().zip(targets) {
        if r.shape() != t.shape() {
            return Err(Error::contract("loss_multiview", format!("view extents {:?} and {:?}", r.shape(), t.shape())));
        }
        count += r.len();
        let s = r.sub(*t)?.square().sum();
        total = Some(match total {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one view").scale(1.0 / count as f64))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_occupancy<'g>(predicted: Var<'g>, labels: &[f64]) -> Result<Var<'g>> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::contract(
            "loss_occupancy",
            format!("{} predictions for {} labels", predicted.len(), labels.len()),
        ));
    }
    let g = predicted.graph();
    let p = predicted.reshape(&[labels.len()])?;
    // clamp through a constant offset so the clamped branch carries no gradient
    let clamped: Vec<f64> = p.value_ref().data().iter().map(|v| v.clamp(BCE_EPS, 1.0 - BCE_EPS)).collect();
    let offset: Vec<f64> = clamped.iter().zip(p.value_ref().data()).map(|(c, v)| c - v).collect();
    let pc = p.add(g.constant(Tensor::vector(offset)))?;
    let y = g.constant(Tensor::vector(labels.to_vec()));
    let one_minus_y = g.constant(Tensor::vector(labels.iter().map(|l| 1.0 - l).collect()));
    let pos = y.mul(pc.log())?;
    let neg = one_minus_y.mul(pc.rsub_scalar(1.0).log())?;
    Ok(pos.add(neg)?.mean()?.neg())
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &FieldParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn optimizer_step(params: &mut FieldParams, grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract("optimizer_step", "gradient count differs from parameter count"));
    }
    for ((name, p), g) in params.entries().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::contract("optimizer_step", format!("gradient shape mismatch for {name}")));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGrad { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Plain-value multi-view loss, for reporting.
pub fn multiview_value(rendered: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let r: Vec<Var<'_>> = rendered.iter().map(|t| g.constant(t.clone())).collect();
    let t: Vec<Var<'_>> = targets.iter().map(|t| g.constant(t.clone())).collect();
    Ok(loss_multiview(&r, &t)?.item())
}
