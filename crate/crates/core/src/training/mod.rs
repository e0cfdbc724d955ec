//! Student training: fused-feature loss, exact backward through fusion and
//! the student network, and the optimizer loop.

mod loss;
mod optimizer;

pub use loss::{
    global_cosine_loss, global_cosine_loss_masked, hard_mining_select, point_distances, quantile, LossConfig,
    LossOutput,
};
pub use optimizer::{optimizer_step, OptimizerConfig, OptimizerState};

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::pipeline::TeacherViews;
use crate::reconstruction::{
    aggregate_backward, aggregate_layers, backward_pass, student_forward, DecoderConfig, GradTape,
};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// One sample per cloud over its fused point features.
    #[default]
    Fused,
    /// One sample per view over its patch-grid maps.
    PerView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub loss_scope: LossScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 2,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss_scope: LossScope::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

/// Everything the backward needs from one cloud's forward.
struct CloudForward {
    tapes: Vec<GradTape<f32>>,
    student_maps: Vec<FeatureMap<f32>>,
    j: usize,
}

fn forward_cloud(tv: &TeacherViews, decoder: &DecoderConfig, student: &ParamSet<f32>) -> Result<CloudForward> {
    let outs = tv
        .maps
        .par_iter()
        .map(|m| {
            let (maps, tape) = student_forward(m, decoder, student)?;
            Ok((aggregate_layers(&maps)?, tape))
        })
        .collect::<Result<Vec<_>>>()?;
    let (student_maps, tapes) = outs.into_iter().unzip();
    Ok(CloudForward {
        tapes,
        student_maps,
        j: decoder.depth,
    })
}

/// Student gradients from per-view patch-grid gradients, reduced in view order.
fn backward_cloud(fwd: CloudForward, d_maps: Vec<Array2<f32>>, student: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    let j = fwd.j;
    let per_view = fwd
        .tapes
        .into_par_iter()
        .zip(d_maps.into_par_iter())
        .map(|(mut tape, d)| {
            let mut g = student.zeros_like();
            backward_pass(&mut tape, student, &aggregate_backward(&d, j), &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = student.zeros_like();
    for g in &per_view {
        total.add_assign(g)?;
    }
    Ok(total)
}

/// Loss and student gradient for one batch of clouds.
pub fn batch_gradient(
    batch: &[&TeacherViews],
    decoder: &DecoderConfig,
    student: &ParamSet<f32>,
    config: &TrainConfig,
) -> Result<(f64, ParamSet<f32>)> {
    let forwards = batch
        .iter()
        .map(|tv| forward_cloud(tv, decoder, student))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = student.zeros_like();
    let loss = match config.loss_scope {
        LossScope::Fused => {
            let student_fused = batch
                .iter()
                .zip(&forwards)
                .map(|(tv, fwd)| {
                    let maps: Vec<_> = fwd.student_maps.iter().map(|m| m.data.view()).collect();
                    tv.fusion.apply(&maps)
                })
                .collect::<Result<Vec<_>>>()?;
            let teacher: Vec<ArrayView2<f32>> = batch.iter().map(|tv| tv.teacher_fused.view()).collect();
            let studentv: Vec<ArrayView2<f32>> = student_fused.iter().map(|s| s.view()).collect();
            let out = global_cosine_loss(&teacher, &studentv, &config.loss)?;
            for ((tv, fwd), g) in batch.iter().zip(forwards).zip(&out.grads) {
                let d_maps = tv.fusion.apply_transpose(g.view())?;
                grads.add_assign(&backward_cloud(fwd, d_maps, student)?)?;
            }
            out.loss
        }
        LossScope::PerView => {
            let teacher: Vec<ArrayView2<f32>> = batch
                .iter()
                .flat_map(|tv| tv.maps.iter().map(|m| m.data.view()))
                .collect();
            let studentv: Vec<ArrayView2<f32>> = forwards
                .iter()
                .flat_map(|f| f.student_maps.iter().map(|m| m.data.view()))
                .collect();
            let out = global_cosine_loss(&teacher, &studentv, &config.loss)?;
            let mut g_iter = out.grads.into_iter();
            for fwd in forwards {
                let d_maps: Vec<Array2<f32>> = g_iter.by_ref().take(fwd.tapes.len()).collect();
                grads.add_assign(&backward_cloud(fwd, d_maps, student)?)?;
            }
            out.loss
        }
    };
    Ok((loss, grads))
}

/// Trains the student on cached teacher views. `observer` sees every step's
/// record and the weights after that step.
pub fn train(
    set: &[TeacherViews],
    decoder: &DecoderConfig,
    init: &ParamSet<f32>,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepRecord, &ParamSet<f32>) -> Result<()>,
) -> Result<ParamSet<f32>> {
    config.loss.validate()?;
    if set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    init.validate(&decoder.param_shapes())?;
    let mut student = init.clone();
    let mut state = OptimizerState::new(&student, config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let b = config.batch_size.min(set.len());
    for step in 1..=config.iterations {
        let started = Instant::now();
        let mut idx = sample(&mut rng, set.len(), b).into_vec();
        idx.sort_unstable();
        let batch: Vec<&TeacherViews> = idx.iter().map(|&i| &set[i]).collect();
        let (loss, grads) = batch_gradient(&batch, decoder, &student, config).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss is {loss}"
            )));
        }
        optimizer_step(&mut state, &mut student, &grads)
            .map_err(|e| Error::Numeric(format!("training diverged at step {step}: {e}")))?;
        if !student.all_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: non-finite weights"
            )));
        }
        let record = StepRecord {
            step,
            loss,
            lr: config.optimizer.lr,
            wall_ms: started.elapsed().as_millis(),
        };
        observer(&record, &student)?;
    }
    Ok(student)
}
