//! Finite-difference checks of every hand-written backward pass.
//!
//! Each check builds a small random instance in `f64`, reduces the layer
//! output to a scalar through a random linear functional, and compares the
//! analytic gradients of every input and parameter against central
//! differences.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::fusion::{fuse_views, fuse_views_backward, FusionMode, FusionOperator, ViewPointFeatures, ViewSampler};
use crate::nn::{
    attention_backward, attention_forward, gelu, gelu_backward, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, linear_param_shapes, norm_param_shapes, patch_embed_backward, patch_embed_forward,
    AttentionKind,
};
use crate::projection::Correspondence;
use crate::reconstruction::{
    aggregate_backward, aggregate_layers, backward_pass, bottleneck_forward, bottleneck_mlp_backward,
    bottleneck_mlp_forward, student_forward, DecoderConfig,
};
use crate::tensor::ParamSet;
use crate::training::global_cosine_loss_masked;

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    LayerNorm,
    Gelu,
    SoftmaxAttention,
    LinearAttention,
    PatchEmbed,
    BottleneckMlp,
    LayerAggregation,
    ViewFusion,
    CosineLoss,
    Student,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Linear,
        LayerKind::LayerNorm,
        LayerKind::Gelu,
        LayerKind::SoftmaxAttention,
        LayerKind::LinearAttention,
        LayerKind::PatchEmbed,
        LayerKind::BottleneckMlp,
        LayerKind::LayerAggregation,
        LayerKind::ViewFusion,
        LayerKind::CosineLoss,
        LayerKind::Student,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::LayerNorm => "layer-norm",
            LayerKind::Gelu => "gelu",
            LayerKind::SoftmaxAttention => "softmax attention",
            LayerKind::LinearAttention => "linear attention",
            LayerKind::PatchEmbed => "patch embed",
            LayerKind::BottleneckMlp => "bottleneck mlp",
            LayerKind::LayerAggregation => "layer aggregation",
            LayerKind::ViewFusion => "view fusion",
            LayerKind::CosineLoss => "cosine loss (frozen mask)",
            LayerKind::Student => "student end to end",
        }
    }
}

/// `|a - n| / max(|a|, |n|)` over the whole gradient; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` w.r.t. every entry of every tensor in `vars`.
pub fn numeric_gradient(vars: &ParamSet<f64>, f: impl Fn(&ParamSet<f64>) -> Result<f64>) -> Result<ParamSet<f64>> {
    let mut work = vars.clone();
    let mut out = vars.zeros_like();
    let names: Vec<String> = vars.names().map(str::to_string).collect();
    for name in names {
        let n = vars.get(&name)?.len();
        for i in 0..n {
            let orig = vars.get(&name)?.as_slice().unwrap()[i];
            work.get_mut(&name)?.as_slice_mut().unwrap()[i] = orig + FD_STEP;
            let up = f(&work)?;
            work.get_mut(&name)?.as_slice_mut().unwrap()[i] = orig - FD_STEP;
            let down = f(&work)?;
            work.get_mut(&name)?.as_slice_mut().unwrap()[i] = orig;
            out.get_mut(&name)?.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * FD_STEP);
        }
    }
    Ok(out)
}

/// Worst per-tensor relative error between two gradient sets with the same names.
pub fn compare(analytic: &ParamSet<f64>, numeric: &ParamSet<f64>) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (name, n) in numeric.iter() {
        let a = analytic
            .get(name)
            .map_err(|_| Error::Logic(format!("no analytic gradient for {name}")))?;
        if a.shape() != n.shape() {
            return Err(Error::Logic(format!("gradient shape mismatch for {name}")));
        }
        let a: Vec<f64> = a.iter().copied().collect();
        let n: Vec<f64> = n.iter().copied().collect();
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn random_params(rng: &mut ChaCha8Rng, shapes: &[(String, Vec<usize>)], scale: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, shape) in shapes {
        let mut t = uniform(rng, shape, scale);
        if name.contains("norm") && name.ends_with(".weight") {
            t.mapv_inplace(|v| 1.0 + v);
        }
        p.insert(name.clone(), t);
    }
    p
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn mat_of(p: &ParamSet<f64>, name: &str) -> Result<Array2<f64>> {
    Ok(p.mat(name)?.to_owned())
}

fn into_dyn(a: Array2<f64>) -> ArrayD<f64> {
    a.into_dyn()
}

/// Splits `vars` into the layer parameters and the named inputs.
fn params_without(vars: &ParamSet<f64>, inputs: &[&str]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, t) in vars.iter() {
        if !inputs.contains(&name) {
            p.insert(name, t.clone());
        }
    }
    p
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let mut vars = random_params(rng, &linear_param_shapes("l", i, o), 1.0);
    vars.insert("x", uniform(rng, &[n, i], 1.0));
    let r = mat(rng, n, o, 1.0);
    let f = |v: &ParamSet<f64>| Ok(dot(&linear_forward(v, "l", &mat_of(v, "x")?)?, &r));
    let mut grads = vars.zeros_like();
    let dx = linear_backward(&vars, "l", &mat_of(&vars, "x")?, &r, &mut grads)?;
    grads.insert("x", into_dyn(dx));
    compare(&grads, &numeric_gradient(&vars, f)?)
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.random_range(1..5), rng.random_range(4..9));
    let mut vars = random_params(rng, &norm_param_shapes("ln", c), 0.5);
    vars.insert("x", uniform(rng, &[n, c], 2.0));
    let r = mat(rng, n, c, 1.0);
    let f = |v: &ParamSet<f64>| Ok(dot(&layer_norm_forward(v, "ln", &mat_of(v, "x")?)?.0, &r));
    let mut grads = vars.zeros_like();
    let (_, cache) = layer_norm_forward(&vars, "ln", &mat_of(&vars, "x")?)?;
    let dx = layer_norm_backward(&vars, "ln", &cache, &r, &mut grads)?;
    grads.insert("x", into_dyn(dx));
    compare(&grads, &numeric_gradient(&vars, f)?)
}

fn check_gelu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.random_range(1..5), rng.random_range(1..8));
    let mut vars = ParamSet::new();
    vars.insert("x", uniform(rng, &[n, c], 3.0));
    let r = mat(rng, n, c, 1.0);
    let f = |v: &ParamSet<f64>| Ok(dot(&mat_of(v, "x")?.mapv(gelu), &r));
    let mut grads = ParamSet::new();
    grads.insert("x", into_dyn(gelu_backward(&mat_of(&vars, "x")?, &r)));
    compare(&grads, &numeric_gradient(&vars, f)?)
}

fn check_attention(rng: &mut ChaCha8Rng, kind: AttentionKind) -> Result<f64> {
    let heads = rng.random_range(1..3);
    let dim = heads * rng.random_range(2..4);
    let n = rng.random_range(2..6);
    let mut shapes = linear_param_shapes("a.qkv", dim, 3 * dim);
    shapes.extend(linear_param_shapes("a.proj", dim, dim));
    let mut vars = random_params(rng, &shapes, 0.5);
    vars.insert("x", uniform(rng, &[n, dim], 1.0));
    let r = mat(rng, n, dim, 1.0);
    let f = |v: &ParamSet<f64>| Ok(dot(&attention_forward(v, "a", &mat_of(v, "x")?, heads, kind)?.0, &r));
    let mut grads = vars.zeros_like();
    let (_, cache) = attention_forward(&vars, "a", &mat_of(&vars, "x")?, heads, kind)?;
    let dx = attention_backward(&vars, "a", &cache, &r, &mut grads)?;
    grads.insert("x", into_dyn(dx));
    compare(&grads, &numeric_gradient(&vars, f)?)
}

fn check_patch_embed(rng: &mut ChaCha8Rng) -> Result<f64> {
    let patch = rng.random_range(1..4);
    let (gh, gw, ch, dim) = (
        rng.random_range(1..3),
        rng.random_range(1..3),
        rng.random_range(1..4),
        4,
    );
    let mut shapes = linear_param_shapes("p.proj", patch * patch * ch, dim);
    shapes.push(("p.pos_embed".to_string(), vec![gh * gw, dim]));
    let mut vars = random_params(rng, &shapes, 0.5);
    vars.insert("image", uniform(rng, &[gh * patch, gw * patch, ch], 1.0));
    let r = mat(rng, gh * gw, dim, 1.0);
    let image = |v: &ParamSet<f64>| -> Result<Array3<f64>> {
        v.get("image")?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::Logic(e.to_string()))
    };
    let f = |v: &ParamSet<f64>| Ok(dot(&patch_embed_forward(v, "p", image(v)?.view(), patch)?.0, &r));
    let mut grads = vars.zeros_like();
    let (_, cache) = patch_embed_forward(&vars, "p", image(&vars)?.view(), patch)?;
    let dimg = patch_embed_backward(&vars, "p", &cache, &r, &mut grads)?;
    grads.insert("image", dimg.into_dyn());
    compare(&grads, &numeric_gradient(&vars, f)?)
}

fn tap_names(j: usize) -> Vec<String> {
    (0..j).map(|l| format!("tap.{l}")).collect()
}

fn taps_of(v: &ParamSet<f64>, names: &[String], gh: usize, gw: usize) -> Result<Vec<FeatureMap<f64>>> {
    names.iter().map(|n| FeatureMap::new(gh, gw, mat_of(v, n)?)).collect()
}

fn check_bottleneck(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (gh, gw, dim, j) = (
        rng.random_range(1..3),
        rng.random_range(1..3),
        rng.random_range(2..6),
        rng.random_range(1..4),
    );
    let mut shapes = linear_param_shapes("student.bottleneck.fc1", dim, dim);
    shapes.extend(linear_param_shapes("student.bottleneck.fc2", dim, dim));
    let mut vars = random_params(rng, &shapes, 0.7);
    let names = tap_names(j);
    for n in &names {
        vars.insert(n.clone(), uniform(rng, &[gh * gw, dim], 1.0));
    }
    let r = mat(rng, gh * gw, dim, 1.0);
    let f = |v: &ParamSet<f64>| Ok(dot(&bottleneck_forward(&taps_of(v, &names, gh, gw)?, v)?.data, &r));
    let taps = taps_of(&vars, &names, gh, gw)?;
    let inputs: Vec<&str> = names.iter().map(String::as_str).collect();
    let params = params_without(&vars, &inputs);
    let mut grads = vars.zeros_like();
    let (_, cache) = bottleneck_mlp_forward(&params, &aggregate_layers(&taps)?.data)?;
    let dmean = bottleneck_mlp_backward(&params, &cache, &r, &mut grads)?;
    for (n, d) in names.iter().zip(aggregate_backward(&dmean, j)) {
        grads.insert(n.clone(), into_dyn(d));
    }
    compare(&grads, &numeric_gradient(&vars, f)?)
}

fn check_aggregation(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (gh, gw, c, j) = (
        rng.random_range(1..3),
        rng.random_range(1..3),
        rng.random_range(1..5),
        rng.random_range(1..5),
    );
    let names = tap_names(j);
    let mut vars = ParamSet::new();
    for n in &names {
        vars.insert(n.clone(), uniform(rng, &[gh * gw, c], 1.0));
    }
    let r = mat(rng, gh * gw, c, 1.0);
    let f = |v: &ParamSet<f64>| Ok(dot(&aggregate_layers(&taps_of(v, &names, gh, gw)?)?.data, &r));
    let mut grads = ParamSet::new();
    for (n, d) in names.iter().zip(aggregate_backward(&r, j)) {
        grads.insert(n.clone(), into_dyn(d));
    }
    compare(&grads, &numeric_gradient(&vars, f)?)
}

/// Random correspondences: every view sees a random subset of points, each at
/// a distinct pixel.
fn random_views(rng: &mut ChaCha8Rng, n_views: usize, n_points: usize, side: usize) -> Vec<Vec<Correspondence>> {
    (0..n_views)
        .map(|_| {
            let mut used = std::collections::BTreeSet::new();
            let mut out = Vec::new();
            for point in 0..n_points as u32 {
                if !rng.random_bool(0.6) {
                    continue;
                }
                let (u, v) = (rng.random_range(0..side) as u32, rng.random_range(0..side) as u32);
                if used.insert((u, v)) {
                    out.push(Correspondence { point, u, v });
                }
            }
            out
        })
        .collect()
}

fn check_view_fusion(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n_views, n_points, side, grid, c) = (
        rng.random_range(1..4),
        rng.random_range(2..9),
        8,
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let mode = if rng.random_bool(0.5) {
        FusionMode::VisibleOnly
    } else {
        FusionMode::AllViews
    };
    let views = random_views(rng, n_views, n_points, side);
    let samplers = views
        .iter()
        .map(|corr| ViewSampler::new(corr, side, side, grid, grid))
        .collect::<Result<Vec<_>>>()?;
    let op = FusionOperator::new(&samplers, n_points, mode)?;
    let names: Vec<String> = (0..n_views).map(|k| format!("view.{k}")).collect();
    let mut vars = ParamSet::new();
    for n in &names {
        vars.insert(n.clone(), uniform(rng, &[grid * grid, c], 1.0));
    }
    let r = mat(rng, op.n_visible(), c, 1.0);
    let maps = |v: &ParamSet<f64>| names.iter().map(|n| mat_of(v, n)).collect::<Result<Vec<_>>>();
    let f = |v: &ParamSet<f64>| {
        let m = maps(v)?;
        let views: Vec<_> = m.iter().map(|a| a.view()).collect();
        Ok(dot(&op.apply(&views)?, &r))
    };
    let mut grads = ParamSet::new();
    for (n, d) in names.iter().zip(op.apply_transpose(r.view())?) {
        grads.insert(n.clone(), into_dyn(d));
    }
    let operator_err = compare(&grads, &numeric_gradient(&vars, f)?)?;

    // The reference per-point averaging, differentiated w.r.t. the per-view rows.
    let row_names: Vec<String> = (0..n_views).map(|k| format!("rows.{k}")).collect();
    let mut rows = ParamSet::new();
    for (n, corr) in row_names.iter().zip(&views) {
        rows.insert(n.clone(), uniform(rng, &[corr.len(), c], 1.0));
    }
    let rf = mat(rng, n_points, c, 1.0);
    let point_lists: Vec<Vec<u32>> = views.iter().map(|v| v.iter().map(|c| c.point).collect()).collect();
    let fused = |v: &ParamSet<f64>| -> Result<Array2<f64>> {
        let per_view = row_names
            .iter()
            .zip(&point_lists)
            .map(|(n, pts)| {
                let s = mat_of(v, n)?;
                Ok(ViewPointFeatures {
                    points: pts.clone(),
                    teacher: s.clone(),
                    student: s,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(fuse_views(&per_view, n_points, mode)?.student)
    };
    let fr = |v: &ParamSet<f64>| Ok(dot(&fused(v)?, &rf));
    let counts = {
        let mut c = vec![0u32; n_points];
        for p in point_lists.iter().flatten() {
            c[*p as usize] += 1;
        }
        c
    };
    let slices: Vec<&[u32]> = point_lists.iter().map(Vec::as_slice).collect();
    let mut rgrads = ParamSet::new();
    for (n, d) in row_names
        .iter()
        .zip(fuse_views_backward(&slices, &counts, mode, rf.view()))
    {
        rgrads.insert(n.clone(), into_dyn(d));
    }
    let reference_err = compare(&rgrads, &numeric_gradient(&rows, fr)?)?;
    Ok(operator_err.max(reference_err))
}

fn check_cosine_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, n, c) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..5));
    let shrink = 0.1;
    let teacher: Vec<Array2<f64>> = (0..b).map(|_| mat(rng, n, c, 1.0)).collect();
    let masks: Vec<Vec<bool>> = (0..b).map(|_| (0..n).map(|_| rng.random_bool(0.5)).collect()).collect();
    let names: Vec<String> = (0..b).map(|i| format!("student.{i}")).collect();
    let mut vars = ParamSet::new();
    for name in &names {
        vars.insert(name.clone(), uniform(rng, &[n, c], 1.0));
    }
    let tv: Vec<_> = teacher.iter().map(|t| t.view()).collect();
    let f = |v: &ParamSet<f64>| {
        let s = names.iter().map(|n| mat_of(v, n)).collect::<Result<Vec<_>>>()?;
        let sv: Vec<_> = s.iter().map(|m| m.view()).collect();
        Ok(global_cosine_loss_masked(&tv, &sv, &masks, shrink)?.loss)
    };
    let s = names.iter().map(|n| mat_of(&vars, n)).collect::<Result<Vec<_>>>()?;
    let sv: Vec<_> = s.iter().map(|m| m.view()).collect();
    let out = global_cosine_loss_masked(&tv, &sv, &masks, shrink)?;
    let mut grads = ParamSet::new();
    for (n, g) in names.iter().zip(out.grads) {
        grads.insert(n.clone(), into_dyn(g));
    }
    // Mined rows pass a stop-gradient-scaled copy of the true derivative.
    let mut numeric = numeric_gradient(&vars, f)?;
    for (i, n) in names.iter().enumerate() {
        let mut g = numeric.mat_mut(n)?;
        for (r, mut row) in g.rows_mut().into_iter().enumerate() {
            if masks[i][r] {
                row.mapv_inplace(|x| x * shrink);
            }
        }
    }
    compare(&grads, &numeric)
}

fn check_student(rng: &mut ChaCha8Rng) -> Result<f64> {
    let heads = rng.random_range(1..3);
    let config = DecoderConfig {
        embed_dim: heads * 4,
        depth: rng.random_range(1..3),
        heads,
        mlp_ratio: 2,
        attention: AttentionKind::Linear,
    };
    let (gh, gw) = (rng.random_range(1..3), rng.random_range(1..3));
    let mut vars = random_params(rng, &config.param_shapes(), 0.5);
    vars.insert("input", uniform(rng, &[gh * gw, config.embed_dim], 1.0));
    let r = mat(rng, gh * gw, config.embed_dim, 1.0);
    let f = |v: &ParamSet<f64>| {
        let (maps, _) = student_forward(&FeatureMap::new(gh, gw, mat_of(v, "input")?)?, &config, v)?;
        Ok(dot(&aggregate_layers(&maps)?.data, &r))
    };
    let params = params_without(&vars, &["input"]);
    let (_, mut tape) = student_forward(&FeatureMap::new(gh, gw, mat_of(&vars, "input")?)?, &config, &params)?;
    let mut grads = vars.zeros_like();
    let dx = backward_pass(&mut tape, &params, &aggregate_backward(&r, config.depth), &mut grads)?;
    grads.insert("input", into_dyn(dx));
    compare(&grads, &numeric_gradient(&vars, f)?)
}

/// Worst relative error of one random instance of `kind`.
pub fn check_layer(kind: LayerKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        LayerKind::Linear => check_linear(&mut rng),
        LayerKind::LayerNorm => check_layer_norm(&mut rng),
        LayerKind::Gelu => check_gelu(&mut rng),
        LayerKind::SoftmaxAttention => check_attention(&mut rng, AttentionKind::Softmax),
        LayerKind::LinearAttention => check_attention(&mut rng, AttentionKind::Linear),
        LayerKind::PatchEmbed => check_patch_embed(&mut rng),
        LayerKind::BottleneckMlp => check_bottleneck(&mut rng),
        LayerKind::LayerAggregation => check_aggregation(&mut rng),
        LayerKind::ViewFusion => check_view_fusion(&mut rng),
        LayerKind::CosineLoss => check_cosine_loss(&mut rng),
        LayerKind::Student => check_student(&mut rng),
    }
}

/// Worst error of `kind` over `instances` seeds.
pub fn check_layer_many(kind: LayerKind, instances: u64) -> Result<f64> {
    (0..instances).try_fold(0.0_f64, |worst, seed| Ok(worst.max(check_layer(kind, seed)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let mut v = ParamSet::new();
        v.insert("x", ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
        let g = numeric_gradient(&v, |p| Ok(p.get("x")?.iter().map(|x| x * x).sum())).unwrap();
        for (a, b) in g.get("x").unwrap().iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut v = ParamSet::new();
        v.insert("x", ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, 0.7]).unwrap());
        let numeric = numeric_gradient(&v, |p| Ok(p.get("x")?.iter().map(|x| x.sin()).sum())).unwrap();
        let mut wrong = ParamSet::new();
        wrong.insert("x", v.get("x").unwrap().mapv(f64::sin));
        assert!(compare(&wrong, &numeric).unwrap() > 0.1);
    }
}
