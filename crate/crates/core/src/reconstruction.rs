//! Student network: a bottleneck MLP over the averaged teacher taps followed
//! by a linear-attention decoder with one block per tap.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_params, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{
    block_backward, block_forward, block_param_shapes, gelu, gelu_backward, linear_backward, linear_forward,
    linear_param_shapes, AttentionKind, BlockCache, BlockDims,
};
use crate::tensor::{ParamSet, Real};

pub const STUDENT_PREFIX: &str = "student";
const FC1: &str = "student.bottleneck.fc1";
const FC2: &str = "student.bottleneck.fc2";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    /// Number of decoder blocks; equals the teacher's tap count.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
}

impl DecoderConfig {
    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        Self {
            embed_dim: enc.embed_dim,
            depth: enc.tap_layers.len(),
            heads: enc.heads,
            mlp_ratio: enc.mlp_ratio,
            attention: AttentionKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Checks the one-to-one pairing with the encoder's taps.
    pub fn check_pairing(&self, enc: &EncoderConfig) -> Result<()> {
        if self.depth != enc.tap_layers.len() || self.embed_dim != enc.embed_dim {
            return Err(Error::Config(format!(
                "decoder ({} blocks, dim {}) does not pair with {} taps of dim {}",
                self.depth,
                self.embed_dim,
                enc.tap_layers.len(),
                enc.embed_dim
            )));
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: self.embed_dim * self.mlp_ratio,
            attention: self.attention,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut v = linear_param_shapes(FC1, d, d);
        v.extend(linear_param_shapes(FC2, d, d));
        let dims = self.block_dims();
        for l in 0..self.depth {
            v.extend(block_param_shapes(&block_prefix(l), &dims));
        }
        v
    }
}

fn block_prefix(l: usize) -> String {
    format!("{STUDENT_PREFIX}.decoder.blocks.{l}")
}

pub fn init_student(config: &DecoderConfig, seed: u64) -> Result<ParamSet<f32>> {
    config.validate()?;
    Ok(init_params(&config.param_shapes(), seed))
}

/// Element-wise mean of equally shaped maps.
pub fn aggregate_layers<T: Real>(maps: &[FeatureMap<T>]) -> Result<FeatureMap<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate an empty list of maps".into()))?;
    let mut sum = first.data.clone();
    for m in &maps[1..] {
        if !m.same_shape(first) {
            return Err(Error::Config(format!(
                "map {}x{}x{} does not match {}x{}x{}",
                m.grid_h,
                m.grid_w,
                m.channels(),
                first.grid_h,
                first.grid_w,
                first.channels()
            )));
        }
        sum += &m.data;
    }
    sum /= T::from_usize(maps.len()).unwrap();
    FeatureMap::new(first.grid_h, first.grid_w, sum)
}

/// Gradient of [`aggregate_layers`]: every input receives `d / j`.
pub fn aggregate_backward<T: Real>(d: &Array2<T>, j: usize) -> Vec<Array2<T>> {
    let g = d / T::from_usize(j).unwrap();
    vec![g; j]
}

/// Records everything the student backward needs for one view.
#[derive(Debug, Clone)]
pub struct GradTape<T> {
    grid: (usize, usize),
    bottleneck: BottleneckCache<T>,
    blocks: Vec<BlockCache<T>>,
    consumed: bool,
}

impl<T> GradTape<T> {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

#[derive(Debug, Clone)]
pub struct BottleneckCache<T> {
    input: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

/// The bottleneck MLP on already averaged tokens.
pub fn bottleneck_mlp_forward<T: Real>(params: &ParamSet<T>, x: &Array2<T>) -> Result<(Array2<T>, BottleneckCache<T>)> {
    let hidden_pre = linear_forward(params, FC1, x)?;
    let hidden = hidden_pre.mapv(gelu);
    let out = linear_forward(params, FC2, &hidden)?;
    let cache = BottleneckCache {
        input: x.clone(),
        hidden_pre,
        hidden,
    };
    Ok((out, cache))
}

pub fn bottleneck_mlp_backward<T: Real>(
    params: &ParamSet<T>,
    cache: &BottleneckCache<T>,
    dy: &Array2<T>,
    grads: &mut ParamSet<T>,
) -> Result<Array2<T>> {
    let d_hidden = linear_backward(params, FC2, &cache.hidden, dy, grads)?;
    let d_pre = gelu_backward(&cache.hidden_pre, &d_hidden);
    linear_backward(params, FC1, &cache.input, &d_pre, grads)
}

/// Mean over the taps, then the per-token MLP.
pub fn bottleneck_forward<T: Real>(taps: &[FeatureMap<T>], params: &ParamSet<T>) -> Result<FeatureMap<T>> {
    let mean = aggregate_layers(taps)?;
    let (out, _) = bottleneck_mlp_forward(params, &mean.data)?;
    FeatureMap::new(mean.grid_h, mean.grid_w, out)
}

pub fn decoder_forward<T: Real>(
    latent: &FeatureMap<T>,
    config: &DecoderConfig,
    params: &ParamSet<T>,
) -> Result<Vec<FeatureMap<T>>> {
    let (maps, _) = run_decoder(latent, config, params)?;
    Ok(maps)
}

fn run_decoder<T: Real>(
    latent: &FeatureMap<T>,
    config: &DecoderConfig,
    params: &ParamSet<T>,
) -> Result<(Vec<FeatureMap<T>>, Vec<BlockCache<T>>)> {
    config.validate()?;
    if latent.channels() != config.embed_dim {
        return Err(Error::Config(format!(
            "latent has {} channels, decoder expects {}",
            latent.channels(),
            config.embed_dim
        )));
    }
    let dims = config.block_dims();
    let mut x = latent.data.clone();
    let mut maps = Vec::with_capacity(config.depth);
    let mut caches = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let (y, cache) = block_forward(params, &block_prefix(l), &x, &dims)?;
        maps.push(FeatureMap::new(latent.grid_h, latent.grid_w, y.clone())?);
        caches.push(cache);
        x = y;
    }
    Ok((maps, caches))
}

/// Full student forward from the already averaged teacher taps, keeping a tape.
pub fn student_forward<T: Real>(
    tap_mean: &FeatureMap<T>,
    config: &DecoderConfig,
    params: &ParamSet<T>,
) -> Result<(Vec<FeatureMap<T>>, GradTape<T>)> {
    let (out, bottleneck) = bottleneck_mlp_forward(params, &tap_mean.data)?;
    let latent = FeatureMap::new(tap_mean.grid_h, tap_mean.grid_w, out)?;
    let (maps, blocks) = run_decoder(&latent, config, params)?;
    let tape = GradTape {
        grid: (tap_mean.grid_h, tap_mean.grid_w),
        bottleneck,
        blocks,
        consumed: false,
    };
    Ok((maps, tape))
}

/// Back-propagates gradients w.r.t. each student map (one per decoder block)
/// into the student parameters, accumulating into `grads`. Returns the
/// gradient w.r.t. the bottleneck input. A tape can be consumed only once.
pub fn backward_pass<T: Real>(
    tape: &mut GradTape<T>,
    params: &ParamSet<T>,
    upstream: &[Array2<T>],
    grads: &mut ParamSet<T>,
) -> Result<Array2<T>> {
    if tape.consumed {
        return Err(Error::Logic("gradient tape was already consumed".into()));
    }
    if upstream.len() != tape.blocks.len() {
        return Err(Error::Logic(format!(
            "{} upstream gradients for {} decoder blocks",
            upstream.len(),
            tape.blocks.len()
        )));
    }
    let tokens = tape.grid.0 * tape.grid.1;
    if let Some(u) = upstream
        .iter()
        .find(|u| u.dim() != (tokens, tape.bottleneck.input.ncols()))
    {
        return Err(Error::Logic(format!("upstream gradient has shape {:?}", u.dim())));
    }
    tape.consumed = true;
    let mut g = Array2::<T>::zeros(tape.bottleneck.input.dim());
    for l in (0..tape.blocks.len()).rev() {
        g += &upstream[l];
        g = block_backward(params, &block_prefix(l), &tape.blocks[l], &g, grads)?;
    }
    bottleneck_mlp_backward(params, &tape.bottleneck, &g, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            attention: AttentionKind::Linear,
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        let data = Array2::from_shape_fn((h * w, c), |_| rng.random_range(-1.0..1.0));
        FeatureMap::new(h, w, data).unwrap()
    }

    #[test]
    fn aggregate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_map(&mut rng, 2, 3, 4);
        let neg = FeatureMap::new(2, 3, -&a.data).unwrap();
        let z = aggregate_layers(&[a.clone(), neg]).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert_eq!(aggregate_layers(std::slice::from_ref(&a)).unwrap(), a);
        let other = random_map(&mut rng, 3, 2, 4);
        assert!(aggregate_layers(&[a, other]).is_err());
        assert!(aggregate_layers::<f64>(&[]).is_err());
    }

    #[test]
    fn repeated_taps_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_student(&cfg(), 3).unwrap().cast::<f64>();
        let t = random_map(&mut rng, 2, 2, 8);
        let one = bottleneck_forward(std::slice::from_ref(&t), &params).unwrap();
        let three = bottleneck_forward(&[t.clone(), t.clone(), t], &params).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn zero_bottleneck_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = init_student(&cfg(), 3).unwrap().cast::<f64>();
        for (name, t) in params.iter_mut() {
            if name.starts_with("student.bottleneck") {
                t.fill(0.0);
            }
        }
        let out = bottleneck_forward(&[random_map(&mut rng, 2, 2, 8)], &params).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_student(&cfg(), 3).unwrap().cast::<f64>();
        let latent = random_map(&mut rng, 3, 3, 8);
        let a = decoder_forward(&latent, &cfg(), &params).unwrap();
        let b = decoder_forward(&latent, &cfg(), &params).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|m| m.same_shape(&latent)));
        assert_eq!(a, b);
    }

    #[test]
    fn tape_reuse_is_logic_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cfg();
        let params = init_student(&c, 3).unwrap().cast::<f64>();
        let mean = random_map(&mut rng, 2, 2, 8);
        let (maps, mut tape) = student_forward(&mean, &c, &params).unwrap();
        let up: Vec<_> = maps.iter().map(|m| Array2::<f64>::zeros(m.data.dim())).collect();
        let mut grads = params.zeros_like();
        backward_pass(&mut tape, &params, &up, &mut grads).unwrap();
        assert!(grads
            .iter()
            .all(|(_, t): (&str, &ArrayD<f64>)| t.iter().all(|&v| v == 0.0)));
        let err = backward_pass(&mut tape, &params, &up, &mut grads).unwrap_err();
        assert!(matches!(err, Error::Logic(_)));
    }
}
