//! Vision-transformer encoder (the frozen teacher) with middle-layer taps.

use ndarray::{Array2, ArrayD, ArrayView3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    block_forward, block_param_shapes, linear_param_shapes, patch_embed_forward, AttentionKind, BlockDims,
};
use crate::tensor::{ParamSet, Real};
use crate::weights::WeightArchive;

pub const ENCODER_PREFIX: &str = "encoder";
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Block indices whose outputs are collected, strictly increasing.
    pub tap_layers: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Desk-scale teacher: 224 px input, 14 px patches, 6 blocks of width 128.
    pub fn desk() -> Self {
        Self::with_depth(6)
    }

    pub fn with_depth(depth: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            embed_dim: 128,
            depth,
            heads: 4,
            mlp_ratio: 2,
            tap_layers: middle_taps(depth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be ≥ 1".into());
        }
        if self.tap_layers.is_empty() {
            return err("at least one tap layer is required".into());
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("tap layers {:?} must be strictly increasing", self.tap_layers));
        }
        if self.tap_layers.iter().any(|&t| t >= self.depth) {
            return err(format!("tap layers {:?} exceed depth {}", self.tap_layers, self.depth));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: self.embed_dim * self.mlp_ratio,
            attention: AttentionKind::Softmax,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = ENCODER_PREFIX;
        let patch_in = self.patch_size * self.patch_size * 3;
        let mut v = linear_param_shapes(&format!("{p}.patch_embed.proj"), patch_in, self.embed_dim);
        v.push((
            format!("{p}.patch_embed.pos_embed"),
            vec![self.tokens(), self.embed_dim],
        ));
        let dims = self.block_dims();
        for i in 0..self.depth {
            v.extend(block_param_shapes(&format!("{p}.blocks.{i}"), &dims));
        }
        v
    }
}

/// The contiguous middle half of the blocks, `depth/4 .. ceil(3 depth/4)`.
pub fn middle_taps(depth: usize) -> Vec<usize> {
    let start = depth / 4;
    let end = (3 * depth).div_ceil(4).max(start + 1).min(depth.max(1));
    (start..end).collect()
}

/// Patch-grid features: `data` is `(grid_h * grid_w) x channels`, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Array2<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(grid_h: usize, grid_w: usize, data: Array2<T>) -> Result<Self> {
        if data.nrows() != grid_h * grid_w {
            return Err(Error::Config(format!(
                "{} tokens do not fill a {grid_h}x{grid_w} grid",
                data.nrows()
            )));
        }
        Ok(Self { grid_h, grid_w, data })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn at(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, T> {
        self.data.row(row * self.grid_w + col)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid_h == other.grid_h && self.grid_w == other.grid_w && self.data.dim() == other.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Truncated normal (±2σ) for projection weights and positional embeddings,
/// zeros for biases, unit layer-norm scales. Deterministic per seed.
pub fn init_params(shapes: &[(String, Vec<usize>)], seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let is_norm = name.contains(".norm");
        let data: Vec<f32> = if name.ends_with(".bias") {
            vec![0.0; n]
        } else if is_norm {
            vec![1.0; n]
        } else {
            (0..n)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break (z * INIT_STD) as f32;
                    }
                })
                .collect()
        };
        params.insert(name.clone(), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }
    params
}

pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<WeightArchive> {
    config.validate()?;
    Ok(WeightArchive::new(init_params(&config.param_shapes(), seed)))
}

/// Loads an archive and checks it holds every encoder tensor for `config`.
pub fn load_weights(path: impl AsRef<std::path::Path>, config: &EncoderConfig) -> Result<WeightArchive> {
    let archive = WeightArchive::load(path)?;
    archive.validate(&config.param_shapes())?;
    Ok(archive)
}

/// Runs the encoder and returns the token grids after every tap block, in tap order.
pub fn encoder_forward<T: Real>(
    image: ArrayView3<'_, T>,
    config: &EncoderConfig,
    params: &ParamSet<T>,
) -> Result<Vec<FeatureMap<T>>> {
    config.validate()?;
    let (h, w, c) = image.dim();
    if h != config.image_size || w != config.image_size || c != 3 {
        return Err(Error::Config(format!(
            "encoder expects {0}x{0}x3 input, got {h}x{w}x{c}",
            config.image_size
        )));
    }
    let (gh, gw) = config.grid();
    let (mut x, _) = patch_embed_forward(
        params,
        &format!("{ENCODER_PREFIX}.patch_embed"),
        image,
        config.patch_size,
    )?;
    let dims = config.block_dims();
    let last = *config.tap_layers.last().unwrap();
    let mut taps = Vec::with_capacity(config.tap_layers.len());
    let mut next_tap = config.tap_layers.iter().peekable();
    for i in 0..=last {
        let (y, _) = block_forward(params, &format!("{ENCODER_PREFIX}.blocks.{i}"), &x, &dims)?;
        x = y;
        if next_tap.peek() == Some(&&i) {
            next_tap.next();
            taps.push(FeatureMap::new(gh, gw, x.clone())?);
        }
    }
    Ok(taps)
}
