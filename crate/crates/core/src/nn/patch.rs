use ndarray::{Array2, Array3, ArrayView3};

use super::linear::{linear_backward, linear_forward};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real};

/// Flattens non-overlapping `patch x patch` tiles of an `h x w x c` image into
/// rows ordered (tile row, tile column); each row is laid out (y, x, channel).
pub fn patchify<T: Real>(image: ArrayView3<'_, T>, patch: usize) -> Result<Array2<T>> {
    let (h, w, c) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        row[k] = image[(gy * patch + dy, gx * patch + dx, ch)];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PatchEmbedCache<T> {
    patches: Array2<T>,
    image_dim: (usize, usize, usize),
    patch: usize,
}

/// Linear patch projection (`{prefix}.proj`) plus learned positional
/// embeddings (`{prefix}.pos_embed`, `tokens x dim`).
pub fn patch_embed_forward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    image: ArrayView3<'_, T>,
    patch: usize,
) -> Result<(Array2<T>, PatchEmbedCache<T>)> {
    let patches = patchify(image, patch)?;
    let mut tokens = linear_forward(params, &format!("{prefix}.proj"), &patches)?;
    let pos = params.mat(&format!("{prefix}.pos_embed"))?;
    if pos.dim() != tokens.dim() {
        return Err(Error::Config(format!(
            "positional embedding {:?} does not match token grid {:?}",
            pos.dim(),
            tokens.dim()
        )));
    }
    tokens += &pos;
    Ok((
        tokens,
        PatchEmbedCache {
            patches,
            image_dim: image.dim(),
            patch,
        },
    ))
}

/// Accumulates projection and positional-embedding gradients; returns the
/// gradient with respect to the image.
pub fn patch_embed_backward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    cache: &PatchEmbedCache<T>,
    dy: &Array2<T>,
    grads: &mut ParamSet<T>,
) -> Result<Array3<T>> {
    {
        let mut gp = grads.mat_mut(&format!("{prefix}.pos_embed"))?;
        gp += dy;
    }
    let d_patches = linear_backward(params, &format!("{prefix}.proj"), &cache.patches, dy, grads)?;
    let (h, w, c) = cache.image_dim;
    let p = cache.patch;
    let gw = w / p;
    let mut d_img = Array3::zeros((h, w, c));
    for (t, row) in d_patches.rows().into_iter().enumerate() {
        let (gy, gx) = (t / gw, t % gw);
        let mut k = 0;
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    d_img[(gy * p + dy, gx * p + dx, ch)] = row[k];
                    k += 1;
                }
            }
        }
    }
    Ok(d_img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_are_row_major_with_channels_innermost() {
        let img = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| (100 * y + 10 * x + c) as f64);
        let p = patchify(img.view(), 2).unwrap();
        assert_eq!(p.dim(), (4, 8));
        // Tile (row 0, col 1) starts at pixel (0, 2).
        assert_eq!(
            p.row(1).to_vec(),
            vec![20.0, 21.0, 30.0, 31.0, 120.0, 121.0, 130.0, 131.0]
        );
        assert!(patchify(img.view(), 3).is_err());
    }
}
