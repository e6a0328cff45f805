//! Image ↔ patch-token conversion.
//!
//! Images are `H × W × C` row-major tensors. Tokens are ordered row-major over
//! the patch grid; inside a token, pixels are row-major with channels fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height_px: usize,
    pub width_px: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(height_px: usize, width_px: usize, channels: usize, patch_size: usize) -> Result<Self> {
        let g = Self {
            height_px,
            width_px,
            channels,
            patch_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.channels == 0 || self.height_px == 0 || self.width_px == 0 {
            return Err(Error::invalid("patch grid dimensions must be positive"));
        }
        if !self.height_px.is_multiple_of(p) || !self.width_px.is_multiple_of(p) {
            return Err(Error::invalid(format!(
                "patch size {p} does not divide {}x{}",
                self.height_px, self.width_px
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.height_px / self.patch_size
    }

    pub fn cols(&self) -> usize {
        self.width_px / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height_px, self.width_px, self.channels]
    }

    pub fn pixel_count(&self) -> usize {
        self.height_px * self.width_px * self.channels
    }
}

/// Index into the flat image buffer for element `e` of token `n`.
fn pixel_index(grid: &PatchGrid, n: usize, e: usize) -> usize {
    let (p, c) = (grid.patch_size, grid.channels);
    let (pr, pc) = (n / grid.cols(), n % grid.cols());
    let ch = e % c;
    let within = e / c;
    let (dy, dx) = (within / p, within % p);
    let y = pr * p + dy;
    let x = pc * p + dx;
    (y * grid.width_px + x) * c + ch
}

pub fn patchify<T: Real>(image: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    grid.validate()?;
    if image.shape() != grid.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: grid.image_shape().to_vec(),
        });
    }
    let (n, d) = (grid.token_count(), grid.token_dim());
    let src = image.data();
    let mut out = Vec::with_capacity(n * d);
    for tok in 0..n {
        for e in 0..d {
            out.push(src[pixel_index(grid, tok, e)]);
        }
    }
    Tensor::new(vec![n, d], out)
}

pub fn unpatchify<T: Real>(tokens: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    grid.validate()?;
    let (n, d) = (grid.token_count(), grid.token_dim());
    if tokens.shape() != [n, d] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: vec![n, d],
        });
    }
    let mut out = vec![T::zero(); grid.pixel_count()];
    let src = tokens.data();
    for tok in 0..n {
        for e in 0..d {
            out[pixel_index(grid, tok, e)] = src[tok * d + e];
        }
    }
    Tensor::new(grid.image_shape().to_vec(), out)
}

/// `(row, col)` of every token, in patchify order.
pub fn position_ids(grid: &PatchGrid) -> Vec<(usize, usize)> {
    (0..grid.token_count())
        .map(|i| (i / grid.cols(), i % grid.cols()))
        .collect()
}
