use super::image::{ImageShape, TextImage};
use super::SynthError;
use crate::tensor::Matrix;

/// Patch geometry `(p_h, p_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSize {
    pub height: usize,
    pub width: usize,
}

impl PatchSize {
    pub const DEFAULT: PatchSize = PatchSize { height: 4, width: 8 };
}

/// An image cut into `N = rows * cols` patches, one per matrix row, in
/// row-major grid order. Each patch vector is `p_h * p_w * C` values laid out
/// row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Matrix,
    pub grid_shape: (usize, usize),
    pub patch: PatchSize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape {
            height: self.grid_shape.0 * self.patch.height,
            width: self.grid_shape.1 * self.patch.width,
            channels: self.channels,
        }
    }
}

pub fn patchify(img: &TextImage, patch: PatchSize) -> Result<PatchGrid, SynthError> {
    patchify_pixels(&img.pixels, img.shape, patch)
}

pub fn patchify_pixels(pixels: &[f32], shape: ImageShape, patch: PatchSize) -> Result<PatchGrid, SynthError> {
    let ImageShape { height, width, channels } = shape;
    if patch.height == 0 || patch.width == 0 || height % patch.height != 0 || width % patch.width != 0 {
        return Err(SynthError::IndivisibleGeometry { height, width, patch_h: patch.height, patch_w: patch.width });
    }
    assert_eq!(pixels.len(), shape.num_values());
    let rows = height / patch.height;
    let cols = width / patch.width;
    let dim = patch.height * patch.width * channels;
    let mut m = Matrix::zeros(rows * cols, dim);
    for gr in 0..rows {
        for gc in 0..cols {
            let out = m.row_mut(gr * cols + gc);
            let mut k = 0;
            for py in 0..patch.height {
                let y = gr * patch.height + py;
                let start = (y * width + gc * patch.width) * channels;
                for &v in &pixels[start..start + patch.width * channels] {
                    out[k] = v as f64;
                    k += 1;
                }
            }
        }
    }
    Ok(PatchGrid { patches: m, grid_shape: (rows, cols), patch, channels })
}

/// Inverse of [`patchify`] for any `N x D` matrix laid out like `grid`
/// (ground truth or reconstructed patches).
pub fn unpatchify_matrix(patches: &Matrix, grid_shape: (usize, usize), patch: PatchSize, channels: usize) -> Vec<f32> {
    let (rows, cols) = grid_shape;
    assert_eq!(patches.rows(), rows * cols);
    assert_eq!(patches.cols(), patch.height * patch.width * channels);
    let width = cols * patch.width;
    let mut out = vec![0f32; rows * patch.height * width * channels];
    for gr in 0..rows {
        for gc in 0..cols {
            let src = patches.row(gr * cols + gc);
            for py in 0..patch.height {
                let y = gr * patch.height + py;
                let start = (y * width + gc * patch.width) * channels;
                let len = patch.width * channels;
                for (o, &v) in out[start..start + len].iter_mut().zip(&src[py * len..(py + 1) * len]) {
                    *o = v as f32;
                }
            }
        }
    }
    out
}

pub fn unpatchify(grid: &PatchGrid) -> Vec<f32> {
    unpatchify_matrix(&grid.patches, grid.grid_shape, grid.patch, grid.channels)
}
