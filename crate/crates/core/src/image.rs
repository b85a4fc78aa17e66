//! Image encoder: a four-block strided convolution stack of which only the
//! first three blocks are used, followed by a linear projection into the
//! text embedding space.
//!
//! A feature map is held as an `(h·w) × channels` matrix, so flattening the
//! final grid into `l_I = h·w` rows is free.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, NodeId, GATHER_NONE};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image is {got:?} (channels, height, width); expected {expected:?}")]
    Shape { got: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("pixel value {0} outside [0, 1]")]
    Range(f64),
    #[error("pixel buffer holds {got} values, shape needs {expected}")]
    Length { got: usize, expected: usize },
    #[error("raw image file: {0}")]
    Io(#[from] std::io::Error),
}

/// A `channels × height × width` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        let expected = channels * height * width;
        if pixels.len() != expected {
            return Err(ImageError::Length { got: pixels.len(), expected });
        }
        if let Some(&bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ImageError::Range(bad));
        }
        Ok(Self { channels, height, width, pixels })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// `(h·w) × channels` layout used by the convolution stack.
    pub fn to_feature_map(&self) -> Matrix {
        let mut m = Matrix::zeros(self.height * self.width, self.channels);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    m.set(y * self.width + x, c, self.pixel(c, y, x));
                }
            }
        }
        m
    }

    /// Reads the raw format: three little-endian `u32` (channels, height,
    /// width) followed by row-major little-endian `f32` pixels.
    pub fn read_raw(path: &Path) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_raw_bytes(&bytes)
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let short = || ImageError::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated raw image"));
        if bytes.len() < 12 {
            return Err(short());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let body = &bytes[12..];
        if body.len() != c * h * w * 4 {
            return Err(ImageError::Length { got: body.len() / 4, expected: c * h * w });
        }
        let pixels = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        Self::new(c, h, w, pixels)
    }

    pub fn write_raw(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = std::fs::File::create(path)?;
        for d in [self.channels, self.height, self.width] {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &p in &self.pixels {
            f.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of conv blocks 1..4; block 3's width is `e_I`.
    pub block_channels: [usize; 4],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Leading blocks excluded from training.
    pub frozen_prefix: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            block_channels: [16, 32, 64, 128],
            kernel: 3,
            stride: 2,
            padding: 1,
            frozen_prefix: 2,
        }
    }
}

/// Blocks applied in the forward pass.
pub const USED_BLOCKS: usize = 3;

impl ImageConfig {
    pub fn feature_dim(&self) -> usize {
        self.block_channels[USED_BLOCKS - 1]
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Spatial size after each block.
    pub fn grid_sizes(&self) -> [(usize, usize); 4] {
        let mut out = [(0, 0); 4];
        let (mut h, mut w) = (self.height, self.width);
        for s in &mut out {
            h = self.out_size(h);
            w = self.out_size(w);
            *s = (h, w);
        }
        out
    }

    /// `l_I`, the number of rows per encoded image.
    pub fn grid_len(&self) -> usize {
        let (h, w) = self.grid_sizes()[USED_BLOCKS - 1];
        h * w
    }

    pub fn block_param_prefix(block: usize) -> String {
        format!("img.block{}.", block + 1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kernel == 0 || self.stride == 0 {
            return Err("image kernel and stride must be positive".into());
        }
        if self.height + 2 * self.padding < self.kernel || self.width + 2 * self.padding < self.kernel {
            return Err("image smaller than kernel".into());
        }
        if self.frozen_prefix > 4 {
            return Err("frozen_prefix exceeds block count".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImageParams {
    pub kernels: [ParamId; 4],
    pub biases: [ParamId; 4],
    pub proj: ParamId,
    config: ImageConfig,
    /// im2col gather indices per block, computed once.
    im2col: Vec<(Vec<u32>, usize, usize)>,
}

impl ImageParams {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, config: &ImageConfig, d_model: usize) -> Self {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = config.channels;
        for b in 0..4 {
            let c_out = config.block_channels[b];
            let fan_in = c_in * config.kernel * config.kernel;
            let prefix = ImageConfig::block_param_prefix(b);
            kernels.push(store.add(format!("{prefix}kernel"), normal_init(rng, fan_in, c_out, (2.0 / fan_in as f64).sqrt())));
            biases.push(store.add(format!("{prefix}bias"), Matrix::zeros(1, c_out)));
            c_in = c_out;
        }
        let e_i = config.feature_dim();
        let proj = store.add("img.proj", normal_init(rng, e_i, d_model, 1.0 / (e_i as f64).sqrt()));
        let mut im2col = Vec::new();
        let (mut h, mut w, mut c) = (config.height, config.width, config.channels);
        for (b, &(oh, ow)) in config.grid_sizes().iter().enumerate().take(USED_BLOCKS) {
            let idx = im2col_indices(config, h, w, c, oh, ow);
            let cols = c * config.kernel * config.kernel;
            im2col.push((idx, oh * ow, cols));
            h = oh;
            w = ow;
            c = config.block_channels[b];
        }
        Self { kernels: kernels.try_into().unwrap(), biases: biases.try_into().unwrap(), proj, config: config.clone(), im2col }
    }

    pub fn config(&self) -> &ImageConfig {
        &self.config
    }

    pub fn check_shape(&self, image: &RasterImage) -> Result<(), ImageError> {
        let expected = (self.config.channels, self.config.height, self.config.width);
        if image.shape() != expected {
            return Err(ImageError::Shape { got: image.shape(), expected });
        }
        Ok(())
    }

    /// Encodes one image into an `l_I × e_D` block.
    pub fn encode_one(&self, g: &mut Graph, image: &RasterImage) -> Result<NodeId, ImageError> {
        self.check_shape(image)?;
        let mut x = g.input(image.to_feature_map());
        for b in 0..USED_BLOCKS {
            let (idx, rows, cols) = &self.im2col[b];
            let patches = g.gather(x, idx.clone(), *rows, *cols);
            let k = g.param(self.kernels[b]);
            let bias = g.param(self.biases[b]);
            let y = g.matmul(patches, k);
            let y = g.add_row(y, bias);
            x = g.relu(y);
        }
        let proj = g.param(self.proj);
        Ok(g.matmul(x, proj))
    }

    /// `h_img`: one `l_I × e_D` block per image.
    pub fn encode_images(&self, g: &mut Graph, images: &[RasterImage]) -> Result<Vec<NodeId>, ImageError> {
        images.iter().map(|im| self.encode_one(g, im)).collect()
    }
}

/// Patch extraction indices for a `(h·w) × c` input; patch column order is
/// `(ky, kx, channel)`, matching the kernel's row order.
fn im2col_indices(cfg: &ImageConfig, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<u32> {
    let k = cfg.kernel;
    let mut idx = Vec::with_capacity(oh * ow * c * k * k);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * cfg.stride + ky) as isize - cfg.padding as isize;
                    let ix = (ox * cfg.stride + kx) as isize - cfg.padding as isize;
                    for ch in 0..c {
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            idx.push(GATHER_NONE);
                        } else {
                            idx.push(((iy as usize * w + ix as usize) * c + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}
