//! Numerical kernels shared by losses, interpretability and the CLI: SSIM,
//! Gram matrices, 2-D spectra, resizing and patch partition/stitching.

use image::{imageops::FilterType, ImageBuffer, Luma};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tile::{ImageTile, ValueRange};

/// Gaussian-window SSIM parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    /// Reference constants for a value range of width `L`: 11x11 window,
    /// sigma 1.5, `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
    pub fn for_range(range: ValueRange) -> Self {
        let l = range.width() as f64;
        Self {
            window: 11,
            sigma: 1.5,
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_range(ValueRange::SIGNED_UNIT)
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over all valid window positions, averaged across channels.
pub fn ssim(a: &ImageTile, b: &ImageTile, window: usize, c1: f64, c2: f64) -> Result<f64> {
    ssim_with(
        a,
        b,
        &SsimParams {
            window,
            sigma: 1.5,
            c1,
            c2,
        },
    )
}

pub fn ssim_with(a: &ImageTile, b: &ImageTile, p: &SsimParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "ssim inputs differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (c, h, w) = a.dims();
    if p.window == 0 || p.window > h || p.window > w {
        return Err(Error::invalid(format!(
            "ssim window {} does not fit a {h}x{w} image",
            p.window
        )));
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.channel(ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.channel(ch).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, _, _) = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (m1, m2) = (mx[i], my[i]);
            // Clamp tiny negative variances from cancellation.
            let v1 = (sxx[i] - m1 * m1).max(0.0);
            let v2 = (syy[i] - m2 * m2).max(0.0);
            let cov = sxy[i] - m1 * m2;
            let num = (2.0 * m1 * m2 + p.c1) * (2.0 * cov + p.c2);
            let den = (m1 * m1 + m2 * m2 + p.c1) * (v1 + v2 + p.c2);
            acc += num / den;
        }
        total += acc / mx.len() as f64;
    }
    Ok((total / c as f64).clamp(-1.0, 1.0))
}

/// `C x C` Gram matrix (row-major) normalized by `C*H*W`.
pub fn gram_matrix(feature: &ImageTile) -> Vec<f64> {
    let (c, h, w) = feature.dims();
    let norm = (c * h * w) as f64;
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        let fi = feature.channel(i);
        for j in i..c {
            let fj = feature.channel(j);
            let s: f64 = fi.iter().zip(fj).map(|(&a, &b)| a as f64 * b as f64).sum();
            g[i * c + j] = s / norm;
            g[j * c + i] = s / norm;
        }
    }
    g
}

/// Unnormalized 2-D DFT of a single-channel tile.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.bins[u * self.width + v]
    }
}

pub fn spectrum(tile: &ImageTile) -> Result<Spectrum> {
    if tile.channels() != 1 {
        return Err(Error::shape(format!(
            "spectrum needs one channel, got {}",
            tile.channels()
        )));
    }
    let (h, w) = (tile.height(), tile.width());
    let mut bins: Vec<Complex64> = tile
        .data()
        .iter()
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in bins.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = bins[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            bins[y * w + x] = col[y];
        }
    }
    Ok(Spectrum {
        height: h,
        width: w,
        bins,
    })
}

/// Bilinear (triangle-filter) resize of every channel.
pub fn resize(tile: &ImageTile, height: usize, width: usize) -> Result<ImageTile> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (tile.height(), tile.width()) == (height, width) {
        return Ok(tile.clone());
    }
    let mut data = Vec::with_capacity(tile.channels() * height * width);
    for c in 0..tile.channels() {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
            tile.width() as u32,
            tile.height() as u32,
            tile.channel(c).to_vec(),
        )
        .ok_or_else(|| Error::shape("channel buffer size"))?;
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        data.extend_from_slice(out.as_raw());
    }
    ImageTile::new(tile.channels(), height, width, data, tile.range())
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn reflect_pad(tile: &ImageTile, height: usize, width: usize) -> ImageTile {
    let (h, w) = (tile.height(), tile.width());
    ImageTile::from_fn(tile.channels(), height, width, |c, y, x| {
        tile.get(c, reflect_index(y as isize, h), reflect_index(x as isize, w))
    })
    .with_range(tile.range())
}

/// Row-major grid of equally sized patches cut from one source image.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Vec<ImageTile>,
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub source_dims: (usize, usize),
    pub overlap: usize,
}

impl PatchGrid {
    pub fn get(&self, row: usize, col: usize) -> &ImageTile {
        &self.patches[row * self.cols + col]
    }

    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }

    /// Dimensions of the reflect-padded canvas the patches tile exactly.
    pub fn padded_dims(&self) -> (usize, usize) {
        let s = self.stride();
        (
            (self.rows - 1) * s + self.tile_size,
            (self.cols - 1) * s + self.tile_size,
        )
    }

    /// Same geometry, new patch contents (e.g. translated patches).
    pub fn with_patches(&self, patches: Vec<ImageTile>) -> Result<PatchGrid> {
        if patches.len() != self.patches.len() {
            return Err(Error::shape(format!(
                "grid holds {} patches, got {}",
                self.patches.len(),
                patches.len()
            )));
        }
        Ok(PatchGrid {
            patches,
            ..self.clone_geometry()
        })
    }

    fn clone_geometry(&self) -> PatchGrid {
        PatchGrid {
            patches: Vec::new(),
            rows: self.rows,
            cols: self.cols,
            tile_size: self.tile_size,
            source_dims: self.source_dims,
            overlap: self.overlap,
        }
    }
}

fn count_along(len: usize, tile: usize, stride: usize) -> usize {
    if len <= tile {
        1
    } else {
        1 + (len - tile).div_ceil(stride)
    }
}

pub fn partition(image: &ImageTile, tile_size: usize, overlap: usize) -> Result<PatchGrid> {
    let (h, w) = (image.height(), image.width());
    if tile_size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    if overlap >= tile_size {
        return Err(Error::invalid(format!(
            "overlap {overlap} must be smaller than tile size {tile_size}"
        )));
    }
    let stride = tile_size - overlap;
    let rows = count_along(h, tile_size, stride);
    let cols = count_along(w, tile_size, stride);
    let ph = (rows - 1) * stride + tile_size;
    let pw = (cols - 1) * stride + tile_size;
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        reflect_pad(image, ph, pw)
    };
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            patches.push(padded.crop(r * stride, c * stride, tile_size, tile_size)?);
        }
    }
    Ok(PatchGrid {
        patches,
        rows,
        cols,
        tile_size,
        source_dims: (h, w),
        overlap,
    })
}

/// Linear feather weight of position `i` in a patch of length `n` whose
/// neighbours overlap it by `overlap` samples on the flagged sides.
fn feather(i: usize, n: usize, overlap: usize, has_prev: bool, has_next: bool) -> f64 {
    let step = 1.0 / (overlap as f64 + 1.0);
    if has_prev && i < overlap {
        (i as f64 + 1.0) * step
    } else if has_next && i >= n - overlap {
        (n - i) as f64 * step
    } else {
        1.0
    }
}

pub fn stitch(grid: &PatchGrid) -> Result<ImageTile> {
    if grid.rows == 0 || grid.cols == 0 || grid.patches.len() != grid.rows * grid.cols {
        return Err(Error::shape("patch grid is empty or ragged"));
    }
    let first = &grid.patches[0];
    let channels = first.channels();
    for p in &grid.patches {
        if p.dims() != (channels, grid.tile_size, grid.tile_size) {
            return Err(Error::shape(format!(
                "patch {:?} inconsistent with tile size {}",
                p.dims(),
                grid.tile_size
            )));
        }
    }
    let (ph, pw) = grid.padded_dims();
    let (sh, sw) = grid.source_dims;
    if sh > ph || sw > pw {
        return Err(Error::shape("grid does not cover its source dimensions"));
    }
    let stride = grid.stride();
    let t = grid.tile_size;
    let mut out = vec![0.0f32; channels * ph * pw];
    let mut acc_w = vec![0.0f64; ph * pw];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let patch = grid.get(r, c);
            let (y0, x0) = (r * stride, c * stride);
            for y in 0..t {
                let wy = feather(y, t, grid.overlap, r > 0, r + 1 < grid.rows);
                for x in 0..t {
                    let wx = feather(x, t, grid.overlap, c > 0, c + 1 < grid.cols);
                    let wgt = wy * wx;
                    let pix = (y0 + y) * pw + x0 + x;
                    let prev = acc_w[pix];
                    let total = prev + wgt;
                    acc_w[pix] = total;
                    let frac = wgt / total;
                    for ch in 0..channels {
                        let o = &mut out[ch * ph * pw + pix];
                        let v = patch.get(ch, y, x);
                        // Running convex blend; leaves equal values untouched.
                        if prev == 0.0 {
                            *o = v;
                        } else if v != *o {
                            *o = (*o as f64 + (v as f64 - *o as f64) * frac) as f32;
                        }
                    }
                }
            }
        }
    }
    let full = ImageTile::new(channels, ph, pw, out, first.range())?;
    if (ph, pw) == (sh, sw) {
        Ok(full)
    } else {
        full.crop(0, 0, sh, sw)
    }
}
