//! Turns a raw SAR tile into the three network inputs: despeckled RGB
//! (texture), grayscale and a binary Canny edge map (structure).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{gaussian_kernel, reflect_index};
use crate::tile::{ImageTile, ValueRange};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub despeckle_window: usize,
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_sigma: f64,
    pub gray_weights: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            despeckle_window: 5,
            canny_low: 0.1,
            canny_high: 0.2,
            canny_sigma: 1.4,
            gray_weights: [0.299, 0.587, 0.114],
        }
    }
}

/// Network inputs for one tile. `structure` is `[edge, gray]`, `texture` the
/// despeckled RGB; `target` is the co-registered EO tile when training.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriplet {
    pub structure: ImageTile,
    pub texture: ImageTile,
    pub target: Option<ImageTile>,
}

impl SampleTriplet {
    pub fn edge(&self) -> ImageTile {
        self.structure.channel_tile(0)
    }

    pub fn gray(&self) -> ImageTile {
        self.structure.channel_tile(1)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.texture.height(), self.texture.width())
    }
}

/// Mean and (population) variance of the `window x window` neighbourhood of
/// every pixel, reflect-padded at the borders.
fn local_stats(plane: &[f32], h: usize, w: usize, window: usize) -> (Vec<f64>, Vec<f64>) {
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut mean = vec![0.0; h * w];
    let mut var = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for dy in -r..=r {
                let yy = reflect_index(y as isize + dy, h);
                for dx in -r..=r {
                    let v = plane[yy * w + reflect_index(x as isize + dx, w)] as f64;
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / n;
            mean[y * w + x] = m;
            var[y * w + x] = (s2 / n - m * m).max(0.0);
        }
    }
    (mean, var)
}

/// Lee filter: `out = mean + k (x - mean)` with
/// `k = max(0, var - noise) / var`. The noise variance is the mean local
/// variance over the flattest tenth of windows, floored at the 8-bit
/// quantization noise of the tile's value range.
pub fn despeckle(tile: &ImageTile, window: usize) -> Result<ImageTile> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "despeckle window must be odd and >= 3, got {window}"
        )));
    }
    let (c, h, w) = tile.dims();
    let step = tile.range().width() as f64 / 255.0;
    let quantization_floor = step * step / 12.0;
    let mut out = tile.clone();
    for ch in 0..c {
        let plane = tile.channel(ch);
        let (mean, var) = local_stats(plane, h, w, window);
        let mut sorted = var.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let take = (sorted.len() / 10).max(1);
        let estimate = sorted[..take].iter().sum::<f64>() / take as f64;
        let noise = estimate.max(quantization_floor);
        for i in 0..h * w {
            let k = if var[i] > 0.0 {
                ((var[i] - noise).max(0.0)) / var[i]
            } else {
                0.0
            };
            let v = mean[i] + k * (plane[i] as f64 - mean[i]);
            let (y, x) = (i / w, i % w);
            out.set(ch, y, x, v as f32);
        }
    }
    Ok(out)
}

/// Convex combination of the three channels.
pub fn to_grayscale(rgb: &ImageTile, weights: [f64; 3]) -> Result<ImageTile> {
    if rgb.channels() != 3 {
        return Err(Error::shape(format!(
            "grayscale needs 3 channels, got {}",
            rgb.channels()
        )));
    }
    if weights.iter().any(|&v| v < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "grayscale weights {weights:?} must be non-negative and sum to 1"
        )));
    }
    let (h, w) = (rgb.height(), rgb.width());
    let (r, g, b) = (rgb.channel(0), rgb.channel(1), rgb.channel(2));
    let data = (0..h * w)
        .map(|i| {
            (weights[0] * r[i] as f64 + weights[1] * g[i] as f64 + weights[2] * b[i] as f64)
                as f32
        })
        .collect();
    ImageTile::new(1, h, w, data, rgb.range())
}

fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k = gaussian_kernel(2 * radius as usize + 1, sigma);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = reflect_index(x as isize + i as isize - radius, w);
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = reflect_index(y as isize + i as isize - radius, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Canny detector on a single-channel tile. Hysteresis thresholds apply to
/// the unnormalized Sobel magnitude of the Gaussian-smoothed input, so the
/// result is invariant under `x -> a x + b` when both thresholds scale by `a`.
pub fn canny_edges(gray: &ImageTile, low: f64, high: f64, sigma: f64) -> Result<ImageTile> {
    if gray.channels() != 1 {
        return Err(Error::shape(format!(
            "canny needs one channel, got {}",
            gray.channels()
        )));
    }
    if !(low >= 0.0 && low < high) {
        return Err(Error::invalid(format!(
            "canny thresholds need 0 <= low < high, got {low}/{high}"
        )));
    }
    let (h, w) = (gray.height(), gray.width());
    let plane: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
    let s = gaussian_blur(&plane, h, w, sigma);
    let at = |y: isize, x: isize| s[reflect_index(y, h) * w + reflect_index(x, w)];

    let mut mag = vec![0.0f64; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // Quantize the gradient axis to 0, 45, 90 or 135 degrees.
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v <= 0.0 {
                continue;
            }
            let (dy, dx) = match dir[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            // Strict on one side, non-strict on the other: exactly one pixel of
            // a symmetric ridge survives.
            if v > m(y - dy, x - dx) && v >= m(y + dy, x + dx) {
                thin[i] = v;
            }
        }
    }

    let mut edges = vec![0.0f32; h * w];
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            edges[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0.0 && thin[j] >= low && thin[j] > 0.0 {
                    edges[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    ImageTile::new(1, h, w, edges, ValueRange::UNIT)
}

/// Canny on a `[-1, 1]` grayscale tile after mapping it to `[0, 1]`.
pub fn edge_map(gray: &ImageTile, cfg: &PreprocessConfig) -> Result<ImageTile> {
    let unit = gray.rescaled(ValueRange::UNIT);
    canny_edges(&unit, cfg.canny_low, cfg.canny_high, cfg.canny_sigma)
}

/// Replicates a single-channel tile into three channels; RGB passes through.
pub fn ensure_rgb(tile: &ImageTile) -> Result<ImageTile> {
    match tile.channels() {
        3 => Ok(tile.clone()),
        1 => ImageTile::concat_channels(&[tile, tile, tile]),
        c => Err(Error::shape(format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// despeckle -> grayscale -> canny, then `structure = [edge, gray]` and
/// `texture = despeckled RGB`.
pub fn assemble_triplet(
    sar_rgb: &ImageTile,
    eo_rgb: Option<&ImageTile>,
    cfg: &PreprocessConfig,
) -> Result<SampleTriplet> {
    if sar_rgb.channels() != 3 {
        return Err(Error::shape(format!(
            "SAR input must have 3 channels, got {}",
            sar_rgb.channels()
        )));
    }
    if let Some(eo) = eo_rgb {
        if (eo.height(), eo.width()) != (sar_rgb.height(), sar_rgb.width()) {
            return Err(Error::shape(format!(
                "EO target {}x{} does not match SAR {}x{}",
                eo.height(),
                eo.width(),
                sar_rgb.height(),
                sar_rgb.width()
            )));
        }
    }
    let texture = despeckle(sar_rgb, cfg.despeckle_window)?;
    let gray = to_grayscale(&texture, cfg.gray_weights)?;
    let edge = edge_map(&gray, cfg)?.with_range(gray.range());
    let structure = ImageTile::concat_channels(&[&edge, &gray])?;
    Ok(SampleTriplet {
        structure,
        texture,
        target: eo_rgb.cloned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn despeckle_constant_is_fixed_point() {
        let t = ImageTile::filled(3, 16, 16, 0.3);
        let out = despeckle(&t, 5).unwrap();
        assert_eq!(out, t);
        assert_eq!(despeckle(&out, 5).unwrap(), t);
    }

    #[test]
    fn despeckle_rejects_bad_windows() {
        let t = ImageTile::filled(1, 8, 8, 0.0);
        assert!(despeckle(&t, 4).is_err());
        assert!(despeckle(&t, 1).is_err());
    }

    #[test]
    fn despeckle_reduces_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 0.2).unwrap();
        let t = ImageTile::from_fn(1, 128, 128, |_, _, _| {
            (normal.sample(&mut rng) as f32).clamp(-1.0, 1.0)
        });
        let out = despeckle(&t, 5).unwrap();
        assert!(out.variance() < t.variance(), "{} !< {}", out.variance(), t.variance());
        assert!(out.is_within_range());
    }

    #[test]
    fn despeckle_reduces_isolated_peak() {
        let mut t = ImageTile::filled(1, 16, 16, 0.0);
        t.set(0, 8, 8, 1.0);
        let out = despeckle(&t, 5).unwrap();
        // Window of 25 with one unit sample: mean 1/25, variance 1/25 - 1/625.
        // The flat background gives a zero estimate so the quantization floor
        // (2/255)^2/12 is the noise level.
        let mean = 1.0 / 25.0;
        let var = 1.0 / 25.0 - 1.0 / 625.0;
        let noise = (2.0f64 / 255.0).powi(2) / 12.0;
        let expected = mean + (var - noise) / var * (1.0 - mean);
        let got = out.get(0, 8, 8) as f64;
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        assert!(got < 1.0);
    }

    #[test]
    fn grayscale_weights() {
        let w = PreprocessConfig::default().gray_weights;
        let white = ImageTile::filled(3, 2, 2, 1.0);
        assert!(to_grayscale(&white, w).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let black = ImageTile::filled(3, 2, 2, -1.0);
        assert!(to_grayscale(&black, w).unwrap().data().iter().all(|&v| (v + 1.0).abs() < 1e-6));
        let red = ImageTile::from_fn(3, 1, 1, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        assert!((to_grayscale(&red, w).unwrap().get(0, 0, 0) - 0.299).abs() < 1e-7);
        assert!(to_grayscale(&ImageTile::filled(2, 2, 2, 0.0), w).is_err());
    }

    #[test]
    fn canny_constant_has_no_edges() {
        let t = ImageTile::filled(1, 32, 32, 0.4);
        let e = canny_edges(&t, 0.1, 0.2, 1.4).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canny_step_gives_single_column() {
        let t = ImageTile::from_fn(1, 32, 32, |_, _, x| if x < 16 { -1.0 } else { 1.0 });
        let e = canny_edges(&t, 0.1, 0.2, 1.4).unwrap();
        for y in 0..32 {
            let cols: Vec<usize> = (0..32).filter(|&x| e.get(0, y, x) == 1.0).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            assert!((15..=16).contains(&cols[0]), "row {y}: {cols:?}");
        }
    }

    #[test]
    fn canny_argument_errors() {
        let t = ImageTile::filled(1, 8, 8, 0.0);
        assert!(canny_edges(&t, 0.2, 0.2, 1.4).is_err());
        assert!(canny_edges(&ImageTile::filled(3, 8, 8, 0.0), 0.1, 0.2, 1.4).is_err());
    }

    #[test]
    fn triplet_shapes_and_constant_case() {
        let cfg = PreprocessConfig::default();
        let sar = ImageTile::filled(3, 32, 32, 0.2);
        let tri = assemble_triplet(&sar, None, &cfg).unwrap();
        assert_eq!(tri.structure.channels(), 2);
        assert_eq!(tri.texture.channels(), 3);
        assert!(tri.target.is_none());
        assert!(tri.edge().data().iter().all(|&v| v == 0.0));
        let g = tri.gray();
        assert!(g.data().iter().all(|&v| (v - g.data()[0]).abs() < 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn canny_affine_invariant(seed in 0u64..1000, scale in prop::sample::select(vec![0.5f64, 2.0, 3.0]), shift in -0.5f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.3).unwrap();
            let t = ImageTile::from_fn(1, 24, 24, |_, y, x| {
                ((y as f64 / 6.0).sin() * 0.5 + (x as f64 / 5.0).cos() * 0.4 + normal.sample(&mut rng)) as f32
            });
            let a = canny_edges(&t, 0.1, 0.3, 1.0).unwrap();
            let t2 = t.map(|v| (v as f64 * scale + shift) as f32);
            let b = canny_edges(&t2, 0.1 * scale, 0.3 * scale, 1.0).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }

        #[test]
        fn canny_never_all_edges(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let t = ImageTile::from_fn(1, 16, 16, |_, _, _| normal.sample(&mut rng) as f32);
            let e = canny_edges(&t, 0.0, 1e-9, 1.0).unwrap();
            let on = e.data().iter().filter(|&&v| v == 1.0).count();
            prop_assert!(on < 256);
        }

        #[test]
        fn triplet_does_not_mutate_inputs(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.3).unwrap();
            let sar = ImageTile::from_fn(3, 16, 16, |_, _, _| (normal.sample(&mut rng) as f32).clamp(-1.0, 1.0));
            let eo = sar.map(|v| -v);
            let (s0, e0) = (sar.clone(), eo.clone());
            let tri = assemble_triplet(&sar, Some(&eo), &PreprocessConfig::default()).unwrap();
            prop_assert_eq!(&sar, &s0);
            prop_assert_eq!(&eo, &e0);
            prop_assert!(tri.edge().data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
