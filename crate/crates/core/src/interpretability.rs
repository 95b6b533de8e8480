//! Tools for judging a translation: discriminator-confidence heatmaps, a
//! Siamese SAR/EO agreement score, and a seam-consistency graph over the
//! stitched patches, bundled into an on-disk report.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataio::save_tile;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{checkpoint_config, Generator};
use crate::imageops::{partition, reflect_pad, resize, ssim_with, stitch, PatchGrid, SsimParams};
use crate::nn::{self, Conv2d, Linear, ParamStore};
use crate::preprocess::{assemble_triplet, edge_map, ensure_rgb, to_grayscale, PreprocessConfig};
use crate::tile::{ImageTile, ValueRange};

const COOLWARM: &str = include_str!("../assets/coolwarm.txt");

/// The 256-entry blue-to-red table used for every rendering.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0u8; 3]; 256];
        let mut n = 0;
        for (i, line) in COOLWARM.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let v: Vec<u8> = line
                .split_whitespace()
                .map(|s| s.parse().expect("colormap entries are bytes"))
                .collect();
            t[i] = [v[0], v[1], v[2]];
            n += 1;
        }
        assert_eq!(n, 256, "colormap asset must have 256 rows");
        t
    })
}

/// Colour for a value in `[0, 1]`, as `[-1, 1]` floats.
pub fn colormap_signed(p: f64) -> [f32; 3] {
    let i = (p.clamp(0.0, 1.0) * 255.0).round() as usize;
    colormap()[i].map(|c| c as f32 / 255.0 * 2.0 - 1.0)
}

/// Upsamples a `[0, 1]` probability map to the translation's size, colours
/// it and blends `(1 - alpha) * translation + alpha * colour`.
pub fn overlay_probabilities(translation: &ImageTile, probs: &ImageTile, alpha: f64) -> Result<ImageTile> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if probs.channels() != 1 || translation.channels() != 3 {
        return Err(Error::shape("overlay needs a one-channel map and an RGB translation"));
    }
    let (h, w) = (translation.height(), translation.width());
    let up = resize(probs, h, w)?;
    let a = alpha as f32;
    let mut out = translation.clone();
    for y in 0..h {
        for x in 0..w {
            let col = colormap_signed(up.get(0, y, x) as f64);
            for (c, cv) in col.iter().enumerate() {
                let t = translation.get(c, y, x);
                out.set(c, y, x, (1.0 - a) * t + a * cv);
            }
        }
    }
    Ok(out)
}

/// Discriminator probability map for an arbitrary-size RGB image. The
/// image is reflect-padded to a multiple of the map stride; the map is
/// returned at padded resolution along with the unpadded size.
pub fn probability_map(image: &ImageTile, disc: &Discriminator, pre: &PreprocessConfig) -> Result<ImageTile> {
    let stride = 16;
    let (h, w) = (image.height(), image.width());
    let padded = reflect_pad(image, h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    let gray = to_grayscale(&padded, pre.gray_weights)?;
    let edge = edge_map(&gray, pre)?;
    disc.discriminate(&padded, &edge, &gray)?.to_tile()
}

/// Discriminator-confidence overlay for a translation.
pub fn confidence_heatmap(
    translated: &ImageTile,
    disc: &Discriminator,
    pre: &PreprocessConfig,
    alpha: f64,
) -> Result<ImageTile> {
    let (h, w) = (translated.height(), translated.width());
    let probs = probability_map(translated, disc, pre)?;
    let stride = 16;
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    if (ph, pw) == (h, w) {
        return overlay_probabilities(translated, &probs, alpha);
    }
    let padded = reflect_pad(translated, ph, pw);
    overlay_probabilities(&padded, &probs, alpha)?.crop(0, 0, h, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub input_size: usize,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        Self { input_size: 128 }
    }
}

pub const EMBEDDING_DIM: usize = 128;

/// Weight-tied embedder: two 5x5 conv + max-pool stages and three dense
/// layers, output scaled to unit length.
pub struct SiameseEmbedder {
    config: SiameseConfig,
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl SiameseEmbedder {
    pub fn new(config: SiameseConfig, dtype: DType, seed: u64) -> Result<Self> {
        let s = config.input_size;
        if s < 4 || s % 4 != 0 {
            return Err(Error::invalid(format!("embedder input size {s} must be a positive multiple of 4")));
        }
        let mut store = ParamStore::new(dtype, seed);
        let st = &mut store;
        let conv1 = Conv2d::with_init(st, "conv1", 3, 64, 5, 1, 2, 1, (2.0 / 75.0f64).sqrt())?;
        let conv2 = Conv2d::with_init(st, "conv2", 64, 128, 5, 1, 2, 1, (2.0 / 1600.0f64).sqrt())?;
        let flat = 128 * (s / 4) * (s / 4);
        let fc1 = Linear::new(st, "fc1", flat, 512)?;
        let fc2 = Linear::new(st, "fc2", 512, 256)?;
        let fc3 = Linear::new(st, "fc3", 256, EMBEDDING_DIM)?;
        Ok(Self {
            config,
            store,
            conv1,
            conv2,
            fc1,
            fc2,
            fc3,
        })
    }

    pub fn config(&self) -> &SiameseConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Resizes an RGB (or gray) tile to the input size as a `1 x 3 x s x s` tensor.
    pub fn prepare(&self, image: &ImageTile) -> Result<Tensor> {
        let rgb = ensure_rgb(image)?.rescaled(ValueRange::SIGNED_UNIT);
        let s = self.config.input_size;
        let sized = if (rgb.height(), rgb.width()) == (s, s) {
            rgb
        } else {
            resize(&rgb, s, s)?
        };
        sized.to_tensor(self.store.dtype(), &Device::Cpu)
    }

    /// Unit-length embeddings of an `N x 3 x s x s` batch.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let h = self.conv1.forward(x)?.relu()?.max_pool2d(2)?;
        let h = self.conv2.forward(&h)?.relu()?.max_pool2d(2)?;
        let h = h.reshape((n, ()))?;
        let h = self.fc1.forward(&h)?.relu()?;
        let h = self.fc2.forward(&h)?.relu()?;
        let e = self.fc3.forward(&h)?;
        let norm = (e.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }

    pub fn embed(&self, image: &ImageTile) -> Result<Vec<f64>> {
        let e = self.embed_tensor(&self.prepare(image)?)?;
        Ok(e.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "siamese".to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        self.store.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = nn::read_checkpoint(path)?;
        let config = checkpoint_config::<SiameseConfig>(&meta, "siamese", path)?;
        let e = Self::new(config, DType::F32, 0)?;
        e.store.load_from(&tensors)?;
        Ok(e)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `100 (1 - d / 2)` for a chord distance between unit vectors.
pub fn score_from_distance(d: f64) -> f64 {
    (100.0 * (1.0 - d / 2.0)).clamp(0.0, 100.0)
}

/// Percent agreement between a SAR tile and an optical image.
pub fn confidence_score(sar: &ImageTile, eo: &ImageTile, embedder: &SiameseEmbedder) -> Result<f64> {
    let a = embedder.embed(sar)?;
    let b = embedder.embed(eo)?;
    Ok(score_from_distance(euclidean(&a, &b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamEdge {
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub orientation: Orientation,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub mean: f64,
    pub min: f64,
    /// Index into `edges` of the weakest seam.
    pub argmin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyGraph {
    pub rows: usize,
    pub cols: usize,
    pub strip_width: usize,
    pub nodes: Vec<(usize, usize)>,
    pub edges: Vec<SeamEdge>,
    /// `None` when the grid has no adjacent pairs.
    pub summary: Option<ConsistencySummary>,
}

/// Number of seams in an `rows x cols` grid.
pub fn expected_edges(rows: usize, cols: usize) -> usize {
    rows * cols.saturating_sub(1) + rows.saturating_sub(1) * cols
}

/// SSIM between the facing `strip_width`-pixel strips of every pair of
/// neighbouring patches: right edge vs. left edge, bottom edge vs. top edge.
pub fn spatial_consistency(grid: &PatchGrid, strip_width: usize, params: &SsimParams) -> Result<ConsistencyGraph> {
    if strip_width < params.window {
        return Err(Error::invalid(format!(
            "strip width {strip_width} is narrower than the {}-pixel SSIM window",
            params.window
        )));
    }
    let t = grid.tile_size;
    if strip_width > t {
        return Err(Error::invalid(format!("strip width {strip_width} exceeds tile size {t}")));
    }
    let mut nodes = Vec::with_capacity(grid.rows * grid.cols);
    let mut edges = Vec::with_capacity(expected_edges(grid.rows, grid.cols));
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            nodes.push((r, c));
        }
    }
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let p = grid.get(r, c);
            if c + 1 < grid.cols {
                let a = p.crop(0, t - strip_width, t, strip_width)?;
                let b = grid.get(r, c + 1).crop(0, 0, t, strip_width)?;
                edges.push(SeamEdge {
                    from: (r, c),
                    to: (r, c + 1),
                    orientation: Orientation::Horizontal,
                    ssim: ssim_with(&a, &b, params)?,
                });
            }
            if r + 1 < grid.rows {
                let a = p.crop(t - strip_width, 0, strip_width, t)?;
                let b = grid.get(r + 1, c).crop(0, 0, strip_width, t)?;
                edges.push(SeamEdge {
                    from: (r, c),
                    to: (r + 1, c),
                    orientation: Orientation::Vertical,
                    ssim: ssim_with(&a, &b, params)?,
                });
            }
        }
    }
    let summary = if edges.is_empty() {
        None
    } else {
        let mean = edges.iter().map(|e| e.ssim).sum::<f64>() / edges.len() as f64;
        let (argmin, min) = edges
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.ssim))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        Some(ConsistencySummary { mean, min, argmin })
    };
    Ok(ConsistencyGraph {
        rows: grid.rows,
        cols: grid.cols,
        strip_width,
        nodes,
        edges,
        summary,
    })
}

/// Schematic of the grid: grey cells for patches, seam bars coloured by
/// SSIM (blue low, red high).
pub fn render_consistency(graph: &ConsistencyGraph) -> Result<ImageTile> {
    const CELL: usize = 48;
    const GAP: usize = 12;
    let pitch = CELL + GAP;
    let h = graph.rows * pitch + GAP;
    let w = graph.cols * pitch + GAP;
    let mut img = ImageTile::filled(3, h, w, 1.0);
    let mut fill = |y0: usize, x0: usize, hh: usize, ww: usize, col: [f32; 3]| {
        for y in y0..(y0 + hh).min(h) {
            for x in x0..(x0 + ww).min(w) {
                for (c, v) in col.iter().enumerate() {
                    img.set(c, y, x, *v);
                }
            }
        }
    };
    for &(r, c) in &graph.nodes {
        fill(GAP + r * pitch, GAP + c * pitch, CELL, CELL, [0.2, 0.2, 0.2]);
    }
    for e in &graph.edges {
        let col = colormap_signed((e.ssim + 1.0) / 2.0);
        let (r, c) = e.from;
        match e.orientation {
            Orientation::Horizontal => fill(GAP + r * pitch + CELL / 4, GAP + c * pitch + CELL, CELL / 2, GAP, col),
            Orientation::Vertical => fill(GAP + r * pitch + CELL, GAP + c * pitch + CELL / 4, GAP, CELL / 2, col),
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessConfig {
    pub overlap: usize,
    pub strip_width: usize,
    pub alpha: f64,
    pub ssim: SsimParams,
    pub preprocess: PreprocessConfig,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self {
            overlap: 0,
            strip_width: 16,
            alpha: 0.45,
            ssim: SsimParams::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

/// Partitions a SAR image into generator-sized tiles, translates each and
/// stitches the result. Returns the translated grid and the mosaic.
pub fn translate_image(
    sar: &ImageTile,
    generator: &Generator,
    pre: &PreprocessConfig,
    overlap: usize,
) -> Result<(PatchGrid, ImageTile)> {
    let sar = ensure_rgb(sar)?.rescaled(ValueRange::SIGNED_UNIT);
    let tile = generator.config().input_size;
    let grid = partition(&sar, tile, overlap)?;
    let mut out = Vec::with_capacity(grid.patches.len());
    for p in &grid.patches {
        let triplet = assemble_triplet(p, None, pre)?;
        out.push(generator.generate(&triplet)?);
    }
    let translated = grid.with_patches(out)?;
    let mosaic = stitch(&translated)?;
    Ok((translated, mosaic))
}

#[derive(Debug, Clone)]
pub struct AssessmentReport {
    pub translation: ImageTile,
    pub heatmap_overlay: ImageTile,
    pub confidence_percent: f64,
    pub consistency: ConsistencyGraph,
}

pub fn assess(
    sar: &ImageTile,
    generator: &Generator,
    disc: &Discriminator,
    siamese: &SiameseEmbedder,
    cfg: &AssessConfig,
) -> Result<AssessmentReport> {
    let (grid, translation) = translate_image(sar, generator, &cfg.preprocess, cfg.overlap)?;
    let consistency = spatial_consistency(&grid, cfg.strip_width, &cfg.ssim)?;
    let heatmap_overlay = confidence_heatmap(&translation, disc, &cfg.preprocess, cfg.alpha)?;
    let confidence_percent = confidence_score(&ensure_rgb(sar)?, &translation, siamese)?;
    Ok(AssessmentReport {
        translation,
        heatmap_overlay,
        confidence_percent,
        consistency,
    })
}

pub const REPORT_FILES: [&str; 5] = [
    "translation.png",
    "heatmap.png",
    "consistency.json",
    "consistency.png",
    "report.json",
];

/// Writes the five report files; `provenance` is embedded in report.json.
pub fn write_report(report: &AssessmentReport, dir: &Path, provenance: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tile(&report.translation, &dir.join("translation.png"))?;
    save_tile(&report.heatmap_overlay, &dir.join("heatmap.png"))?;
    let cj = dir.join("consistency.json");
    std::fs::write(&cj, serde_json::to_string_pretty(&report.consistency)?).map_err(|e| Error::io(&cj, e))?;
    save_tile(&render_consistency(&report.consistency)?, &dir.join("consistency.png"))?;
    let body = serde_json::json!({
        "confidence_percent": report.confidence_percent,
        "consistency_summary": report.consistency.summary,
        "provenance": provenance,
    });
    let rj = dir.join("report.json");
    std::fs::write(&rj, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&rj, e))
}
