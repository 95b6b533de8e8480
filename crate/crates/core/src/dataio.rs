//! Paired SAR/EO tile ingestion: JSON-lines manifests, PNG loading and the
//! paired geometric augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::resize;
use crate::tile::{ImageTile, ValueRange};

/// Largest SAR/EO acquisition gap admitted to training.
pub const MAX_TRAIN_GAP_DAYS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sar_path: PathBuf,
    pub eo_path: PathBuf,
    pub split: Split,
    pub acquisition_gap_days: f64,
}

/// A manifest row that parsed but failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub rejections: Vec<Rejection>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a JSON-lines manifest. Relative image paths resolve against the
/// manifest's directory. Malformed lines are hard errors; rows that parse
/// but violate the pairing rules are returned as rejections.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Manifest::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry =
            serde_json::from_str(raw).map_err(|e| Error::Manifest {
                line,
                message: e.to_string(),
            })?;
        entry.sar_path = resolve(base, &entry.sar_path);
        entry.eo_path = resolve(base, &entry.eo_path);
        match validate_entry(&entry) {
            Ok(()) => out.entries.push(entry),
            Err(reason) => {
                log::warn!("manifest line {line} rejected: {reason}");
                out.rejections.push(Rejection { line, reason });
            }
        }
    }
    Ok(out)
}

fn validate_entry(e: &ManifestEntry) -> std::result::Result<(), String> {
    if !(e.acquisition_gap_days.is_finite() && e.acquisition_gap_days >= 0.0) {
        return Err(format!(
            "acquisition_gap_days must be a non-negative number, got {}",
            e.acquisition_gap_days
        ));
    }
    if e.split == Split::Train && e.acquisition_gap_days > MAX_TRAIN_GAP_DAYS {
        return Err(format!(
            "acquisition gap {} days exceeds {MAX_TRAIN_GAP_DAYS} for a training pair",
            e.acquisition_gap_days
        ));
    }
    let sar = image::image_dimensions(&e.sar_path)
        .map_err(|err| format!("cannot read {}: {err}", e.sar_path.display()))?;
    let eo = image::image_dimensions(&e.eo_path)
        .map_err(|err| format!("cannot read {}: {err}", e.eo_path.display()))?;
    if sar != eo {
        return Err(format!(
            "SAR is {}x{} but EO is {}x{}",
            sar.0, sar.1, eo.0, eo.1
        ));
    }
    Ok(())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit grayscale or RGB PNG, mapping `[0, 255]` linearly onto
/// `target`.
pub fn load_tile(path: &Path, target: ValueRange) -> Result<ImageTile> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("unsupported pixel format {:?}", other.color()),
            })
        }
    };
    let scale = target.width() / 255.0;
    let mut data = vec![0.0f32; channels * h * w];
    for (i, &v) in raw.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * h * w + pix] = v as f32 * scale + target.lo;
    }
    ImageTile::new(channels, h, w, data, target)
}

fn quantize(v: f32, range: ValueRange) -> u8 {
    (((v - range.lo) / range.width()) * 255.0)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Encodes a 1- or 3-channel tile as an 8-bit PNG.
pub fn save_tile(tile: &ImageTile, path: &Path) -> Result<()> {
    let (c, h, w) = tile.dims();
    let range = tile.range();
    let img_err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    match c {
        1 => {
            let raw = tile.data().iter().map(|&v| quantize(v, range)).collect();
            GrayImage::from_raw(w as u32, h as u32, raw)
                .expect("buffer size matches")
                .save(path)
                .map_err(img_err)
        }
        3 => {
            let mut raw = Vec::with_capacity(3 * h * w);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        raw.push(quantize(tile.get(ch, y, x), range));
                    }
                }
            }
            RgbImage::from_raw(w as u32, h as u32, raw)
                .expect("buffer size matches")
                .save(path)
                .map_err(img_err)
        }
        _ => Err(Error::shape(format!("cannot encode {c}-channel tile as PNG"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub resize: usize,
    pub crop: usize,
    pub flip_probability: f64,
}

impl AugmentConfig {
    /// Resize-then-crop menu scaled to a crop size (286/256 at the reference size).
    pub fn for_crop(crop: usize) -> Self {
        Self {
            resize: (crop * 286).div_ceil(256),
            crop,
            flip_probability: 0.5,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::for_crop(256)
    }
}

/// One concrete draw of the augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub resize: usize,
    pub offset: (usize, usize),
    pub crop: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = cfg.resize - cfg.crop;
        let oy = rng.random_range(0..=span);
        let ox = rng.random_range(0..=span);
        let flip = rng.random_bool(cfg.flip_probability);
        Self {
            resize: cfg.resize,
            offset: (oy, ox),
            crop: cfg.crop,
            flip,
        }
    }

    pub fn apply(&self, tile: &ImageTile) -> Result<ImageTile> {
        let resized = resize(tile, self.resize, self.resize)?;
        let cropped = resized.crop(self.offset.0, self.offset.1, self.crop, self.crop)?;
        Ok(if self.flip {
            cropped.flip_horizontal()
        } else {
            cropped
        })
    }
}

/// Applies one seeded geometric transform identically to both tiles.
pub fn augment(
    sar: &ImageTile,
    eo: &ImageTile,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(ImageTile, ImageTile)> {
    if (sar.height(), sar.width()) != (eo.height(), eo.width()) {
        return Err(Error::shape(format!(
            "pair dims differ: SAR {}x{}, EO {}x{}",
            sar.height(),
            sar.width(),
            eo.height(),
            eo.width()
        )));
    }
    if cfg.resize < cfg.crop {
        return Err(Error::invalid(format!(
            "resize {} smaller than crop {}",
            cfg.resize, cfg.crop
        )));
    }
    if sar.height() < cfg.crop || sar.width() < cfg.crop {
        return Err(Error::invalid(format!(
            "tile {}x{} smaller than crop size {}",
            sar.height(),
            sar.width(),
            cfg.crop
        )));
    }
    let draw = AugmentDraw::sample(cfg, seed);
    Ok((draw.apply(sar)?, draw.apply(eo)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_png(path: &Path, w: u32, h: u32, rgb: bool) {
        if rgb {
            RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30])).save(path).unwrap();
        } else {
            GrayImage::from_pixel(w, h, image::Luma([128])).save(path).unwrap();
        }
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        let m = load_manifest(&p).unwrap();
        assert!(m.entries.is_empty() && m.rejections.is_empty());
    }

    #[test]
    fn missing_manifest_is_error() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn gap_and_dimension_rejections() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_png(&dir.path().join(format!("s{i}.png")), 16, 16, false);
            write_png(&dir.path().join(format!("e{i}.png")), 16, 16, true);
        }
        write_png(&dir.path().join("big.png"), 32, 32, false);
        let p = dir.path().join("m.jsonl");
        let mut f = fs::File::create(&p).unwrap();
        for i in 0..3 {
            writeln!(f, r#"{{"sar_path":"s{i}.png","eo_path":"e{i}.png","split":"train","acquisition_gap_days":0.5}}"#).unwrap();
        }
        writeln!(f, r#"{{"sar_path":"s3.png","eo_path":"e3.png","split":"train","acquisition_gap_days":2.5}}"#).unwrap();
        writeln!(f, r#"{{"sar_path":"big.png","eo_path":"e0.png","split":"test","acquisition_gap_days":0.0}}"#).unwrap();
        writeln!(f, r#"{{"sar_path":"nope.png","eo_path":"e0.png","split":"val","acquisition_gap_days":0.0}}"#).unwrap();
        drop(f);
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries.len(), 3);
        let lines: Vec<usize> = m.rejections.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![4, 5, 6]);
        assert!(m.rejections[0].reason.contains("2.5"));
    }

    #[test]
    fn malformed_row_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"sar_path\": 3}\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn load_tile_affine_map() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        GrayImage::from_raw(3, 1, vec![0, 128, 255]).unwrap().save(&p).unwrap();
        let t = load_tile(&p, ValueRange::SIGNED_UNIT).unwrap();
        assert_eq!(t.get(0, 0, 0), -1.0);
        assert_eq!(t.get(0, 0, 2), 1.0);
        let expect = 2.0 * (128.0 / 255.0) - 1.0;
        assert!((t.get(0, 0, 1) as f64 - expect).abs() < 1e-6);
        assert!((expect - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn load_tile_keeps_channels_and_rejects_rgba() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_png(&p, 4, 2, true);
        let t = load_tile(&p, ValueRange::SIGNED_UNIT).unwrap();
        assert_eq!(t.dims(), (3, 2, 4));
        let q = dir.path().join("a.png");
        image::RgbaImage::from_pixel(2, 2, image::Rgba([1, 2, 3, 4])).save(&q).unwrap();
        assert!(load_tile(&q, ValueRange::SIGNED_UNIT).is_err());
        let bad = dir.path().join("bad.png");
        fs::write(&bad, b"not a png").unwrap();
        assert!(load_tile(&bad, ValueRange::SIGNED_UNIT).is_err());
    }

    #[test]
    fn save_load_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let t = ImageTile::from_fn(3, 8, 8, |c, y, x| ((c + y * 8 + x) as f32 / 40.0) - 0.9);
        save_tile(&t, &p).unwrap();
        let back = load_tile(&p, ValueRange::SIGNED_UNIT).unwrap();
        let step = 2.0 / 255.0;
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= step / 2.0 + 1e-6);
        }
    }

    #[test]
    fn augment_deterministic_and_aligned() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.resize, 286);
        let mut sar = ImageTile::filled(1, 286, 286, -1.0);
        let mut eo = ImageTile::filled(3, 286, 286, -1.0);
        sar.set(0, 100, 140, 1.0);
        for c in 0..3 {
            eo.set(c, 100, 140, 1.0);
        }
        for seed in 0..6 {
            let (a, b) = augment(&sar, &eo, seed, &cfg).unwrap();
            let (a2, b2) = augment(&sar, &eo, seed, &cfg).unwrap();
            assert_eq!((&a, &b), (&a2, &b2));
            assert_eq!(a.dims(), (1, 256, 256));
            assert_eq!(b.dims(), (3, 256, 256));
            let argmax = |t: &ImageTile, c: usize| {
                let ch = t.channel(c);
                let i = (0..ch.len()).max_by(|&i, &j| ch[i].total_cmp(&ch[j])).unwrap();
                (i / 256, i % 256)
            };
            assert_eq!(argmax(&a, 0), argmax(&b, 2));
        }
    }

    #[test]
    fn flip_is_involution() {
        let cfg = AugmentConfig {
            resize: 16,
            crop: 16,
            flip_probability: 1.0,
        };
        let t = ImageTile::from_fn(1, 16, 16, |_, y, x| (y * 16 + x) as f32 / 256.0);
        let draw = AugmentDraw::sample(&cfg, 3);
        assert!(draw.flip);
        assert_eq!(draw.apply(&draw.apply(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn augment_rejects_small_tiles() {
        let t = ImageTile::filled(1, 100, 100, 0.0);
        assert!(augment(&t, &t, 0, &AugmentConfig::default()).is_err());
    }
}
