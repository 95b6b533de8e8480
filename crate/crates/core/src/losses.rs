//! Training objectives. Tensor-valued losses are differentiable and return
//! scalar tensors; the plain-number helpers serve logging and checks.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d_with, mse, sigmoid, Conv2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_pix: f64,
    pub w_ffl: f64,
    pub w_perc: f64,
    pub w_style: f64,
    pub w_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_pix: 10.0,
            w_ffl: 1.0,
            w_perc: 1.0,
            w_style: 10.0,
            w_feat: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_adv: 0.0,
            w_pix: 0.0,
            w_ffl: 0.0,
            w_perc: 0.0,
            w_style: 0.0,
            w_feat: 0.0,
        }
    }

    pub fn as_array(&self) -> [(&'static str, f64); 6] {
        [
            ("w_adv", self.w_adv),
            ("w_pix", self.w_pix),
            ("w_ffl", self.w_ffl),
            ("w_perc", self.w_perc),
            ("w_style", self.w_style),
            ("w_feat", self.w_feat),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.as_array() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted generator loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv: f64,
    pub pix: f64,
    pub ffl: f64,
    pub perc: f64,
    pub style: f64,
    pub feat: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [(&'static str, f64); 6] {
        [
            ("g_adv", self.adv),
            ("g_pix", self.pix),
            ("g_ffl", self.ffl),
            ("g_perc", self.perc),
            ("g_style", self.style),
            ("g_feat", self.feat),
        ]
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.as_array()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

pub fn total_generator_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if let Some(term) = terms.first_non_finite() {
        return Err(Error::NonFinite {
            term: term.to_string(),
            step: 0,
            batch: Vec::new(),
        });
    }
    Ok(weights.w_adv * terms.adv
        + weights.w_pix * terms.pix
        + weights.w_ffl * terms.ffl
        + weights.w_perc * terms.perc
        + weights.w_style * terms.style
        + weights.w_feat * terms.feat)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean binary cross-entropy of probabilities against a constant label.
pub fn adversarial_loss(probs: &Tensor, target_is_real: bool) -> Result<Tensor> {
    let lo = probs.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let hi = probs.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::invalid(format!(
            "probabilities must lie strictly inside (0, 1), got [{lo}, {hi}]"
        )));
    }
    let p = if target_is_real {
        probs.clone()
    } else {
        probs.affine(-1.0, 1.0)?
    };
    Ok(p.log()?.neg()?.mean_all()?)
}

/// Binary cross-entropy on pre-sigmoid scores, `softplus(z) - t z`, with
/// a soft target `t`.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    let relu = logits.relu()?;
    let softplus = (relu + logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    Ok((softplus - (logits * target)?)?.mean_all()?)
}

/// Mean squared error.
pub fn pixel_loss(gen: &Tensor, real: &Tensor) -> Result<Tensor> {
    mse(gen, real)
}

fn dft_matrices(n: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for k in 0..n {
        for j in 0..n {
            let a = 2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
            c.push(a.cos());
            s.push(a.sin());
        }
    }
    let dev = Device::Cpu;
    Ok((
        Tensor::from_vec(c, (n, n), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(s, (n, n), &dev)?.to_dtype(dtype)?,
    ))
}

/// Unnormalized 2-D DFT of every `H x W` plane of an `N x C x H x W`
/// tensor, as (real, imaginary) parts.
pub fn dft2(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4()?;
    let (ch, sh) = dft_matrices(h, x.dtype())?;
    let (cw, sw) = dft_matrices(w, x.dtype())?;
    let x = x.contiguous()?;
    let ac = ch.broadcast_matmul(&x)?;
    let as_ = sh.broadcast_matmul(&x)?;
    let re = (ac.broadcast_matmul(&cw)? - as_.broadcast_matmul(&sw)?)?;
    let im = (ac.broadcast_matmul(&sw)? + as_.broadcast_matmul(&cw)?)?.neg()?;
    Ok((re, im))
}

/// Spectrum-weighted frequency distance. Per image and channel,
/// `d = |F_gen - F_real|^2`, `w = (d / max d)^(alpha/2)`, loss = mean `w d`.
pub fn focal_frequency_loss(gen: &Tensor, real: &Tensor, alpha: f64) -> Result<Tensor> {
    if gen.dims() != real.dims() {
        return Err(Error::shape(format!(
            "frequency loss of {:?} and {:?}",
            gen.dims(),
            real.dims()
        )));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!("focal exponent {alpha} must be >= 0")));
    }
    let (re, im) = dft2(&(gen - real)?)?;
    let d = (re.sqr()? + im.sqr()?)?;
    if alpha == 0.0 {
        return Ok(d.mean_all()?);
    }
    // Conjugate symmetry ties the peak with its mirror; gathering a single
    // argmax keeps its gradient from being counted once per tie.
    let (n, c, h, w) = d.dims4()?;
    let flat = d.reshape((n, c, h * w))?;
    let at = flat.argmax_keepdim(2)?;
    let peak = flat.gather(&at, 2)?.reshape((n, c, 1, 1))?.maximum(1e-30)?;
    let weighted = d
        .powf(1.0 + alpha / 2.0)?
        .broadcast_div(&peak.powf(alpha / 2.0)?)?;
    Ok(weighted.mean_all()?)
}

/// Fixed network exposing a list of intermediate feature maps.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// The input itself as the only feature layer.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Frozen VGG-16 convolutional trunk tapped at relu1_1, relu2_1, relu3_1
/// and relu4_1. Weights use torchvision's `features.{i}.weight` names.
pub struct Vgg16Features {
    convs: Vec<(usize, Tensor, Tensor)>,
}

const VGG_CONVS: [usize; 8] = [0, 2, 5, 7, 10, 12, 14, 17];
const VGG_POOL_AFTER: [usize; 3] = [2, 7, 14];
const VGG_TAPS: [usize; 4] = [0, 5, 10, 17];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl Vgg16Features {
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(format!(
                "perceptual extractor weights {}",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut convs = Vec::new();
        for i in VGG_CONVS {
            let get = |kind: &str| {
                tensors
                    .get(&format!("features.{i}.{kind}"))
                    .ok_or_else(|| Error::Checkpoint(format!("{} lacks features.{i}.{kind}", path.display())))
                    .and_then(|t| Ok(t.to_dtype(dtype)?))
            };
            convs.push((i, get("weight")?, get("bias")?));
        }
        Ok(Self { convs })
    }
}

impl FeatureExtractor for Vgg16Features {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dt = x.dtype();
        let mean = Tensor::new(&IMAGENET_MEAN, &Device::Cpu)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, &Device::Cpu)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let mut h = x.affine(0.5, 0.5)?.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut out = Vec::with_capacity(VGG_TAPS.len());
        for (i, w, b) in &self.convs {
            h = crate::nn::conv2d(&h, w, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
            if VGG_TAPS.contains(i) {
                out.push(h.clone());
            }
            if VGG_POOL_AFTER.contains(i) {
                h = h.max_pool2d(2)?;
            }
        }
        Ok(out)
    }
}

/// Sum over extractor layers of mean squared feature differences.
pub fn perceptual_loss(gen: &Tensor, real: &Tensor, extractor: Option<&dyn FeatureExtractor>) -> Result<Tensor> {
    let ex = extractor.ok_or_else(|| {
        Error::MissingAsset(
            "no perceptual extractor is configured; set loss.w_perc = 0 to train without it".into(),
        )
    })?;
    let fg = ex.features(gen)?;
    let fr = ex.features(real)?;
    sum_layers(&fg, &fr, |a, b| mse(a, b))
}

fn sum_layers(a: &[Tensor], b: &[Tensor], f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} vs {} feature layers", a.len(), b.len())));
    }
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(b) {
        let l = f(x, y)?;
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Batched Gram matrices `F F^T / (C H W)`, shape `N x C x C`.
pub fn gram(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let f = x.reshape((n, c, h * w))?;
    Ok((f.matmul(&f.transpose(1, 2)?.contiguous()?)? / (c * h * w) as f64)?)
}

/// Sum over layers of the mean squared Gram-matrix difference.
pub fn style_loss(gen_feats: &[Tensor], real_feats: &[Tensor]) -> Result<Tensor> {
    sum_layers(gen_feats, real_feats, |a, b| {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("style layers {:?} vs {:?}", a.dims(), b.dims())));
        }
        mse(&gram(a)?, &gram(b)?)
    })
}

/// Auxiliary 3x3 heads mapping the decoder features to an RGB image and an
/// edge map so both features can be supervised directly.
pub struct FeatureHeads {
    pub texture: Conv2d,
    pub structure: Conv2d,
}

impl FeatureHeads {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            texture: Conv2d::new(store, &format!("{name}.texture_head"), channels, 3, 3, 1, 1)?,
            structure: Conv2d::new(store, &format!("{name}.structure_head"), channels, 1, 3, 1, 1)?,
        })
    }

    /// (`tanh` RGB in [-1, 1], `sigmoid` edge map in [0, 1]).
    pub fn forward(&self, texture_feature: &Tensor, structure_feature: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self.texture.forward(texture_feature)?.tanh()?;
        let s = conv2d_with(
            structure_feature,
            self.structure.weight.as_tensor(),
            self.structure.bias.as_ref(),
            1,
            1,
            1,
        )?;
        Ok((t, sigmoid(&s)?))
    }
}

/// `MSE(texture head, eo) + MSE(structure head, edges of eo)`.
pub fn feature_loss(
    heads: &FeatureHeads,
    texture_feature: &Tensor,
    structure_feature: &Tensor,
    eo_target: Option<&Tensor>,
    edge_target: Option<&Tensor>,
) -> Result<Tensor> {
    let (eo, edge) = match (eo_target, edge_target) {
        (Some(e), Some(g)) => (e, g),
        _ => return Err(Error::invalid("feature loss needs the optical target and its edge map")),
    };
    let (t, s) = heads.forward(texture_feature, structure_feature)?;
    Ok((mse(&t, eo)? + mse(&s, edge)?)?)
}

/// `d^2` for matching pairs, `max(0, margin - d)^2` otherwise.
pub fn contrastive_loss(d: f64, same_pair: bool, margin: f64) -> Result<f64> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::invalid(format!("distance {d} must be finite and >= 0")));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid(format!("margin {margin} must be positive")));
    }
    Ok(if same_pair {
        d * d
    } else {
        (margin - d).max(0.0).powi(2)
    })
}

/// Batched contrastive loss; `same` holds 1 for matching pairs, 0 otherwise.
pub fn contrastive_loss_batch(d: &Tensor, same: &Tensor, margin: f64) -> Result<Tensor> {
    if d.dims() != same.dims() {
        return Err(Error::shape("distance and label shapes differ"));
    }
    let pos = d.sqr()?.mul(same)?;
    let hinge = d.affine(-1.0, margin)?.relu()?.sqr()?;
    let neg = hinge.mul(&same.affine(-1.0, 1.0)?)?;
    Ok((pos + neg)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(v: f64, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let half = full(0.5, (1, 1, 4, 4));
        for real in [true, false] {
            let l = scalar(&adversarial_loss(&half, real).unwrap()).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let p = full(0.9, (1, 1, 2, 2));
        let l = scalar(&adversarial_loss(&p, false).unwrap()).unwrap();
        assert!((l - 2.302585092994046).abs() < 1e-9);
        let p = full(1.0 - 1e-9, (1, 1, 2, 2));
        assert!(scalar(&adversarial_loss(&p, true).unwrap()).unwrap() < 1e-8);
        assert!(adversarial_loss(&full(1.0, (1, 1, 1, 1)), true).is_err());
    }

    #[test]
    fn logits_agree_with_probabilities() {
        let z = Tensor::new(&[-3.0f64, -0.2, 0.0, 1.5, 4.0], &Device::Cpu).unwrap();
        let p = sigmoid(&z).unwrap();
        for (t, real) in [(1.0, true), (0.0, false)] {
            let a = scalar(&bce_with_logits(&z, t).unwrap()).unwrap();
            let b = scalar(&adversarial_loss(&p, real).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_offset() {
        let a = full(0.3, (1, 3, 4, 4));
        let b = full(0.4, (1, 3, 4, 4));
        assert!((scalar(&pixel_loss(&a, &b).unwrap()).unwrap() - 0.01).abs() < 1e-12);
        assert!(pixel_loss(&a, &full(0.0, (1, 3, 4, 5))).is_err());
    }

    #[test]
    fn frequency_dc_offset() {
        let real = Tensor::randn(0f64, 1.0, (1, 1, 6, 5), &Device::Cpu).unwrap();
        let gen = (&real + 0.25).unwrap();
        let l = scalar(&focal_frequency_loss(&gen, &real, 1.0).unwrap()).unwrap();
        assert!((l - 0.0625 * 30.0).abs() < 1e-9, "{l}");
        assert_eq!(scalar(&focal_frequency_loss(&real, &real, 1.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn dft_matches_fft() {
        use crate::imageops::spectrum;
        use crate::tile::ImageTile;
        let tile = ImageTile::from_fn(1, 4, 6, |_, y, x| ((y * 7 + x * 3) % 5) as f32 - 2.0);
        let (re, im) = dft2(&tile.to_tensor(DType::F64, &Device::Cpu).unwrap()).unwrap();
        let re = re.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let im = im.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let s = spectrum(&tile).unwrap();
        for (i, b) in s.bins.iter().enumerate() {
            assert!((b.re - re[i]).abs() < 1e-9 && (b.im - im[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn gram_constant_channel() {
        let a = full(0.5, (1, 1, 2, 2));
        let b = full(-0.7, (1, 1, 2, 2));
        let l = scalar(&style_loss(&[a], &[b]).unwrap()).unwrap();
        assert!((l - (0.25f64 - 0.49).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn identity_extractor_is_pixel_loss() {
        let a = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let p = scalar(&perceptual_loss(&a, &b, Some(&IdentityExtractor)).unwrap()).unwrap();
        assert!((p - scalar(&pixel_loss(&a, &b).unwrap()).unwrap()).abs() < 1e-15);
        assert!(matches!(perceptual_loss(&a, &b, None), Err(Error::MissingAsset(_))));
    }

    #[test]
    fn contrastive_cases() {
        assert_eq!(contrastive_loss(0.0, true, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(1.3, false, 1.0).unwrap(), 0.0);
        assert!((contrastive_loss(0.5, false, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(contrastive_loss(-0.1, true, 1.0).is_err());
        let d = Tensor::new(&[0.5f64, 0.5], &Device::Cpu).unwrap();
        let s = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        let l = scalar(&contrastive_loss_batch(&d, &s, 1.0).unwrap()).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weighted_total() {
        let t = LossTerms {
            adv: 0.7,
            pix: 0.02,
            ffl: 3.0,
            perc: 0.5,
            style: 0.01,
            feat: 0.2,
        };
        let w = LossWeights {
            w_adv: 1.0,
            w_pix: 10.0,
            w_ffl: 1.0,
            w_perc: 1.0,
            w_style: 1.0,
            w_feat: 1.0,
        };
        assert!((total_generator_loss(&t, &w).unwrap() - 4.61).abs() < 1e-12);
        assert_eq!(total_generator_loss(&t, &LossWeights::zero()).unwrap(), 0.0);
        let only = LossWeights { w_ffl: 1.0, ..LossWeights::zero() };
        assert_eq!(total_generator_loss(&t, &only).unwrap(), 3.0);
        let bad = LossTerms { style: f64::NAN, ..t };
        match total_generator_loss(&bad, &w) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "g_style"),
            other => panic!("{other:?}"),
        }
    }
}
