//! Mask-aware convolution and the encoder built from it.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore};

/// Feature map with a validity mask. The mask has either one channel
/// (shared by every feature channel) or as many channels as the values.
#[derive(Debug, Clone)]
pub struct MaskedFeature {
    pub values: Tensor,
    pub mask: Tensor,
}

impl MaskedFeature {
    /// Values with an all-valid single-channel mask.
    pub fn dense(values: Tensor) -> Result<Self> {
        let (n, _, h, w) = values.dims4()?;
        let mask = Tensor::ones((n, 1, h, w), values.dtype(), values.device())?;
        Ok(Self { values, mask })
    }

    /// Zeroes the values wherever the mask is 0.
    pub fn new(values: Tensor, mask: Tensor) -> Result<Self> {
        let (n, c, h, w) = values.dims4()?;
        let (mn, mc, mh, mw) = mask.dims4()?;
        if (mn, mh, mw) != (n, h, w) || (mc != 1 && mc != c) {
            return Err(Error::shape(format!(
                "mask {:?} does not fit values {:?}",
                mask.dims(),
                values.dims()
            )));
        }
        let mask = mask.to_dtype(values.dtype())?;
        let values = values.broadcast_mul(&mask)?;
        Ok(Self { values, mask })
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[2], d[3])
    }

    /// Mask broadcast to the full `N x C x H x W` shape.
    pub fn full_mask(&self) -> Result<Tensor> {
        Ok(self.mask.broadcast_as(self.values.shape())?.contiguous()?)
    }

    pub fn valid_count(&self) -> Result<f64> {
        Ok(self
            .full_mask()?
            .to_dtype(DType::F64)?
            .sum_all()?
            .to_scalar::<f64>()?)
    }
}

/// One mask-renormalized convolution step.
///
/// Outside the image the mask counts as valid, so with an all-ones mask the
/// result is exactly a zero-padded convolution.
pub fn partial_conv(
    input: &MaskedFeature,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<MaskedFeature> {
    let (cout, cin, kh, kw) = weight.dims4()?;
    if input.channels() != cin {
        return Err(Error::shape(format!(
            "partial conv expects {cin} input channels, got {}",
            input.channels()
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::shape(format!("bias shape {:?} for {cout} outputs", b.dims())));
        }
    }
    let mask = input.mask.to_dtype(input.values.dtype())?;
    let mc = mask.dims()[1];
    let xm = input.values.broadcast_mul(&mask)?;
    let raw = crate::nn::conv2d(&xm, weight, padding, stride, 1)?;

    let padded = if padding > 0 {
        let holes = mask.affine(-1.0, 1.0)?;
        holes
            .pad_with_zeros(2, padding, padding)?
            .pad_with_zeros(3, padding, padding)?
            .affine(-1.0, 1.0)?
    } else {
        mask
    };
    let ones = Tensor::ones((1, mc, kh, kw), padded.dtype(), padded.device())?;
    let mut window = padded.conv2d(&ones, 0, stride, 1, 1)?;
    if mc == 1 {
        window = (window * cin as f64)?;
    }
    let full = (cin * kh * kw) as f64;
    let updated = window.gt(0.5)?.to_dtype(raw.dtype())?;
    let ratio = (window.maximum(1.0)?.recip()? * full)?.mul(&updated)?;

    let mut out = raw.broadcast_mul(&ratio)?;
    if let Some(b) = bias {
        out = out.broadcast_add(&b.reshape((1, cout, 1, 1))?)?;
    }
    let out = out.broadcast_mul(&updated)?;
    Ok(MaskedFeature {
        values: out,
        mask: updated,
    })
}

pub struct PartialConv2d {
    pub conv: Conv2d,
}

impl PartialConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, name, cin, cout, kernel, stride, padding)?,
        })
    }

    pub fn forward(&self, x: &MaskedFeature) -> Result<MaskedFeature> {
        let bias = self.conv.bias.as_ref().map(|b| b.as_tensor());
        partial_conv(
            x,
            self.conv.weight.as_tensor(),
            bias,
            self.conv.stride,
            self.conv.padding,
        )
    }
}

/// Geometry of one encoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_size: usize,
    pub batch_norm: bool,
}

/// Per-level outputs of one encoder, shallowest first.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub levels: Vec<MaskedFeature>,
}

impl EncoderStack {
    /// One-based level lookup.
    pub fn level(&self, i: usize) -> &MaskedFeature {
        &self.levels[i - 1]
    }

    pub fn top(&self) -> &MaskedFeature {
        self.levels.last().expect("encoder has levels")
    }
}

struct EncoderLevel {
    pconv: PartialConv2d,
    bn: Option<BatchNorm2d>,
}

pub struct Encoder {
    levels: Vec<EncoderLevel>,
    in_channels: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, specs: &[LevelSpec]) -> Result<Self> {
        let in_channels = specs
            .first()
            .map(|s| s.in_channels)
            .ok_or_else(|| Error::invalid("encoder needs at least one level"))?;
        let mut levels = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            let lname = format!("{name}.pconv{}", i + 1);
            let pconv = PartialConv2d::new(
                store,
                &lname,
                s.in_channels,
                s.out_channels,
                s.kernel,
                s.stride,
                s.padding,
            )?;
            let bn = if s.batch_norm {
                Some(BatchNorm2d::new(store, &format!("{lname}.bn"), s.out_channels)?)
            } else {
                None
            };
            levels.push(EncoderLevel { pconv, bn });
        }
        Ok(Self {
            levels,
            in_channels,
        })
    }

    pub fn forward(&self, input: &MaskedFeature, ctx: &Ctx) -> Result<EncoderStack> {
        if input.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let mut out = Vec::with_capacity(self.levels.len());
        let mut x = input.clone();
        for level in &self.levels {
            let f = level.pconv.forward(&x)?;
            let mut v = f.values;
            if let Some(bn) = &level.bn {
                v = bn.forward(&v, ctx)?;
            }
            let v = v.relu()?.broadcast_mul(&f.mask)?;
            x = MaskedFeature {
                values: v,
                mask: f.mask,
            };
            out.push(x.clone());
        }
        Ok(EncoderStack { levels: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn masked_corner_is_renormalized() {
        let x = t(vec![1.0; 9], (1, 1, 3, 3));
        let mut m = vec![1.0; 9];
        m[0] = 0.0;
        let input = MaskedFeature::new(x, t(m, (1, 1, 3, 3))).unwrap();
        let w = t(vec![1.0; 9], (1, 1, 3, 3));
        let out = partial_conv(&input, &w, None, 1, 0).unwrap();
        let v = out.values.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_window_stays_a_hole() {
        let x = t(vec![5.0; 16], (1, 1, 4, 4));
        let m = t(vec![0.0; 16], (1, 1, 4, 4));
        let input = MaskedFeature::new(x, m).unwrap();
        let w = t(vec![1.0; 9], (1, 1, 3, 3));
        let b = Tensor::new(&[2.0f64], &Device::Cpu).unwrap();
        let out = partial_conv(&input, &w, Some(&b), 1, 0).unwrap();
        let v = out.values.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mk = out.mask.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(mk.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_mask_matches_dense_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 9), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 3, 5, 5), &dev).unwrap();
        let out = partial_conv(&MaskedFeature::dense(x.clone()).unwrap(), &w, None, 2, 2).unwrap();
        let dense = x.conv2d(&w, 2, 2, 1, 1).unwrap();
        let diff = (out.values - dense).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        assert_eq!(out.mask.dims(), &[2, 1, 5, 5]);
    }

    #[test]
    fn holes_never_grow() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 2, 8, 8), &dev).unwrap();
        let mut m = vec![1.0; 64];
        for i in [9usize, 10, 17, 18, 40] {
            m[i] = 0.0;
        }
        let input = MaskedFeature::new(x, t(m, (1, 1, 8, 8))).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let out = partial_conv(&input, &w, None, 1, 1).unwrap();
        let mk = out.mask.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mk.iter().all(|&v| v == 1.0));
    }
}
