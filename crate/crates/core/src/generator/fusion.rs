//! Gated fusion of the two decoder features and the contextual attention
//! block that refines the fused result.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, softmax_dim1, softmax_last_dim, BatchNorm2d, Conv2d, Ctx, ParamStore};

/// Bidirectional gated fusion of structure and texture features.
pub struct BiGff {
    pub gate_s: Conv2d,
    pub gate_t: Conv2d,
    /// `true`: each gate scales the other branch. `false`: its own branch.
    pub cross: bool,
}

impl BiGff {
    /// Gates start at zero, so the block is the identity concatenation.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cross: bool) -> Result<Self> {
        let mk = |store: &mut ParamStore, n: &str| {
            Conv2d::with_init(store, &format!("{name}.{n}"), 2 * channels, channels, 3, 1, 1, 1, 0.0)
        };
        Ok(Self {
            gate_s: mk(store, "gate_s")?,
            gate_t: mk(store, "gate_t")?,
            cross,
        })
    }

    /// Returns `[Fs'; Ft']`.
    pub fn forward(&self, fs: &Tensor, ft: &Tensor) -> Result<Tensor> {
        if fs.dims() != ft.dims() {
            return Err(Error::shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                fs.dims(),
                ft.dims()
            )));
        }
        let both = Tensor::cat(&[fs, ft], 1)?;
        let gs = self.gate_s.forward(&both)?;
        let gt = self.gate_t.forward(&both)?;
        let (fs2, ft2) = if self.cross {
            ((fs + gs.mul(ft)?)?, (ft + gt.mul(fs)?)?)
        } else {
            ((fs + gs.mul(fs)?)?, (ft + gt.mul(ft)?)?)
        };
        Ok(Tensor::cat(&[&fs2, &ft2], 1)?)
    }
}

/// Result of patch-level cosine attention.
pub struct PatchAttention {
    /// `B x N x N`, each row a softmax distribution.
    pub attention: Tensor,
    /// Input-shaped map rebuilt from attention-weighted patches.
    pub reconstruction: Tensor,
}

/// Bytes needed for the `B x N x N` attention matrix of a feature map.
pub fn attention_bytes(dims: &[usize], patch: usize, elem: usize) -> usize {
    let n = dims[2].div_ceil(patch) * dims[3].div_ceil(patch);
    dims[0] * n * n * elem
}

/// Cosine-similarity attention over non-overlapping `patch x patch` blocks.
/// The map is zero-padded to whole patches and cropped back afterwards.
pub fn patch_attention(x: &Tensor, patch: usize, budget_bytes: usize) -> Result<PatchAttention> {
    let (b, c, h, w) = x.dims4()?;
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let needed = attention_bytes(x.dims(), patch, x.dtype().size_in_bytes());
    if needed > budget_bytes {
        return Err(Error::MemoryBudget {
            needed,
            budget: budget_bytes,
        });
    }
    let (nh, nw) = (h.div_ceil(patch), w.div_ceil(patch));
    let (hp, wp) = (nh * patch, nw * patch);
    let xp = x
        .pad_with_zeros(2, 0, hp - h)?
        .pad_with_zeros(3, 0, wp - w)?;
    let n = nh * nw;
    let d = c * patch * patch;
    let patches = xp
        .reshape(vec![b, c, nh, patch, nw, patch])?
        .permute([0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, n, d))?;
    let norm = (patches.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    let unit = patches.broadcast_div(&norm)?;
    let cosine = unit.matmul(&unit.transpose(1, 2)?.contiguous()?)?;
    let attention = softmax_last_dim(&cosine)?;
    let rebuilt = attention.matmul(&patches)?;
    let reconstruction = rebuilt
        .reshape(vec![b, nh, nw, c, patch, patch])?
        .permute([0, 3, 1, 4, 2, 5])?
        .contiguous()?
        .reshape((b, c, hp, wp))?
        .narrow(2, 0, h)?
        .narrow(3, 0, w)?;
    Ok(PatchAttention {
        attention,
        reconstruction,
    })
}

/// Contextual feature aggregation.
pub struct Cfa {
    pre: Vec<(Conv2d, BatchNorm2d)>,
    dilated: Vec<Conv2d>,
    weights: Conv2d,
    post: Vec<(Conv2d, BatchNorm2d)>,
    pub patch: usize,
    pub budget_bytes: usize,
    in_channels: usize,
}

pub const CFA_DILATIONS: [usize; 4] = [1, 2, 4, 8];

impl Cfa {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        channels: usize,
        patch: usize,
        budget_bytes: usize,
    ) -> Result<Self> {
        let mut pre = Vec::new();
        for i in 0..3 {
            let cin = if i == 0 { in_channels } else { channels };
            let n = format!("{name}.pre{}", i + 1);
            pre.push((
                Conv2d::new(store, &n, cin, channels, 3, 1, 1)?,
                BatchNorm2d::new(store, &format!("{n}.bn"), channels)?,
            ));
        }
        let mut dilated = Vec::new();
        for r in CFA_DILATIONS {
            dilated.push(Conv2d::with_init(
                store,
                &format!("{name}.dilated{r}"),
                channels,
                channels,
                3,
                1,
                r,
                r,
                0.02,
            )?);
        }
        let weights = Conv2d::new(store, &format!("{name}.branch_weights"), channels, CFA_DILATIONS.len(), 1, 1, 0)?;
        let mut post = Vec::new();
        for i in 0..3 {
            let cin = if i == 0 { channels + in_channels } else { channels };
            let n = format!("{name}.post{}", i + 1);
            post.push((
                Conv2d::new(store, &n, cin, channels, 3, 1, 1)?,
                BatchNorm2d::new(store, &format!("{n}.bn"), channels)?,
            ));
        }
        Ok(Self {
            pre,
            dilated,
            weights,
            post,
            patch,
            budget_bytes,
            in_channels,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_with_attention(x, ctx)?.0)
    }

    /// Refined feature plus the attention matrix that produced it.
    pub fn forward_with_attention(&self, x: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let c = x.dims4()?.1;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "attention block expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut f = x.clone();
        for (conv, bn) in &self.pre {
            f = leaky_relu(&bn.forward(&conv.forward(&f)?, ctx)?, 0.2)?;
        }
        let att = patch_attention(&f, self.patch, self.budget_bytes)?;
        let w = softmax_dim1(&self.weights.forward(&att.reconstruction)?)?;
        let mut fused: Option<Tensor> = None;
        for (i, conv) in self.dilated.iter().enumerate() {
            let branch = leaky_relu(&conv.forward(&att.reconstruction)?, 0.2)?;
            let term = branch.broadcast_mul(&w.narrow(1, i, 1)?)?;
            fused = Some(match fused {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        let mut out = Tensor::cat(&[&fused.expect("four branches"), x], 1)?;
        for (conv, bn) in &self.post {
            out = leaky_relu(&bn.forward(&conv.forward(&out)?, ctx)?, 0.2)?;
        }
        Ok((out, att.attention))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn zero_gates_are_identity() {
        let mut s = ParamStore::new(DType::F64, 0);
        let g = BiGff::new(&mut s, "g", 4, true).unwrap();
        let fs = Tensor::randn(0f64, 1.0, (1, 4, 5, 5), &Device::Cpu).unwrap();
        let ft = Tensor::randn(0f64, 1.0, (1, 4, 5, 5), &Device::Cpu).unwrap();
        let out = g.forward(&fs, &ft).unwrap();
        let expect = Tensor::cat(&[&fs, &ft], 1).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn zero_texture_leaves_structure_alone() {
        let mut s = ParamStore::new(DType::F64, 0);
        let g = BiGff::new(&mut s, "g", 3, true).unwrap();
        g.gate_s
            .weight
            .set(&Tensor::randn(0f64, 1.0, (3, 6, 3, 3), &Device::Cpu).unwrap())
            .unwrap();
        let fs = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let ft = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let out = g.forward(&fs, &ft).unwrap().narrow(1, 0, 3).unwrap();
        let diff = (out - &fs).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_patches_self_weight() {
        let mut data = vec![0.0f64; 2 * 3 * 6];
        // channel 0 lights the left patch, channel 1 the right one.
        for y in 0..3 {
            for x in 0..3 {
                data[y * 6 + x] = 1.0;
                data[18 + y * 6 + x + 3] = 1.0;
            }
        }
        let t = Tensor::from_vec(data, (1, 2, 3, 6), &Device::Cpu).unwrap();
        let att = patch_attention(&t, 3, usize::MAX).unwrap();
        let a = att.attention.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let e = std::f64::consts::E;
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-9);
        assert!((a[3] - e / (e + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn identical_patches_give_uniform_rows() {
        let t = Tensor::from_vec(
            (0..2 * 6 * 9).map(|i| ((i % 3) as f64 + 1.0) * if (i / 54) == 0 { 1.0 } else { -0.5 }).collect::<Vec<_>>(),
            (1, 2, 6, 9),
            &Device::Cpu,
        )
        .unwrap();
        let att = patch_attention(&t, 3, usize::MAX).unwrap();
        let a = att.attention.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
        let diff = (att.reconstruction - &t).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn memory_budget_is_enforced() {
        let t = Tensor::zeros((1, 1, 30, 30), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            patch_attention(&t, 3, 1000),
            Err(Error::MemoryBudget { needed: 40000, .. })
        ));
    }

    #[test]
    fn output_shape_for_odd_sizes() {
        let mut s = ParamStore::new(DType::F32, 3);
        let cfa = Cfa::new(&mut s, "cfa", 8, 4, 3, usize::MAX).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 8, 7, 10), &Device::Cpu).unwrap();
        let (y, att) = cfa
            .forward_with_attention(&x, &Ctx::eval())
            .unwrap();
        assert_eq!(y.dims(), &[2, 4, 7, 10]);
        assert_eq!(att.dims(), &[2, 12, 12]);
    }
}
