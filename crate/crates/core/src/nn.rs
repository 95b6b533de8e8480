//! Small layer toolkit on top of `candle-core` tensors: a named parameter
//! store with seeded initialization and safetensors checkpoints, the layers
//! the networks share, and an Adam optimizer whose moments can be saved.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Forward-pass context: train/eval behaviour plus the dropout stream.
pub struct Ctx {
    pub train: bool,
    /// Whether batch-norm running statistics and power-iteration vectors are
    /// refreshed by this pass.
    pub update_stats: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            update_stats: true,
            rng,
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            update_stats: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Batch statistics without touching persistent state.
    pub fn frozen_train(rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            update_stats: false,
            rng,
        }
    }
}

/// Named trainable parameters and non-trainable buffers of one network.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let v = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        if trainable {
            self.params.insert(name.to_string(), v.clone());
        } else {
            self.buffers.insert(name.to_string(), v.clone());
        }
        Ok(v)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = if self.dtype == DType::F32 {
            let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::invalid(e.to_string()))?;
            let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
            Tensor::from_vec(data, shape, &self.device)?
        } else {
            let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
            Tensor::from_vec(data, shape, &self.device)?
        };
        self.insert(name, t, true)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn buffer(&mut self, name: &str, t: Tensor) -> Result<Var> {
        self.insert(name, t, false)
    }

    /// Unit-norm Gaussian vector stored as a buffer.
    pub fn unit_buffer(&mut self, name: &str, len: usize) -> Result<Var> {
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let mut data: Vec<f64> = (0..len).map(|_| dist.sample(&mut self.rng)).collect();
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.iter_mut().for_each(|v| *v /= norm);
        let t = Tensor::from_vec(data, len, &self.device)?;
        self.insert(name, t, false)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over trainable parameter names and raw values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.params {
            h.update(name.as_bytes());
            let data = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Overwrites every parameter and buffer from `tensors`; names and
    /// shapes must match exactly.
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture expects {expected}",
                tensors.len()
            )));
        }
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Reads a safetensors file into tensors plus its string metadata.
pub fn read_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata: BTreeMap<String, String> = meta
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((tensors, metadata))
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    /// Gaussian(0, 0.02) weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_init(store, name, cin, cout, kernel, stride, padding, 1, 0.02)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = if std == 0.0 {
            store.constant(&format!("{name}.weight"), &[cout, cin, kernel, kernel], 0.0)?
        } else {
            store.normal(&format!("{name}.weight"), &[cout, cin, kernel, kernel], std)?
        };
        let bias = Some(store.constant(&format!("{name}.bias"), &[cout], 0.0)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_with(x, self.weight.as_tensor(), self.bias.as_ref(), self.padding, self.stride, self.dilation)
    }
}

pub fn conv2d_with(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Var>,
    padding: usize,
    stride: usize,
    dilation: usize,
) -> Result<Tensor> {
    let y = conv2d(x, weight, padding, stride, dilation)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
        None => y,
    })
}

/// Geometry shared by the patch gather and its adjoint scatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unfold {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose tap at kernel column `j` lands inside
    /// the image.
    fn valid_x(&self, j: usize) -> (usize, usize) {
        let off = j * self.dilation;
        let lo = self.padding.saturating_sub(off).div_ceil(self.stride);
        let hi = (self.w + self.padding)
            .checked_sub(off)
            .map_or(0, |e| e.div_ceil(self.stride))
            .min(self.wo);
        (lo, hi.max(lo))
    }

    /// Calls `f(src, dst, len, stride)` for every run of in-bounds taps:
    /// image offsets `src + k * stride` pair with column offsets `dst + k`.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let n = self.cols();
        let plane = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let (x0, x1) = self.valid_x(j);
                    if x0 >= x1 {
                        continue;
                    }
                    for b in 0..self.b {
                        let src = (b * self.c + c) * self.h * self.w;
                        let dst = row * n + b * plane;
                        for y in 0..self.ho {
                            let iy = (y * self.stride + i * self.dilation) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let ix0 = x0 * self.stride + j * self.dilation - self.padding;
                            f(src + iy as usize * self.w + ix0, dst + y * self.wo + x0, x1 - x0, self.stride);
                        }
                    }
                }
            }
        }
    }

    fn gather<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.rows() * self.cols()];
        self.visit(|s, d, len, st| {
            if st == 1 {
                out[d..d + len].copy_from_slice(&src[s..s + len]);
            } else {
                for k in 0..len {
                    out[d + k] = src[s + k * st];
                }
            }
        });
        out
    }

    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.b * self.c * self.h * self.w];
        self.visit(|s, d, len, st| {
            if st == 1 {
                for (o, v) in out[s..s + len].iter_mut().zip(&src[d..d + len]) {
                    *o += *v;
                }
            } else {
                for k in 0..len {
                    out[s + k * st] += src[d + k];
                }
            }
        });
        out
    }
}

struct Im2Col(Unfold);
struct Col2Im(Unfold);

fn contiguous_slice<'a, T>(data: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("patch gather needs a contiguous input"),
    }
}

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let shape = candle_core::Shape::from((self.0.rows(), self.0.cols()));
        let out = match storage {
            S::F32(d) => S::F32(self.0.gather(contiguous_slice(d, layout)?)),
            S::F64(d) => S::F64(self.0.gather(contiguous_slice(d, layout)?)),
            _ => candle_core::bail!("patch gather supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let u = self.0;
        let shape = candle_core::Shape::from((u.b, u.c, u.h, u.w));
        let out = match storage {
            S::F32(d) => S::F32(u.scatter(contiguous_slice(d, layout)?)),
            S::F64(d) => S::F64(u.scatter(contiguous_slice(d, layout)?)),
            _ => candle_core::bail!("patch scatter supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Cross-correlation as a patch gather followed by one matmul, with a
/// hand-written adjoint for the gather.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(Error::shape(format!("conv expects {cin} input channels, got {c}")));
    }
    if stride == 0 || dilation == 0 {
        return Err(Error::invalid("conv stride and dilation must be positive"));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let (span_h, span_w) = (dilation * (kh - 1) + 1, dilation * (kw - 1) + 1);
    if hp < span_h || wp < span_w {
        return Err(Error::shape(format!("kernel {kh}x{kw} does not fit input {h}x{w}")));
    }
    let u = Unfold {
        b,
        c,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        dilation,
        ho: (hp - span_h) / stride + 1,
        wo: (wp - span_w) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(u))?;
    let y = weight.reshape((cout, cin * kh * kw))?.matmul(&cols)?;
    Ok(y.reshape((cout, b, u.ho, u.wo))?.transpose(0, 1)?.contiguous()?)
}

pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let dev = store.device().clone();
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(
                &format!("{name}.running_mean"),
                Tensor::zeros(channels, DType::F64, &dev)?,
            )?,
            running_var: store.buffer(
                &format!("{name}.running_var"),
                Tensor::ones(channels, DType::F64, &dev)?,
            )?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let x3 = x.reshape((n, c, h * w))?;
        let count = (n * h * w) as f64;
        let per_channel = |t: &Tensor| -> Result<Tensor> { Ok((t.sum_keepdim(2)?.sum_keepdim(0)? / count)?) };
        let (centered, var) = if ctx.train {
            let mean = per_channel(&x3)?;
            let centered = x3.broadcast_sub(&mean)?;
            let var = per_channel(&centered.sqr()?)?;
            if ctx.update_stats {
                let unbiased = if count > 1.0 {
                    (var.detach() * (count / (count - 1.0)))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
            }
            (centered, var)
        } else {
            let mean = self.running_mean.as_tensor().reshape((1, c, 1))?;
            (x3.broadcast_sub(&mean)?, self.running_var.as_tensor().reshape((1, c, 1))?)
        };
        let scale = self
            .gamma
            .as_tensor()
            .reshape((1, c, 1))?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(centered
            .broadcast_mul(&scale)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1))?)?
            .reshape((n, c, h, w))?)
    }
}

pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Uniform(+-1/sqrt(fan_in)) weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[fan_out, fan_in], bound)?,
            bias: store.constant(&format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic function written through `tanh` so neither tail overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn softmax_dim1(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Inverted dropout with a mask drawn from the context stream.
pub fn dropout(x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let n = x.elem_count();
    let mask: Vec<f64> = (0..n)
        .map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("mse of {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed list of named variables.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<AdamSlot>,
}

struct AdamSlot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        let slots = store
            .named_trainable()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok(AdamSlot {
                    name: name.clone(),
                    var: var.clone(),
                    m: z.clone(),
                    v: z,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            step: 0,
            slots,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every variable that has a gradient in `grads`.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            slot.m = ((&slot.m * beta1)? + (g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let mhat = (&slot.m / bc1)?;
            let vhat = (&slot.v / bc2)?;
            let update = (mhat / (vhat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for s in &self.slots {
            out.push((format!("{prefix}.m.{}", s.name), s.m.clone()));
            out.push((format!("{prefix}.v.{}", s.name), s.v.clone()));
        }
        out
    }

    pub fn restore(&mut self, prefix: &str, step: u64, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for s in &mut self.slots {
            let get = |kind: &str| {
                tensors
                    .get(&format!("{prefix}.{kind}.{}", s.name))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {prefix}.{kind}.{}", s.name)))
            };
            s.m = get("m")?.to_dtype(s.var.dtype())?;
            s.v = get("v")?.to_dtype(s.var.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gathered_conv_gradient_matches_differences() {
        let dev = Device::Cpu;
        for (k, stride, pad, dil) in [(3, 1, 1, 1), (4, 2, 1, 1), (3, 1, 2, 2), (5, 3, 2, 1)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 9, 10), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap()).unwrap();
            let dims = x.conv2d(&w, pad, stride, dil, 1).unwrap().dims().to_vec();
            let probe = Tensor::randn(0f64, 1.0, dims, &dev).unwrap();
            let f = |x: &Tensor, w: &Tensor| -> f64 {
                x.conv2d(w, pad, stride, dil, 1).unwrap().mul(&probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            let grads = conv2d(&x, &w, pad, stride, dil).unwrap().mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            for (which, v) in [(0, &x), (1, &w)] {
                let g: Vec<f64> = grads.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let base: Vec<f64> = v.flatten_all().unwrap().to_vec1().unwrap();
                for idx in (0..base.len()).step_by(7) {
                    let bump = |delta: f64| {
                        let mut d = base.clone();
                        d[idx] += delta;
                        let t = Tensor::from_vec(d, v.dims(), &dev).unwrap();
                        if which == 0 { f(&t, &w) } else { f(&x, &t) }
                    };
                    let fd = (bump(1e-3) - bump(-1e-3)) / 2e-3;
                    assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "k{k} s{stride} p{pad} d{dil} [{which}:{idx}] {fd} vs {}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn gathered_conv_matches_native() {
        let dev = Device::Cpu;
        for (k, stride, pad, dil, hw) in [(3, 1, 1, 1, 9), (4, 2, 1, 1, 8), (5, 2, 2, 1, 11), (3, 1, 4, 4, 10), (1, 1, 0, 1, 5), (7, 3, 0, 1, 13)] {
            let x = Tensor::randn(0f32, 1.0, (2, 3, hw, hw + 1), &dev).unwrap();
            let w = Tensor::randn(0f32, 1.0, (4, 3, k, k), &dev).unwrap();
            let a = conv2d(&x, &w, pad, stride, dil).unwrap();
            let b = x.conv2d(&w, pad, stride, dil, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-4, "k{k} s{stride} p{pad} d{dil}: {diff}");
        }
    }

    #[test]
    fn store_rejects_duplicates() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.constant("a", &[2], 1.0).unwrap();
        assert!(s.constant("a", &[2], 1.0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(DType::F32, 7);
        let mut b = ParamStore::new(DType::F32, 7);
        a.normal("w", &[4, 4], 0.02).unwrap();
        b.normal("w", &[4, 4], 0.02).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        let mut a = ParamStore::new(DType::F32, 1);
        a.normal("w", &[3, 5], 1.0).unwrap();
        a.unit_buffer("u", 3).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        a.save(&p, &meta).unwrap();
        let mut b = ParamStore::new(DType::F32, 2);
        b.normal("w", &[3, 5], 1.0).unwrap();
        b.unit_buffer("u", 3).unwrap();
        let (tensors, m) = read_checkpoint(&p).unwrap();
        assert_eq!(m.get("kind").map(String::as_str), Some("test"));
        b.load_from(&tensors).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = ParamStore::new(DType::F32, 2);
        c.normal("w", &[5, 3], 1.0).unwrap();
        c.unit_buffer("u", 3).unwrap();
        assert!(c.load_from(&tensors).is_err());
    }

    #[test]
    fn sigmoid_is_bounded_and_centered() {
        let x = Tensor::new(&[-100f32, 0.0, 100.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y[1], 0.5);
        assert!(y[0] >= 0.0 && y[2] <= 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax_last_dim(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new(DType::F64, 0);
        let w = s.constant("w", &[3], 5.0).unwrap();
        let mut opt = Adam::new(&s, AdamConfig { lr: 0.1, beta1: 0.9, ..Default::default() }).unwrap();
        for _ in 0..500 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut s = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&mut s, "bn", 2).unwrap();
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 2)).unwrap();
        let y = bn.forward(&x, &Ctx::eval()).unwrap();
        let expect = (&x / (1.0f64 + 1e-5).sqrt()).unwrap();
        let diff = (y - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let ctx = Ctx::train(ChaCha8Rng::seed_from_u64(0));
        let y = bn.forward(&x, &ctx).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-12);
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|&v| v > 0.0));
    }
}
