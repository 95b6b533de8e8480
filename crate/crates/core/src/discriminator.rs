//! Dual-branch discriminator: a texture branch on RGB and a structure branch
//! on edges enriched with grayscale, fused into a patch probability map.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::checkpoint_config;
use crate::nn::{self, leaky_relu, sigmoid, BatchNorm2d, Ctx, ParamStore};
use crate::tile::{ImageTile, ValueRange};

const BLOCK_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Structure-branch block after which grayscale is concatenated.
const GRAY_AFTER_BLOCK: usize = 2;
const SLOPE: f64 = 0.2;
pub const PROB_EPS: f64 = 1e-6;
/// Power iterations run on the initial kernel so the first normalized
/// forward already uses a converged estimate.
pub const WARMUP_ITERATIONS: usize = 50;

/// Left/right singular-vector estimates for one weight matrix.
#[derive(Debug, Clone)]
pub struct PowerIteration {
    pub u: Tensor,
    pub v: Tensor,
}

impl PowerIteration {
    /// Starts from deterministic unit vectors (all entries equal).
    pub fn new(rows: usize, cols: usize, dtype: DType) -> Result<Self> {
        let u = (Tensor::ones(rows, dtype, &Device::Cpu)? / (rows as f64).sqrt())?;
        let v = (Tensor::ones(cols, dtype, &Device::Cpu)? / (cols as f64).sqrt())?;
        Ok(Self { u, v })
    }

    /// One power-iteration step on `w` (rows x cols); keeps the previous
    /// vector when a product vanishes.
    pub fn step(&mut self, w: &Tensor) -> Result<()> {
        let w = w.detach();
        let v = w.t()?.matmul(&self.u.unsqueeze(1)?)?.squeeze(1)?;
        if let Some(v) = unit(&v)? {
            self.v = v;
        }
        let u = w.matmul(&self.v.unsqueeze(1)?)?.squeeze(1)?;
        if let Some(u) = unit(&u)? {
            self.u = u;
        }
        Ok(())
    }

    /// `u^T W v`, differentiable in `w`.
    pub fn sigma(&self, w: &Tensor) -> Result<Tensor> {
        let u = self.u.to_dtype(w.dtype())?.unsqueeze(0)?;
        let v = self.v.to_dtype(w.dtype())?.unsqueeze(1)?;
        Ok(u.matmul(w)?.matmul(&v)?.squeeze(0)?.squeeze(0)?)
    }
}

fn unit(x: &Tensor) -> Result<Option<Tensor>> {
    let n = x.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt();
    Ok(if n > 1e-12 { Some((x / n)?) } else { None })
}

/// Runs one power-iteration step and divides `weight` by the resulting
/// largest-singular-value estimate.
pub fn spectral_normalize(weight: &Tensor, state: &mut PowerIteration) -> Result<Tensor> {
    state.step(weight)?;
    divide_by_sigma(weight, state)
}

fn divide_by_sigma(weight: &Tensor, state: &PowerIteration) -> Result<Tensor> {
    let sigma = state.sigma(weight)?.maximum(1e-12)?;
    Ok(weight.broadcast_div(&sigma)?)
}

/// Convolution whose kernel is spectrally normalized on every forward.
pub struct SnConv2d {
    pub weight: Var,
    pub bias: Var,
    u: Var,
    v: Var,
    pub stride: usize,
    pub padding: usize,
    pub name: String,
}

impl SnConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[cout, cin, kernel, kernel], 0.02)?;
        let bias = store.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        let u = store.unit_buffer(&format!("{name}.sn_u"), cout)?;
        let v = store.unit_buffer(&format!("{name}.sn_v"), cin * kernel * kernel)?;
        let mut st = PowerIteration {
            u: u.as_tensor().clone(),
            v: v.as_tensor().clone(),
        };
        let m = weight.as_tensor().reshape((cout, ()))?;
        for _ in 0..WARMUP_ITERATIONS {
            st.step(&m)?;
        }
        u.set(&st.u)?;
        v.set(&st.v)?;
        Ok(Self {
            weight,
            bias,
            u,
            v,
            stride,
            padding,
            name: name.to_string(),
        })
    }

    fn matrix(&self) -> Result<Tensor> {
        let cout = self.weight.dims()[0];
        Ok(self.weight.as_tensor().reshape((cout, ()))?)
    }

    fn state(&self) -> PowerIteration {
        PowerIteration {
            u: self.u.as_tensor().clone(),
            v: self.v.as_tensor().clone(),
        }
    }

    /// The kernel divided by its spectral-norm estimate, shaped as a matrix.
    /// With `refresh` a power-iteration step runs first (not persisted),
    /// exactly as the next training forward would do.
    pub fn normalized_matrix(&self, refresh: bool) -> Result<Tensor> {
        let mut st = self.state();
        let m = self.matrix()?;
        if refresh {
            st.step(&m)?;
        }
        divide_by_sigma(&m, &st)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let m = self.matrix()?;
        let mut st = self.state();
        if ctx.train && ctx.update_stats {
            st.step(&m)?;
            self.u.set(&st.u)?;
            self.v.set(&st.v)?;
        }
        let w = divide_by_sigma(&m, &st)?.reshape(self.weight.shape())?;
        let y = crate::nn::conv2d(x, &w, self.padding, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

pub struct ResidualBlock {
    pub conv1: SnConv2d,
    pub bn1: BatchNorm2d,
    pub conv2: SnConv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<SnConv2d>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if cin != cout || stride != 1 {
            Some(SnConv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride, 0)?)
        } else {
            None
        };
        Ok(Self {
            conv1: SnConv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout)?,
            conv2: SnConv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = leaky_relu(&self.bn1.forward(&self.conv1.forward(x, ctx)?, ctx)?, SLOPE)?;
        let h = self.bn2.forward(&self.conv2.forward(&h, ctx)?, ctx)?;
        let s = match &self.shortcut {
            Some(p) => p.forward(x, ctx)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }

    fn convs(&self) -> Vec<&SnConv2d> {
        let mut v = vec![&self.conv1, &self.conv2];
        v.extend(self.shortcut.as_ref());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub width_divisor: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width_divisor: 1 }
    }
}

/// Per-cell real probabilities, `N x 1 x h x w`, strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    pub probs: Tensor,
}

impl ProbabilityMap {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Ok(Self {
            probs: sigmoid(logits)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?,
        })
    }

    /// First map of the batch as a one-channel `[0, 1]` tile.
    pub fn to_tile(&self) -> Result<ImageTile> {
        ImageTile::from_tensor(&self.probs.get(0)?, ValueRange::UNIT)
    }

    pub fn mean(&self) -> Result<f64> {
        Ok(self.probs.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
    }
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    texture: Vec<ResidualBlock>,
    structure: Vec<ResidualBlock>,
    gray_proj: SnConv2d,
    head: SnConv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        let d = config.width_divisor;
        if d == 0 || BLOCK_CHANNELS[0] % d != 0 {
            return Err(Error::invalid(format!("width divisor {d} must divide 64")));
        }
        let ch: Vec<usize> = BLOCK_CHANNELS.iter().map(|c| c / d).collect();
        let mut store = ParamStore::new(dtype, seed);
        let s = &mut store;
        let mut texture = Vec::new();
        let mut structure = Vec::new();
        let (mut ct, mut cs) = (3, 1);
        for (i, &c) in ch.iter().enumerate() {
            texture.push(ResidualBlock::new(s, &format!("texture.block{}", i + 1), ct, c, 2)?);
            structure.push(ResidualBlock::new(s, &format!("structure.block{}", i + 1), cs, c, 2)?);
            ct = c;
            cs = c;
        }
        let gc = ch[GRAY_AFTER_BLOCK - 1];
        let gray_proj = SnConv2d::new(s, "structure.gray_proj", gc + 1, gc, 1, 1, 0)?;
        let head = SnConv2d::new(s, "head", 2 * ch[3], 1, 3, 1, 1)?;
        Ok(Self {
            config,
            store,
            texture,
            structure,
            gray_proj,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Cells per side of the output map for an input of side `size`.
    pub fn output_size(size: usize) -> usize {
        size >> BLOCK_CHANNELS.len()
    }

    /// Pre-sigmoid scores. `image` is `N x 3 x H x W`, `edge` and `gray`
    /// are `N x 1 x H x W`.
    pub fn logits(&self, image: &Tensor, edge: &Tensor, gray: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (n, c, h, w) = image.dims4()?;
        let factor = 1 << BLOCK_CHANNELS.len();
        if c != 3 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "discriminator needs 3 channels and sides divisible by {factor}, got {:?}",
                image.dims()
            )));
        }
        for (name, t) in [("edge", edge), ("gray", gray)] {
            if t.dims() != [n, 1, h, w] {
                return Err(Error::shape(format!(
                    "{name} view {:?} does not match image {:?}",
                    t.dims(),
                    image.dims()
                )));
            }
        }
        let dt = self.dtype();
        let mut t = image.to_dtype(dt)?;
        for b in &self.texture {
            t = b.forward(&t, ctx)?;
        }
        let mut s = edge.to_dtype(dt)?;
        for (i, b) in self.structure.iter().enumerate() {
            s = b.forward(&s, ctx)?;
            if i + 1 == GRAY_AFTER_BLOCK {
                let k = 1 << GRAY_AFTER_BLOCK;
                let g = gray.to_dtype(dt)?.avg_pool2d(k)?;
                s = self.gray_proj.forward(&Tensor::cat(&[&s, &g], 1)?, ctx)?;
            }
        }
        self.head.forward(&Tensor::cat(&[&t, &s], 1)?, ctx)
    }

    pub fn forward(&self, image: &Tensor, edge: &Tensor, gray: &Tensor, ctx: &Ctx) -> Result<ProbabilityMap> {
        ProbabilityMap::from_logits(&self.logits(image, edge, gray, ctx)?)
    }

    /// Evaluation-mode map for one image with its edge and gray views.
    pub fn discriminate(&self, image: &ImageTile, edge: &ImageTile, gray: &ImageTile) -> Result<ProbabilityMap> {
        let dev = Device::Cpu;
        let dt = self.dtype();
        self.forward(
            &image.to_tensor(dt, &dev)?,
            &edge.to_tensor(dt, &dev)?,
            &gray.to_tensor(dt, &dev)?,
            &Ctx::eval(),
        )
    }

    fn sn_convs(&self) -> Vec<&SnConv2d> {
        let mut v: Vec<&SnConv2d> = self
            .texture
            .iter()
            .chain(&self.structure)
            .flat_map(|b| b.convs())
            .collect();
        v.push(&self.gray_proj);
        v.push(&self.head);
        v
    }

    /// Every spectrally normalized kernel as a matrix.
    pub fn normalized_weights(&self, refresh: bool) -> Result<Vec<(String, Tensor)>> {
        self.sn_convs()
            .into_iter()
            .map(|c| Ok((c.name.clone(), c.normalized_matrix(refresh)?)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "discriminator".to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        self.store.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = nn::read_checkpoint(path)?;
        let config = checkpoint_config::<DiscriminatorConfig>(&meta, "discriminator", path)?;
        let d = Self::new(config, DType::F32, 0)?;
        d.store.load_from(&tensors)?;
        Ok(d)
    }
}
