//! The dual-feature generator: texture and structure encoder/decoder pairs,
//! gated fusion, contextual attention and the RGB output head.

mod fusion;
mod pconv;

pub use fusion::{attention_bytes, patch_attention, BiGff, Cfa, PatchAttention, CFA_DILATIONS};
pub use pconv::{partial_conv, Encoder, EncoderStack, LevelSpec, MaskedFeature, PartialConv2d};

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FeatureHeads;
use crate::nn::{self, leaky_relu, upsample2x, BatchNorm2d, Conv2d, Ctx, ParamStore};
use crate::preprocess::SampleTriplet;
use crate::tile::{ImageTile, ValueRange};

const ENCODER_KERNELS: [usize; 7] = [7, 5, 5, 3, 3, 3, 3];
const ENCODER_CHANNELS: [usize; 7] = [64, 128, 256, 512, 512, 512, 512];
const ENCODER_PADDING: [usize; 7] = [3, 2, 2, 1, 1, 1, 1];
const FEATURE_CHANNELS: usize = 64;
pub const TEXTURE_INPUT_CHANNELS: usize = 3;
pub const STRUCTURE_INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub levels: usize,
    /// Every channel count is divided by this; 1 is the reference width.
    pub width_divisor: usize,
    pub dropout: f64,
    pub cross_gating: bool,
    pub cfa_patch: usize,
    pub cfa_memory_budget: usize,
}

impl GeneratorConfig {
    /// 256x256 input, seven encoder levels, full width.
    pub fn reference() -> Self {
        Self {
            input_size: 256,
            levels: 7,
            width_divisor: 1,
            dropout: 0.5,
            cross_gating: true,
            cfa_patch: 3,
            cfa_memory_budget: 1 << 30,
        }
    }

    /// 64x64 input with five encoder levels.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            levels: 5,
            ..Self::reference()
        }
    }

    pub fn with_width_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d;
        self
    }

    fn width(&self, c: usize) -> usize {
        c / self.width_divisor
    }

    pub fn feature_channels(&self) -> usize {
        self.width(FEATURE_CHANNELS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > ENCODER_KERNELS.len() {
            return Err(Error::invalid(format!(
                "encoder levels must be in 1..={}, got {}",
                ENCODER_KERNELS.len(),
                self.levels
            )));
        }
        if self.width_divisor == 0 || FEATURE_CHANNELS % self.width_divisor != 0 {
            return Err(Error::invalid(format!(
                "width divisor {} must divide {FEATURE_CHANNELS}",
                self.width_divisor
            )));
        }
        check_input_size(self.input_size, self.levels)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.cfa_patch == 0 {
            return Err(Error::invalid("attention patch size must be positive"));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<ArchitecturePlan> {
        self.validate()?;
        let l = self.levels;
        let encoder = |in_channels: usize| {
            let mut specs = Vec::with_capacity(l);
            let mut cin = in_channels;
            let mut size = self.input_size;
            for i in 0..l {
                size /= 2;
                let cout = self.width(ENCODER_CHANNELS[i]);
                specs.push(LevelSpec {
                    kernel: ENCODER_KERNELS[i],
                    stride: 2,
                    padding: ENCODER_PADDING[i],
                    in_channels: cin,
                    out_channels: cout,
                    out_size: size,
                    batch_norm: i > 0 && i + 1 < l,
                });
                cin = cout;
            }
            specs
        };
        let texture_encoder = encoder(TEXTURE_INPUT_CHANNELS);
        let structure_encoder = encoder(STRUCTURE_INPUT_CHANNELS);

        let decoder = |top: Source, first_skip: Source, input: Source| {
            let mut stages = Vec::with_capacity(l);
            let mut up = top;
            let mut up_channels = texture_encoder[l - 1].out_channels;
            let mut size = texture_encoder[l - 1].out_size * 2;
            for (n, j) in (1..l).rev().enumerate() {
                let skip = if n == 0 { first_skip.at(j) } else { Source::TextureEncoder(j) };
                let skip_channels = texture_encoder[j - 1].out_channels;
                let out_channels = skip_channels;
                stages.push(DecoderStage {
                    upsampled: up,
                    upsampled_channels: up_channels,
                    skip,
                    skip_channels,
                    concat_channels: up_channels + skip_channels,
                    out_channels,
                    size,
                    dropout: n < 2,
                });
                up = Source::DecoderStage(n);
                up_channels = out_channels;
                size *= 2;
            }
            let input_channels = match input {
                Source::TextureInput => TEXTURE_INPUT_CHANNELS,
                _ => STRUCTURE_INPUT_CHANNELS,
            };
            stages.push(DecoderStage {
                upsampled: up,
                upsampled_channels: up_channels,
                skip: input,
                skip_channels: input_channels,
                concat_channels: up_channels + input_channels,
                out_channels: self.feature_channels(),
                size,
                dropout: false,
            });
            stages
        };
        let texture_decoder = decoder(
            Source::StructureEncoder(l),
            Source::TextureEncoder(0),
            Source::TextureInput,
        );
        let structure_decoder = decoder(
            Source::TextureEncoder(l),
            Source::StructureEncoder(0),
            Source::StructureInput,
        );
        Ok(ArchitecturePlan {
            input_size: self.input_size,
            texture_encoder,
            structure_encoder,
            texture_decoder,
            structure_decoder,
            feature_channels: self.feature_channels(),
            fused_channels: 2 * self.feature_channels(),
        })
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::reference()
    }
}

/// Rejects sizes whose stride-2 chain would fall below one pixel.
pub fn check_input_size(size: usize, levels: usize) -> Result<()> {
    let factor = 1usize << levels;
    if size < factor || size % factor != 0 {
        return Err(Error::invalid(format!(
            "input size {size} cannot pass through {levels} stride-2 levels (needs a multiple of {factor})"
        )));
    }
    Ok(())
}

/// Where a decoder concat operand comes from. Encoder levels are one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    TextureEncoder(usize),
    StructureEncoder(usize),
    TextureInput,
    StructureInput,
    DecoderStage(usize),
}

impl Source {
    fn at(self, level: usize) -> Source {
        match self {
            Source::TextureEncoder(_) => Source::TextureEncoder(level),
            Source::StructureEncoder(_) => Source::StructureEncoder(level),
            other => other,
        }
    }
}

/// One decoder convolution: upsample the previous output, concat a skip,
/// then a 3x3 stride-1 conv. The last stage produces the branch feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderStage {
    pub upsampled: Source,
    pub upsampled_channels: usize,
    pub skip: Source,
    pub skip_channels: usize,
    pub concat_channels: usize,
    pub out_channels: usize,
    /// Spatial size at the concat.
    pub size: usize,
    pub dropout: bool,
}

/// Every layer shape of a generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitecturePlan {
    pub input_size: usize,
    pub texture_encoder: Vec<LevelSpec>,
    pub structure_encoder: Vec<LevelSpec>,
    pub texture_decoder: Vec<DecoderStage>,
    pub structure_decoder: Vec<DecoderStage>,
    pub feature_channels: usize,
    pub fused_channels: usize,
}

struct Decoder {
    stages: Vec<DecoderStage>,
    convs: Vec<(Conv2d, Option<BatchNorm2d>)>,
    dropout: f64,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, stages: &[DecoderStage], dropout: f64) -> Result<Self> {
        let last = stages.len() - 1;
        let mut convs = Vec::with_capacity(stages.len());
        for (i, s) in stages.iter().enumerate() {
            let n = if i == last {
                format!("{name}.feature")
            } else {
                format!("{name}.conv{}", i + 1)
            };
            let conv = Conv2d::new(store, &n, s.concat_channels, s.out_channels, 3, 1, 1)?;
            let bn = if i == last {
                None
            } else {
                Some(BatchNorm2d::new(store, &format!("{n}.bn"), s.out_channels)?)
            };
            convs.push((conv, bn));
        }
        Ok(Self {
            stages: stages.to_vec(),
            convs,
            dropout,
        })
    }

    fn forward(
        &self,
        texture: &EncoderStack,
        structure: &EncoderStack,
        texture_input: &Tensor,
        structure_input: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let fetch = |src: Source| -> Result<Tensor> {
            Ok(match src {
                Source::TextureEncoder(j) => texture.level(j).values.clone(),
                Source::StructureEncoder(j) => structure.level(j).values.clone(),
                Source::TextureInput => texture_input.clone(),
                Source::StructureInput => structure_input.clone(),
                Source::DecoderStage(_) => unreachable!("decoder outputs are threaded directly"),
            })
        };
        let mut prev = fetch(self.stages[0].upsampled)?;
        for (stage, (conv, bn)) in self.stages.iter().zip(&self.convs) {
            let up = upsample2x(&prev)?;
            let skip = fetch(stage.skip)?;
            let cat = Tensor::cat(&[&up, &skip], 1)?;
            let c = cat.dims4()?.1;
            if c != stage.concat_channels {
                return Err(Error::shape(format!(
                    "decoder concat has {c} channels, plan says {}",
                    stage.concat_channels
                )));
            }
            let mut y = conv.forward(&cat)?;
            if let Some(bn) = bn {
                y = bn.forward(&y, ctx)?;
            }
            y = leaky_relu(&y, 0.2)?;
            if stage.dropout {
                y = nn::dropout(&y, self.dropout, ctx)?;
            }
            prev = y;
        }
        Ok(prev)
    }
}

/// Named intermediate results of one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub texture_feature: Tensor,
    pub structure_feature: Tensor,
    pub fused: Tensor,
    pub image: Tensor,
}

pub struct Generator {
    config: GeneratorConfig,
    plan: ArchitecturePlan,
    store: ParamStore,
    texture_encoder: Encoder,
    structure_encoder: Encoder,
    texture_decoder: Decoder,
    structure_decoder: Decoder,
    bigff: BiGff,
    cfa: Cfa,
    head: Conv2d,
    heads: FeatureHeads,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let mut store = ParamStore::new(dtype, seed);
        let s = &mut store;
        let texture_encoder = Encoder::new(s, "texture_encoder", &plan.texture_encoder)?;
        let structure_encoder = Encoder::new(s, "structure_encoder", &plan.structure_encoder)?;
        let texture_decoder = Decoder::new(s, "texture_decoder", &plan.texture_decoder, config.dropout)?;
        let structure_decoder =
            Decoder::new(s, "structure_decoder", &plan.structure_decoder, config.dropout)?;
        let f = plan.feature_channels;
        let bigff = BiGff::new(s, "bigff", f, config.cross_gating)?;
        let cfa = Cfa::new(s, "cfa", plan.fused_channels, f, config.cfa_patch, config.cfa_memory_budget)?;
        let head = Conv2d::new(s, "head", f, 3, 3, 1, 1)?;
        let heads = FeatureHeads::new(s, "aux", f)?;
        let g = Self {
            config,
            plan,
            store,
            texture_encoder,
            structure_encoder,
            texture_decoder,
            structure_decoder,
            bigff,
            cfa,
            head,
            heads,
        };
        g.check_against_plan()?;
        Ok(g)
    }

    /// Confirms every built weight has the shape the plan dictates.
    fn check_against_plan(&self) -> Result<()> {
        let expect = |name: String, dims: &[usize]| -> Result<()> {
            let v = self
                .store
                .get(&name)
                .ok_or_else(|| Error::shape(format!("layer {name} was not built")))?;
            if v.dims() != dims {
                return Err(Error::shape(format!(
                    "layer {name} has shape {:?}, plan says {dims:?}",
                    v.dims()
                )));
            }
            Ok(())
        };
        for (enc, specs) in [
            ("texture_encoder", &self.plan.texture_encoder),
            ("structure_encoder", &self.plan.structure_encoder),
        ] {
            for (i, s) in specs.iter().enumerate() {
                expect(
                    format!("{enc}.pconv{}.weight", i + 1),
                    &[s.out_channels, s.in_channels, s.kernel, s.kernel],
                )?;
            }
        }
        for (dec, stages) in [
            ("texture_decoder", &self.plan.texture_decoder),
            ("structure_decoder", &self.plan.structure_decoder),
        ] {
            let last = stages.len() - 1;
            for (i, s) in stages.iter().enumerate() {
                let name = if i == last {
                    format!("{dec}.feature.weight")
                } else {
                    format!("{dec}.conv{}.weight", i + 1)
                };
                expect(name, &[s.out_channels, s.concat_channels, 3, 3])?;
                if s.upsampled_channels + s.skip_channels != s.concat_channels {
                    return Err(Error::shape(format!("{dec} stage {i} concat arithmetic")));
                }
            }
            if stages[last].out_channels != self.plan.feature_channels {
                return Err(Error::shape(format!("{dec} feature width")));
            }
        }
        let f = self.plan.feature_channels;
        expect("bigff.gate_s.weight".into(), &[f, 2 * f, 3, 3])?;
        expect("cfa.pre1.weight".into(), &[f, 2 * f, 3, 3])?;
        expect("cfa.post1.weight".into(), &[f, 3 * f, 3, 3])?;
        expect("head.weight".into(), &[3, f, 3, 3])?;
        Ok(())
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn plan(&self) -> &ArchitecturePlan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn heads(&self) -> &FeatureHeads {
        &self.heads
    }

    pub fn bigff(&self) -> &BiGff {
        &self.bigff
    }

    pub fn cfa(&self) -> &Cfa {
        &self.cfa
    }

    pub fn encode_texture(&self, x: &MaskedFeature, ctx: &Ctx) -> Result<EncoderStack> {
        self.texture_encoder.forward(x, ctx)
    }

    pub fn encode_structure(&self, x: &MaskedFeature, ctx: &Ctx) -> Result<EncoderStack> {
        self.structure_encoder.forward(x, ctx)
    }

    /// `structure` is `N x 2 x H x W` (edge, gray), `texture` is `N x 3 x H x W`.
    pub fn forward(&self, structure: &Tensor, texture: &Tensor, ctx: &mut Ctx) -> Result<GeneratorOutput> {
        let s = MaskedFeature::dense(structure.to_dtype(self.dtype())?)?;
        let t = MaskedFeature::dense(texture.to_dtype(self.dtype())?)?;
        self.forward_masked(&s, &t, ctx)
    }

    pub fn forward_masked(
        &self,
        structure: &MaskedFeature,
        texture: &MaskedFeature,
        ctx: &mut Ctx,
    ) -> Result<GeneratorOutput> {
        let (sh, sw) = structure.spatial();
        if (sh, sw) != texture.spatial() || sh != sw {
            return Err(Error::shape(format!(
                "structure {:?} and texture {:?} inputs must be equal squares",
                structure.values.dims(),
                texture.values.dims()
            )));
        }
        check_input_size(sh, self.config.levels)?;
        if structure.channels() != STRUCTURE_INPUT_CHANNELS || texture.channels() != TEXTURE_INPUT_CHANNELS {
            return Err(Error::shape(format!(
                "expected {STRUCTURE_INPUT_CHANNELS}-channel structure and {TEXTURE_INPUT_CHANNELS}-channel texture inputs, got {} and {}",
                structure.channels(),
                texture.channels()
            )));
        }
        let ts = self.encode_texture(texture, ctx)?;
        let ss = self.encode_structure(structure, ctx)?;
        let texture_feature =
            self.texture_decoder
                .forward(&ts, &ss, &texture.values, &structure.values, ctx)?;
        let structure_feature =
            self.structure_decoder
                .forward(&ts, &ss, &texture.values, &structure.values, ctx)?;
        let fused = self.bigff.forward(&structure_feature, &texture_feature)?;
        let refined = self.cfa.forward(&fused, ctx)?;
        let image = self.head.forward(&refined)?.tanh()?;
        Ok(GeneratorOutput {
            texture_feature,
            structure_feature,
            fused,
            image,
        })
    }

    /// Evaluation-mode translation of one triplet.
    pub fn generate(&self, triplet: &SampleTriplet) -> Result<ImageTile> {
        let dev = Device::Cpu;
        let s = triplet.structure.to_tensor(self.dtype(), &dev)?;
        let t = triplet.texture.to_tensor(self.dtype(), &dev)?;
        let out = self.forward(&s, &t, &mut Ctx::eval())?;
        ImageTile::from_tensor(&out.image, ValueRange::SIGNED_UNIT)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "generator".to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        self.store.save(path, &meta)
    }

    /// Rebuilds the architecture recorded in the checkpoint and loads it.
    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = nn::read_checkpoint(path)?;
        let config = checkpoint_config::<GeneratorConfig>(&meta, "generator", path)?;
        let g = Self::new(config, DType::F32, 0)?;
        g.store.load_from(&tensors)?;
        Ok(g)
    }

    /// Loads a checkpoint, failing unless it matches `expected`.
    pub fn load_expecting(path: &Path, expected: &GeneratorConfig) -> Result<Self> {
        let g = Self::load(path)?;
        if g.config.input_size != expected.input_size
            || g.config.levels != expected.levels
            || g.config.width_divisor != expected.width_divisor
        {
            return Err(Error::Checkpoint(format!(
                "{} holds a generator for {:?}, configuration asks for {:?}",
                path.display(),
                g.config,
                expected
            )));
        }
        Ok(g)
    }
}

pub(crate) fn checkpoint_config<T: serde::de::DeserializeOwned>(
    meta: &BTreeMap<String, String>,
    kind: &str,
    path: &Path,
) -> Result<T> {
    match meta.get("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{} is not a {kind} checkpoint (kind {:?})",
                path.display(),
                other
            )))
        }
    }
    let cfg = meta
        .get("config")
        .ok_or_else(|| Error::Checkpoint(format!("{} lacks an architecture record", path.display())))?;
    Ok(serde_json::from_str(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            input_size: 16,
            levels: 3,
            width_divisor: 16,
            ..GeneratorConfig::reference()
        }
    }

    #[test]
    fn reference_encoder_chain() {
        let plan = GeneratorConfig::reference().plan().unwrap();
        let ch: Vec<_> = plan.texture_encoder.iter().map(|s| s.out_channels).collect();
        let sz: Vec<_> = plan.texture_encoder.iter().map(|s| s.out_size).collect();
        assert_eq!(ch, [64, 128, 256, 512, 512, 512, 512]);
        assert_eq!(sz, [128, 64, 32, 16, 8, 4, 2]);
        let bn: Vec<_> = plan.texture_encoder.iter().map(|s| s.batch_norm).collect();
        assert_eq!(bn, [false, true, true, true, true, true, false]);
        assert_eq!(plan.structure_encoder[0].in_channels, 2);
    }

    #[test]
    fn reference_decoder_concats() {
        let plan = GeneratorConfig::reference().plan().unwrap();
        let cat: Vec<_> = plan
            .texture_decoder
            .iter()
            .map(|s| (s.upsampled_channels, s.skip_channels))
            .collect();
        assert_eq!(
            cat,
            [(512, 512), (512, 512), (512, 512), (512, 256), (256, 128), (128, 64), (64, 3)]
        );
        let sizes: Vec<_> = plan.texture_decoder.iter().map(|s| s.size).collect();
        assert_eq!(sizes, [4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(plan.texture_decoder[0].upsampled, Source::StructureEncoder(7));
        assert_eq!(plan.texture_decoder[0].skip, Source::TextureEncoder(6));
        assert_eq!(plan.structure_decoder[0].upsampled, Source::TextureEncoder(7));
        assert_eq!(plan.structure_decoder[0].skip, Source::StructureEncoder(6));
        assert_eq!(plan.structure_decoder[1].skip, Source::TextureEncoder(5));
        assert_eq!(plan.structure_decoder[6].concat_channels, 66);
        assert_eq!(plan.texture_decoder[6].concat_channels, 67);
    }

    #[test]
    fn rejects_short_stride_chain() {
        let cfg = GeneratorConfig {
            input_size: 64,
            levels: 7,
            ..GeneratorConfig::reference()
        };
        assert!(cfg.plan().is_err());
        assert!(GeneratorConfig::toy().plan().is_ok());
    }

    #[test]
    fn forward_shapes_and_range() {
        let g = Generator::new(small(), DType::F32, 1).unwrap();
        let dev = Device::Cpu;
        let s = Tensor::randn(0f32, 1.0, (2, 2, 16, 16), &dev).unwrap();
        let t = Tensor::randn(0f32, 1.0, (2, 3, 16, 16), &dev).unwrap();
        let mut ctx = Ctx::train(rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let out = g.forward(&s, &t, &mut ctx).unwrap();
        assert_eq!(out.image.dims(), &[2, 3, 16, 16]);
        assert_eq!(out.texture_feature.dims(), &[2, 4, 16, 16]);
        assert_eq!(out.fused.dims(), &[2, 8, 16, 16]);
        let m = out.image.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m <= 1.0);
    }

    #[test]
    fn eval_is_deterministic() {
        let g = Generator::new(small(), DType::F32, 2).unwrap();
        let dev = Device::Cpu;
        let s = Tensor::randn(0f32, 1.0, (1, 2, 16, 16), &dev).unwrap();
        let t = Tensor::randn(0f32, 1.0, (1, 3, 16, 16), &dev).unwrap();
        let a = g.forward(&s, &t, &mut Ctx::eval()).unwrap().image;
        let b = g.forward(&s, &t, &mut Ctx::eval()).unwrap().image;
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn wrong_channels_rejected() {
        let g = Generator::new(small(), DType::F32, 2).unwrap();
        let dev = Device::Cpu;
        let s = Tensor::zeros((1, 3, 16, 16), DType::F32, &dev).unwrap();
        let t = Tensor::zeros((1, 3, 16, 16), DType::F32, &dev).unwrap();
        assert!(g.forward(&s, &t, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.safetensors");
        let g = Generator::new(small(), DType::F32, 3).unwrap();
        g.save(&p).unwrap();
        let h = Generator::load(&p).unwrap();
        assert_eq!(g.store().digest().unwrap(), h.store().digest().unwrap());
        let other = GeneratorConfig { width_divisor: 8, ..small() };
        assert!(Generator::load_expecting(&p, &other).is_err());
    }
}
