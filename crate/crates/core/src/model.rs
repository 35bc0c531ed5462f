//! The triplet network.
//!
//! ```text
//!  S(t-k) ─┐                     ┌─ M21 = softmax(M2·M1ᵀ/√d)·M1 ─┐
//!  S(t)   ─┼─ shared encoder ─ M1,M2,M3                          ├─ concat[M21+M2, M23+M2] = MT
//!  S(t+k) ─┘                     └─ M23 = softmax(M2·M3ᵀ/√d)·M3 ─┘
//!
//!  MT ─ 3 deconvolutions ─ Md ─ concat V_t ─┬─ heatmap head (sigmoid)
//!                                           └─ offset head
//!  MT ─ attention pool ─ 1×1 reduction ─ pooled (pulled to the image embedding)
//! ```
//!
//! `V_t` is the condition word's text embedding mapped to a one-channel
//! plane at decoder resolution.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Condition, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::synthdata::SliceTriplet;

/// How the text embedding is turned into a spatial plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextPlane {
    /// Learned linear map `D → H'·W'`.
    #[default]
    Linear,
    /// Repeat the embedding cyclically to `H'·W'` values (no parameters).
    Tile,
}

/// On/off switches for the three contributions, used by ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    /// Cross-attention fusion; off = concat + 1×1 channel reduction.
    pub tvp: bool,
    /// Text plane + knowledge alignment; off = neither.
    pub ctg: bool,
    /// Slope-aware heatmap weighting; off = plain focal loss.
    pub sal: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::ALL_ON
    }
}

impl Components {
    pub const ALL_ON: Components = Components {
        tvp: true,
        ctg: true,
        sal: true,
    };

    /// The 2³ on/off grid, all-off first.
    pub fn grid() -> Vec<Components> {
        (0..8u8)
            .map(|b| Components {
                tvp: b & 1 != 0,
                ctg: b & 2 != 0,
                sal: b & 4 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let on = [(self.tvp, "TVP"), (self.ctg, "CTG"), (self.sal, "SAL")]
            .iter()
            .filter(|(b, _)| *b)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each encoder stage; the last one is the feature width Ĉ.
    pub encoder_widths: Vec<usize>,
    /// Stride of each encoder stage.
    pub encoder_strides: Vec<usize>,
    pub decoder_channels: usize,
    /// Upsampling factor of each of the three deconvolutions (1 or 2).
    pub decoder_strides: [usize; 3],
    pub head_channels: usize,
    /// Text/image embedding width D.
    pub embed_dim: usize,
    /// Output down-sampling factor.
    pub g: usize,
    /// Triplet sampling interval.
    pub k: usize,
    pub text_plane: TextPlane,
    pub components: Components,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            encoder_widths: vec![32, 64, 64, 64],
            encoder_strides: vec![2, 2, 2, 1],
            decoder_channels: 64,
            decoder_strides: [2, 1, 1],
            head_channels: 32,
            embed_dim: 512,
            g: 4,
            k: crate::synthdata::DEFAULT_K,
            text_plane: TextPlane::Linear,
            components: Components::ALL_ON,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small widths for quick CPU experiments at 64×64.
    pub fn desk() -> Self {
        Self {
            encoder_widths: vec![16, 32, 32, 32],
            decoder_channels: 32,
            head_channels: 16,
            embed_dim: 64,
            ..Self::default()
        }
    }

    /// Ĉ.
    pub fn feature_channels(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn encoder_stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn decoder_upsampling(&self) -> usize {
        self.decoder_strides.iter().product()
    }

    /// `(H/g, W/g)`.
    pub fn output_shape(&self) -> (usize, usize) {
        (self.input_height / self.g, self.input_width / self.g)
    }

    /// Spatial size of the encoder features.
    pub fn feature_shape(&self) -> (usize, usize) {
        let s = self.encoder_stride();
        (self.input_height / s, self.input_width / s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.g != 4 {
            return bad(format!("down-sampling factor must be 4, got {}", self.g));
        }
        if self.k == 0 {
            return bad("sampling interval k must be at least 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.encoder_strides.len() {
            return bad("encoder widths and strides must be non-empty and of equal length".into());
        }
        if self.encoder_widths.iter().chain([&self.decoder_channels, &self.head_channels]).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.encoder_strides.iter().any(|&s| s != 1 && s != 2) || self.decoder_strides.iter().any(|&s| s != 1 && s != 2) {
            return bad("strides must be 1 or 2".into());
        }
        let es = self.encoder_stride();
        if es != self.g * self.decoder_upsampling() {
            return bad(format!(
                "encoder stride {es} / decoder upsampling {} must equal g = {}",
                self.decoder_upsampling(),
                self.g
            ));
        }
        if self.input_height == 0 || self.input_width == 0 || self.input_height % es != 0 || self.input_width % es != 0 {
            return bad(format!(
                "input {}x{} must be divisible by the encoder stride {es}",
                self.input_height, self.input_width
            ));
        }
        Ok(())
    }
}

/// Named trainable tensors with seeded initialisation.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
    device: Device,
}

impl ParamStore {
    fn new(device: Device) -> Self {
        Self {
            names: Vec::new(),
            vars: Vec::new(),
            device,
        }
    }

    fn add(&mut self, name: String, shape: &[usize], values: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.names.push(name);
        self.vars.push(v);
        Ok(out)
    }

    /// Uniform `±sqrt(6 / fan_in)` (He) initialisation.
    fn he(&mut self, rng: &mut ChaCha8Rng, name: String, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let vals = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
        self.add(name, shape, vals)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, shape, vec![v; n])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.names.iter().map(String::as_str).zip(&self.vars)
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

fn conv(
    ps: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    bias: f32,
) -> Result<Conv2d> {
    let w = ps.he(rng, format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel)?;
    let b = ps.constant(format!("{name}.bias"), &[cout], bias)?;
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

fn deconv(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Result<ConvTranspose2d> {
    // stride 2: k4/p1 doubles the size; stride 1: k3/p1 keeps it.
    let kernel = if stride == 2 { 4 } else { 3 };
    let w = ps.he(rng, format!("{name}.weight"), &[cin, cout, kernel, kernel], cin * kernel * kernel / (stride * stride))?;
    let b = ps.constant(format!("{name}.bias"), &[cout], 0.0)?;
    let cfg = ConvTranspose2dConfig {
        padding: 1,
        output_padding: 0,
        stride,
        dilation: 1,
    };
    Ok(ConvTranspose2d::new(w, Some(b), cfg))
}

fn linear(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Result<Linear> {
    let bound = (1.0 / din as f64).sqrt();
    let n = din * dout;
    let w = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    let w = ps.add(format!("{name}.weight"), &[dout, din], w)?;
    let b = ps.constant(format!("{name}.bias"), &[dout], 0.0)?;
    Ok(Linear::new(w, Some(b)))
}

/// A per-slice feature extractor. Implementations must map
/// `(batch, 1, H, W)` to `(batch, out_channels, H/stride, W/stride)`.
pub trait Backbone: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn out_channels(&self) -> usize;
    fn stride(&self) -> usize;
}

/// Plain strided CNN: one 3×3 conv + ReLU per stage.
pub struct ConvBackbone {
    stages: Vec<Conv2d>,
    out_channels: usize,
    stride: usize,
}

impl ConvBackbone {
    fn new(cfg: &ModelConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut cin = 1;
        let mut stages = Vec::new();
        for (i, (&w, &s)) in cfg.encoder_widths.iter().zip(&cfg.encoder_strides).enumerate() {
            stages.push(conv(ps, rng, &format!("encoder.{i}"), cin, w, 3, s, 0.0)?);
            cin = w;
        }
        Ok(Self {
            stages,
            out_channels: cin,
            stride: cfg.encoder_stride(),
        })
    }
}

impl Backbone for ConvBackbone {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.forward(&h)?.relu()?;
        }
        Ok(h)
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn stride(&self) -> usize {
        self.stride
    }
}

/// `(batch, C, h, w)` → `(batch, h·w, C)`.
fn to_tokens(m: &Tensor) -> Result<Tensor> {
    Ok(m.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `(batch, h·w, C)` → `(batch, C, h, w)`.
fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Row-softmax attention weights `softmax(Q·Kᵀ/√d)` for token tensors
/// `(batch, N, d)`, where `d` is the key feature width.
pub fn attention_weights(query: &Tensor, key: &Tensor) -> Result<Tensor> {
    let d = key.dim(D::Minus1)? as f64;
    let logits = query.matmul(&key.transpose(1, 2)?.contiguous()?)?.affine(1.0 / d.sqrt(), 0.0)?;
    Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
}

/// Texture-variation fusion of three `(batch, C, h, w)` feature maps:
/// the middle slice attends to each neighbour, the attended features get a
/// residual from the middle slice, and the two results are concatenated
/// along channels, giving `(batch, 2C, h, w)`.
pub fn tvp_fuse(m1: &Tensor, m2: &Tensor, m3: &Tensor) -> Result<Tensor> {
    if m1.dims() != m2.dims() || m3.dims() != m2.dims() {
        return Err(Error::ShapeMismatch(format!(
            "fusion inputs {:?}, {:?}, {:?}",
            m1.dims(),
            m2.dims(),
            m3.dims()
        )));
    }
    let (_, _, h, w) = m2.dims4()?;
    let (t1, t2, t3) = (to_tokens(m1)?, to_tokens(m2)?, to_tokens(m3)?);
    let m21 = attention_weights(&t2, &t1)?.matmul(&t1)?;
    let m23 = attention_weights(&t2, &t3)?.matmul(&t3)?;
    let fused = Tensor::cat(&[m21.add(&t2)?, m23.add(&t2)?], 2)?;
    from_tokens(&fused, h, w)
}

/// Network outputs for a batch.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(batch, 1, H/g, W/g)`, values in `(0, 1)`.
    pub heatmap: Tensor,
    /// `(batch, 2, H/g, W/g)`, sub-cell x/y offsets.
    pub offsets: Tensor,
    /// `(batch, D)` pooled fused feature.
    pub pooled: Tensor,
}

pub struct TripletNet {
    config: ModelConfig,
    params: ParamStore,
    backbone: Box<dyn Backbone>,
    reduce: Option<Conv2d>,
    decoder: Vec<ConvTranspose2d>,
    text_plane: Option<Linear>,
    heat_hidden: Conv2d,
    heat_out: Conv2d,
    off_hidden: Conv2d,
    off_out: Conv2d,
    pool_query: Tensor,
    pool_reduce: Linear,
}

/// Heatmap probabilities are kept away from 0 and 1 so the focal loss stays finite.
const PROB_CLAMP: f64 = 1e-4;

impl TripletNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new(Device::Cpu);
        let backbone = ConvBackbone::new(&config, &mut ps, &mut rng)?;
        let c = backbone.out_channels();
        let reduce = if config.components.tvp {
            None
        } else {
            Some(conv(&mut ps, &mut rng, "fusion.reduce", 3 * c, 2 * c, 1, 1, 0.0)?)
        };
        let mut decoder = Vec::new();
        let mut cin = 2 * c;
        for (i, &s) in config.decoder_strides.iter().enumerate() {
            decoder.push(deconv(&mut ps, &mut rng, &format!("decoder.{i}"), cin, config.decoder_channels, s)?);
            cin = config.decoder_channels;
        }
        let (oh, ow) = config.output_shape();
        let text_plane = if config.components.ctg && config.text_plane == TextPlane::Linear {
            Some(linear(&mut ps, &mut rng, "ctg.text_plane", config.embed_dim, oh * ow)?)
        } else {
            None
        };
        let head_in = config.decoder_channels + usize::from(config.components.ctg);
        let hc = config.head_channels;
        let heat_hidden = conv(&mut ps, &mut rng, "head.heatmap.0", head_in, hc, 3, 1, 0.0)?;
        let heat_out = conv(&mut ps, &mut rng, "head.heatmap.1", hc, 1, 1, 1, -2.19)?;
        let off_hidden = conv(&mut ps, &mut rng, "head.offset.0", head_in, hc, 3, 1, 0.0)?;
        let off_out = conv(&mut ps, &mut rng, "head.offset.1", hc, 2, 1, 1, 0.0)?;
        let qb = 1.0 / ((2 * c) as f64).sqrt();
        let q = (0..2 * c).map(|_| rng.random_range(-qb..qb) as f32).collect();
        let pool_query = ps.add("pool.query".into(), &[2 * c], q)?;
        let pool_reduce = linear(&mut ps, &mut rng, "pool.reduce", 2 * c, config.embed_dim)?;
        Ok(Self {
            config,
            params: ps,
            backbone: Box::new(backbone),
            reduce,
            decoder,
            text_plane,
            heat_hidden,
            heat_out,
            off_hidden,
            off_out,
            pool_query,
            pool_reduce,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars().to_vec()
    }

    /// Number of encoder weights (one encoder, shared by all three slices).
    pub fn encoder_param_count(&self) -> usize {
        self.params.count("encoder.")
    }

    /// Runs the shared encoder over `(batch, 3, H, W)` input, returning the
    /// three per-slice feature maps.
    pub fn encode_triplet(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, s, h, w) = x.dims4()?;
        if s != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 slices, got {s}")));
        }
        let feats = self.backbone.forward(&x.reshape((b * 3, 1, h, w))?)?;
        let (_, c, fh, fw) = feats.dims4()?;
        let feats = feats.reshape((b, 3, c, fh, fw))?;
        let pick = |i: usize| -> Result<Tensor> { Ok(feats.narrow(1, i, 1)?.squeeze(1)?.contiguous()?) };
        Ok((pick(0)?, pick(1)?, pick(2)?))
    }

    /// Fuses the triplet features; with TVP disabled, concatenation + 1×1 reduction.
    pub fn fuse(&self, m1: &Tensor, m2: &Tensor, m3: &Tensor) -> Result<Tensor> {
        match &self.reduce {
            None => tvp_fuse(m1, m2, m3),
            Some(r) => Ok(r.forward(&Tensor::cat(&[m1, m2, m3], 1)?)?),
        }
    }

    pub fn decode_features(&self, fused: &Tensor) -> Result<Tensor> {
        decode_with(&self.decoder, fused)
    }

    /// Text embeddings `(batch, D)` → planes `(batch, 1, H', W')`.
    pub fn text_plane(&self, text: &Tensor) -> Result<Tensor> {
        let (oh, ow) = self.config.output_shape();
        let (b, d) = text.dims2()?;
        let flat = match (&self.text_plane, self.config.text_plane) {
            (Some(l), _) => l.forward(text)?,
            (None, _) => {
                let reps = (oh * ow).div_ceil(d);
                let tiled = Tensor::cat(&vec![text.clone(); reps], 1)?;
                tiled.narrow(1, 0, oh * ow)?
            }
        };
        Ok(flat.reshape((b, 1, oh, ow))?)
    }

    /// Appends the text plane to the decoder output.
    pub fn ctg_condition(&self, decoded: &Tensor, text: &Tensor) -> Result<Tensor> {
        let plane = self.text_plane(text)?;
        if plane.dims()[2..] != decoded.dims()[2..] {
            return Err(Error::ShapeMismatch(format!(
                "text plane {:?} vs decoder output {:?}",
                plane.dims(),
                decoded.dims()
            )));
        }
        Ok(Tensor::cat(&[decoded, &plane], 1)?)
    }

    /// Single-query attention pooling over positions, then channel reduction to D.
    pub fn attention_pool(&self, fused: &Tensor) -> Result<Tensor> {
        let tokens = to_tokens(fused)?;
        let (b, _, c) = tokens.dims3()?;
        let q = self.pool_query.reshape((1, c, 1))?.broadcast_as((b, c, 1))?.contiguous()?;
        let logits = tokens.matmul(&q)?.squeeze(2)?.affine(1.0 / (c as f64).sqrt(), 0.0)?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let pooled = attn.unsqueeze(1)?.matmul(&tokens)?.squeeze(1)?;
        Ok(self.pool_reduce.forward(&pooled)?)
    }

    /// Full forward pass. `x` is `(batch, 3, H, W)`, `text` is `(batch, D)`
    /// (ignored when CTG is disabled).
    pub fn forward(&self, x: &Tensor, text: &Tensor) -> Result<ModelOutput> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) != (self.config.input_height, self.config.input_width) {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w}, model expects {}x{}",
                self.config.input_height, self.config.input_width
            )));
        }
        let (m1, m2, m3) = self.encode_triplet(x)?;
        let fused = self.fuse(&m1, &m2, &m3)?;
        let decoded = self.decode_features(&fused)?;
        let feat = if self.config.components.ctg {
            self.ctg_condition(&decoded, text)?
        } else {
            decoded
        };
        let heat = self.heat_out.forward(&self.heat_hidden.forward(&feat)?.relu()?)?;
        let heatmap = candle_nn::ops::sigmoid(&heat)?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let offsets = self.off_out.forward(&self.off_hidden.forward(&feat)?.relu()?)?;
        let pooled = self.attention_pool(&fused)?;
        Ok(ModelOutput {
            heatmap,
            offsets,
            pooled,
        })
    }

    /// Stacks triplets into `(batch, 3, H, W)` and their condition
    /// embeddings into `(batch, D)`.
    pub fn batch_inputs(&self, triplets: &[&SliceTriplet], provider: &dyn EmbeddingProvider) -> Result<(Tensor, Tensor)> {
        let mut cache: HashMap<Condition, Vec<f32>> = HashMap::new();
        let mut text = Vec::with_capacity(triplets.len() * self.config.embed_dim);
        for t in triplets {
            if !cache.contains_key(&t.condition) {
                cache.insert(t.condition, provider.embed_text(t.condition.as_str())?);
            }
            let e = &cache[&t.condition];
            if e.len() != self.config.embed_dim {
                return Err(Error::InvalidConfig(format!(
                    "text embedding has {} dims, model expects {}",
                    e.len(),
                    self.config.embed_dim
                )));
            }
            text.extend_from_slice(e);
        }
        Ok((stack_triplets(triplets)?, Tensor::from_vec(text, (triplets.len(), self.config.embed_dim), &Device::Cpu)?))
    }

    /// Forward pass for one triplet under an explicit condition word.
    pub fn forward_one(&self, triplet: &SliceTriplet, condition: &str, provider: &dyn EmbeddingProvider) -> Result<ModelOutput> {
        let cond: Condition = condition.parse()?;
        let t = SliceTriplet {
            condition: cond,
            ..triplet.clone()
        };
        let (x, text) = self.batch_inputs(&[&t], provider)?;
        self.forward(&x, &text)
    }

    /// Writes a checkpoint (safetensors with the config in its metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.config)?);
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
            .collect();
        Ok(safetensors::serialize(tensors, Some(meta))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Rebuilds a model from checkpoint bytes, validating the format tag,
    /// version, embedded config and every parameter's shape.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let st = safetensors::SafeTensors::deserialize(bytes)?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let bad = |m: String| Error::InvalidData(format!("checkpoint: {m}"));
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("missing or foreign format tag".into()));
        }
        if meta.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
            return Err(bad(format!("unsupported version {:?}", meta.get("version"))));
        }
        let cfg: ModelConfig = serde_json::from_str(meta.get("model_config").ok_or_else(|| bad("no model config".into()))?)?;
        cfg.validate()?;
        if cfg.input_height * cfg.input_width > MAX_CHECKPOINT_PIXELS || cfg.embed_dim > MAX_CHECKPOINT_EMBED {
            return Err(bad("model config exceeds supported size".into()));
        }
        let model = TripletNet::new(cfg)?;
        let names = st.names();
        if names.len() != model.params.names().len() {
            return Err(bad(format!(
                "{} tensors stored, model has {}",
                names.len(),
                model.params.names().len()
            )));
        }
        for (name, var) in model.params.iter() {
            let view = st.tensor(name).map_err(|_| bad(format!("missing tensor {name}")))?;
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(bad(format!("tensor {name} is {:?}, expected F32", view.dtype())));
            }
            if view.shape() != var.dims() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    view.shape(),
                    var.dims()
                )));
            }
            let vals: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            var.set(&Tensor::from_vec(vals, view.shape(), &Device::Cpu)?)?;
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "implant-locator";
const CHECKPOINT_VERSION: &str = "1";
const MAX_CHECKPOINT_PIXELS: usize = 1 << 22;
const MAX_CHECKPOINT_EMBED: usize = 1 << 14;

fn decode_with(layers: &[ConvTranspose2d], fused: &Tensor) -> Result<Tensor> {
    let mut h = fused.clone();
    for l in layers {
        h = l.forward(&h)?.relu()?;
    }
    Ok(h)
}

/// Standalone three-stage deconvolution decoder, for shape experiments.
pub struct Decoder {
    layers: Vec<ConvTranspose2d>,
    params: ParamStore,
}

impl Decoder {
    pub fn new(in_channels: usize, channels: usize, strides: [usize; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(Device::Cpu);
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (i, &s) in strides.iter().enumerate() {
            layers.push(deconv(&mut ps, &mut rng, &format!("decoder.{i}"), cin, channels, s)?);
            cin = channels;
        }
        Ok(Self { layers, params: ps })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        decode_with(&self.layers, x)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

/// `(batch, 3, H, W)` f32 tensor from triplets.
pub fn stack_triplets(triplets: &[&SliceTriplet]) -> Result<Tensor> {
    let first = triplets
        .first()
        .ok_or_else(|| Error::InvalidData("empty batch".into()))?
        .shape();
    let mut data = Vec::with_capacity(triplets.len() * 3 * first.0 * first.1);
    for t in triplets {
        if t.slices.iter().any(|s| s.shape() != first) {
            return Err(Error::ShapeMismatch(format!(
                "triplet of patient {} slice {} does not match batch shape {:?}",
                t.patient, t.t, first
            )));
        }
        for s in &t.slices {
            data.extend_from_slice(s.pixels());
        }
    }
    Ok(Tensor::from_vec(data, (triplets.len(), 3, first.0, first.1), &Device::Cpu)?)
}

/// Converts `(rows, cols)` tensors to [`crate::heatmap::Grid`]s.
pub fn tensor_to_grid(t: &Tensor) -> Result<crate::heatmap::Grid> {
    let (r, c) = t.dims2()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    crate::heatmap::Grid::from_vec(r, c, v)
}
