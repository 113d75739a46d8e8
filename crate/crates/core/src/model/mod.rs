//! Detection decoder with per-layer morphology heads.
//!
//! Every decoder layer `i` produces hidden states `H⁽ⁱ⁾` of shape `[Q, d]` per
//! image. Three head families read the same `H⁽ⁱ⁾`: a three-layer box MLP, a
//! linear species classifier and one linear classifier per attribute. Heads are
//! owned by their layer, so a model with N layers carries N×5 morphology heads.
//!
//! Queries carry a learned content vector and a learned anchor box. Each layer
//! refines the box in logit space and the refined box becomes the next layer's
//! reference; the reference also biases cross-attention towards its own region.

mod checkpoint;
mod decode;
pub mod nn;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Attribute, AttributeVocabulary, Species};
use nn::{Conv2d, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use decode::{decode_predictions, AttributeCall, Detection, Explanation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_queries: usize,
    pub num_decoder_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_species: usize,
    /// Output channels of the four backbone stages.
    pub backbone_channels: [usize; 4],
    pub image_width: usize,
    pub image_height: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_queries: 30,
            num_decoder_layers: 3,
            num_heads: 4,
            ffn_dim: 128,
            num_species: Species::COUNT,
            backbone_channels: [16, 32, 64, 64],
            image_width: 128,
            image_height: 128,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_queries", self.num_queries),
            ("num_decoder_layers", self.num_decoder_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.num_species != Species::COUNT {
            return Err(Error::Config(format!(
                "model.num_species must be {}, got {}",
                Species::COUNT,
                self.num_species
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden_dim {} is not divisible by model.num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % 8 != 0 {
            return Err(Error::Config("model.hidden_dim must be a multiple of 8".into()));
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if self.image_width % 8 != 0 || self.image_height % 8 != 0 || self.image_width == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.image_width, self.image_height
            )));
        }
        Ok(())
    }

    /// Side lengths of the memory feature map (stride 8).
    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_height / 8, self.image_width / 8)
    }
}

/// One decoder layer's outputs for a batch.
#[derive(Debug, Clone)]
pub struct LayerPredictions {
    /// [B, Q, 4] normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// [B, Q, C_det] per-species logits.
    pub class_logits: Tensor,
    /// One [B, Q, C_m] block per attribute, in attribute order. Empty when the
    /// morphology heads were skipped.
    pub morph_logits: Vec<Tensor>,
}

impl LayerPredictions {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.boxes.dim(0)?)
    }

    pub fn num_queries(&self) -> Result<usize> {
        Ok(self.boxes.dim(1)?)
    }

    pub fn morph(&self, attribute: Attribute) -> &Tensor {
        &self.morph_logits[attribute.position()]
    }

    /// Restriction to sample `b`, keeping the batch dimension.
    pub fn sample(&self, b: usize) -> Result<LayerPredictions> {
        Ok(LayerPredictions {
            boxes: self.boxes.narrow(0, b, 1)?,
            class_logits: self.class_logits.narrow(0, b, 1)?,
            morph_logits: self
                .morph_logits
                .iter()
                .map(|t| t.narrow(0, b, 1))
                .collect::<candle_core::Result<_>>()?,
        })
    }

    /// Copies the predictions to host memory, one entry per image.
    pub fn to_host(&self) -> Result<Vec<QueryOutputs>> {
        let boxes = self.boxes.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let cls = self.class_logits.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let morph: Vec<Vec<Vec<Vec<f64>>>> = self
            .morph_logits
            .iter()
            .map(|t| t.to_dtype(DType::F64)?.to_vec3::<f64>())
            .collect::<candle_core::Result<_>>()?;
        Ok(boxes
            .into_iter()
            .zip(cls)
            .enumerate()
            .map(|(b, (bx, cl))| QueryOutputs {
                boxes: bx.into_iter().map(|v| [v[0], v[1], v[2], v[3]]).collect(),
                class_logits: cl,
                morph_logits: morph.iter().map(|m| m[b].clone()).collect(),
            })
            .collect())
    }
}

/// Host copy of one image's predictions at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutputs {
    /// Normalized `(cx, cy, w, h)` per query.
    pub boxes: Vec<[f64; 4]>,
    /// `[query][species]`.
    pub class_logits: Vec<Vec<f64>>,
    /// `[attribute][query][class]`.
    pub morph_logits: Vec<Vec<Vec<f64>>>,
}

impl QueryOutputs {
    pub fn num_queries(&self) -> usize {
        self.boxes.len()
    }
}

/// Predictions of the auxiliary noised-ground-truth queries, padded to the
/// largest instance count in the batch.
#[derive(Debug, Clone)]
pub struct DenoisingOutput {
    pub per_layer: Vec<LayerPredictions>,
    /// Ground truth each padded slot reconstructs, `None` for padding.
    pub slots: Vec<Vec<Option<usize>>>,
}

/// Inputs of the denoising branch: one noised box and label per ground truth.
#[derive(Debug, Clone)]
pub struct DenoisingQueries {
    /// Per image, `(noised cxcywh, noised label)` per ground truth.
    pub queries: Vec<Vec<([f64; 4], usize)>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// First to last decoder layer.
    pub per_layer: Vec<LayerPredictions>,
    pub denoising: Option<DenoisingOutput>,
}

impl ForwardOutput {
    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn last(&self) -> &LayerPredictions {
        self.per_layer.last().expect("at least one decoder layer")
    }

    pub fn batch_size(&self) -> Result<usize> {
        self.last().batch_size()
    }

    /// Number of morphology blocks emitted for each sample.
    pub fn morphology_blocks_per_sample(&self) -> usize {
        self.per_layer.iter().map(|l| l.morph_logits.len()).sum()
    }

    /// Splits a batched output into single-sample outputs.
    pub fn split_samples(&self) -> Result<Vec<ForwardOutput>> {
        (0..self.batch_size()?)
            .map(|b| {
                Ok(ForwardOutput {
                    per_layer: self
                        .per_layer
                        .iter()
                        .map(|l| l.sample(b))
                        .collect::<Result<_>>()?,
                    denoising: None,
                })
            })
            .collect()
    }

    /// Host copies indexed `[layer][image]`.
    pub fn to_host(&self) -> Result<Vec<Vec<QueryOutputs>>> {
        self.per_layer.iter().map(|l| l.to_host()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Skip the morphology heads (detector-only baseline for timing).
    pub ablate_morphology: bool,
    pub denoising: Option<&'a DenoisingQueries>,
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: Conv2d,
    stage2: Conv2d,
    stage3: Conv2d,
    stage4: Conv2d,
    project: Linear,
}

impl Backbone {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let [c1, c2, c3, c4] = cfg.backbone_channels;
        Ok(Self {
            stem: Conv2d::new(ps, "backbone.stem", 3, c1, 4, 4, 0)?,
            stage2: Conv2d::new(ps, "backbone.stage2", c1, c2, 3, 1, 1)?,
            stage3: Conv2d::new(ps, "backbone.stage3", c2, c3, 3, 2, 1)?,
            stage4: Conv2d::new(ps, "backbone.stage4", c3, c4, 3, 1, 1)?,
            project: Linear::new(ps, "backbone.project", c4, cfg.hidden_dim)?,
        })
    }

    /// NHWC images in `[0, 1]` to [B, K, d] tokens, K = (H/8)(W/8), row-major.
    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = ((images.permute((0, 3, 1, 2))?.contiguous()? - 0.5)? * 4.0)?;
        let x = self.stem.forward(&x)?.relu()?;
        let x = self.stage2.forward(&x)?.relu()?;
        let x = self.stage3.forward(&x)?.relu()?;
        let x = self.stage4.forward(&x)?.relu()?;
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        self.project.forward(&tokens)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
    ffn: Mlp,
    box_head: Mlp,
    class_head: Linear,
    morph_heads: Vec<Linear>,
}

impl DecoderLayer {
    fn new(
        ps: &mut ParamStore,
        cfg: &ModelConfig,
        vocab: &AttributeVocabulary,
        i: usize,
    ) -> Result<Self> {
        let d = cfg.hidden_dim;
        let p = format!("decoder.{i}");
        let prior = -(99.0f64).ln();
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            self_attn: MultiHeadAttention::new(ps, &format!("{p}.self_attn"), d, cfg.num_heads)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{p}.cross_attn"), d, cfg.num_heads)?,
            norm1: LayerNorm::new(ps, &format!("{p}.norm1"), d)?,
            norm2: LayerNorm::new(ps, &format!("{p}.norm2"), d)?,
            norm3: LayerNorm::new(ps, &format!("{p}.norm3"), d)?,
            ffn: Mlp::new(ps, &format!("{p}.ffn"), &[d, cfg.ffn_dim, d])?,
            box_head: Mlp::zero_last(ps, &format!("{p}.box_head"), &[d, d, d, 4])?,
            // species scores start near a 1% prior
            class_head: Linear::with_init(
                ps,
                &format!("{p}.class_head"),
                d,
                cfg.num_species,
                Init::Uniform(bound),
                Init::Const(prior),
            )?,
            morph_heads: Attribute::ALL
                .iter()
                .map(|a| {
                    Linear::new(
                        ps,
                        &format!("{p}.morph_head.{}", a.name()),
                        d,
                        vocab.cardinality(*a),
                    )
                })
                .collect::<Result<_>>()?,
        })
    }

    fn forward(
        &self,
        tgt: &Tensor,
        query_pos: &Tensor,
        memory: &Tensor,
        memory_keys: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor> {
        let q = (tgt + query_pos)?;
        let tgt = self
            .norm1
            .forward(&(tgt + self.self_attn.forward(&q, &q, tgt, None)?)?)?;
        let q = (&tgt + query_pos)?;
        let attended = self
            .cross_attn
            .forward(&q, memory_keys, memory, Some(bias))?;
        let tgt = self.norm2.forward(&(tgt + attended)?)?;
        self.norm3.forward(&(&tgt + self.ffn.forward(&tgt)?)?)
    }

    /// Applies the layer's heads to `hidden`; `ref_logits` is the reference box
    /// in logit space that the box head refines.
    fn heads(
        &self,
        hidden: &Tensor,
        ref_logits: &Tensor,
        ablate_morphology: bool,
    ) -> Result<(LayerPredictions, Tensor)> {
        let box_logits = (self.box_head.forward(hidden)? + ref_logits)?;
        let boxes = nn::sigmoid(&box_logits)?;
        let class_logits = self.class_head.forward(hidden)?;
        let morph_logits = if ablate_morphology {
            Vec::new()
        } else {
            self.morph_heads
                .iter()
                .map(|h| h.forward(hidden))
                .collect::<Result<_>>()?
        };
        Ok((
            LayerPredictions {
                boxes,
                class_logits,
                morph_logits,
            },
            box_logits,
        ))
    }
}

/// Sine features of values in `[0, 1]`: `[B, N, C]` to `[B, N, C·2·freqs]`.
fn sine_embed(x: &Tensor, freqs: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    let scales: Vec<f64> = (0..freqs)
        .map(|k| 2.0 * std::f64::consts::PI * 100f64.powf(k as f64 / freqs as f64))
        .collect();
    let scales = Tensor::from_vec(scales, (1, 1, 1, freqs), x.device())?.to_dtype(x.dtype())?;
    let phase = x.unsqueeze(D::Minus1)?.broadcast_mul(&scales)?;
    let feats = Tensor::cat(&[phase.sin()?, phase.cos()?], D::Minus1)?;
    Ok(feats.reshape((b, n, c * 2 * freqs))?)
}

/// Lower bound on the reference width/height used for the attention prior.
const MIN_PRIOR_EXTENT: f64 = 0.05;

pub struct Model {
    config: ModelConfig,
    vocab: AttributeVocabulary,
    params: ParamStore,
    backbone: Backbone,
    layers: Vec<DecoderLayer>,
    query_content: Tensor,
    anchor_logits: Tensor,
    query_pos: Mlp,
    label_embed: Tensor,
    /// [1, K, d] fixed positional features of the memory tokens.
    memory_pos: Tensor,
    /// [1, 1, K] token centre coordinates.
    token_x: Tensor,
    token_y: Tensor,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        vocab: AttributeVocabulary,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, device, config.init_seed);
        let d = config.hidden_dim;
        let q = config.num_queries;
        let backbone = Backbone::new(&mut ps, &config)?;
        let layers = (0..config.num_decoder_layers)
            .map(|i| DecoderLayer::new(&mut ps, &config, &vocab, i))
            .collect::<Result<_>>()?;
        let query_content = ps.param(
            "query.content",
            &[q, d],
            Init::Uniform(1.0 / (d as f64).sqrt()),
        )?;
        let anchor_logits = ps.param("query.anchor", &[q, 4], Init::Values(anchor_init(q)))?;
        let query_pos = Mlp::new(&mut ps, "query.pos", &[d, d, d])?;
        let label_embed = ps.param(
            "denoising.label_embed",
            &[config.num_species, d],
            Init::Uniform(1.0 / (d as f64).sqrt()),
        )?;

        let (fh, fw) = config.feature_size();
        let mut centers = Vec::with_capacity(fh * fw * 2);
        for y in 0..fh {
            for x in 0..fw {
                centers.push((x as f64 + 0.5) / fw as f64);
                centers.push((y as f64 + 0.5) / fh as f64);
            }
        }
        let centers = Tensor::from_vec(centers, (1, fh * fw, 2), device)?.to_dtype(dtype)?;
        let memory_pos = sine_embed(&centers, d / 4)?;
        let token_x = centers.narrow(2, 0, 1)?.reshape((1, 1, fh * fw))?;
        let token_y = centers.narrow(2, 1, 1)?.reshape((1, 1, fh * fw))?;

        Ok(Self {
            config,
            vocab,
            params: ps,
            backbone,
            layers,
            query_content,
            anchor_logits,
            query_pos,
            label_embed,
            memory_pos,
            token_x,
            token_y,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &AttributeVocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    fn check_input(&self, images: &Tensor) -> Result<usize> {
        let dims = images.dims();
        if dims.len() != 4 {
            return Err(Error::Contract(format!(
                "image batch must be B×H×W×3, got rank {}",
                dims.len()
            )));
        }
        let expect = [
            ("height", dims[1], self.config.image_height),
            ("width", dims[2], self.config.image_width),
            ("channels", dims[3], 3),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Contract(format!(
                    "image {name} is {got}, model expects {want}"
                )));
            }
        }
        if dims[0] == 0 {
            return Err(Error::Contract("empty image batch".into()));
        }
        Ok(dims[0])
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(images, ForwardOptions::default())
    }

    pub fn forward_with(&self, images: &Tensor, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        let b = self.check_input(images)?;
        let images = images.to_dtype(self.dtype())?;
        let memory = self.backbone.forward(&images)?;
        let memory_keys = memory.broadcast_add(&self.memory_pos)?;

        let (q, d) = (self.config.num_queries, self.config.hidden_dim);
        let tgt = self.query_content.unsqueeze(0)?.broadcast_as((b, q, d))?.contiguous()?;
        let refs = self
            .anchor_logits
            .unsqueeze(0)?
            .broadcast_as((b, q, 4))?
            .contiguous()?;
        let per_layer = self.decode(&memory, &memory_keys, tgt, refs, opts.ablate_morphology)?;

        let denoising = match opts.denoising {
            Some(dn) => Some(self.forward_denoising(&memory, &memory_keys, dn)?),
            None => None,
        };
        Ok(ForwardOutput {
            per_layer,
            denoising,
        })
    }

    fn decode(
        &self,
        memory: &Tensor,
        memory_keys: &Tensor,
        mut tgt: Tensor,
        mut ref_logits: Tensor,
        ablate_morphology: bool,
    ) -> Result<Vec<LayerPredictions>> {
        let d = self.config.hidden_dim;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let reference = nn::sigmoid(&ref_logits)?;
            let pos = self.query_pos.forward(&sine_embed(&reference, d / 8)?)?;
            let bias = self.attention_prior(&reference)?;
            tgt = layer.forward(&tgt, &pos, memory, memory_keys, &bias)?;
            let (pred, box_logits) = layer.heads(&tgt, &ref_logits, ablate_morphology)?;
            out.push(pred);
            ref_logits = box_logits;
        }
        Ok(out)
    }

    /// Gaussian log-prior over memory tokens centred on each reference box,
    /// `[B, 1, Q, K]`.
    fn attention_prior(&self, reference: &Tensor) -> Result<Tensor> {
        let cx = reference.narrow(2, 0, 1)?;
        let cy = reference.narrow(2, 1, 1)?;
        let w = reference.narrow(2, 2, 1)?.maximum(MIN_PRIOR_EXTENT)?;
        let h = reference.narrow(2, 3, 1)?.maximum(MIN_PRIOR_EXTENT)?;
        let dx = self.token_x.broadcast_sub(&cx)?.broadcast_div(&w)?;
        let dy = self.token_y.broadcast_sub(&cy)?.broadcast_div(&h)?;
        let bias = ((dx.sqr()? + dy.sqr()?)? * -2.0)?;
        Ok(bias.unsqueeze(1)?)
    }

    fn forward_denoising(
        &self,
        memory: &Tensor,
        memory_keys: &Tensor,
        dn: &DenoisingQueries,
    ) -> Result<DenoisingOutput> {
        let b = memory.dim(0)?;
        if dn.queries.len() != b {
            return Err(Error::Contract(format!(
                "{} denoising query sets for a batch of {b}",
                dn.queries.len()
            )));
        }
        let slots_n = dn.queries.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let d = self.config.hidden_dim;
        let mut labels = Vec::with_capacity(b * slots_n);
        let mut ref_logits = Vec::with_capacity(b * slots_n * 4);
        let mut slots = Vec::with_capacity(b);
        for img in &dn.queries {
            let mut s = Vec::with_capacity(slots_n);
            for k in 0..slots_n {
                match img.get(k) {
                    Some((bx, label)) => {
                        labels.push(*label as u32);
                        ref_logits.extend(bx.iter().map(|v| {
                            let v = v.clamp(1e-4, 1.0 - 1e-4);
                            (v / (1.0 - v)).ln()
                        }));
                        s.push(Some(k));
                    }
                    None => {
                        labels.push(0);
                        ref_logits.extend([0.0, 0.0, -2.0, -2.0]);
                        s.push(None);
                    }
                }
            }
            slots.push(s);
        }
        let labels = Tensor::from_vec(labels, b * slots_n, self.device())?;
        let tgt = self.label_embed.index_select(&labels, 0)?.reshape((b, slots_n, d))?;
        let refs = Tensor::from_vec(ref_logits, (b, slots_n, 4), self.device())?.to_dtype(self.dtype())?;
        let per_layer = self.decode(memory, memory_keys, tgt, refs, true)?;
        Ok(DenoisingOutput { per_layer, slots })
    }
}

/// Anchor logits: centres on a near-square grid covering the image, sides 0.2.
fn anchor_init(q: usize) -> Vec<f64> {
    let cols = (q as f64).sqrt().ceil() as usize;
    let rows = q.div_ceil(cols);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut v = Vec::with_capacity(q * 4);
    for i in 0..q {
        let (r, c) = (i / cols, i % cols);
        v.push(logit((c as f64 + 0.5) / cols as f64));
        v.push(logit((r as f64 + 0.5) / rows as f64));
        v.push(logit(0.2));
        v.push(logit(0.2));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::build_vocabulary;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            num_queries: 5,
            num_decoder_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            backbone_channels: [4, 4, 8, 8],
            image_width: 32,
            image_height: 32,
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes() {
        let m = Model::new(tiny(), build_vocabulary(), DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((3, 32, 32, 3), DType::F32, &Device::Cpu).unwrap();
        let out = m.forward(&x).unwrap();
        assert_eq!(out.num_layers(), 2);
        assert_eq!(out.morphology_blocks_per_sample(), 10);
        let last = out.last();
        assert_eq!(last.boxes.dims(), &[3, 5, 4]);
        assert_eq!(last.class_logits.dims(), &[3, 5, 3]);
        let widths: Vec<usize> = last.morph_logits.iter().map(|t| t.dim(2).unwrap()).collect();
        assert_eq!(widths, vec![6, 4, 4, 2, 2]);
        assert_eq!(out.split_samples().unwrap().len(), 3);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let m = Model::new(tiny(), build_vocabulary(), DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 32, 24, 3), DType::F32, &Device::Cpu).unwrap();
        match m.forward(&x) {
            Err(Error::Contract(msg)) => assert!(msg.contains("width")),
            other => panic!("expected contract error, got {:?}", other.map(|_| ())),
        }
        let x = Tensor::zeros((32, 32, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn ablation_drops_morphology_only() {
        let m = Model::new(tiny(), build_vocabulary(), DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 32, 32, 3), &Device::Cpu).unwrap();
        let full = m.forward(&x).unwrap();
        let ablated = m
            .forward_with(
                &x,
                ForwardOptions {
                    ablate_morphology: true,
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(ablated.morphology_blocks_per_sample(), 0);
        let a = full.last().boxes.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = ablated.last().boxes.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_species = 4;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.image_width = 30;
        assert!(c.validate().is_err());
    }
}
