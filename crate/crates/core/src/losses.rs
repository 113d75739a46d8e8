//! Training objective.
//!
//! `total = det + λ · morphology`, where `morphology` sums, over the five
//! attributes, an `α`-weighted sum over decoder layers of the matched
//! cross-entropy of that attribute's head. The detection term sums per-class
//! sigmoid cross-entropy, ℓ1 and `1 − GIoU` box penalties over all layers.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchAssignment;
use crate::model::{nn, DenoisingQueries, ForwardOutput, LayerPredictions};
use crate::schema::{Attribute, ImageTargets, MorphologyTargets, Species};

pub use crate::geometry::giou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for DetectionWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_morph: f64,
    /// One weight per decoder layer; empty means 1.0 for every layer.
    pub alpha_layers: Vec<f64>,
    pub detection: DetectionWeights,
    pub dn_enabled: bool,
    /// Relative box jitter of the denoising queries.
    pub dn_box_noise: f64,
    /// Probability that a denoising query carries a wrong species label.
    pub dn_label_flip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_morph: 0.5,
            alpha_layers: Vec::new(),
            detection: DetectionWeights::default(),
            dn_enabled: false,
            dn_box_noise: 0.4,
            dn_label_flip: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda_morph) {
            return Err(Error::Config(format!(
                "loss.lambda_morph must be a non-negative number, got {}",
                self.lambda_morph
            )));
        }
        if let Some(a) = self.alpha_layers.iter().find(|a| !finite_nonneg(**a)) {
            return Err(Error::Config(format!(
                "loss.alpha_layers entries must be non-negative, got {a}"
            )));
        }
        let d = &self.detection;
        if ![d.class, d.l1, d.giou].into_iter().all(finite_nonneg) {
            return Err(Error::Config("detection loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dn_label_flip) || !finite_nonneg(self.dn_box_noise) {
            return Err(Error::Config("denoising noise settings out of range".into()));
        }
        Ok(())
    }

    /// Layer weights resolved for an `n`-layer decoder.
    pub fn alpha(&self, n: usize) -> Result<Vec<f64>> {
        if self.alpha_layers.is_empty() {
            return Ok(vec![1.0; n]);
        }
        if self.alpha_layers.len() != n {
            return Err(Error::Contract(format!(
                "{} layer weights for {n} decoder layers",
                self.alpha_layers.len()
            )));
        }
        Ok(self.alpha_layers.clone())
    }
}

fn scalar_zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Matched cross-entropy of one attribute head.
///
/// `logits` is `[B, Q, C]` (or `[Q, C]` for a single image), `assignments` and
/// `targets` hold one entry per image; `targets[b][j]` is the class index of
/// ground truth `j`. Unmatched queries contribute nothing. With no matches the
/// loss is a constant zero.
pub fn morphology_loss_attribute(
    logits: &Tensor,
    assignments: &[MatchAssignment],
    targets: &[&[usize]],
) -> Result<Tensor> {
    let logits = if logits.rank() == 2 {
        logits.unsqueeze(0)?
    } else {
        logits.clone()
    };
    let (b, q, c) = logits.dims3()?;
    if assignments.len() != b || targets.len() != b {
        return Err(Error::Contract(format!(
            "{} assignments and {} target lists for a batch of {b}",
            assignments.len(),
            targets.len()
        )));
    }
    let mut weights = vec![0.0f64; b * q * c];
    let mut n = 0usize;
    for (img, (a, t)) in assignments.iter().zip(targets).enumerate() {
        for &(qi, j) in &a.pairs {
            let y = *t.get(j).ok_or_else(|| {
                Error::Contract(format!("image {img}: ground truth {j} has no target"))
            })?;
            if y >= c || qi >= q {
                return Err(Error::Contract(format!(
                    "image {img}: target class {y} / query {qi} out of range for {q}×{c} logits"
                )));
            }
            weights[(img * q + qi) * c + y] = 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return scalar_zero(logits.dtype(), logits.device());
    }
    let w = Tensor::from_vec(weights, (b, q, c), logits.device())?.to_dtype(logits.dtype())?;
    let picked = (nn::log_softmax_last(&logits)? * w)?.sum_all()?;
    Ok((picked * (-1.0 / n as f64))?)
}

/// Morphology terms for every attribute and layer.
#[derive(Debug, Clone)]
pub struct MorphologyLoss {
    /// Unweighted per-layer losses, `[attribute][layer]`.
    pub per_layer: Vec<Vec<Tensor>>,
    /// `Σ_l α_l · per_layer[m][l]` for each attribute.
    pub per_attribute: Vec<Tensor>,
    pub total: Tensor,
    pub alpha: Vec<f64>,
}

pub fn morphology_loss_total(
    output: &ForwardOutput,
    assignments: &[Vec<MatchAssignment>],
    targets: &MorphologyTargets,
    weights: &LossWeights,
) -> Result<MorphologyLoss> {
    let n = output.num_layers();
    let alpha = weights.alpha(n)?;
    if assignments.len() != n {
        return Err(Error::Contract(format!(
            "{} layer assignments for {n} decoder layers",
            assignments.len()
        )));
    }
    let last = output.last();
    let (dtype, device) = (last.boxes.dtype(), last.boxes.device().clone());
    let mut per_layer = Vec::with_capacity(Attribute::COUNT);
    let mut per_attribute = Vec::with_capacity(Attribute::COUNT);
    let mut total = scalar_zero(dtype, &device)?;
    for attribute in Attribute::ALL {
        let image_targets: Vec<&[usize]> = (0..targets.num_images())
            .map(|b| targets.image_targets(attribute, b))
            .collect();
        let mut layers = Vec::with_capacity(n);
        let mut weighted = scalar_zero(dtype, &device)?;
        for ((layer, a), w) in output.per_layer.iter().zip(assignments).zip(&alpha) {
            if layer.morph_logits.len() != Attribute::COUNT {
                return Err(Error::Contract(
                    "forward output has no morphology predictions".into(),
                ));
            }
            let l = morphology_loss_attribute(layer.morph(attribute), a, &image_targets)?;
            weighted = (weighted + (&l * *w)?)?;
            layers.push(l);
        }
        total = (total + &weighted)?;
        per_layer.push(layers);
        per_attribute.push(weighted);
    }
    Ok(MorphologyLoss {
        per_layer,
        per_attribute,
        total,
        alpha,
    })
}

/// Differentiable GIoU between `[M, 4]` predicted `(cx, cy, w, h)` boxes and
/// `[M, 4]` target corner boxes; returns `[M]`.
fn giou_tensor(pred: &Tensor, target_xyxy: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1);
    let (cx, cy, w, h) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let ax0 = (&cx - (&w * 0.5)?)?;
    let ax1 = (&cx + (&w * 0.5)?)?;
    let ay0 = (&cy - (&h * 0.5)?)?;
    let ay1 = (&cy + (&h * 0.5)?)?;
    let (bx0, by0, bx1, by1) = (
        col(target_xyxy, 0)?,
        col(target_xyxy, 1)?,
        col(target_xyxy, 2)?,
        col(target_xyxy, 3)?,
    );
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = (&w * &h)?;
    let area_b = ((&bx1 - &bx0)? * (&by1 - &by0)?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hull = ((ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?
        * (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?)?;
    let iou = (inter / &union)?;
    let penalty = ((&hull - &union)? / &hull)?;
    Ok((iou - penalty)?.squeeze(1)?)
}

/// Unweighted detection terms of one layer.
struct LayerDetection {
    cls: Tensor,
    l1: Tensor,
    giou: Tensor,
    matched: usize,
}

fn layer_detection(
    layer: &LayerPredictions,
    assignments: &[MatchAssignment],
    targets: &[ImageTargets],
) -> Result<LayerDetection> {
    let (b, q, c) = layer.class_logits.dims3()?;
    if assignments.len() != b || targets.len() != b {
        return Err(Error::Contract(format!(
            "{} assignments and {} targets for a batch of {b}",
            assignments.len(),
            targets.len()
        )));
    }
    let device = layer.boxes.device();
    let dtype = layer.boxes.dtype();
    let mut class_target = vec![0.0f64; b * q * c];
    let mut rows = Vec::new();
    let mut gt_cxcywh = Vec::new();
    let mut gt_xyxy = Vec::new();
    for (img, (a, t)) in assignments.iter().zip(targets).enumerate() {
        for &(qi, j) in &a.pairs {
            if qi >= q || j >= t.len() {
                return Err(Error::Contract(format!(
                    "image {img}: pair ({qi}, {j}) out of range"
                )));
            }
            let species = t.species[j];
            if species >= c {
                return Err(Error::Contract(format!("species index {species} ≥ {c}")));
            }
            class_target[(img * q + qi) * c + species] = 1.0;
            rows.push((img * q + qi) as u32);
            gt_cxcywh.extend(t.boxes[j].to_cxcywh());
            gt_xyxy.extend(t.boxes[j].to_array());
        }
    }
    let m = rows.len();
    let norm = m.max(1) as f64;
    let t = Tensor::from_vec(class_target, (b, q, c), device)?.to_dtype(dtype)?;
    let x = &layer.class_logits;
    let cls = ((nn::softplus(x)? - (x * t)?)?.sum_all()? / norm)?;
    if m == 0 {
        return Ok(LayerDetection {
            cls,
            l1: scalar_zero(dtype, device)?,
            giou: scalar_zero(dtype, device)?,
            matched: 0,
        });
    }
    let rows = Tensor::from_vec(rows, m, device)?;
    let pred = layer.boxes.reshape((b * q, 4))?.index_select(&rows, 0)?;
    let gt_c = Tensor::from_vec(gt_cxcywh, (m, 4), device)?.to_dtype(dtype)?;
    let gt_x = Tensor::from_vec(gt_xyxy, (m, 4), device)?.to_dtype(dtype)?;
    let l1 = ((&pred - gt_c)?.abs()?.sum_all()? / norm)?;
    let g = giou_tensor(&pred, &gt_x)?;
    let giou = ((g.affine(-1.0, 1.0))?.sum_all()? / norm)?;
    Ok(LayerDetection {
        cls,
        l1,
        giou,
        matched: m,
    })
}

/// Weighted detection terms summed over layers.
#[derive(Debug, Clone)]
pub struct DetectionLoss {
    pub cls: Tensor,
    pub l1: Tensor,
    pub giou: Tensor,
    pub dn: Tensor,
    pub total: Tensor,
    /// Matches in the final layer across the batch.
    pub n_matched: usize,
}

pub fn detection_loss(
    output: &ForwardOutput,
    assignments: &[Vec<MatchAssignment>],
    targets: &[ImageTargets],
    weights: &LossWeights,
) -> Result<DetectionLoss> {
    if assignments.len() != output.num_layers() {
        return Err(Error::Contract(format!(
            "{} layer assignments for {} decoder layers",
            assignments.len(),
            output.num_layers()
        )));
    }
    let w = &weights.detection;
    let last = output.last();
    let (dtype, device) = (last.boxes.dtype(), last.boxes.device().clone());
    let mut cls = scalar_zero(dtype, &device)?;
    let mut l1 = scalar_zero(dtype, &device)?;
    let mut gi = scalar_zero(dtype, &device)?;
    let mut n_matched = 0;
    for (layer, a) in output.per_layer.iter().zip(assignments) {
        let d = layer_detection(layer, a, targets)?;
        cls = (cls + (d.cls * w.class)?)?;
        l1 = (l1 + (d.l1 * w.l1)?)?;
        gi = (gi + (d.giou * w.giou)?)?;
        n_matched = d.matched;
    }
    let dn = if weights.dn_enabled {
        let dn_out = output.denoising.as_ref().ok_or_else(|| {
            Error::Contract("denoising loss enabled but the forward pass had no denoising queries".into())
        })?;
        // each noised query reconstructs the ground truth it was built from
        let fixed: Vec<MatchAssignment> = dn_out
            .slots
            .iter()
            .map(|s| MatchAssignment {
                pairs: s
                    .iter()
                    .enumerate()
                    .filter_map(|(k, j)| j.map(|j| (k, j)))
                    .collect(),
                unmatched: Vec::new(),
            })
            .collect();
        let mut dn = scalar_zero(dtype, &device)?;
        for layer in &dn_out.per_layer {
            let d = layer_detection(layer, &fixed, targets)?;
            dn = (dn + (d.cls * w.class)? + (d.l1 * w.l1)? + (d.giou * w.giou)?)?;
        }
        dn
    } else {
        scalar_zero(dtype, &device)?
    };
    let total = (&cls + &l1 + &gi + &dn)?;
    Ok(DetectionLoss {
        cls,
        l1,
        giou: gi,
        dn,
        total,
        n_matched,
    })
}

/// Host-side record of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub det: f64,
    pub det_cls: f64,
    pub det_l1: f64,
    pub det_giou: f64,
    pub det_dn: f64,
    pub morphology: f64,
    pub lambda_morph: f64,
    /// `α`-weighted total per attribute.
    pub morph_attribute: BTreeMap<Attribute, f64>,
    /// Unweighted per-layer loss per attribute.
    pub morph_layer: BTreeMap<Attribute, Vec<f64>>,
    pub n_matched: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.det,
            self.det_cls,
            self.det_l1,
            self.det_giou,
            self.det_dn,
            self.morphology,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Flat key→value record for JSON-lines logs.
    pub fn to_record(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        let mut put = |k: String, v: f64| {
            m.insert(k, serde_json::json!(v));
        };
        put("total".into(), self.total);
        put("det".into(), self.det);
        put("det.cls".into(), self.det_cls);
        put("det.l1".into(), self.det_l1);
        put("det.giou".into(), self.det_giou);
        put("det.dn".into(), self.det_dn);
        put("morphology".into(), self.morphology);
        put("lambda".into(), self.lambda_morph);
        for (a, v) in &self.morph_attribute {
            put(format!("morph.{a}"), *v);
        }
        for (a, layers) in &self.morph_layer {
            for (i, v) in layers.iter().enumerate() {
                put(format!("morph.{a}.layer{i}"), *v);
            }
        }
        m.insert("n_matched".into(), serde_json::json!(self.n_matched));
        m
    }
}

/// Full objective: the differentiable total and its host breakdown.
///
/// The breakdown is reassembled from its leaves in 64-bit arithmetic, so
/// `total == det + lambda_morph * morphology` holds exactly for the stored
/// numbers.
pub fn total_loss(
    output: &ForwardOutput,
    assignments: &[Vec<MatchAssignment>],
    targets: &[ImageTargets],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let det = detection_loss(output, assignments, targets, weights)?;
    let morph_targets = MorphologyTargets::from_image_targets(targets);
    let morph = morphology_loss_total(output, assignments, &morph_targets, weights)?;
    let total = (&det.total + (&morph.total * weights.lambda_morph)?)?;

    let mut morph_attribute = BTreeMap::new();
    let mut morph_layer = BTreeMap::new();
    let mut morphology = 0.0;
    for (i, attribute) in Attribute::ALL.into_iter().enumerate() {
        let layers = morph.per_layer[i]
            .iter()
            .map(scalar)
            .collect::<Result<Vec<f64>>>()?;
        let weighted: f64 = layers.iter().zip(&morph.alpha).map(|(l, a)| a * l).sum();
        morphology += weighted;
        morph_attribute.insert(attribute, weighted);
        morph_layer.insert(attribute, layers);
    }
    let (det_cls, det_l1, det_giou, det_dn) = (
        scalar(&det.cls)?,
        scalar(&det.l1)?,
        scalar(&det.giou)?,
        scalar(&det.dn)?,
    );
    let det_sum = det_cls + det_l1 + det_giou + det_dn;
    let breakdown = LossBreakdown {
        total: det_sum + weights.lambda_morph * morphology,
        det: det_sum,
        det_cls,
        det_l1,
        det_giou,
        det_dn,
        morphology,
        lambda_morph: weights.lambda_morph,
        morph_attribute,
        morph_layer,
        n_matched: det.n_matched,
    };
    Ok((total, breakdown))
}

/// Noised copies of the ground truth for the denoising branch: boxes jittered
/// by up to `box_noise` of their size, labels replaced with probability
/// `label_flip`.
pub fn denoising_queries<R: Rng>(
    targets: &[ImageTargets],
    box_noise: f64,
    label_flip: f64,
    rng: &mut R,
) -> DenoisingQueries {
    let queries = targets
        .iter()
        .map(|t| {
            t.boxes
                .iter()
                .zip(&t.species)
                .map(|(b, s)| {
                    let [cx, cy, w, h] = b.to_cxcywh();
                    let mut j = || rng.random_range(-1.0..=1.0) * box_noise;
                    let noised = [
                        (cx + j() * w * 0.5).clamp(0.0, 1.0),
                        (cy + j() * h * 0.5).clamp(0.0, 1.0),
                        (w * (1.0 + j())).clamp(1e-3, 1.0),
                        (h * (1.0 + j())).clamp(1e-3, 1.0),
                    ];
                    let label = if rng.random_bool(label_flip) {
                        rng.random_range(0..Species::COUNT)
                    } else {
                        *s
                    };
                    (noised, label)
                })
                .collect()
        })
        .collect();
    DenoisingQueries { queries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxXyxy;

    fn assign(pairs: &[(usize, usize)]) -> MatchAssignment {
        MatchAssignment {
            pairs: pairs.to_vec(),
            unmatched: Vec::new(),
        }
    }

    fn t(v: Vec<f64>, shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let l = morphology_loss_attribute(&t(vec![0.0; 8], (2, 4)), &[assign(&[(1, 0)])], &[&[2]])
            .unwrap();
        assert!((scalar(&l).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_is_near_zero() {
        let l = morphology_loss_attribute(
            &t(vec![20.0, 0.0, 0.0, 0.0], (1, 4)),
            &[assign(&[(0, 0)])],
            &[&[0]],
        )
        .unwrap();
        assert!(scalar(&l).unwrap() < 1e-8);
    }

    #[test]
    fn hand_computed_two_matches() {
        // true-class probabilities 0.5 and 0.25
        let logits = t(vec![0.0, 0.0, -1e9, -1e9, 0.0, 0.0, 0.0, 0.0], (2, 4));
        let l = morphology_loss_attribute(&logits, &[assign(&[(0, 0), (1, 1)])], &[&[1, 1]]).unwrap();
        assert!((scalar(&l).unwrap() - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn no_matches_is_zero_and_bad_target_is_contract_error() {
        let logits = t(vec![0.3; 8], (2, 4));
        let l = morphology_loss_attribute(&logits, &[assign(&[])], &[&[]]).unwrap();
        assert_eq!(scalar(&l).unwrap(), 0.0);
        assert!(matches!(
            morphology_loss_attribute(&logits, &[assign(&[(0, 0)])], &[&[4]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn giou_tensor_matches_host() {
        let boxes = [
            ([0.5, 0.5, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]),
            ([0.5, 0.5, 1.0, 1.0], [2.0, 0.0, 3.0, 1.0]),
            ([1.0, 1.0, 2.0, 2.0], [0.0, 0.0, 1.0, 1.0]),
        ];
        let pred: Vec<f64> = boxes.iter().flat_map(|b| b.0).collect();
        let gt: Vec<f64> = boxes.iter().flat_map(|b| b.1).collect();
        let g = giou_tensor(&t(pred, (3, 4)), &t(gt, (3, 4)))
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (i, (p, q)) in boxes.iter().enumerate() {
            let host = giou(&BoxXyxy::from_cxcywh(*p), &BoxXyxy::from_array(*q));
            assert!((g[i] - host).abs() < 1e-12, "{i}: {} vs {host}", g[i]);
        }
        assert!((g[1] + 1.0 / 3.0).abs() < 1e-12);
        assert!((g[2] - 0.25).abs() < 1e-12);
    }

    fn layer(boxes: Vec<f64>, cls: Vec<f64>, q: usize) -> LayerPredictions {
        LayerPredictions {
            boxes: Tensor::from_vec(boxes, (1, q, 4), &Device::Cpu).unwrap(),
            class_logits: Tensor::from_vec(cls, (1, q, 3), &Device::Cpu).unwrap(),
            morph_logits: [6, 4, 4, 2, 2]
                .iter()
                .map(|c| Tensor::zeros((1, q, *c), DType::F64, &Device::Cpu).unwrap())
                .collect(),
        }
    }

    fn target(b: [f64; 4], species: usize) -> ImageTargets {
        ImageTargets {
            boxes: vec![BoxXyxy::from_cxcywh(b)],
            species: vec![species],
            attributes: vec![[0, 0, 0, 0, 0]],
        }
    }

    #[test]
    fn l1_term_hand_value() {
        let out = ForwardOutput {
            per_layer: vec![layer(vec![0.7, 0.5, 0.2, 0.2], vec![0.0, 0.0, 0.0], 1)],
            denoising: None,
        };
        let tg = [target([0.3, 0.5, 0.2, 0.2], 0)];
        let d = detection_loss(&out, &[vec![assign(&[(0, 0)])]], &tg, &LossWeights::default()).unwrap();
        assert!((scalar(&d.l1).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(scalar(&d.dn).unwrap(), 0.0);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let out = ForwardOutput {
            per_layer: vec![layer(
                vec![0.3, 0.5, 0.2, 0.2, 0.8, 0.8, 0.1, 0.1],
                vec![40.0, -40.0, -40.0, -40.0, -40.0, -40.0],
                2,
            )],
            denoising: None,
        };
        let tg = [target([0.3, 0.5, 0.2, 0.2], 0)];
        let d = detection_loss(&out, &[vec![assign(&[(0, 0)])]], &tg, &LossWeights::default()).unwrap();
        assert!(scalar(&d.total).unwrap() < 1e-6);
    }

    #[test]
    fn total_reassembles_and_is_affine_in_lambda() {
        let out = ForwardOutput {
            per_layer: vec![
                layer(vec![0.4, 0.5, 0.3, 0.2], vec![0.1, -0.2, 0.3], 1),
                layer(vec![0.35, 0.5, 0.25, 0.2], vec![0.5, -0.2, 0.3], 1),
            ],
            denoising: None,
        };
        let tg = [target([0.3, 0.5, 0.2, 0.2], 1)];
        let a = vec![vec![assign(&[(0, 0)])]; 2];
        let mut base = None;
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let w = LossWeights {
                lambda_morph: lambda,
                ..Default::default()
            };
            let (tt, b) = total_loss(&out, &a, &tg, &w).unwrap();
            assert_eq!(b.total, b.det + lambda * b.morphology);
            assert!((scalar(&tt).unwrap() - b.total).abs() < 1e-12);
            let (d0, m0) = *base.get_or_insert((b.det, b.morphology));
            assert_eq!(b.det, d0);
            assert_eq!(b.morphology, m0);
        }
        // uniform logits: every layer and attribute gives ln C
        let (_, b) = total_loss(&out, &a, &tg, &LossWeights::default()).unwrap();
        let expect: f64 = [6f64, 4.0, 4.0, 2.0, 2.0].iter().map(|c| 2.0 * c.ln()).sum();
        assert!((b.morphology - expect).abs() < 1e-12);
        let w = LossWeights {
            alpha_layers: vec![1.0],
            ..Default::default()
        };
        assert!(matches!(total_loss(&out, &a, &tg, &w), Err(Error::Contract(_))));
    }
}
