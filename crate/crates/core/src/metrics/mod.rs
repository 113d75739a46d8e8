//! Detection and explanation metrics.
//!
//! AP follows the COCO protocol: per class, detections are ranked by
//! confidence and greedily matched one-to-one to the unmatched ground truth of
//! highest IoU; precision is made monotone and sampled at 101 recall points.
//! Classes without ground truth are left out of the class mean.

mod latency;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Detection;
use crate::schema::{Attribute, AttributeVocabulary, ImageTargets, Species};

pub use crate::geometry::iou;
pub use latency::{measure_latency, LatencyComparison, LatencyStats, MIN_TIMED_IMAGES, MIN_WARMUP};

/// `.50:.05:.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Ranking order shared by every matcher: confidence descending, then image,
/// query slot and box, so the result never depends on input order.
fn rank(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    b.1.species_confidence
        .total_cmp(&a.1.species_confidence)
        .then(a.0.cmp(&b.0))
        .then(a.1.query.cmp(&b.1.query))
        .then_with(|| {
            a.1.bbox
                .to_array()
                .iter()
                .zip(b.1.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn ranked(detections: &[Vec<Detection>]) -> Vec<(usize, &Detection)> {
    let mut all: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().map(move |x| (i, x)))
        .collect();
    all.sort_by(rank);
    all
}

/// Greedy one-to-one matching of ranked detections. Returns, per ranked
/// detection, the matched ground-truth index within its image.
fn greedy_match(
    ranked: &[(usize, &Detection)],
    gts: &[ImageTargets],
    iou_min: f64,
    class_aware: bool,
) -> Vec<Option<usize>> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|(img, det)| {
            let g = &gts[*img];
            let mut best: Option<(usize, f64)> = None;
            for j in 0..g.len() {
                if taken[*img][j] || (class_aware && g.species[j] != det.species.index()) {
                    continue;
                }
                let v = iou(&det.bbox, &g.boxes[j]);
                if v >= iou_min && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let (j, _) = best?;
            taken[*img][j] = true;
            Some(j)
        })
        .collect()
}

/// AP and final recall of one class at one IoU threshold, `None` without
/// ground truth.
fn class_ap(
    detections: &[Vec<Detection>],
    gts: &[ImageTargets],
    class: usize,
    threshold: f64,
) -> Option<(f64, f64)> {
    let class_gts: Vec<ImageTargets> = gts
        .iter()
        .map(|g| {
            let keep: Vec<usize> = (0..g.len()).filter(|j| g.species[*j] == class).collect();
            ImageTargets {
                boxes: keep.iter().map(|j| g.boxes[*j]).collect(),
                species: keep.iter().map(|j| g.species[*j]).collect(),
                attributes: keep.iter().map(|j| g.attributes[*j]).collect(),
            }
        })
        .collect();
    let n_pos: usize = class_gts.iter().map(ImageTargets::len).sum();
    if n_pos == 0 {
        return None;
    }
    let class_dets: Vec<Vec<Detection>> = detections
        .iter()
        .map(|d| d.iter().filter(|x| x.species.index() == class).cloned().collect())
        .collect();
    let ranked = ranked(&class_dets);
    let hits = greedy_match(&ranked, &class_gts, threshold, false);

    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, h) in hits.iter().enumerate() {
        tp += h.is_some() as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_pos as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|x| *x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some((sum / 101.0, tp as f64 / n_pos as f64))
}

/// AP per class and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ApTable {
    pub thresholds: Vec<f64>,
    /// `[class][threshold]`, `None` for classes without ground truth.
    pub ap: Vec<Option<Vec<f64>>>,
    pub recall: Vec<Option<Vec<f64>>>,
}

impl ApTable {
    fn mean_at(&self, table: &[Option<Vec<f64>>], t: Option<usize>) -> Option<f64> {
        let vals: Vec<f64> = table
            .iter()
            .flatten()
            .map(|v| match t {
                Some(i) => v[i],
                None => v.iter().sum::<f64>() / v.len() as f64,
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Class-mean AP at threshold index `t`.
    pub fn ap_at(&self, t: usize) -> Option<f64> {
        self.mean_at(&self.ap, Some(t))
    }

    /// Class-mean AP averaged over all thresholds.
    pub fn ap_mean(&self) -> Option<f64> {
        self.mean_at(&self.ap, None)
    }

    pub fn recall_mean(&self) -> Option<f64> {
        self.mean_at(&self.recall, None)
    }

    fn index_of(&self, threshold: f64) -> Option<usize> {
        self.thresholds.iter().position(|t| (t - threshold).abs() < 1e-9)
    }
}

/// Per-class AP for every threshold. `detections[i]` and `gts[i]` belong to
/// image `i`; boxes share one coordinate frame.
pub fn compute_ap(detections: &[Vec<Detection>], gts: &[ImageTargets], thresholds: &[f64]) -> ApTable {
    let mut ap = Vec::with_capacity(Species::COUNT);
    let mut recall = Vec::with_capacity(Species::COUNT);
    for class in 0..Species::COUNT {
        let per_t: Option<Vec<(f64, f64)>> = thresholds
            .iter()
            .map(|t| class_ap(detections, gts, class, *t))
            .collect();
        ap.push(per_t.as_ref().map(|v| v.iter().map(|x| x.0).collect()));
        recall.push(per_t.map(|v| v.iter().map(|x| x.1).collect()));
    }
    ApTable {
        thresholds: thresholds.to_vec(),
        ap,
        recall,
    }
}

/// Attribute accuracy over detections localized at `IoU ≥ iou_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedAccuracy {
    pub matched: usize,
    pub correct: BTreeMap<Attribute, usize>,
    /// `None` when nothing was matched.
    pub accuracy: BTreeMap<Attribute, Option<f64>>,
    /// Rows are ground-truth classes, columns predicted classes.
    pub confusion: BTreeMap<Attribute, Vec<Vec<usize>>>,
}

pub fn detection_conditioned_accuracy(
    detections: &[Vec<Detection>],
    gts: &[ImageTargets],
    vocab: &AttributeVocabulary,
    iou_min: f64,
    class_aware: bool,
) -> Result<ConditionedAccuracy> {
    for (i, dets) in detections.iter().enumerate() {
        for d in dets {
            if let Some(a) = Attribute::ALL.iter().find(|a| !d.explanation.contains_key(a)) {
                return Err(Error::Contract(format!(
                    "image {i}, query {}: detection lacks attribute `{a}`",
                    d.query
                )));
            }
        }
    }
    let ranked = ranked(detections);
    let hits = greedy_match(&ranked, gts, iou_min, class_aware);
    let mut confusion: BTreeMap<Attribute, Vec<Vec<usize>>> = Attribute::ALL
        .iter()
        .map(|a| (*a, vec![vec![0; vocab.cardinality(*a)]; vocab.cardinality(*a)]))
        .collect();
    let mut correct: BTreeMap<Attribute, usize> = Attribute::ALL.iter().map(|a| (*a, 0)).collect();
    let mut matched = 0;
    for ((img, det), hit) in ranked.iter().zip(&hits) {
        let Some(j) = hit else { continue };
        matched += 1;
        for a in Attribute::ALL {
            let truth = gts[*img].attributes[*j][a.position()];
            let pred = det.explanation[&a].index;
            confusion.get_mut(&a).unwrap()[truth][pred] += 1;
            if truth == pred {
                *correct.get_mut(&a).unwrap() += 1;
            }
        }
    }
    let accuracy = correct
        .iter()
        .map(|(a, c)| (*a, (matched > 0).then(|| *c as f64 / matched as f64)))
        .collect();
    Ok(ConditionedAccuracy {
        matched,
        correct,
        accuracy,
        confusion,
    })
}

/// Machine-readable evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub num_images: usize,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    pub score_threshold: f64,
    pub ap_50_95: Option<f64>,
    pub ap_50: Option<f64>,
    pub ap_75: Option<f64>,
    pub ar_50_95: Option<f64>,
    /// AP over `.50:.95` per species id.
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    /// Class-agnostic matching at IoU ≥ 0.5.
    pub attribute_accuracy: ConditionedAccuracy,
    /// Same, but a detection must also carry the ground-truth species.
    pub attribute_accuracy_class_aware: ConditionedAccuracy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyComparison>,
}

impl EvaluationSummary {
    pub fn accuracy(&self, attribute: Attribute) -> Option<f64> {
        self.attribute_accuracy.accuracy[&attribute]
    }

    /// Deterministic pretty JSON with a trailing newline.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

/// All metrics for a set of decoded detections.
pub fn evaluate(
    detections: &[Vec<Detection>],
    gts: &[ImageTargets],
    vocab: &AttributeVocabulary,
    score_threshold: f64,
) -> Result<EvaluationSummary> {
    if detections.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} detection lists for {} images",
            detections.len(),
            gts.len()
        )));
    }
    let table = compute_ap(detections, gts, &coco_thresholds());
    let per_class_ap = table
        .ap
        .iter()
        .enumerate()
        .map(|(c, v)| {
            let id = Species::from_index(c).expect("class index").id().to_string();
            (id, v.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    Ok(EvaluationSummary {
        num_images: gts.len(),
        num_ground_truth: gts.iter().map(ImageTargets::len).sum(),
        num_detections: detections.iter().map(Vec::len).sum(),
        score_threshold,
        ap_50_95: table.ap_mean(),
        ap_50: table.index_of(0.5).and_then(|i| table.ap_at(i)),
        ap_75: table.index_of(0.75).and_then(|i| table.ap_at(i)),
        ar_50_95: table.recall_mean(),
        per_class_ap,
        attribute_accuracy: detection_conditioned_accuracy(detections, gts, vocab, 0.5, false)?,
        attribute_accuracy_class_aware: detection_conditioned_accuracy(
            detections, gts, vocab, 0.5, true,
        )?,
        latency: None,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::geometry::BoxXyxy;
    use crate::model::{AttributeCall, Explanation};

    pub fn det(box_: [f64; 4], species: usize, conf: f64, query: usize, attrs: [usize; 5]) -> Detection {
        let vocab = crate::schema::build_vocabulary();
        let explanation: Explanation = Attribute::ALL
            .iter()
            .map(|a| {
                let index = attrs[a.position()];
                (
                    *a,
                    AttributeCall {
                        index,
                        value: vocab.decode(*a, index).unwrap().to_string(),
                        confidence: 1.0,
                    },
                )
            })
            .collect();
        Detection {
            bbox: BoxXyxy::from_array(box_),
            species: Species::from_index(species).unwrap(),
            species_confidence: conf,
            explanation,
            query,
        }
    }

    pub fn gt(items: &[([f64; 4], usize, [usize; 5])]) -> ImageTargets {
        ImageTargets {
            boxes: items.iter().map(|i| BoxXyxy::from_array(i.0)).collect(),
            species: items.iter().map(|i| i.1).collect(),
            attributes: items.iter().map(|i| i.2).collect(),
        }
    }
}
