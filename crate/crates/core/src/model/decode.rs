use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::QueryOutputs;
use crate::geometry::BoxXyxy;
use crate::schema::{Attribute, AttributeVocabulary, Species};

/// Decoded value of one attribute for one detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCall {
    pub index: usize,
    pub value: String,
    pub confidence: f64,
}

pub type Explanation = BTreeMap<Attribute, AttributeCall>;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Normalized corners, clipped to the unit square.
    pub bbox: BoxXyxy,
    pub species: Species,
    pub species_confidence: f64,
    pub explanation: Explanation,
    /// Query slot that produced the detection.
    pub query: usize,
}

/// First index of the maximum; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    (logits[i] - m).exp() / z
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turns final-layer outputs of one image into detections.
///
/// A query survives when its highest species probability reaches
/// `score_threshold`. Results are ordered by species confidence, highest first,
/// with query order breaking ties.
pub fn decode_predictions(
    last: &QueryOutputs,
    vocab: &AttributeVocabulary,
    score_threshold: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (q, logits) in last.class_logits.iter().enumerate() {
        let k = argmax(logits);
        let confidence = sigmoid(logits[k]);
        if confidence < score_threshold {
            continue;
        }
        let mut explanation = Explanation::new();
        for (attribute, block) in Attribute::ALL.iter().zip(&last.morph_logits) {
            let row = &block[q];
            let index = argmax(row);
            let value = vocab
                .decode(*attribute, index)
                .expect("head width matches vocabulary");
            explanation.insert(
                *attribute,
                AttributeCall {
                    index,
                    value: value.to_string(),
                    confidence: softmax_at(row, index),
                },
            );
        }
        let [cx, cy, w, h] = last.boxes[q];
        let b = BoxXyxy::from_cxcywh([cx, cy, w, h]);
        out.push(Detection {
            bbox: BoxXyxy::new(
                b.x_min.clamp(0.0, 1.0),
                b.y_min.clamp(0.0, 1.0),
                b.x_max.clamp(0.0, 1.0),
                b.y_max.clamp(0.0, 1.0),
            ),
            species: Species::from_index(k).expect("class head has one logit per species"),
            species_confidence: confidence,
            explanation,
            query: q,
        });
    }
    out.sort_by(|a, b| b.species_confidence.total_cmp(&a.species_confidence));
    out
}
