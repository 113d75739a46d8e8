//! Human- and machine-readable reports for decoded detections.
//!
//! Each detection renders to one sentence:
//!
//! ```text
//! T. brucei (conf 0.91): elongated body, C-shaped curvature, 2 visible dot(s), flagellum present, mature stage.
//! ```
//!
//! The per-image JSON document carries the same information plus boxes and
//! per-attribute confidences.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;
use crate::model::{AttributeCall, Detection, Explanation};
use crate::schema::{Attribute, AttributeVocabulary, Species};

#[derive(Debug, Clone, PartialEq)]
pub struct ParasiteReport {
    pub detection: Detection,
    pub text: String,
    pub confidences: BTreeMap<Attribute, f64>,
}

fn call<'a>(e: &'a Explanation, a: Attribute) -> Result<&'a AttributeCall> {
    e.get(&a)
        .ok_or_else(|| Error::Contract(format!("explanation lacks attribute `{a}`")))
}

/// Sentence for one detection; attribute order is fixed.
pub fn render_text(species: Species, confidence: f64, e: &Explanation) -> Result<String> {
    let flagellum = match call(e, Attribute::FlagellumPresent)?.value.as_str() {
        "True" => "present",
        "False" => "absent",
        other => {
            return Err(Error::Contract(format!("illegal flagellum value `{other}`")));
        }
    };
    Ok(format!(
        "{} (conf {:.2}): {} body, {} curvature, {} visible dot(s), flagellum {}, {} stage.",
        species.display_name(),
        confidence,
        call(e, Attribute::ShapeType)?.value,
        call(e, Attribute::Curvature)?.value,
        call(e, Attribute::DotCount)?.value,
        flagellum,
        call(e, Attribute::DevelopmentStage)?.value,
    ))
}

pub fn render_report(detection: &Detection) -> Result<ParasiteReport> {
    let text = render_text(
        detection.species,
        detection.species_confidence,
        &detection.explanation,
    )?;
    let confidences = detection
        .explanation
        .iter()
        .map(|(a, c)| (*a, c.confidence))
        .collect();
    Ok(ParasiteReport {
        detection: detection.clone(),
        text,
        confidences,
    })
}

/// Checks every explained value against the vocabulary.
pub fn validate_explanation(e: &Explanation, vocab: &AttributeVocabulary) -> Result<()> {
    for a in Attribute::ALL {
        let c = call(e, a)?;
        let index = vocab.encode(a, &c.value)?;
        if index != c.index {
            return Err(Error::Validation(format!(
                "attribute `{a}`: value `{}` has index {index}, report says {}",
                c.value, c.index
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    /// Normalized `[x_min, y_min, x_max, y_max]`.
    pub bbox: [f64; 4],
    pub species: Species,
    pub species_confidence: f64,
    pub explanation: Explanation,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageReport {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<DetectionRecord>,
}

impl ImageReport {
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// One sentence per detection, newline-terminated.
    pub fn text(&self) -> String {
        self.detections.iter().map(|d| format!("{}\n", d.text)).collect()
    }

    /// Re-renders every sentence from the structured fields.
    pub fn rerender(&self) -> Result<Vec<String>> {
        self.detections
            .iter()
            .map(|d| render_text(d.species, d.species_confidence, &d.explanation))
            .collect()
    }

    pub fn bbox(d: &DetectionRecord) -> BoxXyxy {
        BoxXyxy::from_array(d.bbox)
    }
}

/// Report document for one image, detections sorted by confidence.
pub fn render_image_report(
    detections: &[Detection],
    image_id: &str,
    width: usize,
    height: usize,
) -> Result<ImageReport> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| b.species_confidence.total_cmp(&a.species_confidence));
    let detections = sorted
        .into_iter()
        .map(|d| {
            Ok(DetectionRecord {
                bbox: d.bbox.to_array(),
                species: d.species,
                species_confidence: d.species_confidence,
                explanation: d.explanation.clone(),
                text: render_report(d)?.text,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ImageReport {
        image_id: image_id.to_string(),
        width,
        height,
        detections,
    })
}
