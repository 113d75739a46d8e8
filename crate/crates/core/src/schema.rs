//! Morphological attribute vocabulary and the annotation-to-target conversion.
//!
//! Every parasite carries five categorical attributes. Each attribute owns an
//! ordered list of legal values; a value's position in that list is its class
//! index, so the value/index maps are bijections onto `0..C_m`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;

/// The five attributes in their fixed head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    ShapeType,
    Curvature,
    DotCount,
    FlagellumPresent,
    DevelopmentStage,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::ShapeType,
        Attribute::Curvature,
        Attribute::DotCount,
        Attribute::FlagellumPresent,
        Attribute::DevelopmentStage,
    ];

    pub const COUNT: usize = 5;

    /// Annotation field name.
    pub fn name(self) -> &'static str {
        match self {
            Attribute::ShapeType => "shape_type",
            Attribute::Curvature => "curvature",
            Attribute::DotCount => "dot_count",
            Attribute::FlagellumPresent => "flagellum_present",
            Attribute::DevelopmentStage => "development_stage",
        }
    }

    /// Position in [`Attribute::ALL`].
    pub fn position(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Schema(format!("unknown attribute `{name}`")))
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const SHAPE_VALUES: &[&str] = &["oval", "elongated", "amoeboid", "fusiform", "crescent", "other"];
const CURVATURE_VALUES: &[&str] = &["straight", "C-shaped", "S-shaped", "round"];
const DOT_VALUES: &[&str] = &["0", "1", "2", "3+"];
const FLAGELLUM_VALUES: &[&str] = &["False", "True"];
const STAGE_VALUES: &[&str] = &["immature", "mature"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttributeDescriptor {
    pub attribute: Attribute,
    pub values: Vec<&'static str>,
}

impl AttributeDescriptor {
    pub fn cardinality(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttributeVocabulary {
    attributes: Vec<AttributeDescriptor>,
}

/// The fixed five-attribute vocabulary.
pub fn build_vocabulary() -> AttributeVocabulary {
    let table: [(Attribute, &[&'static str]); 5] = [
        (Attribute::ShapeType, SHAPE_VALUES),
        (Attribute::Curvature, CURVATURE_VALUES),
        (Attribute::DotCount, DOT_VALUES),
        (Attribute::FlagellumPresent, FLAGELLUM_VALUES),
        (Attribute::DevelopmentStage, STAGE_VALUES),
    ];
    AttributeVocabulary {
        attributes: table
            .into_iter()
            .map(|(attribute, values)| AttributeDescriptor {
                attribute,
                values: values.to_vec(),
            })
            .collect(),
    }
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        build_vocabulary()
    }
}

impl AttributeVocabulary {
    pub fn attributes(&self) -> &[AttributeDescriptor] {
        &self.attributes
    }

    pub fn descriptor(&self, attribute: Attribute) -> &AttributeDescriptor {
        &self.attributes[attribute.position()]
    }

    pub fn cardinality(&self, attribute: Attribute) -> usize {
        self.descriptor(attribute).cardinality()
    }

    /// Head widths in attribute order.
    pub fn cardinalities(&self) -> [usize; 5] {
        Attribute::ALL.map(|a| self.cardinality(a))
    }

    /// Size of the combined index space, Σ C_m.
    pub fn total_classes(&self) -> usize {
        self.attributes.iter().map(|d| d.cardinality()).sum()
    }

    /// Stable content hash, stored in checkpoints.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for d in &self.attributes {
            hasher.update(d.attribute.name().as_bytes());
            hasher.update(b"=");
            hasher.update(d.values.join("|").as_bytes());
            hasher.update(b";");
        }
        hex_digest(hasher)
    }

    pub fn encode(&self, attribute: Attribute, value: &str) -> Result<usize> {
        self.descriptor(attribute)
            .values
            .iter()
            .position(|v| *v == value)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "illegal value `{value}` for attribute `{attribute}`"
                ))
            })
    }

    pub fn decode(&self, attribute: Attribute, index: usize) -> Result<&'static str> {
        let d = self.descriptor(attribute);
        d.values.get(index).copied().ok_or_else(|| {
            Error::Validation(format!(
                "index {index} out of range for attribute `{attribute}` ({} values)",
                d.cardinality()
            ))
        })
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// f_m: attribute value to class index, looked up by attribute name.
pub fn encode_attribute(vocab: &AttributeVocabulary, attribute: &str, value: &str) -> Result<usize> {
    vocab.encode(Attribute::from_name(attribute)?, value)
}

/// Inverse of [`encode_attribute`].
pub fn decode_attribute(
    vocab: &AttributeVocabulary,
    attribute: &str,
    index: usize,
) -> Result<&'static str> {
    vocab.decode(Attribute::from_name(attribute)?, index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Species {
    Leishmania,
    #[serde(rename = "T_cruzi")]
    TCruzi,
    #[serde(rename = "T_brucei")]
    TBrucei,
}

impl Species {
    pub const ALL: [Species; 3] = [Species::Leishmania, Species::TCruzi, Species::TBrucei];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Species::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Validation(format!("species index {index} out of range")))
    }

    /// Identifier used in annotation and report files.
    pub fn id(self) -> &'static str {
        match self {
            Species::Leishmania => "Leishmania",
            Species::TCruzi => "T_cruzi",
            Species::TBrucei => "T_brucei",
        }
    }

    /// Name as written in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Species::Leishmania => "Leishmania",
            Species::TCruzi => "T. cruzi",
            Species::TBrucei => "T. brucei",
        }
    }
}

/// One `gt_morphology` entry. Values are kept as written and checked against the
/// vocabulary by [`MorphologyRecord::validate`]; nothing is coerced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphologyRecord {
    pub shape_type: String,
    pub curvature: String,
    /// `"0"`, `"1"`, `"2"` or `"3+"`; serialized as an integer below three.
    #[serde(serialize_with = "ser_dot_count", deserialize_with = "de_dot_count")]
    pub dot_count: String,
    pub flagellum_present: bool,
    pub development_stage: String,
}

fn ser_dot_count<S: Serializer>(value: &str, s: S) -> std::result::Result<S::Ok, S::Error> {
    match value.parse::<u64>() {
        Ok(n) => s.serialize_u64(n),
        Err(_) => s.serialize_str(value),
    }
}

fn de_dot_count<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Text(String),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::Int(n) => n.to_string(),
        Raw::Text(s) => s,
    })
}

impl MorphologyRecord {
    /// The value label for `attribute` (flagellum as `"True"`/`"False"`).
    pub fn value(&self, attribute: Attribute) -> &str {
        match attribute {
            Attribute::ShapeType => &self.shape_type,
            Attribute::Curvature => &self.curvature,
            Attribute::DotCount => &self.dot_count,
            Attribute::FlagellumPresent => {
                if self.flagellum_present {
                    "True"
                } else {
                    "False"
                }
            }
            Attribute::DevelopmentStage => &self.development_stage,
        }
    }

    /// Class indices in attribute order.
    pub fn indices(&self, vocab: &AttributeVocabulary) -> Result<[usize; 5]> {
        let mut out = [0; 5];
        for a in Attribute::ALL {
            out[a.position()] = vocab.encode(a, self.value(a))?;
        }
        Ok(out)
    }

    pub fn validate(&self, vocab: &AttributeVocabulary) -> Result<()> {
        self.indices(vocab).map(|_| ())
    }

    pub fn from_indices(vocab: &AttributeVocabulary, indices: [usize; 5]) -> Result<Self> {
        let label = |a: Attribute| vocab.decode(a, indices[a.position()]).map(str::to_string);
        Ok(Self {
            shape_type: label(Attribute::ShapeType)?,
            curvature: label(Attribute::Curvature)?,
            dot_count: label(Attribute::DotCount)?,
            flagellum_present: indices[Attribute::FlagellumPresent.position()] == 1,
            development_stage: label(Attribute::DevelopmentStage)?,
        })
    }
}

/// One ground-truth parasite.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    /// Absolute pixel coordinates.
    pub bbox: BoxXyxy,
    pub species: Species,
    pub morphology: MorphologyRecord,
}

impl AnnotatedInstance {
    pub fn validate(&self, vocab: &AttributeVocabulary, width: f64, height: f64) -> Result<()> {
        let b = &self.bbox;
        if !b.is_finite() || b.x_min >= b.x_max || b.y_min >= b.y_max {
            return Err(Error::Validation(format!("degenerate box {:?}", b.to_array())));
        }
        if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > width || b.y_max > height {
            return Err(Error::Validation(format!(
                "box {:?} outside {width}x{height} image",
                b.to_array()
            )));
        }
        self.morphology.validate(vocab)
    }
}

/// Attribute supervision for a batch: row `r` of every vector refers to the same
/// ground-truth instance, images first then instances.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MorphologyTargets {
    per_attribute: [Vec<usize>; 5],
    rows: Vec<(usize, usize)>,
    image_offsets: Vec<usize>,
}

impl MorphologyTargets {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn attribute(&self, attribute: Attribute) -> &[usize] {
        &self.per_attribute[attribute.position()]
    }

    /// `(image index, instance index)` for each row.
    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn num_images(&self) -> usize {
        self.image_offsets.len().saturating_sub(1)
    }

    /// Builds the index vectors from already-encoded image targets.
    pub fn from_image_targets(batch: &[ImageTargets]) -> Self {
        let mut t = MorphologyTargets {
            image_offsets: vec![0],
            ..Default::default()
        };
        for (i, image) in batch.iter().enumerate() {
            for (j, idx) in image.attributes.iter().enumerate() {
                for a in Attribute::ALL {
                    t.per_attribute[a.position()].push(idx[a.position()]);
                }
                t.rows.push((i, j));
            }
            t.image_offsets.push(t.rows.len());
        }
        t
    }

    /// Targets of one image's instances for one attribute.
    pub fn image_targets(&self, attribute: Attribute, image: usize) -> &[usize] {
        let (start, end) = (self.image_offsets[image], self.image_offsets[image + 1]);
        &self.per_attribute[attribute.position()][start..end]
    }
}

/// Ground truth of one image in model space: boxes normalized to `[0, 1]`,
/// species and attribute class indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageTargets {
    pub boxes: Vec<BoxXyxy>,
    pub species: Vec<usize>,
    pub attributes: Vec<[usize; 5]>,
}

impl ImageTargets {
    pub fn from_instances(
        vocab: &AttributeVocabulary,
        instances: &[AnnotatedInstance],
        width: f64,
        height: f64,
    ) -> Result<Self> {
        let mut t = ImageTargets::default();
        for inst in instances {
            t.boxes.push(inst.bbox.normalized(width, height));
            t.species.push(inst.species.index());
            t.attributes.push(inst.morphology.indices(vocab)?);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn attribute(&self, attribute: Attribute) -> Vec<usize> {
        self.attributes.iter().map(|a| a[attribute.position()]).collect()
    }
}

/// Converts per-image ground-truth lists into the five index vectors.
pub fn gt_to_morphology_targets<I: AsRef<[AnnotatedInstance]>>(
    vocab: &AttributeVocabulary,
    batch: &[I],
) -> Result<MorphologyTargets> {
    let mut targets = MorphologyTargets {
        image_offsets: vec![0],
        ..Default::default()
    };
    for (i, image) in batch.iter().enumerate() {
        for (j, inst) in image.as_ref().iter().enumerate() {
            for a in Attribute::ALL {
                let idx = vocab.encode(a, inst.morphology.value(a)).map_err(|_| {
                    Error::Validation(format!(
                        "image {i}, instance {j}: illegal value `{}` for attribute `{a}`",
                        inst.morphology.value(a)
                    ))
                })?;
                targets.per_attribute[a.position()].push(idx);
            }
            targets.rows.push((i, j));
        }
        targets.image_offsets.push(targets.rows.len());
    }
    Ok(targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    /// `[x_min, y_min, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub species: Species,
    pub morphology: MorphologyRecord,
}

/// One dataset split on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Groups annotations by image (in `images` order), validating every record.
    pub fn instances_by_image(
        &self,
        vocab: &AttributeVocabulary,
    ) -> Result<Vec<(ImageEntry, Vec<AnnotatedInstance>)>> {
        let mut index = BTreeMap::new();
        for (pos, img) in self.images.iter().enumerate() {
            if index.insert(img.id, pos).is_some() {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
        }
        let mut grouped: Vec<(ImageEntry, Vec<AnnotatedInstance>)> =
            self.images.iter().map(|i| (i.clone(), Vec::new())).collect();
        for ann in &self.annotations {
            let pos = *index.get(&ann.image_id).ok_or_else(|| {
                Error::Validation(format!(
                    "annotation {} references unknown image {}",
                    ann.id, ann.image_id
                ))
            })?;
            let (img, list) = &mut grouped[pos];
            let inst = AnnotatedInstance {
                bbox: BoxXyxy::from_xywh(ann.bbox),
                species: ann.species,
                morphology: ann.morphology.clone(),
            };
            inst.validate(vocab, img.width as f64, img.height as f64)
                .map_err(|e| Error::Validation(format!("annotation {}: {e}", ann.id)))?;
            list.push(inst);
        }
        Ok(grouped)
    }
}
