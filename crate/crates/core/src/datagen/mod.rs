//! Deterministic synthetic smear generator.
//!
//! Each scene is a pure function of `(config.seed, index)`: the index selects an
//! independent ChaCha stream. Parasite attributes are sampled first, turned into
//! a [`DrawPlan`], and labels are read back from the plan, so every label is
//! known by construction.

pub mod render;

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;
use crate::schema::{
    hex_digest, AnnotatedInstance, AnnotationEntry, AnnotationFile, Attribute, AttributeVocabulary,
    ImageEntry, MorphologyRecord, Species,
};
use render::{frame, mask_from_stamps, place, spine, Mask, Raster, Stamp};

/// Per-attribute ambiguity in `[0, 1]`; 0 renders every attribute cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeDifficulty {
    pub shape_type: f64,
    pub curvature: f64,
    pub dot_count: f64,
    pub flagellum_present: f64,
    pub development_stage: f64,
}

impl AttributeDifficulty {
    pub fn get(&self, attribute: Attribute) -> f64 {
        match attribute {
            Attribute::ShapeType => self.shape_type,
            Attribute::Curvature => self.curvature,
            Attribute::DotCount => self.dot_count,
            Attribute::FlagellumPresent => self.flagellum_present,
            Attribute::DevelopmentStage => self.development_stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub min_parasites: usize,
    pub max_parasites: usize,
    /// Sampling probabilities for Leishmania, T. cruzi, T. brucei.
    pub species_weights: [f64; 3],
    pub difficulty: AttributeDifficulty,
    /// Distractor blobs per 10,000 px².
    pub background_clutter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_parasites: 1,
            max_parasites: 3,
            species_weights: [1.0 / 3.0; 3],
            difficulty: AttributeDifficulty::default(),
            background_clutter: 1.5,
            seed: 0,
        }
    }
}

/// Smallest image side the renderer accepts.
pub const MIN_IMAGE_SIDE: u32 = 32;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_IMAGE_SIDE || self.height < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "image size {}x{} is below the {MIN_IMAGE_SIDE}px minimum",
                self.width, self.height
            )));
        }
        if self.min_parasites > self.max_parasites {
            return Err(Error::Config(format!(
                "empty parasite range [{}, {}]",
                self.min_parasites, self.max_parasites
            )));
        }
        let sum: f64 = self.species_weights.iter().sum();
        if self.species_weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "species weights {:?} must be non-negative and sum to 1",
                self.species_weights
            )));
        }
        for a in Attribute::ALL {
            let d = self.difficulty.get(a);
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("difficulty for {a} is {d}, outside [0, 1]")));
            }
        }
        if !(self.background_clutter >= 0.0) {
            return Err(Error::Config("background clutter must be non-negative".into()));
        }
        // Placement needs room for the largest parasites with their tails.
        let footprint = 1.3 * self.body_length();
        let area = (self.width as f64) * (self.height as f64);
        if (self.max_parasites as f64) * footprint * footprint > 0.6 * area {
            return Err(Error::Config(format!(
                "a {}x{} image cannot fit {} parasites",
                self.width, self.height, self.max_parasites
            )));
        }
        Ok(())
    }

    /// Body length of a full-size parasite in pixels.
    pub fn body_length(&self) -> f64 {
        0.22 * self.width.min(self.height) as f64
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }
}

/// Everything the renderer drew for one parasite, in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawPlan {
    pub species: Species,
    pub shape: usize,
    pub curvature: usize,
    pub mature: bool,
    pub body: Vec<Stamp>,
    /// One stamp per chromatin dot.
    pub dots: Vec<Stamp>,
    /// Tail stamps when a flagellum was drawn.
    pub flagellum: Option<Vec<Stamp>>,
    pub color: [f64; 3],
    pub contrast: f64,
}

impl DrawPlan {
    /// Labels implied by what was drawn; dot counts saturate at `3+`.
    pub fn label_indices(&self) -> [usize; 5] {
        [
            self.shape,
            self.curvature,
            self.dots.len().min(3),
            self.flagellum.is_some() as usize,
            self.mature as usize,
        ]
    }

    pub fn mask(&self, width: usize, height: usize) -> Mask {
        let mut m = mask_from_stamps(width, height, &self.body);
        m.union(&mask_from_stamps(width, height, &self.dots));
        if let Some(tail) = &self.flagellum {
            m.union(&mask_from_stamps(width, height, tail));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Raster,
    pub instances: Vec<AnnotatedInstance>,
    pub plans: Vec<DrawPlan>,
    /// Rendered foreground of each instance.
    pub masks: Vec<Mask>,
}

const BACKGROUND: [f64; 3] = [0.93, 0.86, 0.88];
const DISTRACTOR: [f64; 3] = [0.86, 0.66, 0.70];
const CHROMATIN: [f64; 3] = [0.22, 0.02, 0.20];

fn species_color(s: Species) -> [f64; 3] {
    match s {
        Species::Leishmania => [0.62, 0.22, 0.52],
        Species::TCruzi => [0.36, 0.24, 0.66],
        Species::TBrucei => [0.18, 0.42, 0.72],
    }
}

/// Spine length, maximum half-width (both as fractions of body length) and
/// profile family for each shape index.
fn shape_params(shape: usize) -> (f64, f64) {
    match shape {
        0 => (0.55, 0.28), // oval
        1 => (1.00, 0.085), // elongated
        2 => (0.50, 0.27), // amoeboid
        3 => (0.85, 0.14), // fusiform
        4 => (0.85, 0.15), // crescent
        _ => (0.60, 0.19), // other: constant-width capsule
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

struct LocalParasite {
    body: Vec<Stamp>,
    dots: Vec<Stamp>,
    flagellum: Option<Vec<Stamp>>,
}

fn sample_species(rng: &mut ChaCha8Rng, weights: &[f64; 3]) -> Species {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, w) in Species::ALL.iter().zip(weights) {
        acc += w;
        if u < acc {
            return *s;
        }
    }
    *Species::ALL
        .iter()
        .zip(weights)
        .rev()
        .find(|(_, w)| **w > 0.0)
        .map(|(s, _)| s)
        .unwrap_or(&Species::Leishmania)
}

/// Builds one parasite around the origin.
fn build_local(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    shape: usize,
    curvature: usize,
    dot_target: usize,
    flagellum: bool,
    mature: bool,
) -> LocalParasite {
    let d = &cfg.difficulty;
    let scale = if mature {
        1.0
    } else {
        lerp(0.66, 0.92, d.development_stage)
    };
    let length = cfg.body_length() * scale * rng.random_range(0.92..1.08);

    let (s_frac, r_frac) = shape_params(shape);
    let blur = 0.6 * d.shape_type;
    let spine_len = length * lerp(s_frac, 0.7, blur);
    let r_max = length * lerp(r_frac, 0.17, blur);

    let bend = (1.0 - 0.6 * d.curvature) * rng.random_range(0.85..1.15);
    let (turn, wave) = match curvature {
        0 => (0.0, 0.0),
        1 => (bend * 0.85 * PI, 0.0),
        2 => (0.0, bend * 0.16),
        _ => (bend * 1.75 * PI, 0.0),
    };
    let n = (spine_len * 3.0).ceil() as usize + 2;
    let pts = spine(spine_len, turn, wave, n);

    let lobes = rng.random_range(2..=3) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let radius = |t: f64| -> f64 {
        let core = match shape {
            0 | 2 => (1.0 - (2.0 * t - 1.0).powi(2)).max(0.0).sqrt(),
            1 => (4.0 * t.min(1.0 - t) + 0.35).min(1.0),
            3 => (PI * t).sin(),
            4 => (PI * t).sin().powf(0.7),
            _ => 1.0,
        };
        let mut r = r_max * lerp(core, 0.8, blur);
        if shape == 2 {
            r *= 1.0 + 0.35 * (1.0 - blur) * (2.0 * PI * lobes * t + phase).sin();
        }
        r.max(0.9)
    };

    let mut body = Vec::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        let t = i as f64 / (n - 1) as f64;
        let r = radius(t);
        if shape == 4 {
            // one-sided lens
            let (_, nrm) = frame(&pts, i);
            let off = 0.55 * r * (1.0 - blur);
            body.push(Stamp {
                x: p[0] + nrm[0] * off,
                y: p[1] + nrm[1] * off,
                r: (r - off).max(0.9),
            });
        } else {
            body.push(Stamp { x: p[0], y: p[1], r });
        }
    }

    // Chromatin dots, kept apart and inside the body.
    let mut dot_r = (0.09 * length).clamp(0.9, 1.8) * (1.0 - 0.35 * d.dot_count);
    let mut dots: Vec<Stamp> = Vec::new();
    let mut tries = 0;
    while dots.len() < dot_target && tries < 800 {
        tries += 1;
        // small bodies: start over with smaller dots
        if tries % 100 == 0 && dot_r > 0.7 {
            dot_r = (dot_r * 0.8).max(0.7);
            dots.clear();
        }
        let i = rng.random_range((n / 8)..=(n - 1 - n / 8));
        let s = body[i];
        let (_, nrm) = frame(&pts, i);
        let slack = (s.r - dot_r - 0.5).max(0.0);
        let off = rng.random_range(-1.0..=1.0) * slack;
        let cand = Stamp {
            x: s.x + nrm[0] * off,
            y: s.y + nrm[1] * off,
            r: dot_r,
        };
        let min_gap = 2.0 * dot_r + 1.5;
        if dots
            .iter()
            .all(|o| ((o.x - cand.x).powi(2) + (o.y - cand.y).powi(2)).sqrt() >= min_gap)
        {
            dots.push(cand);
        }
    }

    let tail = flagellum.then(|| {
        let end = *pts.last().expect("spine has points");
        let (tan, nrm) = frame(&pts, n - 1);
        let tail_len = length * 0.7 * (1.0 - 0.5 * d.flagellum_present);
        let s_curve = rng.random_bool(d.curvature.clamp(0.0, 1.0));
        let amp = if s_curve { 0.22 } else { 0.05 } * tail_len;
        let steps = (tail_len * 2.0).ceil() as usize + 1;
        let start = body.last().map(|s| s.r).unwrap_or(1.0) * 0.5;
        (0..=steps)
            .map(|k| {
                let u = k as f64 / steps as f64;
                let a = start + u * tail_len;
                let w = amp * (2.0 * PI * u).sin() * u.min(1.0);
                Stamp {
                    x: end[0] + tan[0] * a + nrm[0] * w,
                    y: end[1] + tan[1] * a + nrm[1] * w,
                    r: 0.75,
                }
            })
            .collect()
    });

    LocalParasite {
        body,
        dots,
        flagellum: tail,
    }
}

fn transform(stamps: &[Stamp], angle: f64, origin: [f64; 2]) -> Vec<Stamp> {
    stamps
        .iter()
        .map(|s| {
            let [x, y] = place([s.x, s.y], angle, origin);
            Stamp { x, y, r: s.r }
        })
        .collect()
}

fn extent(stamps: &[Stamp]) -> [f64; 4] {
    stamps.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, s| {
            [
                b[0].min(s.x - s.r),
                b[1].min(s.y - s.r),
                b[2].max(s.x + s.r),
                b[3].max(s.y + s.r),
            ]
        },
    )
}

fn boxes_overlap(a: &[usize; 4], b: &[usize; 4], margin: usize) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

const PLACEMENT_ATTEMPTS: usize = 400;

/// Renders scene `index` of the stream defined by `config`.
pub fn generate_scene(
    config: &SceneConfig,
    vocab: &AttributeVocabulary,
    index: u64,
) -> Result<SyntheticScene> {
    config.validate()?;
    let (w, h) = (config.width as usize, config.height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);

    let count = rng.random_range(config.min_parasites..=config.max_parasites);
    let mut image = Raster::filled(w, h, BACKGROUND);

    let blobs = (config.background_clutter * (w * h) as f64 / 1e4).round() as usize;
    let side = w.min(h) as f64;
    for _ in 0..blobs {
        let r = side * rng.random_range(0.05..0.08);
        let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let outer = mask_from_stamps(w, h, &[Stamp { x, y, r }]);
        image.blend(&outer, DISTRACTOR, 0.8);
        let inner = mask_from_stamps(w, h, &[Stamp { x, y, r: 0.45 * r }]);
        image.blend(&inner, BACKGROUND, 0.5);
    }

    let mut plans = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    let mut taken: Vec<[usize; 4]> = Vec::new();
    for p in 0..count {
        let species = sample_species(&mut rng, &config.species_weights);
        let shape = rng.random_range(0..6);
        let curvature = rng.random_range(0..4);
        let dot_label = rng.random_range(0..4usize);
        let dot_target = if dot_label < 3 {
            dot_label
        } else {
            rng.random_range(3..=5)
        };
        let flagellum = rng.random_bool(0.5);
        let mature = rng.random_bool(0.5);

        let mut placed = None;
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let local = build_local(&mut rng, config, shape, curvature, dot_target, flagellum, mature);
            // a plan is usable only if its drawn dots still carry the sampled label
            if local.dots.len().min(3) != dot_label {
                continue;
            }
            let angle = rng.random_range(0.0..2.0 * PI);
            let mut all = transform(&local.body, angle, [0.0, 0.0]);
            if let Some(t) = &local.flagellum {
                all.extend(transform(t, angle, [0.0, 0.0]));
            }
            let e = extent(&all);
            let (ew, eh) = (e[2] - e[0], e[3] - e[1]);
            if ew + 4.0 >= w as f64 || eh + 4.0 >= h as f64 {
                continue;
            }
            let ox = rng.random_range((2.0 - e[0])..(w as f64 - 2.0 - e[2]));
            let oy = rng.random_range((2.0 - e[1])..(h as f64 - 2.0 - e[3]));
            let plan = DrawPlan {
                species,
                shape,
                curvature,
                mature,
                body: transform(&local.body, angle, [ox, oy]),
                dots: transform(&local.dots, angle, [ox, oy]),
                flagellum: local.flagellum.as_ref().map(|t| transform(t, angle, [ox, oy])),
                color: species_color(species).map(|c| c + rng.random_range(-0.03..0.03)),
                contrast: if mature {
                    1.0
                } else {
                    lerp(0.55, 0.9, config.difficulty.development_stage)
                },
            };
            let mask = plan.mask(w, h);
            let Some(b) = mask.bounds() else { continue };
            if taken.iter().any(|t| boxes_overlap(t, &b, 3)) {
                continue;
            }
            taken.push(b);
            placed = Some((plan, mask));
            break;
        }
        let Some((plan, mask)) = placed else {
            // a crowded scene keeps what fits once the minimum is met
            if p >= config.min_parasites {
                break;
            }
            return Err(Error::Config(format!(
                "could not place parasite {} of {count} in a {w}x{h} image",
                p + 1
            )));
        };
        plans.push(plan);
        masks.push(mask);
    }

    let mut instances = Vec::with_capacity(plans.len());
    for (plan, mask) in plans.iter().zip(&masks) {
        let alpha = 0.85 * plan.contrast;
        image.blend(&mask_from_stamps(w, h, &plan.body), plan.color, alpha);
        if let Some(tail) = &plan.flagellum {
            let a = alpha * (1.0 - 0.5 * config.difficulty.flagellum_present);
            image.blend(&mask_from_stamps(w, h, tail), plan.color, a);
        }
        let dot_alpha = plan.contrast * (0.9 - 0.5 * config.difficulty.dot_count);
        image.blend(&mask_from_stamps(w, h, &plan.dots), CHROMATIN, dot_alpha);

        let b = mask.bounds().expect("placed parasites are visible");
        instances.push(AnnotatedInstance {
            bbox: BoxXyxy::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64),
            species: plan.species,
            morphology: MorphologyRecord::from_indices(vocab, plan.label_indices())?,
        });
    }

    for v in image.data.iter_mut() {
        *v = (*v + rng.random_range(-0.02f32..0.02)).clamp(0.0, 1.0);
    }

    Ok(SyntheticScene {
        image,
        instances,
        plans,
        masks,
    })
}

/// Lossless PNG encoding of a raster.
pub fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(raster.width as u32, raster.height as u32, raster.to_rgb8())
        .ok_or_else(|| Error::Contract("raster size mismatch".into()))?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Contract(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub annotation_file: String,
    pub image_dir: String,
    pub num_images: usize,
    pub num_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: SceneConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub splits: Vec<SplitManifest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn annotation_path(root: &Path, split: &str) -> PathBuf {
    root.join("annotations").join(format!("{split}.json"))
}

pub fn image_dir(root: &Path, split: &str) -> PathBuf {
    root.join("images").join(split)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes both splits plus `manifest.json` under `out_dir`. Train scenes use
/// stream indices `0..n_train`, validation scenes the next `n_val`.
pub fn generate_dataset(
    config: &SceneConfig,
    vocab: &AttributeVocabulary,
    n_train: usize,
    n_val: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let mut splits = Vec::new();
    for (name, offset, count) in [("train", 0, n_train), ("val", n_train, n_val)] {
        let img_dir = image_dir(out_dir, name);
        create_dir(&img_dir)?;
        create_dir(&out_dir.join("annotations"))?;
        let mut file = AnnotationFile::default();
        for k in 0..count {
            let scene = generate_scene(config, vocab, (offset + k) as u64)?;
            let image_id = k as u64 + 1;
            let file_name = format!("{image_id:06}.png");
            write_file(&img_dir.join(&file_name), &encode_png(&scene.image)?)?;
            file.images.push(ImageEntry {
                id: image_id,
                file_name,
                width: config.width,
                height: config.height,
            });
            for inst in scene.instances {
                file.annotations.push(AnnotationEntry {
                    id: file.annotations.len() as u64 + 1,
                    image_id,
                    bbox: inst.bbox.to_xywh(),
                    species: inst.species,
                    morphology: inst.morphology,
                });
            }
        }
        let ann_path = annotation_path(out_dir, name);
        file.save(&ann_path)?;
        // validate what was written
        AnnotationFile::load(&ann_path)?
            .instances_by_image(vocab)
            .map_err(|e| Error::format(&ann_path, e.to_string()))?;
        splits.push(SplitManifest {
            name: name.to_string(),
            annotation_file: format!("annotations/{name}.json"),
            image_dir: format!("images/{name}"),
            num_images: count,
            num_instances: file.annotations.len(),
        });
    }
    let manifest = DatasetManifest {
        format_version: 1,
        config_hash: config.hash(),
        config: config.clone(),
        n_train,
        n_val,
        splits,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_file(&path, &bytes)?;
    Ok(manifest)
}
