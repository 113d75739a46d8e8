//! Loading generated datasets and loose image folders into memory.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::datagen::{annotation_path, image_dir};
use crate::error::{Error, Result};
use crate::schema::{AnnotationFile, AttributeVocabulary, ImageTargets};

/// RGB pixels in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok((w as usize, h as usize, pixels))
}

/// One split: images with their normalized targets, in annotation order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageData>,
    pub targets: Vec<ImageTargets>,
}

impl Dataset {
    pub fn load(root: &Path, split: &str, vocab: &AttributeVocabulary) -> Result<Self> {
        let ann_path = annotation_path(root, split);
        let file = AnnotationFile::load(&ann_path)?;
        let per_image = file
            .instances_by_image(vocab)
            .map_err(|e| Error::format(&ann_path, e.to_string()))?;
        let dir = image_dir(root, split);
        let mut images = Vec::with_capacity(per_image.len());
        let mut targets = Vec::with_capacity(per_image.len());
        for (entry, instances) in per_image {
            let path = dir.join(&entry.file_name);
            let (w, h, pixels) = read_image(&path)?;
            if (w as u32, h as u32) != (entry.width, entry.height) {
                return Err(Error::format(
                    &path,
                    format!("image is {w}x{h}, annotation says {}x{}", entry.width, entry.height),
                ));
            }
            targets.push(ImageTargets::from_instances(vocab, &instances, w as f64, h as f64)?);
            images.push(ImageData {
                id: entry.id,
                file_name: entry.file_name.clone(),
                width: w,
                height: h,
                pixels,
            });
        }
        Ok(Self { images, targets })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stacks images into a `[B, H, W, 3]` batch.
pub fn batch_tensor<'a>(
    images: impl IntoIterator<Item = &'a ImageData>,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for img in images {
        match shape {
            None => shape = Some((img.height, img.width)),
            Some(s) if s != (img.height, img.width) => {
                return Err(Error::Contract(format!(
                    "batch mixes image sizes {s:?} and {:?}",
                    (img.height, img.width)
                )))
            }
            _ => {}
        }
        data.extend_from_slice(&img.pixels);
        n += 1;
    }
    let (h, w) = shape.ok_or_else(|| Error::Contract("empty batch".into()))?;
    Ok(Tensor::from_vec(data, (n, h, w, 3), device)?)
}

/// PNG files of a directory in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
