//! Command implementations behind the `morphdet` binary.

pub mod augment;
pub mod config;
pub mod data;
mod evaluate;
pub mod optim;
pub mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::metrics::EvaluationSummary;
use crate::model::{Checkpoint, Model};
use crate::reporting::{render_image_report, ImageReport};
use crate::schema::{build_vocabulary, Attribute};

pub use config::{resolve_path, RunConfig, OUTPUT_ROOT_ENV};
pub use data::{Dataset, ImageData};
pub use evaluate::{evaluate_model, latency_comparison, predict};
pub use train::{batch_indices, train, TrainOutcome};

/// Writes the synthetic dataset described by the config.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, DatasetManifest)> {
    let cfg = cfg.clone().resolve()?;
    let dir = resolve_path(&cfg.data.dir);
    let manifest = generate_dataset(
        &cfg.scene,
        &build_vocabulary(),
        cfg.data.n_train,
        cfg.data.n_val,
        &dir,
    )?;
    Ok((dir, manifest))
}

pub fn load_model(checkpoint: &Path) -> Result<Model> {
    let device = Device::Cpu;
    let ckpt = Checkpoint::load(checkpoint, &device)?;
    Model::from_checkpoint(&ckpt, build_vocabulary(), DType::F32, &device)
}

/// Evaluates a checkpoint on a split of the configured dataset.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<EvaluationSummary> {
    let cfg = cfg.clone().resolve()?;
    let model = load_model(checkpoint)?;
    let set = Dataset::load(&resolve_path(&cfg.data.dir), split, model.vocabulary())?;
    evaluate_model(&model, &set, &cfg.eval)
}

/// Writes `<stem>.json` and `<stem>.txt` per PNG in `images` to `out_dir`.
pub fn infer(
    checkpoint: &Path,
    images: &Path,
    score_threshold: f64,
    out_dir: &Path,
) -> Result<Vec<(PathBuf, ImageReport)>> {
    let model = load_model(checkpoint)?;
    let files = data::list_images(images)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let (w, h, pixels) = data::read_image(&path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let img = ImageData {
            id: 0,
            file_name: stem.clone(),
            width: w,
            height: h,
            pixels,
        };
        if (w, h) != (model.config().image_width, model.config().image_height) {
            return Err(Error::format(
                &path,
                format!(
                    "image is {w}x{h}, model expects {}x{}",
                    model.config().image_width,
                    model.config().image_height
                ),
            ));
        }
        let dets = predict(&model, std::slice::from_ref(&img), 1, score_threshold)?.remove(0);
        let report = render_image_report(&dets, &stem, w, h)?;
        let json = out_dir.join(format!("{stem}.json"));
        report.save(&json)?;
        let txt = out_dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, report.text()).map_err(|e| Error::io(&txt, e))?;
        out.push((json, report));
    }
    Ok(out)
}

/// One row of the λ sweep: detection metrics plus attribute accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub ap_50_95: Option<f64>,
    pub ap_50: Option<f64>,
    pub ap_75: Option<f64>,
    pub ar_50_95: Option<f64>,
    pub accuracy: BTreeMap<Attribute, Option<f64>>,
    pub final_morphology_loss: Option<f64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: String,
    pub rows: Vec<AblationRow>,
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

impl AblationTable {
    /// Markdown with the detection columns followed by the attribute columns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| λ | AP50:95 | AP50 | AP75 | AR50:95 | Shape | Curvature | Dot count | Flagellum | Dev. stage |\n\
             |---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let acc: Vec<String> = Attribute::ALL.iter().map(|a| pct(r.accuracy[a])).collect();
            s += &format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.lambda,
                pct(r.ap_50_95),
                pct(r.ap_50),
                pct(r.ap_75),
                pct(r.ar_50_95),
                acc.join(" | ")
            );
        }
        s
    }
}

/// Trains once per λ with everything else fixed and evaluates each run on the
/// evaluation split.
pub fn ablate_lambda(cfg: &RunConfig, lambdas: &[f64]) -> Result<AblationTable> {
    if lambdas.is_empty() {
        return Err(Error::Config("no λ values given".into()));
    }
    let base = cfg.clone().resolve()?;
    let root = base.ablation.out_dir.clone();
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut run = base.clone();
        run.loss.lambda_morph = lambda;
        run.train.out_dir = root.join(format!("lambda_{lambda}"));
        let outcome = train(&run, None)?;
        let summary = eval(&run, &outcome.last_checkpoint, &run.eval.split)?;
        rows.push(AblationRow {
            lambda,
            ap_50_95: summary.ap_50_95,
            ap_50: summary.ap_50,
            ap_75: summary.ap_75,
            ar_50_95: summary.ar_50_95,
            accuracy: summary.attribute_accuracy.accuracy.clone(),
            final_morphology_loss: outcome.last.map(|l| l.morphology),
            out_dir: outcome.out_dir,
        });
    }
    let table = AblationTable {
        split: base.eval.split.clone(),
        rows,
    };
    let out = resolve_path(&root);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let json = out.join("ablation.json");
    std::fs::write(&json, serde_json::to_vec_pretty(&table)?).map_err(|e| Error::io(&json, e))?;
    let md = out.join("ablation.md");
    std::fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(table)
}
