use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::augment;
use super::config::{resolve_path, RunConfig};
use super::data::{batch_tensor, Dataset, ImageData};
use super::evaluate::evaluate_model;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::losses::{denoising_queries, total_loss, LossBreakdown};
use crate::matching::match_batch;
use crate::metrics::EvaluationSummary;
use crate::model::{Checkpoint, ForwardOptions, Model};
use crate::schema::{build_vocabulary, ImageTargets};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_LOG: &str = "eval_log.jsonl";
pub const CONFIG_ECHO: &str = "config.resolved.toml";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub steps: usize,
    /// Loss of the first step run by this invocation.
    pub first: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_eval: Option<EvaluationSummary>,
}

/// Dataset indices of the batch used at `step`: consecutive slices of
/// per-epoch permutations seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let batch = batch.min(n);
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|c| c.0 != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64 + 1);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
        pos += 1;
    }
    out
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    image_ids: Vec<u64>,
    file_names: Vec<&'a str>,
    loss: &'a LossBreakdown,
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn write_line(file: &mut File, path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Runs the training loop described by `cfg` and writes logs and checkpoints
/// under `cfg.train.out_dir`. With `resume`, parameters, optimizer state and
/// the step counter come from that checkpoint.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = cfg.clone().resolve()?;
    let vocab = build_vocabulary();
    let device = Device::Cpu;
    let data_root = resolve_path(&cfg.data.dir);
    let train_set = Dataset::load(&data_root, "train", &vocab)?;
    if train_set.is_empty() {
        return Err(Error::Config(format!(
            "training split under {} is empty",
            data_root.display()
        )));
    }
    let eval_set = if crate::datagen::annotation_path(&data_root, &cfg.train.eval_split).exists() {
        Some(Dataset::load(&data_root, &cfg.train.eval_split, &vocab)?)
    } else {
        None
    };
    let out_dir = resolve_path(&cfg.train.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let model = Model::new(cfg.model.clone(), vocab.clone(), DType::F32, &device)?;
    let steps = cfg.train.steps;
    let mut opt = Adam::new(model.params().vars(), cfg.optim.clone(), steps)?;
    let mut start = 0;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path, &device)?;
        ckpt.check_vocabulary(&vocab)?;
        if ckpt.header.model_config != cfg.model {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        model.params().load(&ckpt.tensors)?;
        start = ckpt.header.step as usize;
        opt.load_state(&ckpt.tensors, start)?;
    }

    let echo = out_dir.join(CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_toml()?).map_err(|e| Error::io(&echo, e))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let eval_path = out_dir.join(EVAL_LOG);
    let mut log = open_log(&log_path, resume.is_some())?;
    let mut eval_log = open_log(&eval_path, resume.is_some())?;

    let last_ckpt = out_dir.join(LAST_CHECKPOINT);
    let best_ckpt = out_dir.join(BEST_CHECKPOINT);
    let save = |path: &Path, step: usize, opt: &Adam, extra: serde_json::Value| -> Result<()> {
        let mut tensors = model.named_tensors();
        tensors.extend(opt.state_tensors());
        Checkpoint::save(path, &model.checkpoint_header(step as u64, extra), &tensors)
    };

    let matcher = cfg.matcher.weights();
    let mut first = None;
    let mut last = None;
    let mut best: Option<EvaluationSummary> = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut run_eval = |step: usize, opt: &Adam, best: &mut Option<EvaluationSummary>| -> Result<()> {
        let Some(set) = &eval_set else { return Ok(()) };
        let summary = evaluate_model(&model, set, &cfg.eval)?;
        let mut rec = serde_json::to_value(&summary)?;
        rec["step"] = serde_json::json!(step);
        write_line(&mut eval_log, &eval_path, &rec)?;
        let score = summary.ap_50.unwrap_or(0.0) + summary.ap_50_95.unwrap_or(0.0);
        if score > best_score {
            best_score = score;
            save(&best_ckpt, step, opt, serde_json::json!({ "ap_50": summary.ap_50 }))?;
            *best = Some(summary);
        }
        Ok(())
    };

    for step in start..steps {
        let idx = batch_indices(cfg.seed, step, train_set.len(), cfg.train.batch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        rng.set_stream(step as u64);
        let mut images: Vec<ImageData> = Vec::with_capacity(idx.len());
        let mut targets: Vec<ImageTargets> = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (img, t) = augment(&cfg.train.augment, &train_set.images[i], &train_set.targets[i], &mut rng)?;
            images.push(img);
            targets.push(t);
        }
        let x = batch_tensor(&images, &device)?;
        let dn = cfg
            .loss
            .dn_enabled
            .then(|| denoising_queries(&targets, cfg.loss.dn_box_noise, cfg.loss.dn_label_flip, &mut rng));
        let out = model.forward_with(
            &x,
            ForwardOptions {
                ablate_morphology: false,
                denoising: dn.as_ref(),
            },
        )?;
        let assignments = match_batch(&out.to_host()?, &targets, &matcher, cfg.matcher.per_layer)?;
        let (loss, breakdown) = total_loss(&out, &assignments, &targets, &cfg.loss)?;
        if !breakdown.is_finite() {
            let dump = out_dir.join(format!("nonfinite_step{step}.json"));
            let body = NonFiniteDump {
                step,
                image_ids: images.iter().map(|i| i.id).collect(),
                file_names: images.iter().map(|i| i.file_name.as_str()).collect(),
                loss: &breakdown,
            };
            std::fs::write(&dump, serde_json::to_vec_pretty(&body)?)
                .map_err(|e| Error::io(&dump, e))?;
            return Err(Error::NonFiniteLoss {
                step,
                batch: format!("{:?}", body.image_ids),
                dump,
            });
        }
        let lr = opt.learning_rate(step);
        let grad_norm = opt.step(&loss.backward()?)?;

        let mut rec = serde_json::Map::new();
        rec.insert("step".into(), serde_json::json!(step));
        rec.insert("lr".into(), serde_json::json!(lr));
        rec.insert("grad_norm".into(), serde_json::json!(grad_norm));
        rec.extend(breakdown.to_record());
        write_line(&mut log, &log_path, &serde_json::Value::Object(rec))?;
        if first.is_none() {
            first = Some(breakdown.clone());
        }
        last = Some(breakdown);

        let done = step + 1;
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 && done < steps {
            run_eval(done, &opt, &mut best)?;
        }
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < steps {
            save(&last_ckpt, done, &opt, serde_json::Value::Null)?;
        }
    }
    save(&last_ckpt, steps.max(start), &opt, serde_json::Value::Null)?;
    run_eval(steps.max(start), &opt, &mut best)?;
    if !best_ckpt.exists() {
        std::fs::copy(&last_ckpt, &best_ckpt).map_err(|e| Error::io(&best_ckpt, e))?;
    }
    Ok(TrainOutcome {
        out_dir,
        steps: steps.max(start),
        first,
        last,
        last_checkpoint: last_ckpt,
        best_checkpoint: best_ckpt,
        best_eval: best,
    })
}
