//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use morphdet::geometry::BoxXyxy;
use morphdet::losses::{total_loss, LossWeights};
use morphdet::matching::{match_batch, CostMatrix, MatchAssignment, MatchCostWeights};
use morphdet::model::{AttributeCall, Detection, Model, ModelConfig};
use morphdet::schema::{build_vocabulary, Attribute, ImageTargets, Species};

pub fn explanation(attrs: [usize; 5]) -> BTreeMap<Attribute, AttributeCall> {
    let vocab = build_vocabulary();
    Attribute::ALL
        .iter()
        .map(|a| {
            let index = attrs[a.position()];
            (
                *a,
                AttributeCall {
                    index,
                    value: vocab.decode(*a, index).unwrap().to_string(),
                    confidence: 0.9,
                },
            )
        })
        .collect()
}

pub fn det(b: [f64; 4], species: usize, conf: f64, query: usize, attrs: [usize; 5]) -> Detection {
    Detection {
        bbox: BoxXyxy::from_array(b),
        species: Species::from_index(species).unwrap(),
        species_confidence: conf,
        explanation: explanation(attrs),
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

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Plain intersection-over-union written out for the oracles.
pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// True-positive flags of a confidence-ranked list, recomputed from scratch
/// for every prefix: each prefix is matched greedily on its own.
fn prefix_tp_counts(ranked: &[(usize, [f64; 4])], gts: &[Vec<[f64; 4]>], thr: f64) -> Vec<usize> {
    (1..=ranked.len())
        .map(|k| {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = 0;
            for (img, b) in &ranked[..k] {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts[*img].iter().enumerate() {
                    let v = oracle_iou(*b, *g);
                    if !used[*img][j] && v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[*img][j] = true;
                    tp += 1;
                }
            }
            tp
        })
        .collect()
}

/// 101-point AP of one class from an exhaustive enumeration of ranking
/// cut-offs: at each recall level, the best precision among all cut-offs that
/// reach it. Detections must have distinct confidences.
pub fn oracle_class_ap(dets: &[Vec<Detection>], gts: &[ImageTargets], class: usize, thr: f64) -> Option<f64> {
    let class_gts: Vec<Vec<[f64; 4]>> = gts
        .iter()
        .map(|g| {
            (0..g.len())
                .filter(|j| g.species[*j] == class)
                .map(|j| g.boxes[j].to_array())
                .collect()
        })
        .collect();
    let n_pos: usize = class_gts.iter().map(Vec::len).sum();
    if n_pos == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, [f64; 4])> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| {
            d.iter()
                .filter(|x| x.species.index() == class)
                .map(move |x| (x.species_confidence, i, x.bbox.to_array()))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let ranked: Vec<(usize, [f64; 4])> = ranked.into_iter().map(|r| (r.1, r.2)).collect();
    let tps = prefix_tp_counts(&ranked, &class_gts, thr);
    let points: Vec<(f64, f64)> = tps
        .iter()
        .enumerate()
        .map(|(k, tp)| (*tp as f64 / n_pos as f64, *tp as f64 / (k + 1) as f64))
        .collect();
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        sum += points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

/// Mean over classes with ground truth.
pub fn oracle_ap(dets: &[Vec<Detection>], gts: &[ImageTargets], thr: f64) -> Option<f64> {
    let aps: Vec<f64> = (0..Species::COUNT)
        .filter_map(|c| oracle_class_ap(dets, gts, c, thr))
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum total cost over every injective map from columns to rows.
pub fn brute_force_min(cost: &CostMatrix) -> f64 {
    let (q, n) = (cost.rows(), cost.cols());
    let mut best = f64::INFINITY;
    for perm in permutations(q) {
        let total: f64 = (0..n).map(|j| cost.get(perm[j], j)).sum();
        best = best.min(total);
    }
    if n == 0 {
        0.0
    } else {
        best
    }
}

pub fn is_one_to_one(a: &MatchAssignment, q: usize, n: usize) -> bool {
    let mut qs: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
    let mut js: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
    qs.sort_unstable();
    js.sort_unstable();
    let distinct = qs.windows(2).all(|w| w[0] != w[1]) && js.windows(2).all(|w| w[0] != w[1]);
    let mut covered: Vec<usize> = qs.iter().chain(&a.unmatched).copied().collect();
    covered.sort_unstable();
    distinct
        && a.pairs.len() == n.min(q)
        && js == (0..n).collect::<Vec<_>>()
        && covered == (0..q).collect::<Vec<_>>()
}

/// Gradient-check configuration: d = 8, Q = 4, N = 2 decoder layers.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        num_queries: 4,
        num_decoder_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        backbone_channels: [4, 4, 8, 8],
        image_width: 16,
        image_height: 16,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

pub fn random_images(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, dtype: DType) -> Tensor {
    let data: Vec<f64> = (0..b * h * w * 3).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(data, (b, h, w, 3), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> ImageTargets {
    let vocab = build_vocabulary();
    let mut t = ImageTargets::default();
    for _ in 0..n {
        let (cx, cy) = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
        let (w, h) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
        t.boxes.push(BoxXyxy::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
        t.species.push(rng.random_range(0..Species::COUNT));
        let card = vocab.cardinalities();
        t.attributes.push(std::array::from_fn(|m| rng.random_range(0..card[m])));
    }
    t
}

#[derive(Debug)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Analytic vs central-difference gradients of the total loss in 64-bit on
/// the tiny model. Assignments are computed once and held fixed, since the
/// matcher is piecewise constant in the parameters.
pub fn gradient_check(seed: u64, probes: usize, eps: f64) -> GradCheck {
    let device = Device::Cpu;
    let cfg = tiny_config(seed);
    let model = Model::new(cfg.clone(), build_vocabulary(), DType::F64, &device).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let images = random_images(&mut rng, 2, cfg.image_height, cfg.image_width, DType::F64);
    let targets = vec![random_targets(&mut rng, 2), random_targets(&mut rng, 1)];
    let weights = LossWeights::default();

    let out = model.forward(&images).unwrap();
    let assignments = match_batch(
        &out.to_host().unwrap(),
        &targets,
        &MatchCostWeights::default(),
        true,
    )
    .unwrap();
    let loss_at = |m: &Model| -> f64 {
        let out = m.forward(&images).unwrap();
        scalar(&total_loss(&out, &assignments, &targets, &weights).unwrap().0)
    };
    let (total, _) = total_loss(&out, &assignments, &targets, &weights).unwrap();
    let grads = total.backward().unwrap();

    let vars: Vec<(String, candle_core::Var)> = model
        .params()
        .vars()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    for _ in 0..probes {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let shape = var.as_tensor().shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let k = rng.random_range(0..base.len());
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[k])
            .unwrap_or(0.0);
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            var.set(&Tensor::from_vec(v, shape.clone(), &device).unwrap()).unwrap();
            loss_at(&model)
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        var.set(&Tensor::from_vec(base, shape.clone(), &device).unwrap()).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{k}]: analytic {analytic:.8e}, numeric {numeric:.8e}");
        }
    }
    GradCheck {
        probes,
        max_rel_error: max_rel,
        worst,
    }
}
