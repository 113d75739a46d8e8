mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_min, det, gt, is_one_to_one, oracle_ap, random_targets};
use morphdet::geometry::{giou, iou, BoxXyxy};
use morphdet::losses::{morphology_loss_total, total_loss, LossWeights};
use morphdet::matching::{
    hungarian_assign, match_all_layers, CostMatrix, MatchAssignment, MatchCostWeights,
};
use morphdet::metrics::{compute_ap, detection_conditioned_accuracy};
use morphdet::model::{decode_predictions, Detection, ForwardOutput, LayerPredictions, Model, QueryOutputs};
use morphdet::schema::{
    build_vocabulary, gt_to_morphology_targets, AnnotatedInstance, Attribute, ImageTargets,
    MorphologyRecord, MorphologyTargets, Species,
};

fn instance(vocab_idx: [usize; 5], species: usize) -> AnnotatedInstance {
    let vocab = build_vocabulary();
    AnnotatedInstance {
        bbox: BoxXyxy::new(1.0, 2.0, 10.0, 12.0),
        species: Species::from_index(species).unwrap(),
        morphology: MorphologyRecord::from_indices(&vocab, vocab_idx).unwrap(),
    }
}

fn batch_strategy() -> impl Strategy<Value = Vec<Vec<([usize; 5], usize)>>> {
    let inst = (0..6usize, 0..4usize, 0..4usize, 0..2usize, 0..2usize, 0..3usize)
        .prop_map(|(a, b, c, d, e, s)| ([a, b, c, d, e], s));
    prop::collection::vec(prop::collection::vec(inst, 0..6), 0..8)
}

fn to_instances(batch: &[Vec<([usize; 5], usize)>]) -> Vec<Vec<AnnotatedInstance>> {
    batch
        .iter()
        .map(|img| img.iter().map(|(i, s)| instance(*i, *s)).collect())
        .collect()
}

#[test]
fn vocabulary_round_trips_every_value() {
    let vocab = build_vocabulary();
    for a in Attribute::ALL {
        for k in 0..vocab.cardinality(a) {
            let v = vocab.decode(a, k).unwrap();
            assert_eq!(vocab.encode(a, v).unwrap(), k);
        }
        for v in &vocab.descriptor(a).values {
            assert_eq!(vocab.decode(a, vocab.encode(a, v).unwrap()).unwrap(), *v);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn targets_length_and_range_law(batch in batch_strategy()) {
        let vocab = build_vocabulary();
        let t = gt_to_morphology_targets(&vocab, &to_instances(&batch)).unwrap();
        let total: usize = batch.iter().map(Vec::len).sum();
        prop_assert_eq!(t.len(), total);
        for a in Attribute::ALL {
            prop_assert_eq!(t.attribute(a).len(), total);
            prop_assert!(t.attribute(a).iter().all(|v| *v < vocab.cardinality(a)));
        }
        let expected_rows: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .flat_map(|(i, img)| (0..img.len()).map(move |j| (i, j)))
            .collect();
        prop_assert_eq!(t.rows(), &expected_rows[..]);
    }

    #[test]
    fn permuting_images_permutes_target_blocks(batch in batch_strategy(), seed in any::<u64>()) {
        let vocab = build_vocabulary();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<_> = order.iter().map(|i| batch[*i].clone()).collect();
        let a = gt_to_morphology_targets(&vocab, &to_instances(&batch)).unwrap();
        let b = gt_to_morphology_targets(&vocab, &to_instances(&permuted)).unwrap();
        for attr in Attribute::ALL {
            let expected: Vec<usize> = order
                .iter()
                .flat_map(|i| a.image_targets(attr, *i).to_vec())
                .collect();
            prop_assert_eq!(b.attribute(attr), &expected[..]);
        }
    }
}

fn cost_strategy(integer: bool) -> impl Strategy<Value = CostMatrix> {
    (1..=7usize)
        .prop_flat_map(|q| (Just(q), 0..=q))
        .prop_flat_map(move |(q, n)| {
            let cell = if integer {
                (0..20i32).prop_map(f64::from).boxed()
            } else {
                (-5.0..5.0f64).boxed()
            };
            prop::collection::vec(cell, q * n).prop_map(move |d| CostMatrix::new(q, n, d).unwrap())
        })
}

fn with_cost(c: &CostMatrix, f: impl Fn(f64) -> f64) -> CostMatrix {
    let data = (0..c.rows())
        .flat_map(|r| (0..c.cols()).map(move |k| (r, k)))
        .map(|(r, k)| f(c.get(r, k)))
        .collect();
    CostMatrix::new(c.rows(), c.cols(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hungarian_equals_brute_force_on_integer_costs(c in cost_strategy(true)) {
        let a = hungarian_assign(&c).unwrap();
        prop_assert!(is_one_to_one(&a, c.rows(), c.cols()));
        prop_assert_eq!(a.total_cost(&c), brute_force_min(&c));
    }

    #[test]
    fn hungarian_equals_brute_force_on_real_costs(c in cost_strategy(false)) {
        let a = hungarian_assign(&c).unwrap();
        prop_assert!(is_one_to_one(&a, c.rows(), c.cols()));
        prop_assert!((a.total_cost(&c) - brute_force_min(&c)).abs() < 1e-9);
    }

    #[test]
    fn shifting_all_costs_keeps_the_pairing(c in cost_strategy(false), shift in -50.0..50.0f64) {
        let a = hungarian_assign(&c).unwrap();
        let b = hungarian_assign(&with_cost(&c, |v| v + shift)).unwrap();
        // real-valued costs have a unique optimum almost surely
        prop_assert_eq!(a.pairs, b.pairs);
    }
}

fn random_layer(rng: &mut ChaCha8Rng, q: usize) -> QueryOutputs {
    let vocab = build_vocabulary();
    QueryOutputs {
        boxes: (0..q)
            .map(|_| {
                [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                ]
            })
            .collect(),
        class_logits: (0..q)
            .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect(),
        morph_logits: vocab
            .cardinalities()
            .iter()
            .map(|c| (0..q).map(|_| (0..*c).map(|_| rng.random::<f64>()).collect()).collect())
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn corrupting_one_layer_changes_only_its_assignment(seed in any::<u64>(), k in 0..3usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = random_targets(&mut rng, 3);
        let layers: Vec<QueryOutputs> = (0..3).map(|_| random_layer(&mut rng, 6)).collect();
        let w = MatchCostWeights::default();
        let before = match_all_layers(&layers, &targets, &w, true).unwrap();
        let mut corrupted = layers.clone();
        corrupted[k] = random_layer(&mut rng, 6);
        let after = match_all_layers(&corrupted, &targets, &w, true).unwrap();
        for l in 0..3 {
            if l != k {
                prop_assert_eq!(&before[l], &after[l]);
            }
        }
    }

    #[test]
    fn shuffled_queries_permute_the_assignment(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = random_targets(&mut rng, 3);
        let layer = random_layer(&mut rng, 6);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        // query `perm[i]` of the shuffled layer is query `i` of the original
        let mut shuffled = layer.clone();
        for (i, p) in perm.iter().enumerate() {
            shuffled.boxes[*p] = layer.boxes[i];
            shuffled.class_logits[*p] = layer.class_logits[i].clone();
        }
        let w = MatchCostWeights::default();
        let a = &match_all_layers(&[layer], &targets, &w, true).unwrap()[0];
        let b = &match_all_layers(&[shuffled], &targets, &w, true).unwrap()[0];
        let mut mapped: Vec<(usize, usize)> = a.pairs.iter().map(|(q, j)| (perm[*q], *j)).collect();
        mapped.sort_unstable();
        prop_assert_eq!(&mapped, &b.pairs);
    }
}

fn random_box() -> impl Strategy<Value = BoxXyxy> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..0.6f64, 0.0..0.6f64)
        .prop_map(|(x, y, w, h)| BoxXyxy::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn giou_is_bounded_by_iou(a in random_box(), b in random_box()) {
        let g = giou(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= iou(&a, &b) + 1e-12);
    }
}

fn tensor3(rng: &mut ChaCha8Rng, b: usize, q: usize, c: usize) -> Tensor {
    let v: Vec<f64> = (0..b * q * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    Tensor::from_vec(v, (b, q, c), &Device::Cpu).unwrap()
}

fn random_output(rng: &mut ChaCha8Rng, b: usize, q: usize, layers: usize) -> ForwardOutput {
    let vocab = build_vocabulary();
    ForwardOutput {
        per_layer: (0..layers)
            .map(|_| LayerPredictions {
                boxes: {
                    let v: Vec<f64> = (0..b * q * 4).map(|_| rng.random_range(0.1..0.5)).collect();
                    Tensor::from_vec(v, (b, q, 4), &Device::Cpu).unwrap()
                },
                class_logits: tensor3(rng, b, q, 3),
                morph_logits: vocab.cardinalities().iter().map(|c| tensor3(rng, b, q, *c)).collect(),
            })
            .collect(),
        denoising: None,
    }
}

fn random_assignments(rng: &mut ChaCha8Rng, targets: &[ImageTargets], q: usize) -> Vec<MatchAssignment> {
    targets
        .iter()
        .map(|t| {
            let mut qs: Vec<usize> = (0..q).collect();
            qs.shuffle(rng);
            let mut pairs: Vec<(usize, usize)> = (0..t.len()).map(|j| (qs[j], j)).collect();
            pairs.sort_unstable();
            let mut unmatched: Vec<usize> = qs[t.len()..].to_vec();
            unmatched.sort_unstable();
            MatchAssignment { pairs, unmatched }
        })
        .collect()
}

/// Replaces the rows of unmatched queries in every logit block with noise.
fn perturb_unmatched(out: &ForwardOutput, a: &[Vec<MatchAssignment>], rng: &mut ChaCha8Rng) -> ForwardOutput {
    let mut out = out.clone();
    for (layer, la) in out.per_layer.iter_mut().zip(a) {
        for block in layer.morph_logits.iter_mut().chain(std::iter::once(&mut layer.class_logits)) {
            let mut v = block.to_vec3::<f64>().unwrap();
            for (img, ia) in la.iter().enumerate() {
                for q in &ia.unmatched {
                    for x in v[img][*q].iter_mut() {
                        *x = rng.random_range(-50.0..50.0);
                    }
                }
            }
            let (b, q, c) = block.dims3().unwrap();
            let flat: Vec<f64> = v.into_iter().flatten().flatten().collect();
            *block = Tensor::from_vec(flat, (b, q, c), &Device::Cpu).unwrap();
        }
    }
    out
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn unmatched_queries_do_not_touch_morphology_loss(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<ImageTargets> = (0..2).map(|_| {
            let n = rng.random_range(0..4);
            random_targets(&mut rng, n)
        }).collect();
        let out = random_output(&mut rng, 2, 5, 3);
        let a: Vec<Vec<MatchAssignment>> = (0..3).map(|_| random_assignments(&mut rng, &targets, 5)).collect();
        let mt = MorphologyTargets::from_image_targets(&targets);
        let w = LossWeights::default();
        let before = scalar(&morphology_loss_total(&out, &a, &mt, &w).unwrap().total);
        let noisy = perturb_unmatched(&out, &a, &mut rng);
        let after = scalar(&morphology_loss_total(&noisy, &a, &mt, &w).unwrap().total);
        prop_assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn unit_layer_weight_isolates_that_layer(seed in any::<u64>(), k in 0..3usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<ImageTargets> = (0..2).map(|_| random_targets(&mut rng, 2)).collect();
        let out = random_output(&mut rng, 2, 5, 3);
        let a: Vec<Vec<MatchAssignment>> = (0..3).map(|_| random_assignments(&mut rng, &targets, 5)).collect();
        let mt = MorphologyTargets::from_image_targets(&targets);
        let uniform = morphology_loss_total(&out, &a, &mt, &LossWeights::default()).unwrap();
        let mut alpha = vec![0.0; 3];
        alpha[k] = 1.0;
        let w = LossWeights { alpha_layers: alpha, ..Default::default() };
        let single = morphology_loss_total(&out, &a, &mt, &w).unwrap();
        for m in 0..Attribute::COUNT {
            prop_assert_eq!(scalar(&single.per_attribute[m]), scalar(&uniform.per_layer[m][k]));
        }
    }

    #[test]
    fn total_is_affine_in_lambda(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<ImageTargets> = (0..2).map(|_| random_targets(&mut rng, 2)).collect();
        let out = random_output(&mut rng, 2, 5, 3);
        let a: Vec<Vec<MatchAssignment>> = (0..3).map(|_| random_assignments(&mut rng, &targets, 5)).collect();
        let at = |lambda: f64| {
            let w = LossWeights { lambda_morph: lambda, ..Default::default() };
            total_loss(&out, &a, &targets, &w).unwrap().1
        };
        let zero = at(0.0);
        prop_assert_eq!(zero.total, zero.det);
        for lambda in [0.2, 0.5, 1.0, 2.0] {
            let b = at(lambda);
            prop_assert_eq!(b.det, zero.det);
            prop_assert!((b.total - (zero.det + lambda * b.morphology)).abs() < 1e-12);
        }
    }
}

/// Boxes on a coarse grid so that fixtures mix hits, near misses and misses.
fn fixture_strategy() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<ImageTargets>)> {
    let grid_box = (0..4u8, 0..4u8, 1..4u8, 1..4u8).prop_map(|(x, y, w, h)| {
        let s = 0.2;
        let (x, y) = (x as f64 * s * 0.5, y as f64 * s * 0.5);
        [x, y, x + w as f64 * s, y + h as f64 * s]
    });
    let gts = prop::collection::vec(
        prop::collection::vec((grid_box.clone(), 0..2usize), 0..3),
        3,
    );
    let dets = prop::collection::vec((0..3usize, grid_box, 0..2usize, 0..2usize), 0..=10);
    (gts, dets, any::<u64>()).prop_map(|(gts, dets, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // distinct confidences
        let mut confs: Vec<f64> = (0..dets.len()).map(|k| 0.05 + 0.09 * k as f64).collect();
        confs.shuffle(&mut rng);
        let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); 3];
        for (k, (img, b, sp, flag)) in dets.into_iter().enumerate() {
            per_image[img].push(det(b, sp, confs[k], k, [0, 0, 0, flag, 0]));
        }
        let gts = gts
            .into_iter()
            .map(|g| gt(&g.into_iter().map(|(b, s)| (b, s, [0, 0, 0, 1, 0])).collect::<Vec<_>>()))
            .collect();
        (per_image, gts)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ap_matches_exhaustive_pr_enumeration((dets, gts) in fixture_strategy()) {
        let thresholds = [0.5, 0.75];
        let table = compute_ap(&dets, &gts, &thresholds);
        for (t, thr) in thresholds.iter().enumerate() {
            let ours = table.ap_at(t);
            let oracle = oracle_ap(&dets, &gts, *thr);
            match (ours, oracle) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn lowest_confidence_false_positive_never_raises_ap(
        (dets, gts) in fixture_strategy(), img in 0..3usize, sp in 0..2usize,
    ) {
        let before = compute_ap(&dets, &gts, &[0.5]).ap_at(0);
        let mut more = dets.clone();
        // far outside every grid box
        more[img].push(det([0.95, 0.95, 0.99, 0.99], sp, 0.001, 99, [0; 5]));
        let after = compute_ap(&more, &gts, &[0.5]).ap_at(0);
        if let (Some(b), Some(a)) = (before, after) {
            prop_assert!(a <= b + 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_input_order((dets, gts) in fixture_strategy(), seed in any::<u64>()) {
        let vocab = build_vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = dets.clone();
        for d in shuffled.iter_mut() {
            d.shuffle(&mut rng);
        }
        let t = morphdet::metrics::coco_thresholds();
        prop_assert_eq!(compute_ap(&dets, &gts, &t), compute_ap(&shuffled, &gts, &t));
        for aware in [false, true] {
            let a = detection_conditioned_accuracy(&dets, &gts, &vocab, 0.5, aware).unwrap();
            let b = detection_conditioned_accuracy(&shuffled, &gts, &vocab, 0.5, aware).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn unmatched_explanations_do_not_affect_accuracy((dets, gts) in fixture_strategy(), seed in any::<u64>()) {
        let vocab = build_vocabulary();
        let base = detection_conditioned_accuracy(&dets, &gts, &vocab, 0.5, false).unwrap();
        // rewrite the explanation of every detection that overlaps no ground truth
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edited = dets.clone();
        for (img, d) in edited.iter_mut().enumerate() {
            for x in d.iter_mut() {
                if gts[img].boxes.iter().all(|g| iou(&x.bbox, g) < 0.5) {
                    let card = vocab.cardinalities();
                    x.explanation = common::explanation(std::array::from_fn(|m| rng.random_range(0..card[m])));
                }
            }
        }
        prop_assert_eq!(base, detection_conditioned_accuracy(&edited, &gts, &vocab, 0.5, false).unwrap());
    }
}

fn small_model() -> Model {
    let cfg = common::tiny_config(7);
    Model::new(cfg, build_vocabulary(), DType::F64, &Device::Cpu).unwrap()
}

#[test]
fn permuted_queries_permute_every_head_alike() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = common::random_images(&mut rng, 1, 16, 16, DType::F64);
    let base = model.forward(&images).unwrap().to_host().unwrap();

    let perm = [2usize, 0, 3, 1];
    let vars = model.params().vars();
    for name in ["query.content", "query.anchor"] {
        let var = &vars[name];
        let rows = var.as_tensor().to_vec2::<f64>().unwrap();
        // new row perm[i] holds old row i
        let mut moved = rows.clone();
        for (i, p) in perm.iter().enumerate() {
            moved[*p] = rows[i].clone();
        }
        let cols = rows[0].len();
        var.set(&Tensor::from_vec(moved.concat(), (rows.len(), cols), &Device::Cpu).unwrap())
            .unwrap();
    }
    let permuted = model.forward(&images).unwrap().to_host().unwrap();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
    for (l, layer) in base.iter().enumerate() {
        let (a, b) = (&layer[0], &permuted[l][0]);
        for (i, p) in perm.iter().enumerate() {
            assert!(close(&a.boxes[i], &b.boxes[*p]), "layer {l} box {i}");
            assert!(close(&a.class_logits[i], &b.class_logits[*p]), "layer {l} class {i}");
            for m in 0..Attribute::COUNT {
                assert!(close(&a.morph_logits[m][i], &b.morph_logits[m][*p]), "layer {l} attr {m} query {i}");
            }
        }
    }
}

#[test]
fn decoding_reads_only_the_last_layer() {
    let model = small_model();
    let vocab = build_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = common::random_images(&mut rng, 1, 16, 16, DType::F64);
    let out = model.forward(&images).unwrap();
    let decode = |o: &ForwardOutput| decode_predictions(&o.last().to_host().unwrap()[0], &vocab, 0.0);
    let reference = decode(&out);
    let mut noisy = random_output(&mut rng, 1, 4, out.num_layers());
    *noisy.per_layer.last_mut().unwrap() = out.last().clone();
    assert_eq!(decode(&noisy), reference);
    assert_eq!(reference.len(), 4);
}
