//! Query-to-ground-truth assignment.
//!
//! The matching cost only looks at detection outputs (species score and box);
//! attribute predictions never influence which query supervises which parasite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BoxXyxy};
use crate::model::QueryOutputs;
use crate::schema::ImageTargets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchCostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl MatchCostWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.class, self.l1, self.giou];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!(
                "matching weights {w:?} must be non-negative and not all zero"
            )));
        }
        Ok(())
    }
}

/// Dense row-major cost matrix, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "cost matrix {rows}x{cols} given {} entries",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// One-to-one pairing of queries with ground-truth instances.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(query, ground truth)` sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, j)| cost.get(q, j)).sum()
    }

    /// Query matched to ground truth `j`, if any.
    pub fn query_for(&self, j: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == j).map(|p| p.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Q×N matching cost `-w_class·p(species) + w_l1·‖b − b̂‖₁ + w_giou·(1 − GIoU)`
/// with boxes in normalized `(cx, cy, w, h)`.
pub fn pairwise_cost(
    layer: &QueryOutputs,
    targets: &ImageTargets,
    weights: &MatchCostWeights,
) -> CostMatrix {
    let q = layer.boxes.len();
    let n = targets.len();
    let mut data = Vec::with_capacity(q * n);
    for (pred_box, logits) in layer.boxes.iter().zip(&layer.class_logits) {
        let pred_xyxy = BoxXyxy::from_cxcywh(*pred_box);
        for j in 0..n {
            let gt = targets.boxes[j];
            let gt_cxcywh = gt.to_cxcywh();
            let l1: f64 = pred_box
                .iter()
                .zip(&gt_cxcywh)
                .map(|(a, b)| (a - b).abs())
                .sum();
            let p = sigmoid(logits[targets.species[j]]);
            data.push(
                -weights.class * p + weights.l1 * l1 + weights.giou * (1.0 - giou(&pred_xyxy, &gt)),
            );
        }
    }
    CostMatrix {
        rows: q,
        cols: n,
        data,
    }
}

/// Exact minimum-cost assignment of every column (ground truth) to a distinct
/// row (query), by shortest augmenting paths with dual potentials.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<MatchAssignment> {
    let (queries, gts) = (cost.rows, cost.cols);
    if queries < gts {
        return Err(Error::Contract(format!(
            "{gts} ground truths but only {queries} queries"
        )));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("cost matrix has non-finite entries".into()));
    }
    // Solve the transposed problem: n = gts rows, m = queries columns, n <= m.
    // Index 0 is a sentinel column; rows and columns are 1-based.
    let (n, m) = (gts, queries);
    let at = |row: usize, col: usize| cost.get(col - 1, row - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = at(r0, col) - u[r0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    let mut unmatched = Vec::with_capacity(m - n);
    for col in 1..=m {
        if owner[col] != 0 {
            pairs.push((col - 1, owner[col] - 1));
        } else {
            unmatched.push(col - 1);
        }
    }
    Ok(MatchAssignment { pairs, unmatched })
}

/// One assignment per decoder layer for a single image.
///
/// With `per_layer` false every layer reuses the last layer's assignment.
pub fn match_all_layers(
    layers: &[QueryOutputs],
    targets: &ImageTargets,
    weights: &MatchCostWeights,
    per_layer: bool,
) -> Result<Vec<MatchAssignment>> {
    let Some(last) = layers.last() else {
        return Ok(Vec::new());
    };
    if per_layer {
        layers
            .iter()
            .map(|l| hungarian_assign(&pairwise_cost(l, targets, weights)))
            .collect()
    } else {
        let a = hungarian_assign(&pairwise_cost(last, targets, weights))?;
        Ok(vec![a; layers.len()])
    }
}

/// Assignments for a whole batch, indexed `[layer][image]`.
pub fn match_batch(
    per_layer_outputs: &[Vec<QueryOutputs>],
    targets: &[ImageTargets],
    weights: &MatchCostWeights,
    per_layer: bool,
) -> Result<Vec<Vec<MatchAssignment>>> {
    let layers = per_layer_outputs.len();
    let mut out = vec![Vec::with_capacity(targets.len()); layers];
    for (b, t) in targets.iter().enumerate() {
        let image_layers: Vec<QueryOutputs> =
            per_layer_outputs.iter().map(|l| l[b].clone()).collect();
        for (l, a) in match_all_layers(&image_layers, t, weights, per_layer)?
            .into_iter()
            .enumerate()
        {
            out[l].push(a);
        }
    }
    Ok(out)
}
