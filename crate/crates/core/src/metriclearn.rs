//! Distances and losses: Euclidean distance, triplet hinge, batch-hard
//! mining, stripe alignment by shortest path, and the combined objective.
//!
//! Every loss exists twice: a plain `f64` version used by oracles and
//! reporting, and a tape version that training differentiates. Mining is done
//! on values; the tape only sees the selected pairs and the selected path.

use reidapt_autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::alignednet::{BranchVars, Embedding};
use crate::error::{ReidError, Result};

pub const DEFAULT_MARGIN: f64 = 0.3;

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ReidError::LengthMismatch(u.len(), v.len()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

pub fn hinge(m: f64, d_ap: f64, d_an: f64) -> f64 {
    (m + d_ap - d_an).max(0.0)
}

pub fn triplet_loss(f_a: &[f64], f_p: &[f64], f_n: &[f64], m: f64) -> Result<f64> {
    Ok(hinge(m, euclidean_distance(f_a, f_p)?, euclidean_distance(f_a, f_n)?))
}

/// Squashed distance between two stripe rows: `(e^d - 1) / (e^d + 1)`.
pub fn stripe_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((euclidean_distance(a, b)? / 2.0).tanh())
}

/// Cheapest right/down path from `(0, 0)` to `(h-1, h-1)` through a row-major
/// `h x h` cost matrix. Returns the summed cost and the visited cells. When
/// both predecessors tie, the path comes from the row above.
pub fn shortest_path(costs: &[f64], h: usize) -> (f64, Vec<(usize, usize)>) {
    assert!(h > 0 && costs.len() == h * h, "cost matrix must be {h}x{h}");
    let mut acc = vec![0.0f64; h * h];
    for i in 0..h {
        for j in 0..h {
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[j - 1],
                (_, 0) => acc[(i - 1) * h],
                _ => acc[(i - 1) * h + j].min(acc[i * h + j - 1]),
            };
            acc[i * h + j] = prev + costs[i * h + j];
        }
    }
    let mut path = vec![(h - 1, h - 1)];
    let (mut i, mut j) = (h - 1, h - 1);
    while (i, j) != (0, 0) {
        if j == 0 || (i > 0 && acc[(i - 1) * h + j] <= acc[i * h + j - 1]) {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    (acc[h * h - 1], path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub distance: f64,
    pub path: Vec<(usize, usize)>,
}

/// Aligned local distance between two flat `h x c` stripe matrices.
pub fn dmli_distance(a: &[f64], b: &[f64], h: usize) -> Result<Alignment> {
    if a.len() != b.len() || h == 0 || a.len() % h != 0 {
        return Err(ReidError::Shape { expected: vec![h, a.len() / h.max(1)], got: vec![h, b.len() / h.max(1)] });
    }
    let c = a.len() / h;
    let mut costs = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            costs[i * h + j] = stripe_distance(&a[i * c..(i + 1) * c], &b[j * c..(j + 1) * c])?;
        }
    }
    let (distance, path) = shortest_path(&costs, h);
    Ok(Alignment { distance, path })
}

/// Sum of the diagonal cell costs, i.e. stripes compared without alignment.
pub fn diagonal_distance(a: &[f64], b: &[f64], h: usize) -> Result<f64> {
    let c = a.len() / h;
    (0..h).map(|i| stripe_distance(&a[i * c..(i + 1) * c], &b[i * c..(i + 1) * c])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Global,
    Dmli,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

impl Selection {
    pub fn loss(&self, m: f64) -> f64 {
        hinge(m, self.d_ap, self.d_an)
    }
}

/// Checks the batch invariants: at least two identities, and every anchor has
/// another sample of its identity.
pub fn check_batch(labels: &[u32]) -> Result<()> {
    for (a, la) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(i, l)| i != a && l == la) {
            return Err(ReidError::NoPositive(a));
        }
        if !labels.iter().any(|l| l != la) {
            return Err(ReidError::NoNegative(a));
        }
    }
    Ok(())
}

/// Hardest positive (largest distance, self excluded) and hardest negative
/// (smallest distance) per anchor over a row-major `n x n` distance matrix.
/// Ties keep the lowest index.
pub fn batch_hard_select(dist: &[f64], labels: &[u32]) -> Result<Vec<Selection>> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(ReidError::LengthMismatch(dist.len(), n * n));
    }
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let row = &dist[a * n..(a + 1) * n];
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for i in 0..n {
            if i == a {
                continue;
            }
            if labels[i] == labels[a] {
                if pos.map_or(true, |p| row[i] > row[p]) {
                    pos = Some(i);
                }
            } else if neg.map_or(true, |q| row[i] < row[q]) {
                neg = Some(i);
            }
        }
        let positive = pos.ok_or(ReidError::NoPositive(a))?;
        let negative = neg.ok_or(ReidError::NoNegative(a))?;
        out.push(Selection { positive, negative, d_ap: row[positive], d_an: row[negative] });
    }
    Ok(out)
}

pub fn mean_hinge(selections: &[Selection], m: f64) -> f64 {
    selections.iter().map(|s| s.loss(m)).sum::<f64>() / selections.len() as f64
}

/// Embeddings with identity labels and a margin; the operand of batch-hard mining.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub embeddings: Vec<Embedding>,
    pub person_ids: Vec<u32>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn new(embeddings: Vec<Embedding>, person_ids: Vec<u32>, margin: f64) -> Result<Self> {
        if embeddings.len() != person_ids.len() {
            return Err(ReidError::LengthMismatch(embeddings.len(), person_ids.len()));
        }
        check_batch(&person_ids)?;
        Ok(Self { embeddings, person_ids, margin })
    }

    pub fn distance_matrix(&self, kind: DistanceKind) -> Result<Vec<f64>> {
        let e = &self.embeddings;
        let n = e.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = match kind {
                    DistanceKind::Global => euclidean_distance(&e[i].global, &e[j].global)?,
                    DistanceKind::Dmli => dmli_distance(e[i].stripes(), e[j].stripes(), e[i].num_stripes())?.distance,
                };
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Ok(d)
    }
}

pub fn batch_hard_loss(batch: &TripletBatch, kind: DistanceKind) -> Result<(f64, Vec<Selection>)> {
    let sel = batch_hard_select(&batch.distance_matrix(kind)?, &batch.person_ids)?;
    Ok((mean_hinge(&sel, batch.margin), sel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id_loss: f64,
    pub global_triplet: f64,
    pub local_triplet: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(id_loss: f64, global_triplet: f64, local_triplet: f64) -> Self {
        Self { id_loss, global_triplet, local_triplet, total: id_loss + global_triplet + local_triplet }
    }
}

/// Mean softmax cross-entropy of per-sample logits against class indices.
pub fn cross_entropy(logits: &[&[f64]], classes: &[usize]) -> Result<f64> {
    if logits.len() != classes.len() {
        return Err(ReidError::LengthMismatch(logits.len(), classes.len()));
    }
    let mut total = 0.0;
    for (row, &c) in logits.iter().zip(classes) {
        if c >= row.len() {
            return Err(ReidError::InvalidArgument(format!("class {c} out of range for {} logits", row.len())));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        total += z.ln() + mx - row[c];
    }
    Ok(total / logits.len() as f64)
}

/// Identity loss + global batch-hard + local (aligned) batch-hard. `classes`
/// holds the logit index of each sample.
pub fn combined_loss(batch: &TripletBatch, classes: &[usize]) -> Result<LossBreakdown> {
    let logits = batch
        .embeddings
        .iter()
        .map(|e| e.logits.as_deref().ok_or(ReidError::MissingLogits))
        .collect::<Result<Vec<_>>>()?;
    let id = cross_entropy(&logits, classes)?;
    let (g, _) = batch_hard_loss(batch, DistanceKind::Global)?;
    let (l, _) = batch_hard_loss(batch, DistanceKind::Dmli)?;
    Ok(LossBreakdown::new(id, g, l))
}

/// Which terms are differentiated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Identity + global triplet + local triplet.
    Combined,
    /// Global batch-hard triplet term alone.
    GlobalTriplet,
}

/// Differentiable loss for one batch.
#[derive(Debug, Clone)]
pub struct TapeLoss {
    pub objective: Var,
    pub breakdown: LossBreakdown,
    pub global_selection: Vec<Selection>,
    pub local_selection: Vec<Selection>,
}

fn tape_euclidean_rows(tape: &mut Tape, x: Var, left: &[usize], right: &[usize]) -> Result<Var> {
    let l = tape.gather_rows(x, left)?;
    let r = tape.gather_rows(x, right)?;
    let diff = tape.sub(l, r)?;
    let sq = tape.square(diff)?;
    let s = tape.sum_axis(sq, 1)?;
    Ok(tape.sqrt(s)?)
}

fn tape_hinge_mean(tape: &mut Tape, d: Var, n: usize, m: f64) -> Result<Var> {
    let ap: Vec<usize> = (0..n).collect();
    let an: Vec<usize> = (n..2 * n).collect();
    let dap = tape.gather_rows(d, &ap)?;
    let dan = tape.gather_rows(d, &an)?;
    let gap = tape.sub(dap, dan)?;
    let gap = tape.add_scalar(gap, m)?;
    let h = tape.relu(gap)?;
    Ok(tape.mean(h)?)
}

/// Batch-hard hinge on `global[N, C]` with Euclidean distance.
pub fn tape_global_triplet(tape: &mut Tape, global: Var, labels: &[u32], m: f64) -> Result<(Var, Vec<Selection>)> {
    let n = labels.len();
    let c = tape.shape(global)[1];
    let g = tape.value(global);
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean_distance(&g[i * c..(i + 1) * c], &g[j * c..(j + 1) * c])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let sel = batch_hard_select(&dist, labels)?;
    let anchors: Vec<usize> = (0..n).chain(0..n).collect();
    let others: Vec<usize> = sel.iter().map(|s| s.positive).chain(sel.iter().map(|s| s.negative)).collect();
    let d = tape_euclidean_rows(tape, global, &anchors, &others)?;
    Ok((tape_hinge_mean(tape, d, n, m)?, sel))
}

/// Batch-hard hinge on aligned stripe distances; `stripes` is `[N * h, C]`.
/// Gradients flow through the cells of each selected shortest path.
pub fn tape_local_triplet(tape: &mut Tape, stripes: Var, h: usize, labels: &[u32], m: f64) -> Result<(Var, Vec<Selection>)> {
    let n = labels.len();
    let c = tape.shape(stripes)[1];
    let sv = tape.value(stripes);
    let block = |i: usize| &sv[i * h * c..(i + 1) * h * c];
    let mut dist = vec![0.0; n * n];
    let mut paths = vec![Vec::new(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let al = dmli_distance(block(i), block(j), h)?;
            dist[i * n + j] = al.distance;
            dist[j * n + i] = al.distance;
            paths[j * n + i] = al.path.iter().map(|&(a, b)| (b, a)).collect();
            paths[i * n + j] = al.path;
        }
    }
    let sel = batch_hard_select(&dist, labels)?;
    let (mut left, mut right, mut seg) = (Vec::new(), Vec::new(), Vec::new());
    let pairs = (0..n).map(|a| (a, sel[a].positive)).chain((0..n).map(|a| (a, sel[a].negative)));
    for (p, (a, b)) in pairs.enumerate() {
        for &(i, j) in &paths[a * n + b] {
            left.push(a * h + i);
            right.push(b * h + j);
            seg.push(p);
        }
    }
    let d = tape_euclidean_rows(tape, stripes, &left, &right)?;
    let d = tape.scale(d, 0.5)?;
    let d = tape.tanh(d)?;
    let d = tape.segment_sum(d, &seg, 2 * n)?;
    Ok((tape_hinge_mean(tape, d, n, m)?, sel))
}

/// Builds the training loss for one forward pass. `labels` are person ids used
/// for mining; `classes` index the identity head.
pub fn tape_combined_loss(
    tape: &mut Tape,
    vars: &BranchVars,
    stripes_per_image: usize,
    labels: &[u32],
    classes: &[usize],
    m: f64,
    objective: Objective,
) -> Result<TapeLoss> {
    check_batch(labels)?;
    let (g, global_selection) = tape_global_triplet(tape, vars.global, labels, m)?;
    let global_value = tape.scalar(g);
    let (objective_var, breakdown, local_selection) = match objective {
        Objective::Combined => {
            let id = tape.softmax_cross_entropy(vars.logits, classes)?;
            let (l, sel) = tape_local_triplet(tape, vars.stripes, stripes_per_image, labels, m)?;
            let b = LossBreakdown::new(tape.scalar(id), global_value, tape.scalar(l));
            let t = tape.add(id, g)?;
            (tape.add(t, l)?, b, sel)
        }
        Objective::GlobalTriplet => (g, LossBreakdown::new(0.0, global_value, 0.0), Vec::new()),
    };
    Ok(TapeLoss { objective: objective_var, breakdown, global_selection, local_selection })
}
