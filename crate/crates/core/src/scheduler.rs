//! PK batch sampling, batch-size doubling on convergence, the SGD noise scale
//! and detection of the collapsed-at-margin regime.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub batch_size: usize,
    pub n_instances: usize,
    pub margin: f64,
    pub max_batch_size: usize,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl ScheduleState {
    /// Starts at two identities per batch.
    pub fn new(n_instances: usize, margin: f64, max_batch_size: usize) -> Result<Self> {
        Self::with_batch(2 * n_instances, n_instances, margin, max_batch_size)
    }

    pub fn with_batch(batch_size: usize, n_instances: usize, margin: f64, max_batch_size: usize) -> Result<Self> {
        if n_instances == 0 || batch_size == 0 || batch_size % n_instances != 0 {
            return Err(ReidError::InvalidArgument(format!(
                "batch size {batch_size} must be a positive multiple of {n_instances} instances"
            )));
        }
        if batch_size > max_batch_size {
            return Err(ReidError::InvalidArgument(format!("batch size {batch_size} exceeds cap {max_batch_size}")));
        }
        if !(margin > 0.0) {
            return Err(ReidError::InvalidArgument(format!("margin must be positive, got {margin}")));
        }
        Ok(Self { batch_size, n_instances, margin, max_batch_size, epoch: 0, loss_history: Vec::new() })
    }

    pub fn identities_per_batch(&self) -> usize {
        self.batch_size / self.n_instances
    }
}

/// Doubles the batch when the epoch loss is below `0.8 * m` and the doubled
/// batch still fits under the cap.
pub fn schedule_step(state: &ScheduleState, epoch_mean_loss: f64) -> ScheduleState {
    let mut next = state.clone();
    if epoch_mean_loss < 0.8 * state.margin && state.batch_size * 2 <= state.max_batch_size {
        next.batch_size *= 2;
    }
    next.epoch += 1;
    next.loss_history.push(epoch_mean_loss);
    next
}

/// `eps * (N / B - 1)`.
pub fn noise_scale(n: usize, b: usize, lr: f64) -> Result<f64> {
    if b == 0 || b > n {
        return Err(ReidError::InvalidArgument(format!("noise scale needs 1 <= B <= N, got B={b}, N={n}")));
    }
    if !(lr > 0.0) {
        return Err(ReidError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    Ok(lr * (n as f64 / b as f64 - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseConfig {
    pub window: usize,
    pub band: f64,
    pub norm_threshold: f64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self { window: 5, band: 0.005, norm_threshold: 0.01 }
    }
}

/// True when the last `window` losses all sit within `band` of `m` and the
/// mean embedding norm is below the threshold.
pub fn collapse_detector(loss_history: &[f64], mean_norm: f64, m: f64, cfg: &CollapseConfig) -> bool {
    let w = cfg.window.max(1);
    loss_history.len() >= w
        && loss_history[loss_history.len() - w..].iter().all(|l| (l - m).abs() < cfg.band)
        && mean_norm < cfg.norm_threshold
}

fn group_by_label(labels: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

fn draw_instances(members: &[usize], k: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
    let mut pool = members.to_vec();
    pool.shuffle(rng);
    out.extend(pool.iter().cycle().take(k));
}

fn check_pk(batch_size: usize, k: usize, available: usize) -> Result<usize> {
    if k == 0 || batch_size == 0 || batch_size % k != 0 {
        return Err(ReidError::InvalidArgument(format!("batch size {batch_size} is not a multiple of K={k}")));
    }
    let p = batch_size / k;
    if p < 2 || p > available {
        return Err(ReidError::TooFewIdentities { needed: p.max(2), available });
    }
    Ok(p)
}

/// One batch: `batch_size / k` distinct identities, `k` indices each. An
/// identity with fewer than `k` images has its shuffled images repeated.
pub fn pk_sample(labels: &[u32], batch_size: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let groups = group_by_label(labels);
    let p = check_pk(batch_size, k, groups.len())?;
    let ids: Vec<&Vec<usize>> = groups.values().collect();
    let mut out = Vec::with_capacity(batch_size);
    for members in ids.choose_multiple(rng, p) {
        draw_instances(members, k, rng, &mut out);
    }
    Ok(out)
}

/// Batches covering every identity once per epoch. Identities are shuffled and
/// cut into groups of `P`; a short final group is topped up with identities
/// drawn from the rest.
pub fn epoch_batches(labels: &[u32], batch_size: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let groups = group_by_label(labels);
    let p = check_pk(batch_size, k, groups.len())?;
    let mut order: Vec<&Vec<usize>> = groups.values().collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(p) {
        let mut chosen: Vec<&Vec<usize>> = chunk.to_vec();
        if chosen.len() < p {
            let rest: Vec<&Vec<usize>> =
                order.iter().copied().filter(|g| !chosen.iter().any(|c| std::ptr::eq(*c, *g))).collect();
            chosen.extend(rest.choose_multiple(rng, p - chosen.len()));
        }
        let mut batch = Vec::with_capacity(batch_size);
        for members in chosen {
            draw_instances(members, k, rng, &mut batch);
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub batch_size: usize,
    pub mean_loss: f64,
    pub noise_scale: f64,
}

pub fn format_trace(rows: &[TraceRow]) -> String {
    let mut s = String::from("# epoch batch_size mean_loss noise_scale\n");
    for r in rows {
        writeln!(s, "{} {} {:.6} {:.6}", r.epoch, r.batch_size, r.mean_loss, r.noise_scale).expect("string write");
    }
    s
}
