//! Metric-learning training loop for [`AlignedNet`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reidapt_autodiff::{Sgd, Tape};
use serde::{Deserialize, Serialize};

use crate::alignednet::AlignedNet;
use crate::error::{ReidError, Result};
use crate::metriclearn::{tape_combined_loss, Objective, DEFAULT_MARGIN};
use crate::scheduler::{
    collapse_detector, epoch_batches, noise_scale, schedule_step, CollapseConfig, ScheduleState, TraceRow,
};
use crate::synthgen::Image;

/// Step decay used when the batch scheduler is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub every: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub margin: f64,
    pub n_instances: usize,
    /// Batch size of the first epoch; with the scheduler off it never changes.
    pub batch_size: usize,
    pub max_batch_size: usize,
    pub use_scheduler: bool,
    pub lr_decay: Option<LrDecay>,
    pub objective: Objective,
    pub collapse: CollapseConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            margin: DEFAULT_MARGIN,
            n_instances: 4,
            batch_size: 8,
            max_batch_size: 88,
            use_scheduler: true,
            lr_decay: None,
            objective: Objective::Combined,
            collapse: CollapseConfig::default(),
            seed: 0,
        }
    }
}

/// Images with training identities.
#[derive(Debug, Clone)]
pub struct TrainSet<'a> {
    pub images: Vec<&'a Image>,
    pub labels: Vec<u32>,
}

impl<'a> TrainSet<'a> {
    pub fn new(images: Vec<&'a Image>, labels: Vec<u32>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(ReidError::LengthMismatch(images.len(), labels.len()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Dense class index of every label, in ascending label order.
    pub fn class_map(&self) -> BTreeMap<u32, usize> {
        let mut ids: Vec<u32> = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_map().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub id_loss: f64,
    pub global_triplet: f64,
    pub local_triplet: f64,
    pub total: f64,
    pub noise_scale: f64,
    pub mean_global_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub schedule: ScheduleState,
    pub collapsed: bool,
    /// First epoch (0-based) at which the collapse detector fired.
    pub collapse_epoch: Option<usize>,
}

impl TrainReport {
    pub fn trace(&self) -> Vec<TraceRow> {
        self.epochs
            .iter()
            .map(|e| TraceRow { epoch: e.epoch, batch_size: e.batch_size, mean_loss: e.global_triplet, noise_scale: e.noise_scale })
            .collect()
    }
}

pub fn train(net: &mut AlignedNet, set: &TrainSet, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(net, set, cfg, |_| {})
}

/// Trains in place; `observe` sees every finished epoch.
pub fn train_with(
    net: &mut AlignedNet,
    set: &TrainSet,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let classes_of = set.class_map();
    if classes_of.len() != net.config().num_classes {
        return Err(ReidError::InvalidArgument(format!(
            "identity head has {} outputs but the training set has {} identities",
            net.config().num_classes,
            classes_of.len()
        )));
    }
    let mut state = ScheduleState::with_batch(cfg.batch_size, cfg.n_instances, cfg.margin, cfg.max_batch_size)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = net.config().stripes();
    let c = net.config().feature_dim();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut collapse_epoch = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = match cfg.lr_decay {
            Some(d) if !cfg.use_scheduler && d.every > 0 => cfg.lr * d.gamma.powi((epoch / d.every) as i32),
            _ => cfg.lr,
        };
        sgd.set_lr(lr);
        let batches = epoch_batches(&set.labels, state.batch_size, cfg.n_instances, &mut rng)?;
        let (mut id, mut g, mut l, mut norm) = (0.0, 0.0, 0.0, 0.0);
        for batch in &batches {
            let images: Vec<&Image> = batch.iter().map(|&i| set.images[i]).collect();
            let labels: Vec<u32> = batch.iter().map(|&i| set.labels[i]).collect();
            let classes: Vec<usize> = labels.iter().map(|l| classes_of[l]).collect();
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape, true);
            let vars = net.forward(&mut tape, &bound, &images)?;
            let loss = tape_combined_loss(&mut tape, &vars, h, &labels, &classes, cfg.margin, cfg.objective)?;
            let b = loss.breakdown;
            if !b.total.is_finite() {
                return Err(ReidError::NonFiniteLoss { step, detail: format!("{b:?}") });
            }
            let gv = tape.value(vars.global);
            norm += gv.chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / batch.len() as f64;
            let grads = tape.backward(loss.objective)?;
            net.params_mut().accumulate(&bound, &grads)?;
            sgd.step_set(net.params_mut())?;
            id += b.id_loss;
            g += b.global_triplet;
            l += b.local_triplet;
            step += 1;
        }
        let n = batches.len() as f64;
        let (id, g, l, norm) = (id / n, g / n, l / n, norm / n);
        let record = EpochRecord {
            epoch,
            batch_size: state.batch_size,
            lr,
            steps: batches.len(),
            id_loss: id,
            global_triplet: g,
            local_triplet: l,
            total: id + g + l,
            noise_scale: noise_scale(set.len(), state.batch_size.min(set.len()), lr)?,
            mean_global_norm: norm,
        };
        observe(&record);
        records.push(record);
        state = if cfg.use_scheduler {
            schedule_step(&state, g)
        } else {
            ScheduleState { epoch: state.epoch + 1, loss_history: [state.loss_history.clone(), vec![g]].concat(), ..state }
        };
        if collapse_epoch.is_none() && collapse_detector(&state.loss_history, norm, cfg.margin, &cfg.collapse) {
            collapse_epoch = Some(epoch);
        }
    }
    Ok(TrainReport { epochs: records, schedule: state, collapsed: collapse_epoch.is_some(), collapse_epoch })
}
