//! Staged experiment runner: data generation, source training, translation,
//! adaptation, pseudo-labeling, fine-tuning and evaluation, each persisting
//! its artifacts and a manifest entry under the output directory.

pub mod config;
pub mod manifest;
pub mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignednet::{AlignedNet, CheckpointMeta, NetConfig};
use crate::cyclemap::{train_cyclegan, translate_dataset, Generator};
use crate::error::{ReidError, Result};
use crate::evalcmc::{evaluate_dataset, ResultRow};
use crate::pseudolabel::{
    build_pseudo_dataset, cross_view_merge, extract_features, format_map, pair_metrics, per_camera_kmeans,
    ClusterConfig, PseudoLabelMap,
};
use crate::scheduler::format_trace;
use crate::synthgen::io::{read_dataset, write_dataset};
use crate::synthgen::{generate_domain, histogram_distance, Dataset, DomainTag};
use crate::train::{train, TrainConfig, TrainReport, TrainSet};

pub use config::{derive_seed, ExperimentConfig};
pub use manifest::{hash_path, read_manifest, ArtifactHash, LabelReads, RunManifest};
pub use report::{MethodResult, PseudoLabelSummary, Report, SeedSummary, Spread, METHODS};

pub const RESULTS_FILE: &str = "results.txt";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_TEXT: &str = "summary.txt";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenerateData,
    TrainSource,
    EvalDirect,
    TrainCycleGan,
    BuildDa,
    TrainDa,
    PseudoLabel,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenerateData,
        Stage::TrainSource,
        Stage::EvalDirect,
        Stage::TrainCycleGan,
        Stage::BuildDa,
        Stage::TrainDa,
        Stage::PseudoLabel,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenerateData => "generate-data",
            Stage::TrainSource => "train-source",
            Stage::EvalDirect => "eval-direct",
            Stage::TrainCycleGan => "train-cyclegan",
            Stage::BuildDa => "build-da",
            Stage::TrainDa => "train-da",
            Stage::PseudoLabel => "pseudo-label",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages that read target ground truth only inside evaluation scopes.
    pub fn is_training(self) -> bool {
        !matches!(self, Stage::EvalDirect | Stage::Evaluate)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| ReidError::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Whether the batch-size scheduler drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Without,
    With,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Without => "without",
            Arm::With => "with",
        }
    }
}

/// Where each artifact lives below the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self, domain: DomainTag) -> PathBuf {
        self.root.join("data").join(domain.as_str())
    }

    /// `kind` is `source`, `da` or `ours`.
    pub fn model(&self, kind: &str, arm: Arm) -> PathBuf {
        self.root.join("models").join(format!("{kind}-{}.ckpt", arm.as_str()))
    }

    pub fn generator(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn pseudo_map(&self, arm: Arm) -> PathBuf {
        self.root.join("pseudo").join(format!("map-{}.json", arm.as_str()))
    }

    pub fn pseudo_records(&self, arm: Arm) -> PathBuf {
        self.root.join("pseudo").join(format!("map-{}.txt", arm.as_str()))
    }

    pub fn direct_record(&self, arm: Arm) -> PathBuf {
        self.root.join("metrics").join(format!("direct-{}.json", arm.as_str()))
    }

    pub fn trace(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.trace"))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| ReidError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ReidError::corrupt(path, e.to_string()))
}

#[derive(Default)]
struct StageOutput {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    metrics: BTreeMap<String, f64>,
}

impl StageOutput {
    fn metric(&mut self, key: impl Into<String>, v: f64) {
        self.metrics.insert(key.into(), v);
    }
}

/// Runs stages for one configuration. Loaded datasets are cached, so one
/// label audit covers every stage run through the same value.
pub struct Pipeline {
    cfg: ExperimentConfig,
    layout: Layout,
    source: Option<Dataset>,
    target: Option<Dataset>,
    adapted: Option<Dataset>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout { root: cfg.out_dir.clone() };
        fs::create_dir_all(&layout.root).map_err(|e| ReidError::io(&layout.root, e))?;
        Ok(Self { cfg, layout, source: None, target: None, adapted: None })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Arms trained by this configuration, `without` first.
    pub fn arms(&self) -> Vec<Arm> {
        if self.cfg.compare_scheduler {
            vec![Arm::Without, Arm::With]
        } else if self.cfg.train.use_scheduler {
            vec![Arm::With]
        } else {
            vec![Arm::Without]
        }
    }

    fn seed(&self, component: &str) -> u64 {
        derive_seed(self.cfg.seed, component)
    }

    fn train_config(&self, arm: Arm, epochs: usize, lr: f64, component: &str) -> TrainConfig {
        let mut t = TrainConfig { epochs, lr, seed: self.seed(component), ..self.cfg.train.clone() };
        match arm {
            Arm::With => {
                t.use_scheduler = true;
                t.lr_decay = None;
            }
            Arm::Without => {
                t.use_scheduler = false;
                t.batch_size = self.cfg.fixed_batch_size;
                t.max_batch_size = t.max_batch_size.max(t.batch_size);
                t.lr_decay = self.cfg.fixed_lr_decay;
            }
        }
        t
    }

    fn require(&self, stage: Stage, path: &Path, producer: Stage) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(ReidError::MissingDependency { stage: stage.to_string(), requires: producer.to_string() })
        }
    }

    fn load(&mut self, stage: Stage, domain: DomainTag) -> Result<&Dataset> {
        let dir = self.layout.data(domain);
        let producer = if domain == DomainTag::Adapted { Stage::BuildDa } else { Stage::GenerateData };
        let slot = match domain {
            DomainTag::Source => &mut self.source,
            DomainTag::Target => &mut self.target,
            DomainTag::Adapted => &mut self.adapted,
        };
        if slot.is_none() {
            if !dir.exists() {
                return Err(ReidError::MissingDependency { stage: stage.to_string(), requires: producer.to_string() });
            }
            *slot = Some(read_dataset(&dir)?);
        }
        Ok(slot.as_ref().expect("filled above"))
    }

    fn target_reads(&self) -> LabelReads {
        self.target.as_ref().map_or_else(LabelReads::default, |t| LabelReads {
            training: t.audit().training_reads(),
            evaluation: t.audit().evaluation_reads(),
        })
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.layout.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<Vec<ArtifactHash>> {
        paths.iter().map(|p| Ok(ArtifactHash { path: self.rel(p), sha256: hash_path(p)? })).collect()
    }

    /// Runs one stage and records it in the manifest.
    pub fn run_stage(&mut self, stage: Stage) -> Result<RunManifest> {
        let started = Instant::now();
        let before = self.target_reads();
        let out = match stage {
            Stage::GenerateData => self.generate_data()?,
            Stage::TrainSource => self.train_source()?,
            Stage::EvalDirect => self.eval_direct()?,
            Stage::TrainCycleGan => self.train_cyclegan()?,
            Stage::BuildDa => self.build_da()?,
            Stage::TrainDa => self.train_da()?,
            Stage::PseudoLabel => self.pseudo_label()?,
            Stage::Finetune => self.finetune()?,
            Stage::Evaluate => self.evaluate()?,
        };
        let after = self.target_reads();
        let entry = RunManifest {
            stage: stage.to_string(),
            inputs: self.hashes(&out.inputs)?,
            outputs: self.hashes(&out.outputs)?,
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            metrics: out.metrics,
            wall_time_secs: started.elapsed().as_secs_f64(),
            label_reads: LabelReads {
                training: after.training - before.training,
                evaluation: after.evaluation - before.evaluation,
            },
        };
        manifest::record(&self.layout.root, &entry)?;
        Ok(entry)
    }

    /// Every stage in order, then the report.
    pub fn run_all(&mut self) -> Result<Report> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        read_json(&self.layout.root.join(REPORT_FILE))
    }

    fn generate_data(&mut self) -> Result<StageOutput> {
        let src = generate_domain(&self.cfg.source, DomainTag::Source, self.seed("source-data"))?;
        let tgt = generate_domain(&self.cfg.target, DomainTag::Target, self.seed("target-data"))?;
        let mut out = StageOutput::default();
        for ds in [&src, &tgt] {
            let dir = self.layout.data(ds.samples()[0].domain);
            write_dataset(ds, &dir)?;
            out.outputs.push(dir);
        }
        out.metric("source_samples", src.len() as f64);
        out.metric("target_samples", tgt.len() as f64);
        out.metric("histogram_distance", histogram_distance(&src.images(), &tgt.images(), 16));
        self.source = Some(src);
        self.target = Some(tgt);
        self.adapted = None;
        Ok(out)
    }

    fn save_net(&self, net: &AlignedNet, path: &Path, cfg: &TrainConfig, report: &TrainReport) -> Result<()> {
        let meta = CheckpointMeta {
            config: serde_json::to_value(cfg).expect("config serializes"),
            epoch: report.epochs.len(),
            batch_size: report.schedule.batch_size,
            seed: cfg.seed,
            loss_history: report.epochs.iter().map(|e| e.total).collect(),
            ..CheckpointMeta::default()
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        }
        net.save_checkpoint(path, meta)
    }

    fn train_metrics(out: &mut StageOutput, arm: Arm, report: &TrainReport) {
        let last = report.epochs.last().expect("at least one epoch");
        out.metric(format!("{}.final_loss", arm.as_str()), last.total);
        out.metric(format!("{}.final_triplet", arm.as_str()), last.global_triplet);
        out.metric(format!("{}.final_batch_size", arm.as_str()), last.batch_size as f64);
        out.metric(format!("{}.collapsed", arm.as_str()), f64::from(u8::from(report.collapsed)));
    }

    fn train_source(&mut self) -> Result<StageOutput> {
        let mut out = StageOutput { inputs: vec![self.layout.data(DomainTag::Source)], ..Default::default() };
        for arm in self.arms() {
            let tcfg = self.train_config(arm, self.cfg.source_epochs, self.cfg.train.lr, "source-train");
            let init = self.seed("source-init");
            let net_cfg = self.cfg.net.clone();
            let src = self.load(Stage::TrainSource, DomainTag::Source)?;
            let set = TrainSet::new(src.images(), src.training_labels()?)?;
            let mut net = AlignedNet::new(NetConfig { num_classes: set.num_classes(), ..net_cfg }, init)?;
            let report = train(&mut net, &set, &tcfg)?;
            let path = self.layout.model("source", arm);
            self.save_net(&net, &path, &tcfg, &report)?;
            let trace = self.layout.trace(&format!("source-{}", arm.as_str()));
            write_file(&trace, format_trace(&report.trace()))?;
            Self::train_metrics(&mut out, arm, &report);
            out.outputs.extend([path, trace]);
        }
        Ok(out)
    }

    fn eval_model(&mut self, stage: Stage, method: &str, model: &Path, arm: Arm) -> Result<MethodResult> {
        let (net, _) = AlignedNet::load_checkpoint(model)?;
        let (seed, kind) = (self.seed("eval-split"), self.cfg.eval_distance);
        let tgt = self.load(stage, DomainTag::Target)?;
        let curve = evaluate_dataset(&net, tgt, seed, kind)?;
        let row = ResultRow::from_curve(method, "source", "target", &curve);
        Ok(MethodResult { method: method.into(), arm, rank1: row.rank1, rank5: row.rank5, rank10: row.rank10 })
    }

    fn eval_direct(&mut self) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        for arm in self.arms() {
            let model = self.layout.model("source", arm);
            self.require(Stage::EvalDirect, &model, Stage::TrainSource)?;
            let r = self.eval_model(Stage::EvalDirect, "Direct", &model, arm)?;
            out.metric(format!("{}.rank1", arm.as_str()), r.rank1);
            out.metric(format!("{}.rank5", arm.as_str()), r.rank5);
            out.metric(format!("{}.rank10", arm.as_str()), r.rank10);
            let path = self.layout.direct_record(arm);
            write_json(&path, &r)?;
            out.inputs.push(model);
            out.outputs.push(path);
        }
        out.inputs.push(self.layout.data(DomainTag::Target));
        Ok(out)
    }

    fn train_cyclegan(&mut self) -> Result<StageOutput> {
        let cfg = crate::cyclemap::CycleGanConfig { seed: self.seed("cyclegan"), ..self.cfg.cyclegan.clone() };
        self.load(Stage::TrainCycleGan, DomainTag::Source)?;
        self.load(Stage::TrainCycleGan, DomainTag::Target)?;
        let (src, tgt) = (self.source.as_ref().expect("loaded"), self.target.as_ref().expect("loaded"));
        let outcome = train_cyclegan(src, tgt, &cfg)?;
        let mut trace = String::from("# step d_loss gan_s_to_t gan_t_to_s cycle total\n");
        for s in &outcome.trace {
            let l = &s.losses;
            trace.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                s.step, s.d_loss, l.gan_s_to_t, l.gan_t_to_s, l.cycle, l.total
            ));
        }
        let meta = |name: &str| CheckpointMeta {
            config: serde_json::json!({ "role": name, "cyclegan": &cfg }),
            epoch: cfg.steps,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            loss_history: outcome.trace.iter().map(|s| s.losses.total).collect(),
            ..CheckpointMeta::default()
        };
        let (g_path, f_path) = (self.layout.generator("g_source_to_target"), self.layout.generator("f_target_to_source"));
        fs::create_dir_all(self.layout.root.join("models")).map_err(|e| ReidError::io(&self.layout.root, e))?;
        outcome.pair.g.save(&g_path, meta("source_to_target"))?;
        outcome.pair.f.save(&f_path, meta("target_to_source"))?;
        let trace_path = self.layout.trace("cyclegan");
        write_file(&trace_path, trace)?;
        let mut out = StageOutput {
            inputs: vec![self.layout.data(DomainTag::Source), self.layout.data(DomainTag::Target)],
            outputs: vec![g_path, f_path, trace_path],
            ..Default::default()
        };
        let window = |xs: &[crate::cyclemap::CycleStep]| xs.iter().map(|s| s.losses.cycle).sum::<f64>() / xs.len() as f64;
        let n = outcome.trace.len().min(50);
        out.metric("cycle_first", window(&outcome.trace[..n]));
        out.metric("cycle_last", window(&outcome.trace[outcome.trace.len() - n..]));
        Ok(out)
    }

    fn build_da(&mut self) -> Result<StageOutput> {
        let g_path = self.layout.generator("g_source_to_target");
        self.require(Stage::BuildDa, &g_path, Stage::TrainCycleGan)?;
        let (g, _) = Generator::load(&g_path)?;
        self.load(Stage::BuildDa, DomainTag::Source)?;
        self.load(Stage::BuildDa, DomainTag::Target)?;
        let (src, tgt) = (self.source.as_ref().expect("loaded"), self.target.as_ref().expect("loaded"));
        let da = translate_dataset(&g, src)?;
        let dir = self.layout.data(DomainTag::Adapted);
        write_dataset(&da, &dir)?;
        let mut out = StageOutput {
            inputs: vec![g_path, self.layout.data(DomainTag::Source)],
            outputs: vec![dir],
            ..Default::default()
        };
        out.metric("histogram_source_target", histogram_distance(&src.images(), &tgt.images(), 16));
        out.metric("histogram_adapted_target", histogram_distance(&da.images(), &tgt.images(), 16));
        self.adapted = Some(da);
        Ok(out)
    }

    fn train_da(&mut self) -> Result<StageOutput> {
        let mut out = StageOutput { inputs: vec![self.layout.data(DomainTag::Adapted)], ..Default::default() };
        for arm in self.arms() {
            let start = self.layout.model("source", arm);
            self.require(Stage::TrainDa, &start, Stage::TrainSource)?;
            let tcfg = self.train_config(arm, self.cfg.da_epochs, self.cfg.train.lr, "da-train");
            let head_seed = self.seed("da-head");
            let (mut net, _) = AlignedNet::load_checkpoint(&start)?;
            let da = self.load(Stage::TrainDa, DomainTag::Adapted)?;
            let set = TrainSet::new(da.images(), da.training_labels()?)?;
            if net.config().num_classes != set.num_classes() {
                net = net.with_new_head(set.num_classes(), head_seed)?;
            }
            let report = train(&mut net, &set, &tcfg)?;
            let path = self.layout.model("da", arm);
            self.save_net(&net, &path, &tcfg, &report)?;
            let trace = self.layout.trace(&format!("da-{}", arm.as_str()));
            write_file(&trace, format_trace(&report.trace()))?;
            Self::train_metrics(&mut out, arm, &report);
            out.inputs.push(start);
            out.outputs.extend([path, trace]);
        }
        Ok(out)
    }

    fn pseudo_label(&mut self) -> Result<StageOutput> {
        let mut out = StageOutput { inputs: vec![self.layout.data(DomainTag::Target)], ..Default::default() };
        for arm in self.arms() {
            let model = self.layout.model("da", arm);
            self.require(Stage::PseudoLabel, &model, Stage::TrainDa)?;
            let (net, _) = AlignedNet::load_checkpoint(&model)?;
            let ccfg = ClusterConfig { seed: self.seed("cluster"), ..self.cfg.cluster };
            let tgt = self.load(Stage::PseudoLabel, DomainTag::Target)?;
            let features = extract_features(&net, &tgt.images())?;
            let clusters = per_camera_kmeans(&features, &tgt.camera_ids(), &ccfg)?;
            let map = cross_view_merge(&clusters, tgt.len())?;
            map.check_invariants()?;
            let records = format_map(tgt, &map);
            let a = arm.as_str();
            out.metric(format!("{a}.pseudo_identities"), map.num_identities() as f64);
            out.metric(format!("{a}.k_per_camera"), clusters[0].result.k() as f64);
            for c in &clusters {
                out.metric(format!("{a}.camera{}.distortion", c.camera), c.result.distortion());
            }
            let paths = [self.layout.pseudo_map(arm), self.layout.pseudo_records(arm)];
            write_json(&paths[0], &map)?;
            write_file(&paths[1], records)?;
            out.inputs.push(model);
            out.outputs.extend(paths);
        }
        Ok(out)
    }

    fn finetune(&mut self) -> Result<StageOutput> {
        let mut out = StageOutput { inputs: vec![self.layout.data(DomainTag::Target)], ..Default::default() };
        for arm in self.arms() {
            let (model, map_path) = (self.layout.model("da", arm), self.layout.pseudo_map(arm));
            self.require(Stage::Finetune, &model, Stage::TrainDa)?;
            self.require(Stage::Finetune, &map_path, Stage::PseudoLabel)?;
            let map: PseudoLabelMap = read_json(&map_path)?;
            map.check_invariants().map_err(|e| ReidError::corrupt(&map_path, e.to_string()))?;
            let tcfg = self.train_config(arm, self.cfg.finetune_epochs, self.cfg.finetune_lr, "finetune-train");
            let head_seed = self.seed("finetune-head");
            let (net, _) = AlignedNet::load_checkpoint(&model)?;
            let tgt = self.load(Stage::Finetune, DomainTag::Target)?;
            let pseudo = build_pseudo_dataset(tgt, &map)?;
            let set = TrainSet::new(pseudo.images, pseudo.labels)?;
            let mut net = net.with_new_head(set.num_classes(), head_seed)?;
            let report = train(&mut net, &set, &tcfg)?;
            let path = self.layout.model("ours", arm);
            self.save_net(&net, &path, &tcfg, &report)?;
            let trace = self.layout.trace(&format!("finetune-{}", arm.as_str()));
            write_file(&trace, format_trace(&report.trace()))?;
            Self::train_metrics(&mut out, arm, &report);
            out.inputs.extend([model, map_path]);
            out.outputs.extend([path, trace]);
        }
        Ok(out)
    }

    fn evaluate(&mut self) -> Result<StageOutput> {
        let mut out = StageOutput { inputs: vec![self.layout.data(DomainTag::Target)], ..Default::default() };
        let mut results = Vec::new();
        let mut pseudo_labels = Vec::new();
        for arm in self.arms() {
            for (method, kind) in METHODS.iter().zip(["source", "da", "ours"]) {
                let model = self.layout.model(kind, arm);
                if !model.exists() {
                    continue;
                }
                let r = self.eval_model(Stage::Evaluate, method, &model, arm)?;
                out.metric(format!("{}.{method}.rank1", arm.as_str()), r.rank1);
                results.push(r);
                out.inputs.push(model);
            }
            // Pseudo-label noise is scored here so that no training stage touches target labels.
            let map_path = self.layout.pseudo_map(arm);
            if map_path.exists() {
                let map: PseudoLabelMap = read_json(&map_path)?;
                let tgt = self.load(Stage::Evaluate, DomainTag::Target)?;
                let pair = {
                    let _scope = tgt.audit().evaluation_scope();
                    pair_metrics(&map.assignments, &tgt.ground_truth())?
                };
                out.metric(format!("{}.pair_precision", arm.as_str()), pair.precision);
                out.metric(format!("{}.pair_recall", arm.as_str()), pair.recall);
                pseudo_labels.push(PseudoLabelSummary { arm, identities: map.num_identities(), pair });
                out.inputs.push(map_path);
            }
        }
        if results.is_empty() {
            return Err(ReidError::MissingDependency {
                stage: Stage::Evaluate.to_string(),
                requires: Stage::TrainSource.to_string(),
            });
        }
        let training_label_reads = read_manifest(&self.layout.root)?
            .iter()
            .filter(|e| e.stage.parse::<Stage>().map_or(true, Stage::is_training))
            .map(|e| e.label_reads.training)
            .sum::<usize>();
        let report = Report {
            seed: self.cfg.seed,
            source: "source".into(),
            target: "target".into(),
            distance: self.cfg.eval_distance,
            arms: self.arms(),
            results,
            pseudo_labels,
            training_label_reads,
        };
        let (text, json) = (self.layout.root.join(RESULTS_FILE), self.layout.root.join(REPORT_FILE));
        write_file(&text, report.to_text())?;
        write_json(&json, &report)?;
        out.outputs.extend([text, json]);
        Ok(out)
    }
}

/// Runs every stage for `cfg` and returns the comparison report.
pub fn run_pipeline(cfg: ExperimentConfig) -> Result<Report> {
    Pipeline::new(cfg)?.run_all()
}

/// One full run per seed under `<out>/seed-<s>`, then the cross-seed summary
/// written to `<out>`.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<(Vec<Report>, SeedSummary)> {
    if seeds.is_empty() {
        return Err(ReidError::InvalidArgument("at least one seed is required".into()));
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = ExperimentConfig { seed, out_dir: cfg.out_dir.join(format!("seed-{seed}")), ..cfg.clone() };
        reports.push(run_pipeline(run)?);
    }
    let summary = SeedSummary::from_reports(&reports);
    write_file(&cfg.out_dir.join(SUMMARY_TEXT), summary.to_text())?;
    write_json(&cfg.out_dir.join(SUMMARY_JSON), &summary)?;
    Ok((reports, summary))
}
