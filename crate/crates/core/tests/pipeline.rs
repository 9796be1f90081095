use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use reidapt::pipeline::*;
use reidapt::ReidError;

const TINY: &str = "
source.identities = 4
source.instances_per_camera = 2
target.identities = 4
target.instances_per_camera = 2
net.channels = 8,8,8
epochs.source = 2
epochs.da = 1
epochs.finetune = 1
scheduler.fixed_batch = 8
cyclegan.steps = 3
cyclegan.base_channels = 4
cyclegan.res_blocks = 1
cyclegan.disc_channels = 4
";

fn tiny(out: &Path, extra: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(&format!("{TINY}{extra}")).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn files_below(dir: &Path, out: &mut Vec<PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_below(&p, out)
        } else {
            out.push(p)
        }
    }
}

#[test]
fn full_run_report_manifest_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(tiny(dir.path(), "")).unwrap();
    assert_eq!(report.arms, vec![Arm::With]);
    let methods: Vec<&str> = report.results.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, METHODS);
    assert_eq!(report.training_label_reads, 0);

    let entries = read_manifest(dir.path()).unwrap();
    let stages: Vec<&str> = entries.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(stages, Stage::ALL.map(Stage::as_str));
    for e in &entries {
        if e.stage.parse::<Stage>().unwrap().is_training() {
            assert_eq!((e.label_reads.training, e.label_reads.evaluation), (0, 0), "{}", e.stage);
        }
    }
    let ev = entries.iter().find(|e| e.stage == "evaluate").unwrap();
    assert!(ev.label_reads.evaluation > 0);

    // Every file on disk belongs to exactly one manifest output.
    let mut owners: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut files = Vec::new();
    files_below(dir.path(), &mut files);
    for f in files.iter().filter(|f| f.file_name().unwrap() != "manifest.jsonl") {
        let n = entries
            .iter()
            .flat_map(|e| &e.outputs)
            .filter(|o| f.starts_with(dir.path().join(&o.path)))
            .count();
        owners.insert(f.clone(), n);
    }
    assert!(owners.values().all(|&n| n == 1), "{owners:?}");
}

#[test]
fn checkpoint_lineage_is_a_hash_chain() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(tiny(dir.path(), "")).unwrap();
    let entries = read_manifest(dir.path()).unwrap();
    let find = |stage: &str, path: &str, outputs: bool| {
        let e = entries.iter().find(|e| e.stage == stage).unwrap();
        let list = if outputs { &e.outputs } else { &e.inputs };
        list.iter().find(|a| a.path == path).unwrap_or_else(|| panic!("{stage} {path}")).sha256.clone()
    };
    let source = "models/source-with.ckpt";
    let da = "models/da-with.ckpt";
    assert_eq!(find("train-source", source, true), find("train-da", source, false));
    assert_eq!(find("train-da", da, true), find("finetune", da, false));
    assert_eq!(find("pseudo-label", "pseudo/map-with.json", true), find("finetune", "pseudo/map-with.json", false));
    assert_eq!(find("finetune", "models/ours-with.ckpt", true), find("evaluate", "models/ours-with.ckpt", false));
}

#[test]
fn identical_seed_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(tiny(a.path(), "")).unwrap();
    run_pipeline(tiny(b.path(), "")).unwrap();
    for f in [RESULTS_FILE, REPORT_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn different_seeds_train_different_models() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (d, seed) in [(&a, 1), (&b, 2)] {
        let mut p = Pipeline::new(tiny(d.path(), &format!("seed = {seed}\n"))).unwrap();
        p.run_stage(Stage::GenerateData).unwrap();
        p.run_stage(Stage::TrainSource).unwrap();
    }
    let h = |d: &Path| hash_path(&d.join("models/source-with.ckpt")).unwrap();
    assert_ne!(h(a.path()), h(b.path()));
}

#[test]
fn stages_name_their_missing_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny(dir.path(), "")).unwrap();
    let missing = |p: &mut Pipeline, stage| match p.run_stage(stage) {
        Err(ReidError::MissingDependency { requires, .. }) => requires,
        other => panic!("{stage}: {other:?}"),
    };
    assert_eq!(missing(&mut p, Stage::TrainSource), "generate-data");
    assert_eq!(missing(&mut p, Stage::Evaluate), "train-source");
    p.run_stage(Stage::GenerateData).unwrap();
    assert_eq!(missing(&mut p, Stage::EvalDirect), "train-source");
    assert_eq!(missing(&mut p, Stage::BuildDa), "train-cyclegan");
    assert_eq!(missing(&mut p, Stage::TrainDa), "train-source");
    p.run_stage(Stage::TrainSource).unwrap();
    assert_eq!(missing(&mut p, Stage::TrainDa), "build-da");
    assert_eq!(missing(&mut p, Stage::PseudoLabel), "train-da");
    p.run_stage(Stage::TrainCycleGan).unwrap();
    p.run_stage(Stage::BuildDa).unwrap();
    p.run_stage(Stage::TrainDa).unwrap();
    assert_eq!(missing(&mut p, Stage::Finetune), "pseudo-label");
}

#[test]
fn staged_runs_match_one_shot() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(tiny(a.path(), "")).unwrap();
    // Fresh runner per stage, as separate CLI invocations would be.
    for stage in Stage::ALL {
        Pipeline::new(tiny(b.path(), "")).unwrap().run_stage(stage).unwrap();
    }
    assert_eq!(fs::read(a.path().join(REPORT_FILE)).unwrap(), fs::read(b.path().join(REPORT_FILE)).unwrap());
}

#[test]
fn scheduler_comparison_pairs_cells() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(tiny(dir.path(), "scheduler.compare = true\n")).unwrap();
    assert_eq!(report.arms, vec![Arm::Without, Arm::With]);
    assert_eq!(report.results.len(), 6);
    let text = fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(' ').skip(1).all(|c| c.split('/').count() == 2)), "{text}");
}

#[test]
fn seed_summary_has_mean_and_spread() {
    let dir = tempfile::tempdir().unwrap();
    let (reports, summary) = run_seeds(&tiny(dir.path(), ""), &[1, 2]).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(summary.seeds, vec![1, 2]);
    let direct = summary.get("Direct", Arm::With).unwrap();
    let r1: Vec<f64> = reports.iter().map(|r| r.get("Direct", Arm::With).unwrap().rank1).collect();
    assert!((direct.rank1.mean - (r1[0] + r1[1]) / 2.0).abs() < 1e-12);
    assert!(dir.path().join(SUMMARY_TEXT).exists() && dir.path().join("seed-2").join(REPORT_FILE).exists());
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    for extra in ["train.lr = 0\n", "cluster.k_ratio = 2\n", "scheduler.initial_batch = 6\n", "target.cameras = 1\n"] {
        let err = Pipeline::new(tiny(dir.path(), extra)).err().unwrap_or_else(|| panic!("{extra}"));
        assert!(matches!(err, ReidError::Config(_)), "{extra}: {err}");
    }
}
