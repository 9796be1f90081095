//! Method comparison tables for one seed and aggregates across seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Arm;
use crate::evalcmc::EvalDistance;
use crate::pseudolabel::PairMetrics;

pub const METHODS: [&str; 3] = ["Direct", "CycleGAN", "Ours"];

/// Percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub arm: Arm,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSummary {
    pub arm: Arm,
    pub identities: usize,
    pub pair: PairMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub distance: EvalDistance,
    pub arms: Vec<Arm>,
    pub results: Vec<MethodResult>,
    pub pseudo_labels: Vec<PseudoLabelSummary>,
    /// Target ground-truth reads by training stages; should be 0.
    pub training_label_reads: usize,
}

fn distance_name(d: EvalDistance) -> &'static str {
    match d {
        EvalDistance::Global => "global",
        EvalDistance::GlobalPlusDmli => "global+dmli",
    }
}

/// `a/b` when both arms are present, otherwise the single value.
fn cell(values: &[Option<f64>]) -> String {
    values.iter().map(|v| v.map_or("-".to_string(), |x| format!("{x:.2}"))).collect::<Vec<_>>().join("/")
}

impl Report {
    pub fn get(&self, method: &str, arm: Arm) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method && r.arm == arm)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let arms = self.arms.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("/");
        writeln!(s, "# {} -> {}, seed {}, distance {}", self.source, self.target, self.seed, distance_name(self.distance))
            .expect("string write");
        writeln!(s, "# cells: {arms}").expect("string write");
        writeln!(s, "method rank1 rank5 rank10").expect("string write");
        for m in METHODS {
            let col = |f: fn(&MethodResult) -> f64| {
                cell(&self.arms.iter().map(|&a| self.get(m, a).map(f)).collect::<Vec<_>>())
            };
            writeln!(s, "{m} {} {} {}", col(|r| r.rank1), col(|r| r.rank5), col(|r| r.rank10)).expect("string write");
        }
        for p in &self.pseudo_labels {
            writeln!(
                s,
                "# pseudo-labels {}: {} identities, pair precision {:.4}, pair recall {:.4}",
                p.arm.as_str(),
                p.identities,
                p.pair.precision,
                p.pair.recall
            )
            .expect("string write");
        }
        writeln!(s, "# target label reads by training stages: {}", self.training_label_reads).expect("string write");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, std: var.sqrt(), min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub arm: Arm,
    pub rank1: Spread,
    pub rank5: Spread,
    pub rank10: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

impl SeedSummary {
    /// Rows for every (method, arm) present in all reports.
    pub fn from_reports(reports: &[Report]) -> Self {
        let seeds = reports.iter().map(|r| r.seed).collect();
        let mut rows = Vec::new();
        let arms = reports.first().map(|r| r.arms.clone()).unwrap_or_default();
        for &arm in &arms {
            for m in METHODS {
                let found: Option<Vec<&MethodResult>> = reports.iter().map(|r| r.get(m, arm)).collect();
                let Some(found) = found else { continue };
                let spread = |f: fn(&MethodResult) -> f64| Spread::of(&found.iter().map(|r| f(r)).collect::<Vec<_>>());
                rows.push(SummaryRow {
                    method: m.to_string(),
                    arm,
                    rank1: spread(|r| r.rank1),
                    rank5: spread(|r| r.rank5),
                    rank10: spread(|r| r.rank10),
                });
            }
        }
        Self { seeds, rows }
    }

    pub fn get(&self, method: &str, arm: Arm) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.arm == arm)
    }

    pub fn to_text(&self) -> String {
        let seeds = self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        let mut s = format!("# seeds {seeds}; mean +- std (min..max)\nmethod arm rank1 rank5 rank10\n");
        for r in &self.rows {
            let f = |x: &Spread| format!("{:.2}+-{:.2}({:.2}..{:.2})", x.mean, x.std, x.min, x.max);
            writeln!(s, "{} {} {} {} {}", r.method, r.arm.as_str(), f(&r.rank1), f(&r.rank5), f(&r.rank10))
                .expect("string write");
        }
        s
    }
}
