//! Cross-camera CMC evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignednet::{AlignedNet, Embedding};
use crate::error::{ReidError, Result};
use crate::metriclearn::{dmli_distance, euclidean_distance};
use crate::synthgen::{Dataset, QueryGallerySplit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    /// Entry `r` is the fraction of queries matched within the top `r + 1`.
    pub accuracy_at_rank: Vec<f64>,
    pub num_queries: usize,
}

impl CmcCurve {
    /// Accuracy at 1-based rank `k`, saturating at the end of the curve.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        let i = (k - 1).min(self.accuracy_at_rank.len() - 1);
        self.accuracy_at_rank[i]
    }

    /// Builds the curve from 0-based first-match ranks over a gallery of `len` items.
    pub fn from_first_ranks(first: &[usize], len: usize) -> Self {
        let mut counts = vec![0usize; len.max(1)];
        for &r in first {
            counts[r] += 1;
        }
        let n = first.len() as f64;
        let mut acc = 0usize;
        let accuracy_at_rank = counts
            .iter()
            .map(|c| {
                acc += c;
                acc as f64 / n
            })
            .collect();
        Self { accuracy_at_rank, num_queries: first.len() }
    }
}

/// Identity and camera of one evaluated image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalItem {
    pub person_id: u32,
    pub camera_id: u32,
}

/// 0-based rank of the first correct match for every query. `dist` is
/// row-major `queries x gallery`. Gallery items sharing identity and camera
/// with the query are skipped; ties are ordered by gallery index.
pub fn first_match_ranks(dist: &[f64], queries: &[EvalItem], gallery: &[EvalItem]) -> Result<Vec<usize>> {
    let g = gallery.len();
    if dist.len() != queries.len() * g {
        return Err(ReidError::LengthMismatch(dist.len(), queries.len() * g));
    }
    let mut ranks = Vec::with_capacity(queries.len());
    let mut order: Vec<usize> = Vec::with_capacity(g);
    for (qi, q) in queries.iter().enumerate() {
        let row = &dist[qi * g..(qi + 1) * g];
        order.clear();
        order.extend((0..g).filter(|&j| !(gallery[j].person_id == q.person_id && gallery[j].camera_id == q.camera_id)));
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let r = order.iter().position(|&j| gallery[j].person_id == q.person_id);
        ranks.push(r.ok_or(ReidError::NoPositiveForQuery(qi))?);
    }
    Ok(ranks)
}

pub fn cmc_from_distances(dist: &[f64], queries: &[EvalItem], gallery: &[EvalItem]) -> Result<CmcCurve> {
    if queries.is_empty() {
        return Err(ReidError::InvalidArgument("no queries".into()));
    }
    Ok(CmcCurve::from_first_ranks(&first_match_ranks(dist, queries, gallery)?, gallery.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalDistance {
    Global,
    GlobalPlusDmli,
}

pub fn embedding_distance(a: &Embedding, b: &Embedding, kind: EvalDistance) -> Result<f64> {
    let g = euclidean_distance(&a.global, &b.global)?;
    Ok(match kind {
        EvalDistance::Global => g,
        EvalDistance::GlobalPlusDmli => g + dmli_distance(a.stripes(), b.stripes(), a.num_stripes())?.distance,
    })
}

pub fn distance_table(queries: &[Embedding], gallery: &[Embedding], kind: EvalDistance) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        for g in gallery {
            out.push(embedding_distance(q, g, kind)?);
        }
    }
    Ok(out)
}

/// Embeds `ds` with `model` and scores the given split. Ground-truth reads
/// happen inside an evaluation scope of the dataset's audit.
pub fn cmc_evaluate(model: &AlignedNet, ds: &Dataset, split: &QueryGallerySplit, kind: EvalDistance) -> Result<CmcCurve> {
    let truth = {
        let _scope = ds.audit().evaluation_scope();
        ds.ground_truth()
    };
    let samples = ds.samples();
    let item = |i: usize| EvalItem { person_id: truth[i], camera_id: samples[i].camera_id };
    let embed = |idx: &[usize]| model.embed(&idx.iter().map(|&i| &samples[i].pixels).collect::<Vec<_>>());
    let (qe, ge) = (embed(&split.query)?, embed(&split.gallery)?);
    let dist = distance_table(&qe, &ge, kind)?;
    let q: Vec<EvalItem> = split.query.iter().map(|&i| item(i)).collect();
    let g: Vec<EvalItem> = split.gallery.iter().map(|&i| item(i)).collect();
    cmc_from_distances(&dist, &q, &g)
}

/// Splits `ds` with `seed` and evaluates; the split reads labels under evaluation scope.
pub fn evaluate_dataset(model: &AlignedNet, ds: &Dataset, seed: u64, kind: EvalDistance) -> Result<CmcCurve> {
    let split = {
        let _scope = ds.audit().evaluation_scope();
        ds.split_query_gallery(seed)?
    };
    cmc_evaluate(model, ds, &split, kind)
}

/// One row of a method comparison table, percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub source: String,
    pub target: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

impl ResultRow {
    pub fn from_curve(method: &str, source: &str, target: &str, curve: &CmcCurve) -> Self {
        Self {
            method: method.into(),
            source: source.into(),
            target: target.into(),
            rank1: 100.0 * curve.rank(1),
            rank5: 100.0 * curve.rank(5),
            rank10: 100.0 * curve.rank(10),
        }
    }
}

pub fn format_results(rows: &[ResultRow]) -> String {
    let mut s = String::from("# method source target rank1 rank5 rank10\n");
    for r in rows {
        writeln!(s, "{} {} {} {:.2} {:.2} {:.2}", r.method, r.source, r.target, r.rank1, r.rank5, r.rank10)
            .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn it(p: u32, c: u32) -> EvalItem {
        EvalItem { person_id: p, camera_id: c }
    }

    #[test]
    fn perfect_model() {
        let q = [it(0, 0), it(1, 0)];
        let g = [it(0, 1), it(1, 1), it(2, 1)];
        let dist = [0.1, 0.5, 0.9, 0.7, 0.2, 0.8];
        let c = cmc_from_distances(&dist, &q, &g).unwrap();
        assert_eq!(c.accuracy_at_rank, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn same_camera_match_is_skipped() {
        let q = [it(0, 0)];
        let g = [it(0, 0), it(1, 1), it(0, 1)];
        let ranks = first_match_ranks(&[0.0, 0.5, 0.6], &q, &g).unwrap();
        assert_eq!(ranks, vec![1]);
        assert!(matches!(first_match_ranks(&[0.0, 0.5], &q, &g[..2]), Err(ReidError::NoPositiveForQuery(0))));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let q = [it(0, 0)];
        let g = [it(1, 1), it(0, 1)];
        assert_eq!(first_match_ranks(&[0.3, 0.3], &q, &g).unwrap(), vec![1]);
    }

    #[test]
    fn result_line() {
        let row = ResultRow { method: "Direct".into(), source: "s".into(), target: "t".into(), rank1: 22.5, rank5: 40.0, rank10: 51.25 };
        assert_eq!(format_results(&[row]).lines().nth(1), Some("Direct s t 22.50 40.00 51.25"));
    }
}
