//! Slow reference implementations the fast code is checked against.
#![allow(dead_code)]

use rand::Rng;
use reidapt::evalcmc::EvalItem;

/// Minimum cost over every right/down path, by explicit enumeration.
pub fn brute_force_path_cost(costs: &[f64], h: usize) -> f64 {
    fn walk(costs: &[f64], h: usize, i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + costs[i * h + j];
        if i == h - 1 && j == h - 1 {
            *best = best.min(acc);
            return;
        }
        if i + 1 < h {
            walk(costs, h, i + 1, j, acc, best);
        }
        if j + 1 < h {
            walk(costs, h, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(costs, h, 0, 0, 0.0, &mut best);
    best
}

/// Per anchor: (farthest positive, nearest negative), lowest index on ties.
pub fn exhaustive_batch_hard(dist: &[f64], labels: &[u32]) -> Vec<(usize, usize)> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let row = &dist[a * n..(a + 1) * n];
            let pos: Vec<usize> = (0..n).filter(|&i| i != a && labels[i] == labels[a]).collect();
            let neg: Vec<usize> = (0..n).filter(|&i| labels[i] != labels[a]).collect();
            let dmax = pos.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
            let dmin = neg.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
            let p = *pos.iter().find(|&&i| row[i] == dmax).unwrap();
            let q = *neg.iter().find(|&&i| row[i] == dmin).unwrap();
            (p, q)
        })
        .collect()
}

/// CMC by counting, per query, how many eligible gallery items outrank the
/// best true match; ties are ordered by gallery index.
pub fn brute_force_cmc(dist: &[f64], queries: &[EvalItem], gallery: &[EvalItem]) -> Vec<f64> {
    let g = gallery.len();
    let mut hits = vec![0usize; g];
    for (qi, q) in queries.iter().enumerate() {
        let row = &dist[qi * g..(qi + 1) * g];
        let eligible = |j: usize| !(gallery[j].person_id == q.person_id && gallery[j].camera_id == q.camera_id);
        let before = |a: usize, b: usize| row[a] < row[b] || (row[a] == row[b] && a < b);
        let best = (0..g).filter(|&j| eligible(j) && gallery[j].person_id == q.person_id).reduce(|a, b| if before(b, a) { b } else { a });
        let best = best.expect("every query has a cross-camera match");
        let rank = (0..g).filter(|&j| eligible(j) && before(j, best)).count();
        for h in hits.iter_mut().skip(rank) {
            *h += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / queries.len() as f64).collect()
}

/// Random retrieval instance: each of `ids` identities appears once per camera
/// in the query set and once or twice per camera in the gallery.
pub fn random_retrieval(rng: &mut impl Rng, ids: u32, cams: u32) -> (Vec<f64>, Vec<EvalItem>, Vec<EvalItem>) {
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for p in 0..ids {
        for c in 0..cams {
            queries.push(EvalItem { person_id: p, camera_id: c });
            for _ in 0..rng.gen_range(1..=2) {
                gallery.push(EvalItem { person_id: p, camera_id: c });
            }
        }
    }
    // Coarse values so ties actually occur.
    let dist = (0..queries.len() * gallery.len()).map(|_| f64::from(rng.gen_range(0..6u8))).collect();
    (dist, queries, gallery)
}

pub fn unit_rows(rng: &mut impl Rng, h: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * c);
    for _ in 0..h {
        let row: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        out.extend(row.iter().map(|v| v / n));
    }
    out
}

/// `b` is `a` moved down one row; the vacated top row is `top`.
pub fn shift_down(a: &[f64], top: &[f64], h: usize) -> Vec<f64> {
    let c = a.len() / h;
    let mut b = top.to_vec();
    b.extend_from_slice(&a[..(h - 1) * c]);
    b
}
