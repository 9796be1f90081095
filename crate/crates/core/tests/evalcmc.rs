mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidapt::alignednet::Embedding;
use reidapt::evalcmc::*;

proptest! {
    #[test]
    fn curve_matches_brute_force(seed in any::<u64>(), ids in 2u32..6, cams in 2u32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dist, q, g) = random_retrieval(&mut rng, ids, cams);
        let curve = cmc_from_distances(&dist, &q, &g).unwrap();
        prop_assert_eq!(&curve.accuracy_at_rank, &brute_force_cmc(&dist, &q, &g));
        prop_assert!(curve.accuracy_at_rank.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.accuracy_at_rank.last().unwrap(), 1.0);
        prop_assert_eq!(curve.num_queries, q.len());
    }

    #[test]
    fn query_order_does_not_change_the_curve(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dist, q, g) = random_retrieval(&mut rng, 4, 2);
        let mut perm: Vec<usize> = (0..q.len()).collect();
        perm.shuffle(&mut rng);
        let q2: Vec<EvalItem> = perm.iter().map(|&i| q[i]).collect();
        let dist2: Vec<f64> = perm.iter().flat_map(|&i| dist[i * g.len()..(i + 1) * g.len()].to_vec()).collect();
        prop_assert_eq!(cmc_from_distances(&dist, &q, &g).unwrap(), cmc_from_distances(&dist2, &q2, &g).unwrap());
    }

    #[test]
    fn gallery_order_is_irrelevant_without_ties(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, q, g) = random_retrieval(&mut rng, 4, 2);
        let dist: Vec<f64> = (0..q.len() * g.len()).map(|_| rng.gen::<f64>()).collect();
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut rng);
        let g2: Vec<EvalItem> = perm.iter().map(|&j| g[j]).collect();
        let dist2: Vec<f64> =
            (0..q.len()).flat_map(|i| perm.iter().map(|&j| dist[i * g.len() + j]).collect::<Vec<_>>()).collect();
        prop_assert_eq!(cmc_from_distances(&dist, &q, &g).unwrap(), cmc_from_distances(&dist2, &q, &g2).unwrap());
    }
}

#[test]
fn same_camera_true_match_is_skipped() {
    let q = [EvalItem { person_id: 0, camera_id: 0 }];
    let g = [
        EvalItem { person_id: 0, camera_id: 0 },
        EvalItem { person_id: 1, camera_id: 1 },
        EvalItem { person_id: 0, camera_id: 1 },
    ];
    assert_eq!(first_match_ranks(&[0.0, 0.5, 0.9], &q, &g).unwrap(), vec![1]);
}

#[test]
fn random_embeddings_hit_chance_level() {
    // One gallery image per identity in the other camera: rank-1 chance is 1/G.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ids = 20u32;
    let rounds = 30;
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..rounds {
        let embed = |rng: &mut ChaCha8Rng| Embedding::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![0.0; 4], 4, None);
        let qe: Vec<Embedding> = (0..ids).map(|_| embed(&mut rng)).collect();
        let ge: Vec<Embedding> = (0..ids).map(|_| embed(&mut rng)).collect();
        let q: Vec<EvalItem> = (0..ids).map(|p| EvalItem { person_id: p, camera_id: 0 }).collect();
        let g: Vec<EvalItem> = (0..ids).map(|p| EvalItem { person_id: p, camera_id: 1 }).collect();
        let dist = distance_table(&qe, &ge, EvalDistance::Global).unwrap();
        let ranks = first_match_ranks(&dist, &q, &g).unwrap();
        hits += ranks.iter().filter(|&&r| r == 0).count();
        total += ranks.len();
    }
    let p = 1.0 / f64::from(ids);
    let sigma = (p * (1.0 - p) / total as f64).sqrt();
    let r1 = hits as f64 / total as f64;
    assert!(total >= 500);
    assert!((r1 - p).abs() <= 3.0 * sigma, "rank-1 {r1} vs {p} (sigma {sigma})");
}

#[test]
fn results_table_has_three_ranks() {
    let curve = CmcCurve::from_first_ranks(&[0, 1, 4, 9], 10);
    assert_eq!((curve.rank(1), curve.rank(5), curve.rank(10)), (0.25, 0.75, 1.0));
    let row = ResultRow::from_curve("Direct", "src", "tgt", &curve);
    let text = format_results(&[row]);
    assert!(text.contains("Direct"), "{text}");
}
