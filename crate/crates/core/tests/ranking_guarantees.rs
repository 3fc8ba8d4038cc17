use iap_core::attention::{angle, select_top_l};
use iap_core::features::{FeatureKind, FeatureMap, FeatureMapSpec, Role, ScalingMode};
use iap_core::numerics::{dot, gaussian_matrix, Matrix, RngStream};
use iap_core::ranking::{
    azuma_tail, build_sample_tree, hashed_rank, is_epsilon_approximate, min_sketch_width,
    sign_hash, tree_query, tree_softmax_sample, KeyDatabase, TreeAggregation,
};

fn angular_scores(keys: &Matrix<f64>, z: &[f64]) -> Vec<f64> {
    keys.row_iter()
        .map(|k| 1.0 - 2.0 * angle(z, k) / std::f64::consts::PI)
        .collect()
}

#[test]
fn sketch_of_minimum_width_gives_approximate_top_ten() {
    let (p, eps, len) = (0.1, 0.3, 256);
    let m_prime = min_sketch_width(p, eps, len as f64, 1.0).unwrap();
    let ok = (0..100)
        .filter(|&t| {
            let keys = gaussian_matrix::<f64>(len, 16, &RngStream::new(t, 1)).unwrap();
            let z = gaussian_matrix::<f64>(1, 16, &RngStream::new(t, 2))
                .unwrap()
                .row(0)
                .to_vec();
            let db = KeyDatabase::new(keys.clone(), 0)
                .with_sketch(m_prime, &RngStream::new(t, 3))
                .unwrap();
            let top = select_top_l(&hashed_rank(&db, &z).unwrap(), 10).unwrap();
            is_epsilon_approximate(&angular_scores(&keys, &z), &top, eps)
        })
        .count();
    assert!(ok >= 90, "{ok}/100");
}

#[test]
fn deviation_tail_at_minimum_width() {
    let m_prime = min_sketch_width(0.1, 0.3, 256.0, 1.0).unwrap();
    let z1 = [0.8, -0.3, 0.5, 0.1];
    let z2 = [0.2, 0.9, -0.4, 0.3];
    let expect = 1.0 - 2.0 * angle(&z1, &z2) / std::f64::consts::PI;
    let trials = 2000;
    for eps in [0.02, 0.04, 0.06] {
        let exceed = (0..trials)
            .filter(|&i| {
                let g = gaussian_matrix::<f64>(m_prime, 4, &RngStream::new(i, 6)).unwrap();
                (dot(&sign_hash(&z1, &g).unwrap(), &sign_hash(&z2, &g).unwrap()) - expect).abs()
                    > eps
            })
            .count();
        let rate = exceed as f64 / trials as f64;
        assert!(
            rate <= 1.5 * azuma_tail(m_prime, eps),
            "eps {eps}: rate {rate}"
        );
    }
}

struct TreeCase {
    keys: Matrix<f64>,
    queries: Matrix<f64>,
}

fn tree_case(seed: u64) -> TreeCase {
    let s = RngStream::new(seed, 40);
    TreeCase {
        keys: gaussian_matrix::<f64>(16, 4, &s.substream(0))
            .unwrap()
            .scale(0.35),
        queries: gaussian_matrix::<f64>(4, 4, &s.substream(1))
            .unwrap()
            .scale(0.15),
    }
}

fn softmax_target(case: &TreeCase) -> Vec<f64> {
    let sums: Vec<f64> = case
        .keys
        .row_iter()
        .map(|k| case.queries.row_iter().map(|q| dot(q, k).exp()).sum())
        .collect();
    let total: f64 = sums.iter().sum();
    sums.into_iter().map(|s| s / total).collect()
}

fn positive_map(m: usize, seed: u64) -> FeatureMap<f64> {
    FeatureMap::new(
        FeatureMapSpec::new(FeatureKind::Positive, m, 4)
            .with_scaling(ScalingMode::Raw)
            .with_stream(RngStream::new(seed, 41)),
    )
    .unwrap()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn tree_samples_follow_softmax_scores() {
    let case = tree_case(0);
    let map = positive_map(256, 0);
    let tree = build_sample_tree(&map.apply(&case.keys, Role::Key).unwrap()).unwrap();
    let z = tree_query(&map, &case.queries, TreeAggregation::SumOfFeatures).unwrap();
    let n = 50_000;
    let mut counts = vec![0usize; 16];
    let mut rng = RngStream::new(0, 42).generator();
    for _ in 0..n {
        let s = tree_softmax_sample(&tree, &z, &mut rng).unwrap();
        assert_eq!(s.visits, 4);
        counts[s.index] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let d = tv(&empirical, &softmax_target(&case));
    assert!(d <= 0.05, "tv {d}");
}

#[test]
fn tree_distance_shrinks_with_features() {
    let medians: Vec<f64> = [16, 64, 256]
        .iter()
        .map(|&m| {
            let mut d: Vec<f64> = (0..20)
                .map(|seed| {
                    let case = tree_case(seed);
                    let map = positive_map(m, 100 + seed);
                    let tree =
                        build_sample_tree(&map.apply(&case.keys, Role::Key).unwrap()).unwrap();
                    let z = tree_query(&map, &case.queries, TreeAggregation::SumOfFeatures).unwrap();
                    tv(&tree.leaf_distribution(&z).unwrap(), &softmax_target(&case))
                })
                .collect();
            d.sort_by(f64::total_cmp);
            (d[9] + d[10]) / 2.0
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}
