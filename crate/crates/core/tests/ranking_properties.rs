use iap_core::attention::{angle, select_top_l};
use iap_core::features::{FeatureKind, FeatureMap, FeatureMapSpec, Role, ScalingMode};
use iap_core::numerics::{dot, gaussian_matrix, Matrix, RngStream};
use iap_core::ranking::{azuma_tail, hashed_rank, sign_hash, KeyDatabase};

fn trig_keys(len: usize, seed: u64) -> (Matrix<f64>, Vec<f64>) {
    let s = RngStream::new(seed, 0);
    let spec = FeatureMapSpec::new(FeatureKind::Trig, 16, 4)
        .with_scaling(ScalingMode::Normalized)
        .with_stream(s.substream(0));
    let map = FeatureMap::<f64>::new(spec).unwrap();
    let k = gaussian_matrix::<f64>(len, 4, &s.substream(1)).unwrap();
    let q = gaussian_matrix::<f64>(len, 4, &s.substream(2)).unwrap();
    let z = map.apply(&q, Role::Query).unwrap().column_sums();
    (map.apply(&k, Role::Key).unwrap(), z)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn orthogonal_inputs_hash_to_zero_mean() {
    let (z1, z2) = ([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]);
    let n = 10_000;
    let mean = (0..n)
        .map(|i| {
            let g = gaussian_matrix::<f64>(64, 4, &RngStream::new(i, 3)).unwrap();
            dot(&sign_hash(&z1, &g).unwrap(), &sign_hash(&z2, &g).unwrap())
        })
        .sum::<f64>()
        / n as f64;
    assert!(mean.abs() <= 0.03, "mean {mean}");
}

#[test]
fn hashed_inner_product_tracks_angle() {
    let z1 = [1.0, 0.2, -0.4];
    let z2 = [0.3, 1.0, 0.5];
    let theta: f64 = angle(&z1, &z2);
    let n = 4000;
    let mean = (0..n)
        .map(|i| {
            let g = gaussian_matrix::<f64>(32, 3, &RngStream::new(i, 4)).unwrap();
            dot(&sign_hash(&z1, &g).unwrap(), &sign_hash(&z2, &g).unwrap())
        })
        .sum::<f64>()
        / n as f64;
    let expect = 1.0 - 2.0 * theta / std::f64::consts::PI;
    // per-draw variance at most 1/32
    assert!((mean - expect).abs() <= 4.0 * (1.0 / 32.0 / n as f64).sqrt());
}

fn gaussian_keys(len: usize, width: usize, seed: u64) -> (Matrix<f64>, Vec<f64>) {
    let keys = gaussian_matrix::<f64>(len, width, &RngStream::new(seed, 1)).unwrap();
    let z = gaussian_matrix::<f64>(1, width, &RngStream::new(seed, 2))
        .unwrap()
        .row(0)
        .to_vec();
    (keys, z)
}

// Exact top-10 recovery needs the hash noise (about 0.015 at m' = 4096)
// to stay below the score gaps among the top ten of 512 keys, which are a
// few thousandths for generic 32-dimensional keys. Measured: 0/20 exact
// matches, mean overlap 8.5/10.
#[test]
#[ignore = "hash noise exceeds top-rank gaps; see README"]
fn wide_sketch_recovers_angular_top_ten() {
    let mut ok = 0;
    for t in 0..100 {
        let (keys, z) = gaussian_keys(512, 32, 200 + t);
        let db = KeyDatabase::new(keys.clone(), 0)
            .with_sketch(4096, &RngStream::new(t, 9))
            .unwrap();
        let hashed = hashed_rank(&db, &z).unwrap();
        let neg_angle: Vec<f64> = keys.row_iter().map(|k| -angle(&z, k)).collect();
        if select_top_l(&hashed, 10).unwrap() == select_top_l(&neg_angle, 10).unwrap() {
            ok += 1;
        }
    }
    assert!(ok >= 95, "{ok}/100");
}

#[test]
fn hashed_scores_are_monotone_in_angle() {
    let (keys, z) = gaussian_keys(256, 32, 77);
    let db = KeyDatabase::new(keys.clone(), 0)
        .with_sketch(1024, &RngStream::new(1, 9))
        .unwrap();
    let hashed = hashed_rank(&db, &z).unwrap();
    let neg_angle: Vec<f64> = keys.row_iter().map(|k| -angle(&z, k)).collect();
    let rho = spearman(&hashed, &neg_angle);
    assert!(rho >= 0.9, "rho {rho}");
}

#[test]
fn deviation_tail_below_azuma() {
    let z1 = [0.8, -0.3, 0.5, 0.1];
    let z2 = [0.2, 0.9, -0.4, 0.3];
    let expect = 1.0 - 2.0 * angle(&z1, &z2) / std::f64::consts::PI;
    let m_prime = 256;
    let trials = 4000;
    for eps in [0.05, 0.1, 0.15] {
        let exceed = (0..trials)
            .filter(|&i| {
                let g = gaussian_matrix::<f64>(m_prime, 4, &RngStream::new(i, 5)).unwrap();
                let v = dot(&sign_hash(&z1, &g).unwrap(), &sign_hash(&z2, &g).unwrap());
                (v - expect).abs() > eps
            })
            .count();
        let rate = exceed as f64 / trials as f64;
        assert!(
            rate <= 1.5 * azuma_tail(m_prime, eps),
            "eps {eps}: rate {rate}"
        );
    }
}

#[test]
fn rebuild_refreshes_indexes() {
    let (keys, z) = trig_keys(32, 5);
    let mut db = KeyDatabase::new(keys.clone(), 0)
        .with_sketch(256, &RngStream::new(2, 2))
        .unwrap();
    let before = hashed_rank(&db, &z).unwrap();
    let (other, _) = trig_keys(32, 6);
    db.rebuild(other.clone(), 1).unwrap();
    assert_eq!(db.version(), 1);
    let fresh = KeyDatabase::new(other, 1)
        .with_sketch(256, &RngStream::new(2, 2))
        .unwrap();
    assert_eq!(
        hashed_rank(&db, &z).unwrap(),
        hashed_rank(&fresh, &z).unwrap()
    );
    assert_ne!(hashed_rank(&db, &z).unwrap(), before);
}
