use iap_core::attention::{
    angle, brute_force_attention, brute_force_scores, iap_trans, implicit_attention, rank_scores,
    select_top_l, ScoreRow, TransOptions,
};
use iap_core::features::{ExactKernel, FeatureKind, FeatureMap, FeatureMapSpec, Role, ScalingMode};
use iap_core::numerics::{gaussian_matrix, Matrix, RngStream};

fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.max_abs_diff(b) / b.max_abs()
}

fn relu_inputs(len: usize, seed: u64) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let s = RngStream::new(seed, 0);
    (
        gaussian_matrix(len, 4, &s.substream(0)).unwrap(),
        gaussian_matrix(len, 4, &s.substream(1)).unwrap(),
        gaussian_matrix(len, 3, &s.substream(2)).unwrap(),
    )
}

#[test]
fn relu_implicit_matches_brute_force() {
    let map = FeatureMap::<f64>::new(FeatureMapSpec::relu(4)).unwrap();
    for &len in &[1usize, 17, 256] {
        let (q, k, v) = relu_inputs(len, len as u64);
        let (qp, kp) = (
            map.apply(&q, Role::Query).unwrap(),
            map.apply(&k, Role::Key).unwrap(),
        );
        let reference = brute_force_attention(&q, &k, &v, &ExactKernel::Relu, false).unwrap();
        assert!(
            rel_err(
                &implicit_attention(&qp, &kp, &v, false).unwrap(),
                &reference
            ) <= 1e-10
        );
        let eye = Matrix::identity(len);
        let trans = iap_trans(&qp, &kp, &v, &eye, TransOptions::default()).unwrap();
        assert!(rel_err(&trans, &reference) <= 1e-10);
    }
}

#[test]
fn scores_match_column_sums() {
    let map = FeatureMap::<f64>::new(FeatureMapSpec::relu(4)).unwrap();
    let (q, k, _) = relu_inputs(128, 3);
    let (qp, kp) = (
        map.apply(&q, Role::Query).unwrap(),
        map.apply(&k, Role::Key).unwrap(),
    );
    let r = rank_scores(&qp, &kp, &ScoreRow::Ones).unwrap();
    let reference = brute_force_scores(&q, &k, &ExactKernel::Relu, &ScoreRow::Ones, false).unwrap();
    let diff = r
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-10);
}

#[test]
fn top_l_agrees_with_brute_force_for_deterministic_maps() {
    for seed in 0..20 {
        let map = FeatureMap::<f64>::new(FeatureMapSpec::relu(4)).unwrap();
        let (q, k, _) = relu_inputs(96, 100 + seed);
        let (qp, kp) = (
            map.apply(&q, Role::Query).unwrap(),
            map.apply(&k, Role::Key).unwrap(),
        );
        let r = rank_scores(&qp, &kp, &ScoreRow::Ones).unwrap();
        let reference =
            brute_force_scores(&q, &k, &ExactKernel::Relu, &ScoreRow::Ones, false).unwrap();
        for l in [1, 5, 10, 96] {
            assert_eq!(
                select_top_l(&r, l).unwrap(),
                select_top_l(&reference, l).unwrap()
            );
        }
    }
    let drawn = FeatureMap::<f64>::new(FeatureMapSpec::new(FeatureKind::Positive, 16, 4)).unwrap();
    let (q, k, _) = relu_inputs(64, 7);
    let (qp, kp) = (
        drawn.apply(&q, Role::Query).unwrap(),
        drawn.apply(&k, Role::Key).unwrap(),
    );
    let r = rank_scores(&qp, &kp, &ScoreRow::Ones).unwrap();
    let reference = brute_force_scores(&q, &k, &drawn, &ScoreRow::Ones, false).unwrap();
    assert_eq!(
        select_top_l(&r, 8).unwrap(),
        select_top_l(&reference, 8).unwrap()
    );
}

#[test]
fn normalized_trig_scores_order_by_angle() {
    for seed in 0..100 {
        let spec = FeatureMapSpec::new(FeatureKind::Trig, 32, 4)
            .with_scaling(ScalingMode::Normalized)
            .with_stream(RngStream::new(seed, 1));
        let map = FeatureMap::<f64>::new(spec).unwrap();
        let (q, k, _) = relu_inputs(64, 1000 + seed);
        let (qp, kp) = (
            map.apply(&q, Role::Query).unwrap(),
            map.apply(&k, Role::Key).unwrap(),
        );
        let z = qp.column_sums();
        let r = rank_scores(&qp, &kp, &ScoreRow::Ones).unwrap();
        let neg_angle: Vec<f64> = kp.row_iter().map(|phi| -angle(&z, phi)).collect();
        let order = |x: &[f64]| {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
            idx
        };
        assert_eq!(order(&r), order(&neg_angle), "seed {seed}");
    }
}
