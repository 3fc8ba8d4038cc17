use iap_core::diversity::{
    distribution_gram, diversity_det, head_attention_matrices, head_distance_sq, head_gram,
    head_outputs, multi_head_attention, GramKernel, HeadGram, HeadSet, Rbf,
};
use iap_core::numerics::{gaussian_matrix, sym_eigenvalues, Matrix, RngStream};
use rand::Rng;

fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

#[test]
fn output_gram_is_psd() {
    for t in 0..100 {
        let s = RngStream::new(t, 0);
        let heads = HeadSet::<f64>::random(2 + (t as usize % 5), 6, 3, 4, 5, &s).unwrap();
        let x = gaussian_matrix::<f64>(8, 6, &s.substream(100)).unwrap();
        let outs = head_outputs(&x, &x, &heads).unwrap();
        for kernel in [GramKernel::Rbf(None), GramKernel::Linear] {
            let g = head_gram(&outs, kernel).unwrap();
            let min = sym_eigenvalues(g.matrix()).unwrap()[0];
            assert!(
                min >= -1e-9 * g.matrix().max_abs().max(1.0),
                "seed {t}: {min}"
            );
        }
    }
}

#[test]
fn distribution_gram_is_psd() {
    for t in 0..100 {
        let s = RngStream::new(t, 1);
        let heads = HeadSet::<f64>::random(4, 5, 3, 2, 4, &s).unwrap();
        let x = gaussian_matrix::<f64>(6, 5, &s.substream(100)).unwrap();
        let attn = head_attention_matrices(&x, &x, &heads).unwrap();
        let g = distribution_gram(&attn, &x, &Rbf { bandwidth: 1.5 }).unwrap();
        assert!(sym_eigenvalues(g.matrix()).unwrap()[0] >= -1e-9);
    }
}

#[test]
fn determinant_is_permutation_invariant() {
    let s = RngStream::new(5, 0);
    let outs: Vec<Matrix<f64>> = (0..4)
        .map(|i| gaussian_matrix(3, 3, &s.substream(i)).unwrap())
        .collect();
    let base = diversity_det(&head_gram(&outs, GramKernel::Rbf(Some(3.0))).unwrap()).unwrap();
    for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]] {
        let shuffled: Vec<Matrix<f64>> = perm.iter().map(|&i| outs[i].clone()).collect();
        let d = diversity_det(&head_gram(&shuffled, GramKernel::Rbf(Some(3.0))).unwrap()).unwrap();
        assert!((d - base).abs() <= 1e-12);
    }
}

#[test]
fn convex_combination_head_lowers_diversity() {
    for t in 0..20 {
        let s = RngStream::new(t, 2);
        let mut outs: Vec<Matrix<f64>> = (0..3)
            .map(|i| gaussian_matrix(2, 3, &s.substream(i)).unwrap())
            .collect();
        let before = diversity_det(&head_gram(&outs, GramKernel::Linear).unwrap()).unwrap();
        let w = 0.3 + 0.4 * (t as f64 / 20.0);
        outs[2] = outs[0].scale(w).add(&outs[1].scale(1.0 - w)).unwrap();
        let after = diversity_det(&head_gram(&outs, GramKernel::Linear).unwrap()).unwrap();
        assert!(after < before, "seed {t}: {after} !< {before}");
    }
}

#[test]
fn mmd_is_nonnegative() {
    let mut rng = RngStream::new(6, 0).generator();
    let x = gaussian_matrix::<f64>(5, 3, &RngStream::new(6, 1)).unwrap();
    let k = Rbf { bandwidth: 1.0 };
    for _ in 0..1000 {
        let (p, q) = (
            random_distribution(&mut rng, 5),
            random_distribution(&mut rng, 5),
        );
        assert!(head_distance_sq(&p, &q, &x, &k).unwrap() >= -1e-12);
    }
}

#[test]
fn mmd_vanishes_only_on_equal_distributions() {
    let x = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.5]).unwrap();
    let k = Rbf { bandwidth: 1.0 };
    let grid: Vec<Vec<f64>> = (0..=4)
        .flat_map(|a| {
            (0..=4 - a).map(move |b| vec![a as f64 / 4.0, b as f64 / 4.0, (4 - a - b) as f64 / 4.0])
        })
        .collect();
    for p in &grid {
        for q in &grid {
            let d = head_distance_sq(p, q, &x, &k).unwrap();
            if p == q {
                assert!(d.abs() <= 1e-12);
            } else {
                assert!(d > 1e-6, "{p:?} {q:?}: {d}");
            }
        }
    }
}

#[test]
fn multi_head_matches_loop_oracle() {
    let s = RngStream::new(7, 0);
    let heads = HeadSet::<f64>::random(3, 4, 2, 3, 5, &s).unwrap();
    let x = gaussian_matrix::<f64>(6, 4, &s.substream(50)).unwrap();
    let y = gaussian_matrix::<f64>(8, 4, &s.substream(51)).unwrap();
    let got = multi_head_attention(&x, &y, &heads).unwrap();
    let (t, l, d_out) = (6, 8, 3);
    let mut concat = vec![vec![0.0; 3 * d_out]; t];
    for (h, head) in heads.heads().iter().enumerate() {
        let proj = |m: &Matrix<f64>, w: &Matrix<f64>, r: usize, c: usize| {
            (0..w.rows())
                .map(|k| m.get(r, k) * w.get(k, c))
                .sum::<f64>()
        };
        for i in 0..t {
            let logits: Vec<f64> = (0..l)
                .map(|j| {
                    (0..2)
                        .map(|c| proj(&x, &head.w_q, i, c) * proj(&y, &head.w_k, j, c))
                        .sum::<f64>()
                        / 2f64.sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d_out {
                concat[i][h * d_out + c] =
                    (0..l).map(|j| e[j] / z * proj(&y, &head.w_v, j, c)).sum();
            }
        }
    }
    let want = Matrix::from_rows(&concat)
        .unwrap()
        .matmul(heads.w_o())
        .unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-12 * want.max_abs());
}

#[test]
fn duplicated_head_has_zero_diversity() {
    let s = RngStream::new(8, 0);
    let heads = HeadSet::<f64>::random(3, 4, 2, 3, 5, &s).unwrap();
    let dup = HeadSet::new(
        vec![
            heads.heads()[0].clone(),
            heads.heads()[1].clone(),
            heads.heads()[0].clone(),
        ],
        heads.w_o().clone(),
    )
    .unwrap();
    let x = gaussian_matrix::<f64>(6, 4, &s.substream(9)).unwrap();
    let g = head_gram(&head_outputs(&x, &x, &dup).unwrap(), GramKernel::Rbf(None)).unwrap();
    assert!(diversity_det(&g).unwrap() <= 1e-12);
    let eye = HeadGram::from_matrix(Matrix::<f64>::identity(3)).unwrap();
    assert!((diversity_det(&eye).unwrap() - 1.0).abs() <= 1e-12);
}
