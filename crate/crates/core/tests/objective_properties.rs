use dsclap::linalg::Matrix;
use dsclap::objectives::{info_nce, lam_loss, mine_hard_negatives, similarity_matrix, total_loss, EmbeddingBatch, SimilarityMatrix};
use dsclap::seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

fn unit_rows(rng: &mut seed::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / r).collect()
        })
        .collect()
}

fn batch(seed_: u64, n: usize, d: usize) -> EmbeddingBatch {
    let mut rng = seed::rng(seed_);
    let a = unit_rows(&mut rng, n, d);
    let t = unit_rows(&mut rng, n, d);
    EmbeddingBatch::from_rows(&a, &t).unwrap()
}

fn components(b: &EmbeddingBatch, log_scale: f64, k: usize) -> [f64; 4] {
    let s = similarity_matrix(b, log_scale).unwrap();
    let (l_a, l_t) = info_nce(&s).unwrap();
    let (h_a, h_t) = lam_loss(&s, &mine_hard_negatives(&s, k).unwrap()).unwrap();
    [l_a, l_t, h_a, h_t]
}

/// (seed, N, d, K, log scale) with 2 <= N <= 8 and 1 <= K <= N-1.
fn instance() -> impl Strategy<Value = (u64, usize, usize, usize, f64)> {
    (any::<u64>(), 2usize..=8, 2usize..=12, 0.0f64..1.0, -1.0f64..100f64.ln())
        .prop_map(|(s, n, d, f, ls)| (s, n, d, 1 + ((n - 1) as f64 * f) as usize % (n - 1), ls))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn swapping_modalities_swaps_directional_losses((s, n, d, k, ls) in instance()) {
        let b = batch(s, n, d);
        let [l_a, l_t, h_a, h_t] = components(&b, ls, k);
        let [sl_a, sl_t, sh_a, sh_t] = components(&b.swapped(), ls, k);
        prop_assert_eq!((l_a, l_t, h_a, h_t), (sl_t, sl_a, sh_t, sh_a));
        let total = total_loss(l_a, l_t, h_a, h_t, 0.5, 0.5).unwrap().total;
        let swapped = total_loss(sl_a, sl_t, sh_a, sh_t, 0.5, 0.5).unwrap().total;
        prop_assert!((total - swapped).abs() <= 1e-15 * total.abs().max(1.0));
    }

    #[test]
    fn shared_permutation_leaves_losses_unchanged((s, n, d, k, ls) in instance()) {
        let mut rng = seed::rng(s ^ 0x5EED);
        let a = unit_rows(&mut rng, n, d);
        let t = unit_rows(&mut rng, n, d);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
        let pt: Vec<_> = order.iter().map(|&i| t[i].clone()).collect();
        let base = components(&EmbeddingBatch::from_rows(&a, &t).unwrap(), ls, k);
        let permuted = components(&EmbeddingBatch::from_rows(&pa, &pt).unwrap(), ls, k);
        for (x, y) in base.iter().zip(&permuted) {
            prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn losses_are_non_negative_and_hard_loss_is_bounded((s, n, d, k, ls) in instance()) {
        let [l_a, l_t, h_a, h_t] = components(&batch(s, n, d), ls, k);
        for v in [l_a, l_t, h_a, h_t] {
            prop_assert!(v >= 0.0);
        }
        // The mined set is a subset of the full negative set.
        prop_assert!(h_a <= l_a + 1e-12);
        prop_assert!(h_t <= l_t + 1e-12);
    }

    #[test]
    fn constant_scores_give_log_counts(n in 2usize..=8, kf in 0.0f64..1.0, c in -30.0f64..30.0) {
        let k = 1 + ((n - 1) as f64 * kf) as usize % (n - 1);
        let s = SimilarityMatrix::from_scores(Matrix::from_vec(n, n, vec![c; n * n])).unwrap();
        let (l_a, l_t) = info_nce(&s).unwrap();
        let (h_a, h_t) = lam_loss(&s, &mine_hard_negatives(&s, k).unwrap()).unwrap();
        let ln_n = (n as f64).ln();
        let ln_k = (1.0 + k as f64).ln();
        prop_assert!((l_a - ln_n).abs() <= 1e-12 && (l_t - ln_n).abs() <= 1e-12);
        prop_assert!((h_a - ln_k).abs() <= 1e-12 && (h_t - ln_k).abs() <= 1e-12);
    }

    #[test]
    fn mining_matches_exhaustive_sort((s, n, _d, k, _ls) in instance(), ties in any::<bool>()) {
        let mut rng = seed::rng(s);
        // Coarse integer scores force ties when requested.
        let scores: Vec<f64> = (0..n * n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                if ties { (x * 2.0).round() } else { x }
            })
            .collect();
        let sm = SimilarityMatrix::from_scores(Matrix::from_vec(n, n, scores.clone())).unwrap();
        let negs = mine_hard_negatives(&sm, k).unwrap();
        let at = |i: usize, j: usize| scores[i * n + j];
        for i in 0..n {
            let mut row: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            row.sort_by(|&x, &y| at(i, y).partial_cmp(&at(i, x)).unwrap().then(x.cmp(&y)));
            row.truncate(k);
            prop_assert_eq!(&negs.text[i], &row);
            let mut col: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            col.sort_by(|&x, &y| at(y, i).partial_cmp(&at(x, i)).unwrap().then(x.cmp(&y)));
            col.truncate(k);
            prop_assert_eq!(&negs.audio[i], &col);
        }
    }
}

#[test]
fn near_perfect_alignment_drives_losses_to_zero() {
    let n = 4;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let b = EmbeddingBatch::from_rows(&rows, &rows).unwrap();
    let [l_a, l_t, h_a, h_t] = components(&b, 100f64.ln(), 2);
    for v in [l_a, l_t, h_a, h_t] {
        assert!((0.0..1e-40).contains(&v), "{v}");
    }
}
