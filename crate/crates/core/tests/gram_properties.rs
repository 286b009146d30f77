use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplet_texture::extractor::gram;

fn random_features(rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = rng.gen_range(1..=12);
    let m = rng.gen_range(1..=40);
    Array2::from_shape_simple_fn((n, m), || rng.gen_range(-2.0..2.0))
}

fn permute_columns(f: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut order: Vec<usize> = (0..f.ncols()).collect();
    order.shuffle(rng);
    f.select(Axis(1), &order)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn thousand_random_matrices_satisfy_all_gram_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let f = random_features(&mut rng);
        let g = gram(f.view()).unwrap();
        let n = g.nrows();
        assert_eq!(g, g.t(), "symmetry is exact");

        let eig = DMatrix::from_fn(n, n, |i, j| g[[i, j]]).symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l > -1e-6), "PSD: {eig}");

        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let permuted = gram(permute_columns(&f, &mut rng).view()).unwrap();
        assert!(max_abs_diff(&g, &permuted) <= 1e-13 * scale);

        let a: f64 = rng.gen_range(-3.0..3.0);
        let scaled = gram((&f * a).view()).unwrap();
        assert!(max_abs_diff(&scaled, &(&g * (a * a))) <= 1e-6 * scale.max(1.0) * a * a);
    }
}

#[test]
fn permutation_invariance_is_bitwise_on_exactly_representable_features() {
    // Integer features keep every partial sum exact, so summation order cannot matter.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let f = random_features(&mut rng).mapv(f64::round);
        let g = gram(f.view()).unwrap();
        assert_eq!(g, gram(permute_columns(&f, &mut rng).view()).unwrap());
    }
}

#[test]
fn gram_of_known_matrix() {
    let f = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 0.0, -1.0, 1.0]).unwrap();
    let g = gram(f.view()).unwrap();
    let expected = Array2::from_shape_vec((2, 2), vec![14.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
    assert!(max_abs_diff(&g, &expected) < 1e-15);
}

proptest! {
    #[test]
    fn diagonal_is_mean_square_activation(values in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        let m = values.len();
        let f = Array2::from_shape_vec((1, m), values.clone()).unwrap();
        let g = gram(f.view()).unwrap();
        let expected = values.iter().map(|v| v * v).sum::<f64>() / m as f64;
        prop_assert!((g[[0, 0]] - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}
