mod common;

use ganlocal_core::metrics::{
    diff_map, frechet_between, frechet_distance, gaussian_stats, srgb_pixel_to_lab, GaussianStats, PooledPixels,
};
use ganlocal_core::RgbImage;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn close3(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn lab_matches_values_frozen_from_a_reference_library() {
    // (input, expected) pairs recorded from scikit-image's rgb2lab
    let cases: [([f64; 3], [f64; 3]); 5] = [
        ([118.0 / 255.0; 3], [49.6370, 0.0, 0.0]),
        ([0.5; 3], [53.389, 0.0, 0.0]),
        ([0.2; 3], [21.2467, 0.0, 0.0]),
        ([0.9, 0.3, 0.1], [54.086, 57.228, 58.183]),
        ([0.05, 0.6, 0.8], [59.180, -14.989, -35.418]),
    ];
    for (rgb, expect) in cases {
        let lab = srgb_pixel_to_lab(rgb);
        assert!(close3(lab, expect, 0.01), "{rgb:?}: {lab:?} vs {expect:?}");
    }
}

proptest! {
    #[test]
    fn lab_agrees_with_primaries_derivation(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let ours = srgb_pixel_to_lab([r, g, b]);
        let oracle = common::lab_from_primaries([r, g, b]);
        prop_assert!(close3(ours, oracle, 0.05), "{ours:?} vs {oracle:?}");
    }

    #[test]
    fn diff_map_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = || -> f32 { ({ let v: f32 = StandardNormal.sample(&mut rng); v } * 0.3 + 0.5).clamp(0.0, 1.0) };
        let a = RgbImage::new(4, 5, (0..60).map(|_| noise()).collect()).unwrap();
        let b = RgbImage::new(4, 5, (0..60).map(|_| noise()).collect()).unwrap();
        let ab = diff_map(&a, &b).unwrap();
        let ba = diff_map(&b, &a).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!(ab.values.iter().all(|&v| v >= 0.0));
    }
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

fn to_rows(m: &DMatrix<f64>) -> common::Mat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[test]
fn frechet_matches_nonsymmetric_square_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for d in [1, 2, 5, 8] {
        let s1 = random_spd(&mut rng, d);
        let s2 = random_spd(&mut rng, d);
        let mu1: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mu2: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let expect = common::frechet_oracle(&mu1, &to_rows(&s1), &mu2, &to_rows(&s2));
        let a = GaussianStats::new(mu1, s1).unwrap();
        let b = GaussianStats::new(mu2, s2).unwrap();
        let got = frechet_distance(&a, &b).unwrap();
        assert!(
            (got - expect).abs() <= 1e-7 * expect.abs().max(1.0),
            "d={d}: {got} vs {expect}"
        );
    }
}

#[test]
fn frechet_closed_forms() {
    // one dimension: (μ₁−μ₂)² + (s₁−s₂)²
    let a = GaussianStats::new(vec![1.0], DMatrix::from_element(1, 1, 4.0)).unwrap();
    let b = GaussianStats::new(vec![-2.0], DMatrix::from_element(1, 1, 9.0)).unwrap();
    assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-12);
    // diagonal covariances: Σ (√aᵢ − √bᵢ)²
    let a = GaussianStats::new(
        vec![0.0; 3],
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 9.0])),
    )
    .unwrap();
    let b = GaussianStats::new(
        vec![0.0; 3],
        DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 4.0, 1.0])),
    )
    .unwrap();
    assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-10);
}

#[test]
fn frechet_of_image_sets() {
    let g = ganlocal_core::minigen::build_generator(ganlocal_core::minigen::GeneratorConfig::new(0));
    let none = Default::default();
    let a: Vec<RgbImage> = (0..20).map(|s| g.render_seed(s, &none).image).collect();
    let b: Vec<RgbImage> = (100..120).map(|s| g.render_seed(s, &none).image).collect();
    let ext = PooledPixels::default();
    assert!(frechet_between(&a, &a, &ext).unwrap() < 1e-8);
    let ab = frechet_between(&a, &b, &ext).unwrap();
    let ba = frechet_between(&b, &a, &ext).unwrap();
    assert!(ab > 0.0);
    assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
}

#[test]
fn sample_statistics_use_unbiased_covariance() {
    let feats = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 5.0]];
    let s = gaussian_stats(&feats).unwrap();
    assert_eq!(s.mu.as_slice(), &[2.0, 3.0]);
    // deviations (-1,-1), (1,-1), (0,2) over n−1 = 2
    assert_eq!(s.cov.as_slice(), &[1.0, 0.0, 0.0, 3.0]);
}
