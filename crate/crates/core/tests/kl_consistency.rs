use fslm_core::metrics::kl_estimate;
use fslm_core::rng::rng_from_seed;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, shift: f64, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_simple_fn((n, d), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        shift + scale * z
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

/// KL(N(1, 0.8²I₂) ‖ N(0, I₂)) in closed form.
fn truth() -> f64 {
    let (s2, mu2, d) = (0.64f64, 1.0f64, 2.0);
    0.5 * d * (s2 - 1.0 - s2.ln()) + 0.5 * d * mu2
}

#[test]
fn error_shrinks_with_sample_size() {
    let errors: Vec<f64> = [500usize, 2000, 8000]
        .iter()
        .map(|&n| {
            median(
                (0..10u64)
                    .map(|s| {
                        let x = gaussian(n, 2, 1.0, 0.8, 1000 + s);
                        let y = gaussian(n, 2, 0.0, 1.0, 2000 + s);
                        (kl_estimate(x.view(), y.view()).unwrap().value - truth()).abs()
                    })
                    .collect(),
            )
        })
        .collect();
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
}

#[test]
fn estimate_is_affine_invariant_within_noise() {
    let mut shifts = Vec::new();
    for s in 0..10u64 {
        let x = gaussian(2000, 3, 0.5, 1.0, 10 + s);
        let y = gaussian(2000, 3, 0.0, 1.0, 20 + s);
        let base = kl_estimate(x.view(), y.view()).unwrap().value;
        let map = |a: &Array2<f64>| a.mapv(|v| -4.0 * v + 11.0);
        let moved = kl_estimate(map(&x).view(), map(&y).view()).unwrap().value;
        shifts.push((base - moved).abs());
    }
    assert!(shifts.iter().all(|d| *d < 0.01), "{shifts:?}");
}
