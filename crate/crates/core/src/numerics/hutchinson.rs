use rand::Rng;

/// Hutchinson estimate of `‖M‖_F² = Tr(MᵀM)` from `probes` Rademacher
/// vectors, given only the action `v ↦ M v`.
///
/// Each probe contributes `‖M v‖²`, whose expectation over ±1 entries is
/// exactly `Tr(MᵀM)`.
pub fn hutchinson_frobenius_sq<F, R>(apply: F, dim: usize, probes: usize, rng: &mut R) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    if dim == 0 || probes == 0 {
        return 0.0;
    }
    let mut v = vec![0.0; dim];
    let mut total = 0.0;
    for _ in 0..probes {
        for x in v.iter_mut() {
            *x = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        total += apply(&v).iter().map(|y| y * y).sum::<f64>();
    }
    total / probes as f64
}

/// Exact `‖M‖_F²` by applying the map to every basis vector.
pub fn frobenius_sq_exact<F>(apply: F, dim: usize) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut e = vec![0.0; dim];
    let mut total = 0.0;
    for i in 0..dim {
        e[i] = 1.0;
        total += apply(&e).iter().map(|y| y * y).sum::<f64>();
        e[i] = 0.0;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_exact_for_any_probe_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [1, 3, 7] {
            for probes in [1, 5, 50] {
                let est = hutchinson_frobenius_sq(|v| v.to_vec(), d, probes, &mut rng);
                assert_eq!(est, d as f64);
            }
        }
    }

    #[test]
    fn diagonal_within_three_sigma() {
        let m = DenseMatrix::diag(&[1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probes = 100_000;
        let est = hutchinson_frobenius_sq(|v| m.matvec(v), 2, probes, &mut rng);
        // for a diagonal map every probe gives exactly 1 + 4
        assert!((est - 5.0).abs() < 1e-12);
        // off-diagonal map has nonzero per-probe variance
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let exact = m.frobenius_sq();
        let samples: Vec<f64> = (0..probes)
            .map(|_| hutchinson_frobenius_sq(|v| m.matvec(v), 2, 1, &mut rng))
            .collect();
        let mean = samples.iter().sum::<f64>() / probes as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (probes - 1) as f64;
        assert!((mean - exact).abs() <= 3.0 * (var / probes as f64).sqrt());
    }

    #[test]
    fn exact_path_and_zero_dim() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(frobenius_sq_exact(|v| m.matvec(v), 2), 30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(hutchinson_frobenius_sq(|v| v.to_vec(), 0, 10, &mut rng), 0.0);
    }
}
