//! Small dense-vector helpers shared by the propagators and estimators.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scaled(alpha: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| alpha * x).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn random_unit<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let nv = norm(&v);
    if nv > 0.0 {
        v.iter_mut().for_each(|x| *x /= nv);
    }
    v
}

/// Largest singular value of a linear map given by its forward and transpose
/// actions, estimated by power iteration on `AᵀA`.
pub fn spectral_norm<F, G, R>(dim: usize, apply: F, apply_t: G, iters: usize, rng: &mut R) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
    R: Rng,
{
    let mut x = random_unit(rng, dim);
    for _ in 0..iters {
        let y = apply(&x);
        let z = apply_t(&y);
        let nz = norm(&z);
        if nz == 0.0 {
            return 0.0;
        }
        x = z.iter().map(|v| v / nz).collect();
    }
    // x is a unit vector, so ‖Ax‖ is a lower estimate of the top singular value.
    norm(&apply(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_norm_of_diagonal() {
        let d = [3.0, -5.0, 1.0];
        let f = |x: &[f64]| x.iter().zip(&d).map(|(a, b)| a * b).collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = spectral_norm(3, f, f, 200, &mut rng);
        assert!((s - 5.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn axpy_and_dot() {
        let mut y = vec![1.0, 2.0];
        axpy(2.0, &[1.0, -1.0], &mut y);
        assert_eq!(y, vec![3.0, 0.0]);
        assert_eq!(dot(&y, &[1.0, 1.0]), 3.0);
    }
}
