use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

/// Central finite-difference gradient verification, 64-bit only.
///
/// Compares `analytic` against (f(θ+h·e)−f(θ−h·e))/(2h) on a random subset of
/// at least 64 coordinates (all of them when θ is smaller) and returns the max
/// relative error with denominator max(|a|,|n|,1e-8).
///
/// Panics if a non-finite value is encountered.
pub fn grad_check<Func>(
    mut f: Func,
    theta: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> f64
where
    Func: FnMut(&Tensor<f64>) -> f64,
{
    assert_eq!(theta.shape(), analytic.shape(), "grad_check: shape mismatch");
    assert!((1e-7..=1e-3).contains(&h), "grad_check: h out of range");
    let n = theta.numel();
    let coords: Vec<usize> = if n <= 64 {
        (0..n).collect()
    } else {
        let mut v: Vec<usize> = sample(rng, n, 64).into_iter().collect();
        v.sort_unstable();
        v
    };
    let mut max_rel = 0.0f64;
    let mut probe = theta.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        assert!(
            fp.is_finite() && fm.is_finite(),
            "grad_check: non-finite loss at coordinate {i}"
        );
        let num = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        assert!(a.is_finite(), "grad_check: non-finite analytic gradient");
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 0.25]);
        let analytic = theta.map(|v| 2.0 * v);
        let err = grad_check(|t| t.data().iter().map(|v| v * v).sum(), &theta, &analytic, 1e-5, &mut rng);
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn scaled_gradient_is_detected() {
        // analytic 2x the true gradient: rel error |2a-a|/|2a| = 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = Tensor::new(vec![3], vec![1.0, 2.0, -1.0]);
        let wrong = theta.map(|v| 4.0 * v); // true grad is 2v
        let err = grad_check(|t| t.data().iter().map(|v| v * v).sum(), &theta, &wrong, 1e-5, &mut rng);
        assert!(err > 0.3, "deliberately wrong gradient must be flagged, err = {err}");
    }
}
