use super::Tensor;

/// Central-difference check of an analytic gradient, in f64 only.
///
/// For each coordinate the numeric derivative `(f(x+he) - f(x-he)) / 2h` is
/// compared against `analytic`; the return value is the maximum relative
/// error with denominator `max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor<f64>, analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert_eq!(analytic.len(), x.data().len(), "gradient length mismatch");
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        let rel = (numeric - analytic[i]).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_to_h2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(|t| t.iter().map(|v| v * v).sum(), &x, &grad, 1e-5);
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn linear_is_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coeff: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let c = coeff.clone();
        let err = finite_diff_check(
            |t| t.iter().zip(&c).map(|(v, k)| v * k).sum(),
            &x,
            &coeff,
            1e-5,
        );
        assert!(err < 1e-9, "err = {err}");
    }
}
