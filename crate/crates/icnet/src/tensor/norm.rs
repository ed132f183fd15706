use super::{from_count, Element, Mode, Shape, Tensor};
use crate::error::{Error, Result};

/// Batch-normalization parameters for `c` channels. `gamma` and `beta` are
/// trainable; the running statistics are state updated in training mode and
/// consumed in inference mode.
#[derive(Debug, Clone)]
pub struct BnParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub epsilon: E,
    pub momentum: E,
}

impl<E: Element> BnParams<E> {
    /// Identity-initialized parameters: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BnParams {
            gamma: Tensor::filled(s, E::one()),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::filled(s, E::one()),
            epsilon: E::from_f64(1e-5),
            momentum: E::from_f64(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

/// Values saved by the training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnStash<E: Element> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

fn check_channels<E: Element>(x: &Tensor<E>, bn: &BnParams<E>) -> Result<()> {
    if x.shape().c != bn.channels() {
        return Err(Error::shape(format!(
            "batch_norm: input has {} channels, params have {}",
            x.shape().c,
            bn.channels()
        )));
    }
    Ok(())
}

/// Training-mode batch normalization: normalizes with batch statistics over
/// `(n, h, w)` per channel and updates the running statistics as
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn batch_norm_train<E: Element>(x: &Tensor<E>, bn: &mut BnParams<E>) -> Result<(Tensor<E>, BnStash<E>)> {
    check_channels(x, bn)?;
    let Shape { n, c, h, w } = x.shape();
    let m = from_count::<E>(n * h * w);
    let mut mean = vec![E::zero(); c];
    let mut inv_std = vec![E::zero(); c];
    let mut out = Tensor::zeros(x.shape());

    for ci in 0..c {
        let mut sum = E::zero();
        for ni in 0..n {
            for &v in x.plane(ni, ci) {
                sum = sum + v;
            }
        }
        let mu = sum / m;
        let mut var_sum = E::zero();
        for ni in 0..n {
            for &v in x.plane(ni, ci) {
                let d = v - mu;
                var_sum = var_sum + d * d;
            }
        }
        let var = var_sum / m;
        let istd = E::one() / (var + bn.epsilon).sqrt();
        mean[ci] = mu;
        inv_std[ci] = istd;

        let g = bn.gamma.data()[ci];
        let b = bn.beta.data()[ci];
        for ni in 0..n {
            let src_start = x.idx(ni, ci, 0, 0);
            for i in 0..h * w {
                let v = x.data()[src_start + i];
                out.data_mut()[src_start + i] = (v - mu) * istd * g + b;
            }
        }

        let mom = bn.momentum;
        let one = E::one();
        let rm = &mut bn.running_mean.data_mut()[ci];
        *rm = (one - mom) * *rm + mom * mu;
        let rv = &mut bn.running_var.data_mut()[ci];
        *rv = (one - mom) * *rv + mom * var;
    }
    Ok((out, BnStash { mean, inv_std }))
}

/// Inference-mode batch normalization using the running statistics.
pub fn batch_norm_infer<E: Element>(x: &Tensor<E>, bn: &BnParams<E>) -> Result<Tensor<E>> {
    check_channels(x, bn)?;
    let Shape { n, c, h, w } = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for ci in 0..c {
        let mu = bn.running_mean.data()[ci];
        let istd = E::one() / (bn.running_var.data()[ci] + bn.epsilon).sqrt();
        let g = bn.gamma.data()[ci];
        let b = bn.beta.data()[ci];
        for ni in 0..n {
            let start = x.idx(ni, ci, 0, 0);
            for i in 0..h * w {
                let v = x.data()[start + i];
                out.data_mut()[start + i] = (v - mu) * istd * g + b;
            }
        }
    }
    Ok(out)
}

/// Mode-dispatching wrapper. Training mode mutates the running statistics.
pub fn batch_norm<E: Element>(x: &Tensor<E>, bn: &mut BnParams<E>, mode: Mode) -> Result<Tensor<E>> {
    match mode {
        Mode::Train => batch_norm_train(x, bn).map(|(y, _)| y),
        Mode::Infer => batch_norm_infer(x, bn),
    }
}

/// Gradients of training-mode batch normalization with respect to the input,
/// gamma and beta.
pub fn batch_norm_grad<E: Element>(
    x: &Tensor<E>,
    bn: &BnParams<E>,
    stash: &BnStash<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    check_channels(x, bn)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("batch_norm_grad: dy shape mismatch"));
    }
    let Shape { n, c, h, w } = x.shape();
    let m = from_count::<E>(n * h * w);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(bn.gamma.shape());
    let mut dbeta = Tensor::zeros(bn.beta.shape());

    for ci in 0..c {
        let mu = stash.mean[ci];
        let istd = stash.inv_std[ci];
        let g = bn.gamma.data()[ci];

        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for ni in 0..n {
            let start = x.idx(ni, ci, 0, 0);
            for i in 0..h * w {
                let gy = dy.data()[start + i];
                let xhat = (x.data()[start + i] - mu) * istd;
                sum_dy = sum_dy + gy;
                sum_dy_xhat = sum_dy_xhat + gy * xhat;
            }
        }
        dbeta.data_mut()[ci] = sum_dy;
        dgamma.data_mut()[ci] = sum_dy_xhat;

        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for ni in 0..n {
            let start = x.idx(ni, ci, 0, 0);
            for i in 0..h * w {
                let gy = dy.data()[start + i];
                let xhat = (x.data()[start + i] - mu) * istd;
                dx.data_mut()[start + i] = g * istd * (gy - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infer_identity_params_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 4), |_, _, _, _| rng.gen_range(-2.0..2.0));
        let mut bn = BnParams::identity(3);
        bn.epsilon = 0.0;
        let y = batch_norm_infer(&x, &bn).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn train_constant_input_gives_beta() {
        let x = Tensor::<f64>::filled(Shape::new(2, 2, 3, 3), 7.0);
        let mut bn = BnParams::identity(2);
        bn.beta = Tensor::filled(Shape::new(1, 2, 1, 1), 0.25);
        let (y, _) = batch_norm_train(&x, &mut bn).unwrap();
        assert!(y.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn train_output_statistics_match_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(Shape::new(4, 2, 8, 8), |_, _, _, _| rng.gen_range(-3.0..3.0));
        let mut bn = BnParams::identity(2);
        bn.epsilon = 1e-12;
        bn.gamma = Tensor::new(Shape::new(1, 2, 1, 1), vec![1.5, 0.5]).unwrap();
        bn.beta = Tensor::new(Shape::new(1, 2, 1, 1), vec![-1.0, 2.0]).unwrap();
        let (y, _) = batch_norm_train(&x, &mut bn).unwrap();
        let m = 4.0 * 8.0 * 8.0;
        for ci in 0..2 {
            let mut mean = 0.0;
            for ni in 0..4 {
                mean += y.plane(ni, ci).iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for ni in 0..4 {
                var += y.plane(ni, ci).iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            var /= m;
            let want_beta = bn.beta.data()[ci];
            let want_g2 = bn.gamma.data()[ci] * bn.gamma.data()[ci];
            assert!((mean - want_beta).abs() < 1e-10, "mean {mean} vs beta {want_beta}");
            assert!((var - want_g2).abs() < 1e-6, "var {var} vs gamma^2 {want_g2}");
        }
    }

    #[test]
    fn running_stats_update_by_momentum() {
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 10.0);
        let mut bn = BnParams::identity(1);
        bn.momentum = 0.25;
        batch_norm_train(&x, &mut bn).unwrap();
        // mean: 0.75*0 + 0.25*10 = 2.5; var: 0.75*1 + 0.25*0 = 0.75.
        assert_eq!(bn.running_mean.data()[0], 2.5);
        assert_eq!(bn.running_var.data()[0], 0.75);
    }

    #[test]
    fn zero_variance_channel_is_legal() {
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 3.0);
        let mut bn = BnParams::identity(1);
        let (y, _) = batch_norm_train(&x, &mut bn).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
