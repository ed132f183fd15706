//! Conv + BN + ReLU building block with explicit forward/backward passes,
//! the parameter visitor the
//! optimizer/checkpoint/pruning machinery shares, and the executed-op MAC
//! counter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{
    batch_norm_grad, batch_norm_train, conv2d, conv2d_grad, relu, relu_grad, BnParams, BnStash,
    ConvParams, Element, Shape, Tensor,
};

/// Role of a parameter tensor; drives weight-decay and checkpoint policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not trainable parameters.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to conv weights and BN gamma, not to biases and
    /// beta.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Gamma)
    }
}

pub type ParamFn<'a, E> = dyn FnMut(&str, ParamKind, &Tensor<E>) + 'a;
pub type ParamFnMut<'a, E> = dyn FnMut(&str, ParamKind, &mut Tensor<E>) + 'a;

/// Records the canonical per-sample MAC cost of each executed op, in
/// execution order. Conv ops count `c_out * c_in * k^2` per output pixel
/// (dense count, boundary-skip optimizations do not reduce it); everything
/// else counts its output elements. Costs are per sample so they compare
/// directly against the batch-free cost model.
#[derive(Debug, Default)]
pub struct MacCounter {
    pub enabled: bool,
    pub per_op: Vec<u64>,
}

impl MacCounter {
    pub fn off() -> Self {
        MacCounter { enabled: false, per_op: Vec::new() }
    }
    pub fn on() -> Self {
        MacCounter { enabled: true, per_op: Vec::new() }
    }
    pub fn record(&mut self, macs: u64) {
        if self.enabled {
            self.per_op.push(macs);
        }
    }
    pub fn record_conv(&mut self, p: &ConvParams<impl Element>, oh: usize, ow: usize) {
        self.record((p.c_out() * p.c_in() * p.kernel() * p.kernel()) as u64 * (oh * ow) as u64);
    }
    /// Output elements of one sample.
    pub fn record_elems(&mut self, s: Shape) {
        self.record((s.c * s.h * s.w) as u64);
    }
    pub fn total(&self) -> u64 {
        self.per_op.iter().sum()
    }
}

/// He (fan-in) initialized conv parameters, deterministic from the rng state.
pub fn he_conv<E: Element>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    dilation: usize,
) -> ConvParams<E> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let weight = Tensor::from_fn(Shape::new(c_out, c_in, k, k), |_, _, _, _| E::from_f64(normal(rng) * std));
    let bias = Tensor::zeros(Shape::new(1, c_out, 1, 1));
    let padding = dilation * (k - 1) / 2;
    ConvParams::new(weight, bias, stride, dilation, padding).expect("valid conv params")
}

/// Standard normal draw via Box-Muller; two uniform draws per sample keep
/// the stream position deterministic.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Visit the weight/bias pair of a conv.
pub fn visit_conv<E: Element>(prefix: &str, p: &ConvParams<E>, f: &mut ParamFn<'_, E>) {
    f(&format!("{prefix}.weight"), ParamKind::Weight, &p.weight);
    f(&format!("{prefix}.bias"), ParamKind::Bias, &p.bias);
}

pub fn visit_conv_mut<E: Element>(prefix: &str, p: &mut ConvParams<E>, f: &mut ParamFnMut<'_, E>) {
    f(&format!("{prefix}.weight"), ParamKind::Weight, &mut p.weight);
    f(&format!("{prefix}.bias"), ParamKind::Bias, &mut p.bias);
}

pub fn visit_bn<E: Element>(prefix: &str, bn: &BnParams<E>, f: &mut ParamFn<'_, E>) {
    f(&format!("{prefix}.gamma"), ParamKind::Gamma, &bn.gamma);
    f(&format!("{prefix}.beta"), ParamKind::Beta, &bn.beta);
    f(&format!("{prefix}.running_mean"), ParamKind::RunningMean, &bn.running_mean);
    f(&format!("{prefix}.running_var"), ParamKind::RunningVar, &bn.running_var);
}

pub fn visit_bn_mut<E: Element>(prefix: &str, bn: &mut BnParams<E>, f: &mut ParamFnMut<'_, E>) {
    f(&format!("{prefix}.gamma"), ParamKind::Gamma, &mut bn.gamma);
    f(&format!("{prefix}.beta"), ParamKind::Beta, &mut bn.beta);
    f(&format!("{prefix}.running_mean"), ParamKind::RunningMean, &mut bn.running_mean);
    f(&format!("{prefix}.running_var"), ParamKind::RunningVar, &mut bn.running_var);
}

/// Convolution optionally followed by batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<E: Element> {
    pub conv: ConvParams<E>,
    pub bn: Option<BnParams<E>>,
    pub relu: bool,
}

/// Activations stashed by a training-mode forward pass.
pub struct ConvBlockStash<E: Element> {
    x: Tensor<E>,
    conv_out: Option<Tensor<E>>,
    bn_stash: Option<BnStash<E>>,
    pre_relu: Option<Tensor<E>>,
}

impl<E: Element> ConvBlock<E> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize, dilation: usize) -> Self {
        ConvBlock {
            conv: he_conv(rng, c_out, c_in, k, stride, dilation),
            bn: Some(BnParams::identity(c_out)),
            relu: true,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<E>, cnt: &mut MacCounter) -> Result<(Tensor<E>, ConvBlockStash<E>)> {
        let y = conv2d(x, &self.conv)?;
        let (oh, ow) = (y.shape().h, y.shape().w);
        cnt.record_conv(&self.conv, oh, ow);
        let mut stash = ConvBlockStash {
            x: x.clone(),
            conv_out: None,
            bn_stash: None,
            pre_relu: None,
        };
        let y = match &mut self.bn {
            Some(bn) => {
                stash.conv_out = Some(y.clone());
                let (z, bs) = batch_norm_train(&y, bn)?;
                cnt.record_elems(z.shape());
                stash.bn_stash = Some(bs);
                z
            }
            None => y,
        };
        let y = if self.relu {
            stash.pre_relu = Some(y.clone());
            let z = relu(&y);
            cnt.record_elems(z.shape());
            z
        } else {
            y
        };
        Ok((y, stash))
    }

    /// Inference path. BN is an affine map in inference mode, so it is
    /// folded into the convolution weights on the fly; the persistent form
    /// of the same fold is [`ConvBlock::merge_bn`], and the two agree
    /// bitwise.
    pub fn forward_infer(&self, x: &Tensor<E>, cnt: &mut MacCounter) -> Result<Tensor<E>> {
        let y = match &self.bn {
            Some(_) => {
                let mut folded = self.clone();
                folded.merge_bn();
                let y = conv2d(x, &folded.conv)?;
                cnt.record_conv(&folded.conv, y.shape().h, y.shape().w);
                cnt.record_elems(y.shape());
                y
            }
            None => {
                let y = conv2d(x, &self.conv)?;
                cnt.record_conv(&self.conv, y.shape().h, y.shape().w);
                y
            }
        };
        if self.relu {
            cnt.record_elems(y.shape());
            Ok(relu(&y))
        } else {
            Ok(y)
        }
    }

    /// Backward through relu, bn and conv, accumulating parameter gradients
    /// and returning the input gradient.
    pub fn backward(&mut self, stash: &ConvBlockStash<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
        let mut d = dy.clone();
        if self.relu {
            d = relu_grad(stash.pre_relu.as_ref().expect("relu stash"), &d)?;
        }
        if let Some(bn) = &mut self.bn {
            let conv_out = stash.conv_out.as_ref().expect("bn stash");
            let bs = stash.bn_stash.as_ref().expect("bn stash");
            let (dx, dgamma, dbeta) = batch_norm_grad(conv_out, bn, bs, &d)?;
            bn.gamma.add_grad(dgamma.data());
            bn.beta.add_grad(dbeta.data());
            d = dx;
        }
        let (dx, dw, db) = conv2d_grad(&stash.x, &self.conv, &d)?;
        self.conv.weight.add_grad(dw.data());
        self.conv.bias.add_grad(db.data());
        Ok(dx)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamFn<'_, E>) {
        visit_conv(prefix, &self.conv, f);
        if let Some(bn) = &self.bn {
            visit_bn(prefix, bn, f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, E>) {
        visit_conv_mut(prefix, &mut self.conv, f);
        if let Some(bn) = &mut self.bn {
            visit_bn_mut(prefix, bn, f);
        }
    }

    /// Fold the BN transform into the convolution:
    /// `w' = w * gamma / sqrt(var + eps)`, `b' = beta + (b - mean) * gamma /
    /// sqrt(var + eps)`; the BN layer is then removed. The fold arithmetic
    /// runs in f64 so each merged weight is rounded once.
    pub fn merge_bn(&mut self) {
        let Some(bn) = self.bn.take() else { return };
        let co = self.conv.c_out();
        let per_filter = self.conv.weight.shape().count() / co;
        for o in 0..co {
            let scale = Element::as_f64(bn.gamma.data()[o])
                / (Element::as_f64(bn.running_var.data()[o]) + Element::as_f64(bn.epsilon)).sqrt();
            let ws = self.conv.weight.data_mut();
            for v in &mut ws[o * per_filter..(o + 1) * per_filter] {
                *v = E::from_f64(Element::as_f64(*v) * scale);
            }
            let b = self.conv.bias.data_mut();
            b[o] = E::from_f64(
                Element::as_f64(bn.beta.data()[o])
                    + (Element::as_f64(b[o]) - Element::as_f64(bn.running_mean.data()[o])) * scale,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn he_init_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let pa = he_conv::<f32>(&mut a, 4, 3, 3, 1, 1);
        let pb = he_conv::<f32>(&mut b, 4, 3, 3, 1, 1);
        assert_eq!(pa.weight.data(), pb.weight.data());
    }

    #[test]
    fn merge_bn_identity_params_keeps_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blk = ConvBlock::<f64>::new(&mut rng, 2, 3, 3, 1, 1);
        let mut bn = BnParams::identity(3);
        bn.epsilon = 0.0;
        blk.bn = Some(bn);
        let w0 = blk.conv.weight.data().to_vec();
        let b0 = blk.conv.bias.data().to_vec();
        blk.merge_bn();
        assert!(blk.bn.is_none());
        assert_eq!(blk.conv.weight.data(), &w0[..]);
        assert_eq!(blk.conv.bias.data(), &b0[..]);
    }

    #[test]
    fn merge_bn_pinned_case() {
        // gamma=2, mean=1, var=0, eps=1, beta=0: scale = 2, b' = 2b - 2.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut blk = ConvBlock::<f64>::new(&mut rng, 1, 1, 1, 1, 1);
        blk.conv.bias = Tensor::new(Shape::new(1, 1, 1, 1), vec![5.0]).unwrap();
        let w0 = blk.conv.weight.data().to_vec();
        let mut bn = BnParams::identity(1);
        bn.gamma = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        bn.running_mean = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        bn.running_var = Tensor::zeros(Shape::new(1, 1, 1, 1));
        bn.epsilon = 1.0;
        blk.bn = Some(bn);
        blk.merge_bn();
        assert_eq!(blk.conv.weight.data()[0], 2.0 * w0[0]);
        assert_eq!(blk.conv.bias.data()[0], 2.0 * 5.0 - 2.0);
    }
}
