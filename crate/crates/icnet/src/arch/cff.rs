//! Cascade feature fusion: a low-resolution feature F1 is upsampled x2 and
//! refined by a dilated 3x3 convolution (or, in the ablation variants,
//! upsampled by a stride-2 transposed convolution), a same-resolution
//! feature F2 is projected by a 1x1 convolution, both are batch-normalized,
//! summed and passed through ReLU. An auxiliary 1x1 classifier taps the
//! upsampled F1 path for label guidance.

use rand_chacha::ChaCha8Rng;

use super::blocks::{
    he_conv, normal, visit_bn, visit_bn_mut, visit_conv, visit_conv_mut, MacCounter, ParamFn, ParamFnMut,
};
use crate::error::{Error, Result};
use crate::tensor::{
    add, batch_norm_grad, batch_norm_train, bilinear_resize, bilinear_resize_grad, conv2d,
    conv2d_grad, conv_transpose2d, conv_transpose2d_grad, relu, relu_grad, BnParams, BnStash, ConvParams,
    ConvTransposeParams, Element, Shape, Tensor,
};

/// How the F1 path reaches F2's resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Bilinear x2 upsampling followed by a dilated 3x3 convolution.
    Cff,
    /// Stride-2 transposed convolution with the given (odd) kernel size.
    Deconv(usize),
}

impl FusionKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cff" => Some(FusionKind::Cff),
            "deconv3" => Some(FusionKind::Deconv(3)),
            "deconv5" => Some(FusionKind::Deconv(5)),
            "deconv7" => Some(FusionKind::Deconv(7)),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            FusionKind::Cff => "cff".into(),
            FusionKind::Deconv(k) => format!("deconv{k}"),
        }
    }
}

/// The two inputs of a fusion unit; `f2` must have exactly double the
/// spatial size of `f1`.
pub struct CffInputs<'a, E: Element> {
    pub f1: &'a Tensor<E>,
    pub f2: &'a Tensor<E>,
}

impl<'a, E: Element> CffInputs<'a, E> {
    pub fn new(f1: &'a Tensor<E>, f2: &'a Tensor<E>) -> Result<Self> {
        let (s1, s2) = (f1.shape(), f2.shape());
        if s2.h != 2 * s1.h || s2.w != 2 * s1.w {
            return Err(Error::shape(format!(
                "cff: F2 spatial size {}x{} must be double F1's {}x{}",
                s2.h, s2.w, s1.h, s1.w
            )));
        }
        if s1.n != s2.n {
            return Err(Error::shape("cff: batch mismatch between F1 and F2"));
        }
        Ok(CffInputs { f1, f2 })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum FusePath<E: Element> {
    Cff { conv: ConvParams<E>, bn: Option<BnParams<E>> },
    Deconv { t: ConvTransposeParams<E>, bn: Option<BnParams<E>> },
}

/// One cascade feature fusion unit.
#[derive(Debug, Clone)]
pub struct CffUnit<E: Element> {
    pub(crate) fuse: FusePath<E>,
    pub(crate) proj: ConvParams<E>,
    pub(crate) proj_bn: Option<BnParams<E>>,
    pub(crate) aux: ConvParams<E>,
}

/// Activations stashed by a training-mode fusion forward pass.
pub struct CffStash<E: Element> {
    f1_dims: (usize, usize),
    f1: Tensor<E>,
    f2: Tensor<E>,
    up: Tensor<E>,
    fuse_conv_out: Option<Tensor<E>>,
    fuse_bn_stash: BnStash<E>,
    proj_out: Tensor<E>,
    proj_bn_stash: BnStash<E>,
    pre_relu: Tensor<E>,
}

fn bn_required<E: Element>(bn: &mut Option<BnParams<E>>) -> Result<&mut BnParams<E>> {
    bn.as_mut()
        .ok_or_else(|| Error::spec("training a BN-merged model is not supported"))
}

impl<E: Element> CffUnit<E> {
    /// Build a unit fusing `c1`-channel F1 with `c2`-channel F2 into `c3`
    /// channels, with an `n`-class auxiliary head.
    pub fn build(rng: &mut ChaCha8Rng, kind: FusionKind, c1: usize, c2: usize, c3: usize, n: usize) -> Self {
        let fuse = match kind {
            FusionKind::Cff => FusePath::Cff {
                conv: he_conv(rng, c3, c1, 3, 1, 2),
                bn: Some(BnParams::identity(c3)),
            },
            FusionKind::Deconv(k) => {
                let std = (2.0 / (c1 * k * k) as f64).sqrt();
                let weight = Tensor::from_fn(Shape::new(c1, c3, k, k), |_, _, _, _| E::from_f64(normal(rng) * std));
                let bias = Tensor::zeros(Shape::new(1, c3, 1, 1));
                FusePath::Deconv {
                    t: ConvTransposeParams::doubling(weight, bias).expect("valid transposed conv"),
                    bn: Some(BnParams::identity(c3)),
                }
            }
        };
        // The aux head taps the upsampled F1 path: C1 channels for the
        // bilinear variant, C3 for the deconv variants.
        let aux_in = match kind {
            FusionKind::Cff => c1,
            FusionKind::Deconv(_) => c3,
        };
        CffUnit {
            fuse,
            proj: he_conv(rng, c3, c2, 1, 1, 1),
            proj_bn: Some(BnParams::identity(c3)),
            aux: he_conv(rng, n, aux_in, 1, 1, 1),
        }
    }

    /// Layer descriptions of the F1 path for the cost model: the layers up
    /// to the auxiliary tap, the refinement layers after it, and the channel
    /// count feeding the auxiliary head. Shapes come from the actual
    /// parameters so pruned or merged units emit correctly.
    pub fn emit_fuse_layers(
        &self,
        prefix: &str,
        _out_channels: usize,
    ) -> (Vec<crate::cost::LayerSpec>, Vec<crate::cost::LayerSpec>, usize) {
        use crate::cost::LayerSpec;
        match &self.fuse {
            FusePath::Cff { conv, bn } => {
                let up = vec![LayerSpec::resize(format!("{prefix}.up"), conv.c_in(), 2, 1)];
                let mut fuse = vec![LayerSpec::conv(
                    format!("{prefix}.fuse"),
                    conv.c_in(),
                    conv.c_out(),
                    conv.kernel(),
                    conv.stride,
                    conv.dilation,
                )];
                if bn.is_some() {
                    fuse.push(LayerSpec::pointwise(format!("{prefix}.fuse.bn"), conv.c_out()));
                }
                (up, fuse, conv.c_in())
            }
            FusePath::Deconv { t, bn } => {
                let up = vec![LayerSpec::conv_transposed(
                    format!("{prefix}.fuse"),
                    t.c_in(),
                    t.c_out(),
                    t.kernel(),
                    t.stride,
                )];
                let mut fuse = Vec::new();
                if bn.is_some() {
                    fuse.push(LayerSpec::pointwise(format!("{prefix}.fuse.bn"), t.c_out()));
                }
                (up, fuse, t.c_out())
            }
        }
    }

    pub fn kind(&self) -> FusionKind {
        match &self.fuse {
            FusePath::Cff { .. } => FusionKind::Cff,
            FusePath::Deconv { t, .. } => FusionKind::Deconv(t.kernel()),
        }
    }

    /// Parameter count of the F1 path (the part the fusion variants change).
    pub fn fusion_path_params(&self) -> usize {
        match &self.fuse {
            FusePath::Cff { conv, .. } => conv.weight.shape().count() + conv.bias.shape().count(),
            FusePath::Deconv { t, .. } => t.weight.shape().count() + t.bias.shape().count(),
        }
    }

    /// Training-mode forward. Returns the fused feature, the auxiliary
    /// logits when `want_aux`, and the stash for the backward pass.
    pub fn forward_train(
        &mut self,
        inputs: CffInputs<'_, E>,
        want_aux: bool,
        cnt: &mut MacCounter,
    ) -> Result<(Tensor<E>, Option<Tensor<E>>, CffStash<E>)> {
        let (f1, f2) = (inputs.f1, inputs.f2);
        let (h2, w2) = f2.shape().spatial();

        // F1 path: upsample (bilinear or deconv), aux tap, refinement, BN.
        let (up, fuse_conv_out, a_bn, fuse_stash, aux) = match &mut self.fuse {
            FusePath::Cff { conv, bn } => {
                let up = bilinear_resize(f1, h2, w2)?;
                cnt.record_elems(up.shape());
                let aux = if want_aux {
                    let logits = conv2d(&up, &self.aux)?;
                    cnt.record_conv(&self.aux, h2, w2);
                    Some(logits)
                } else {
                    None
                };
                let a = conv2d(&up, conv)?;
                cnt.record_conv(conv, h2, w2);
                let (a_bn, bs) = batch_norm_train(&a, bn_required(bn)?)?;
                cnt.record_elems(a_bn.shape());
                (up, Some(a), a_bn, bs, aux)
            }
            FusePath::Deconv { t, bn } => {
                let up = conv_transpose2d(f1, t)?;
                cnt.record(
                    (t.c_out() * t.c_in() * t.kernel() * t.kernel()) as u64
                        * (f1.shape().h * f1.shape().w) as u64,
                );
                if up.shape().spatial() != (h2, w2) {
                    return Err(Error::shape("deconv fusion output does not match F2 dims"));
                }
                let aux = if want_aux {
                    let logits = conv2d(&up, &self.aux)?;
                    cnt.record_conv(&self.aux, h2, w2);
                    Some(logits)
                } else {
                    None
                };
                let (a_bn, bs) = batch_norm_train(&up, bn_required(bn)?)?;
                cnt.record_elems(a_bn.shape());
                (up, None, a_bn, bs, aux)
            }
        };

        // F2 path: 1x1 projection + BN.
        let b = conv2d(f2, &self.proj)?;
        cnt.record_conv(&self.proj, h2, w2);
        let (b_bn, proj_bn_stash) = batch_norm_train(&b, bn_required(&mut self.proj_bn)?)?;
        cnt.record_elems(b_bn.shape());

        let sum = add(&a_bn, &b_bn)?;
        cnt.record_elems(sum.shape());
        let out = relu(&sum);
        cnt.record_elems(out.shape());

        let stash = CffStash {
            f1_dims: f1.shape().spatial(),
            f1: f1.clone(),
            f2: f2.clone(),
            up,
            fuse_conv_out,
            fuse_bn_stash: fuse_stash,
            proj_out: b,
            proj_bn_stash,
            pre_relu: sum,
        };
        Ok((out, aux, stash))
    }

    /// Inference-mode forward; the auxiliary head is only evaluated when a
    /// truncated-branch prediction asks for it. As in [`ConvBlock`], BN
    /// layers are folded into their convolutions on the fly, matching the
    /// persisted [`CffUnit::merge_bn`] form bitwise.
    pub fn forward_infer(
        &self,
        inputs: CffInputs<'_, E>,
        want_aux: bool,
        cnt: &mut MacCounter,
    ) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
        let (f1, f2) = (inputs.f1, inputs.f2);
        let (h2, w2) = f2.shape().spatial();
        // `aux_input` is the tap point of the auxiliary head: the bilinear
        // upsample for the standard unit, the raw deconvolution output for
        // the ablation variants.
        let (aux_input, a_bn) = match &self.fuse {
            FusePath::Cff { conv, bn } => {
                let up = bilinear_resize(f1, h2, w2)?;
                cnt.record_elems(up.shape());
                let a = match bn {
                    Some(bn) => {
                        let mut folded = conv.clone();
                        fold_bn_into_conv(&mut folded, bn);
                        let a = conv2d(&up, &folded)?;
                        cnt.record_conv(&folded, h2, w2);
                        cnt.record_elems(a.shape());
                        a
                    }
                    None => {
                        let a = conv2d(&up, conv)?;
                        cnt.record_conv(conv, h2, w2);
                        a
                    }
                };
                (Some(up), a)
            }
            FusePath::Deconv { t, bn } => {
                let aux_input = if want_aux { Some(conv_transpose2d(f1, t)?) } else { None };
                let a = match bn {
                    Some(bn) => {
                        let mut folded = t.clone();
                        fold_bn_into_transposed(&mut folded, bn);
                        let a = conv_transpose2d(f1, &folded)?;
                        cnt.record_elems(a.shape());
                        a
                    }
                    None => match &aux_input {
                        Some(up) => up.clone(),
                        None => conv_transpose2d(f1, t)?,
                    },
                };
                cnt.record(
                    (t.c_out() * t.c_in() * t.kernel() * t.kernel()) as u64
                        * (f1.shape().h * f1.shape().w) as u64,
                );
                (aux_input, a)
            }
        };
        let aux = if want_aux {
            let up = aux_input.as_ref().expect("aux tap present when requested");
            let logits = conv2d(up, &self.aux)?;
            cnt.record_conv(&self.aux, h2, w2);
            Some(logits)
        } else {
            None
        };
        let b = match &self.proj_bn {
            Some(bn) => {
                let mut folded = self.proj.clone();
                fold_bn_into_conv(&mut folded, bn);
                let b = conv2d(f2, &folded)?;
                cnt.record_conv(&folded, h2, w2);
                cnt.record_elems(b.shape());
                b
            }
            None => {
                let b = conv2d(f2, &self.proj)?;
                cnt.record_conv(&self.proj, h2, w2);
                b
            }
        };
        let sum = add(&a_bn, &b)?;
        cnt.record_elems(sum.shape());
        cnt.record_elems(sum.shape());
        Ok((relu(&sum), aux))
    }

    /// Backward pass: takes the gradient of the fused output and (optionally)
    /// of the auxiliary logits, accumulates parameter gradients, and returns
    /// the gradients of F1 and F2.
    pub fn backward(
        &mut self,
        stash: &CffStash<E>,
        d_out: &Tensor<E>,
        d_aux: Option<&Tensor<E>>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let d_sum = relu_grad(&stash.pre_relu, d_out)?;

        // F2 path.
        let proj_bn = self.proj_bn.as_mut().expect("backward on merged model");
        let (d_b, dg, dbta) = batch_norm_grad(&stash.proj_out, proj_bn, &stash.proj_bn_stash, &d_sum)?;
        proj_bn.gamma.add_grad(dg.data());
        proj_bn.beta.add_grad(dbta.data());
        let (d_f2, dw, db) = conv2d_grad(&stash.f2, &self.proj, &d_b)?;
        self.proj.weight.add_grad(dw.data());
        self.proj.bias.add_grad(db.data());

        // F1 path.
        let d_f1 = match &mut self.fuse {
            FusePath::Cff { conv, bn } => {
                let bn = bn.as_mut().expect("backward on merged model");
                let conv_out = stash.fuse_conv_out.as_ref().expect("cff stash");
                let (d_a, dg, dbta) = batch_norm_grad(conv_out, bn, &stash.fuse_bn_stash, &d_sum)?;
                bn.gamma.add_grad(dg.data());
                bn.beta.add_grad(dbta.data());
                let (mut d_up, dw, db) = conv2d_grad(&stash.up, conv, &d_a)?;
                conv.weight.add_grad(dw.data());
                conv.bias.add_grad(db.data());
                if let Some(da) = d_aux {
                    let (d_up_aux, dw, db) = conv2d_grad(&stash.up, &self.aux, da)?;
                    self.aux.weight.add_grad(dw.data());
                    self.aux.bias.add_grad(db.data());
                    for (g, &v) in d_up.data_mut().iter_mut().zip(d_up_aux.data()) {
                        *g = *g + v;
                    }
                }
                bilinear_resize_grad(&d_up, stash.f1_dims.0, stash.f1_dims.1)?
            }
            FusePath::Deconv { t, bn } => {
                let bn = bn.as_mut().expect("backward on merged model");
                let (mut d_up, dg, dbta) = batch_norm_grad(&stash.up, bn, &stash.fuse_bn_stash, &d_sum)?;
                bn.gamma.add_grad(dg.data());
                bn.beta.add_grad(dbta.data());
                if let Some(da) = d_aux {
                    let (d_up_aux, dw, db) = conv2d_grad(&stash.up, &self.aux, da)?;
                    self.aux.weight.add_grad(dw.data());
                    self.aux.bias.add_grad(db.data());
                    for (g, &v) in d_up.data_mut().iter_mut().zip(d_up_aux.data()) {
                        *g = *g + v;
                    }
                }
                let (d_f1, dw, db) = conv_transpose2d_grad(&stash.f1, t, &d_up)?;
                t.weight.add_grad(dw.data());
                t.bias.add_grad(db.data());
                d_f1
            }
        };
        Ok((d_f1, d_f2))
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamFn<'_, E>) {
        match &self.fuse {
            FusePath::Cff { conv, bn } => {
                visit_conv(&format!("{prefix}.fuse"), conv, f);
                if let Some(bn) = bn {
                    visit_bn(&format!("{prefix}.fuse"), bn, f);
                }
            }
            FusePath::Deconv { t, bn } => {
                f(&format!("{prefix}.fuse.weight"), super::blocks::ParamKind::Weight, &t.weight);
                f(&format!("{prefix}.fuse.bias"), super::blocks::ParamKind::Bias, &t.bias);
                if let Some(bn) = bn {
                    visit_bn(&format!("{prefix}.fuse"), bn, f);
                }
            }
        }
        visit_conv(&format!("{prefix}.proj"), &self.proj, f);
        if let Some(bn) = &self.proj_bn {
            visit_bn(&format!("{prefix}.proj"), bn, f);
        }
        visit_conv(&format!("{prefix}.aux"), &self.aux, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, E>) {
        match &mut self.fuse {
            FusePath::Cff { conv, bn } => {
                visit_conv_mut(&format!("{prefix}.fuse"), conv, f);
                if let Some(bn) = bn {
                    visit_bn_mut(&format!("{prefix}.fuse"), bn, f);
                }
            }
            FusePath::Deconv { t, bn } => {
                f(&format!("{prefix}.fuse.weight"), super::blocks::ParamKind::Weight, &mut t.weight);
                f(&format!("{prefix}.fuse.bias"), super::blocks::ParamKind::Bias, &mut t.bias);
                if let Some(bn) = bn {
                    visit_bn_mut(&format!("{prefix}.fuse"), bn, f);
                }
            }
        }
        visit_conv_mut(&format!("{prefix}.proj"), &mut self.proj, f);
        if let Some(bn) = &mut self.proj_bn {
            visit_bn_mut(&format!("{prefix}.proj"), bn, f);
        }
        visit_conv_mut(&format!("{prefix}.aux"), &mut self.aux, f);
    }

    /// Restrict the unit's input channels after upstream pruning: `f1_kept`
    /// selects the channels of the low-resolution input, `f2_kept` those of
    /// the projected input. Outputs (and hence the sum join) keep their full
    /// channel count.
    pub fn reslice_inputs(&mut self, f1_kept: &[usize], f2_kept: &[usize]) {
        let pick_conv = |p: &ConvParams<E>, kept_in: &[usize]| {
            let k = p.kernel();
            let co = p.c_out();
            let weight = Tensor::from_fn(Shape::new(co, kept_in.len(), k, k), |o, c, kr, kc| {
                p.weight.at(o, kept_in[c], kr, kc)
            });
            ConvParams::new(weight, p.bias.clone(), p.stride, p.dilation, p.padding)
                .expect("resliced conv stays valid")
        };
        match &mut self.fuse {
            FusePath::Cff { conv, .. } => {
                *conv = pick_conv(conv, f1_kept);
                self.aux = pick_conv(&self.aux, f1_kept);
            }
            FusePath::Deconv { t, .. } => {
                // Input channels are the first axis of the transposed weight;
                // the aux head taps the (full-channel) deconv output.
                let (co, k) = (t.c_out(), t.kernel());
                let weight = Tensor::from_fn(Shape::new(f1_kept.len(), co, k, k), |c, o, kr, kc| {
                    t.weight.at(f1_kept[c], o, kr, kc)
                });
                *t = ConvTransposeParams::new(weight, t.bias.clone(), t.stride, t.padding, t.output_padding)
                    .expect("resliced transposed conv stays valid");
            }
        }
        self.proj = pick_conv(&self.proj, f2_kept);
    }

    /// Fold both BN layers into their preceding convolutions and drop them.
    pub fn merge_bn(&mut self) {
        match &mut self.fuse {
            FusePath::Cff { conv, bn } => {
                if let Some(bn) = bn.take() {
                    fold_bn_into_conv(conv, &bn);
                }
            }
            FusePath::Deconv { t, bn } => {
                if let Some(bn) = bn.take() {
                    fold_bn_into_transposed(t, &bn);
                }
            }
        }
        if let Some(bn) = self.proj_bn.take() {
            fold_bn_into_conv(&mut self.proj, &bn);
        }
    }
}

fn fold_scale<E: Element>(bn: &BnParams<E>, o: usize) -> f64 {
    Element::as_f64(bn.gamma.data()[o])
        / (Element::as_f64(bn.running_var.data()[o]) + Element::as_f64(bn.epsilon)).sqrt()
}

/// In-place BN fold for an ordinary convolution (f64 fold arithmetic, one
/// rounding per weight).
pub(crate) fn fold_bn_into_conv<E: Element>(conv: &mut ConvParams<E>, bn: &BnParams<E>) {
    let co = conv.c_out();
    let per_filter = conv.weight.shape().count() / co;
    for o in 0..co {
        let scale = fold_scale(bn, o);
        for v in &mut conv.weight.data_mut()[o * per_filter..(o + 1) * per_filter] {
            *v = E::from_f64(Element::as_f64(*v) * scale);
        }
        let b = conv.bias.data_mut();
        b[o] = E::from_f64(
            Element::as_f64(bn.beta.data()[o])
                + (Element::as_f64(b[o]) - Element::as_f64(bn.running_mean.data()[o])) * scale,
        );
    }
}

/// In-place BN fold for a transposed convolution (output channels are the
/// second weight axis).
pub(crate) fn fold_bn_into_transposed<E: Element>(t: &mut ConvTransposeParams<E>, bn: &BnParams<E>) {
    let (ci, co, k) = (t.c_in(), t.c_out(), t.kernel());
    for o in 0..co {
        let scale = fold_scale(bn, o);
        for c in 0..ci {
            let base = ((c * co + o) * k) * k;
            for i in 0..k * k {
                let w = t.weight.data_mut();
                w[base + i] = E::from_f64(Element::as_f64(w[base + i]) * scale);
            }
        }
        let b = t.bias.data_mut();
        b[o] = E::from_f64(
            Element::as_f64(bn.beta.data()[o])
                + (Element::as_f64(b[o]) - Element::as_f64(bn.running_mean.data()[o])) * scale,
        );
    }
}
