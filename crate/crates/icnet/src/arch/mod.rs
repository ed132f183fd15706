//! The cascade network: a shared trunk runs on the half-resolution image,
//! its output feeds both the medium branch (directly) and the low branch
//! (downsampled, then a dilated tail plus pyramid pooling), a light stack of
//! strided convolutions handles the full-resolution image, and two fusion
//! units merge the three paths. Classifier heads sit at 1/16, 1/8 and 1/4 of
//! the full input resolution.

mod baseline;
mod blocks;
mod cff;
mod pyramid;

pub use baseline::{build_baseline, BaselineModel};
pub use blocks::{MacCounter, ParamFn, ParamFnMut, ParamKind};
pub use cff::{CffInputs, CffStash, CffUnit, FusionKind};
pub(crate) use blocks::ConvBlock;
pub(crate) use pyramid::PyramidPool;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{LayerSpec, NetworkSpec, Stage, StageInput};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{
    bilinear_resize, bilinear_resize_grad, conv2d, conv2d_grad, softmax_xent_map, Element, Shape, Tensor,
};
use blocks::{he_conv, visit_conv, visit_conv_mut, ConvBlockStash};

/// Configuration of the cascade model.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnetConfig {
    pub num_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Channel widths of the five backbone stage groups:
    /// stem, stage1, stage2, tail1, tail2.
    pub widths: Vec<usize>,
    /// Leading stage groups shared between the low and medium paths. The
    /// cascade's fixed output ratios require sharing through the stride-8
    /// point, i.e. exactly the 3 striding groups.
    pub share_stages: usize,
    /// Channels of the fused features (C3).
    pub cff_channels: usize,
    pub fusion: FusionKind,
    pub label_guidance: bool,
    /// Loss weights for the 1/16, 1/8 and 1/4 heads.
    pub lambda: [f64; 3],
    pub pyramid_bins: Vec<usize>,
}

impl Default for IcnetConfig {
    fn default() -> Self {
        IcnetConfig {
            num_classes: 5,
            input_h: 96,
            input_w: 96,
            widths: vec![16, 32, 64, 128, 128],
            share_stages: 3,
            cff_channels: 64,
            fusion: FusionKind::Cff,
            label_guidance: true,
            lambda: [0.4, 0.4, 1.0],
            pyramid_bins: vec![1, 2, 3, 6],
        }
    }
}

impl IcnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::config("num_classes must be in 1..=254"));
        }
        if self.input_h % 32 != 0 || self.input_w % 32 != 0 {
            return Err(Error::config(format!(
                "input dims {}x{} must be divisible by 32",
                self.input_h, self.input_w
            )));
        }
        if self.widths.len() != 5 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("widths must list 5 positive stage widths"));
        }
        if self.share_stages != 3 {
            return Err(Error::config(
                "share_stages must be 3: the cascade's 1/16, 1/8, 1/4 output ratios require \
                 sharing exactly the three striding stage groups",
            ));
        }
        if self.cff_channels == 0 {
            return Err(Error::config("cff_channels must be >= 1"));
        }
        if self.lambda.iter().any(|&l| l <= 0.0) {
            return Err(Error::config("lambda components must be > 0"));
        }
        if self.pyramid_bins.is_empty() || self.pyramid_bins.iter().any(|&b| b == 0) {
            return Err(Error::config("pyramid_bins must be a nonempty list of positive bins"));
        }
        if self.widths[4] / self.pyramid_bins.len() == 0 {
            return Err(Error::config(
                "tail width must be at least the number of pyramid bins",
            ));
        }
        Ok(())
    }

    /// Canonical textual form of every field, the basis of the checkpoint
    /// config hash.
    pub fn canonical_string(&self) -> String {
        format!(
            "num_classes={};input={}x{};widths={:?};share={};c3={};fusion={};clg={};lambda={:?};bins={:?}",
            self.num_classes,
            self.input_h,
            self.input_w,
            self.widths,
            self.share_stages,
            self.cff_channels,
            self.fusion.name(),
            self.label_guidance,
            self.lambda,
            self.pyramid_bins
        )
    }

    /// Loss weights with label guidance applied: guidance off zeroes the
    /// auxiliary weights.
    pub fn effective_lambda(&self) -> [f64; 3] {
        if self.label_guidance {
            self.lambda
        } else {
            [0.0, 0.0, self.lambda[2]]
        }
    }

    /// Widths of the three high-resolution branch convolutions.
    pub fn high_widths(&self) -> [usize; 3] {
        [
            (self.widths[0] / 2).max(1),
            (self.widths[1] / 2).max(1),
            (self.widths[2] / 2).max(1),
        ]
    }
}

/// The three cascade heads. Auxiliary heads are present in training-mode
/// outputs and skipped in plain inference.
pub struct CascadeOutputs<E: Element> {
    /// `N`-class logits at 1/16 of the full input resolution.
    pub logits16: Option<Tensor<E>>,
    /// At 1/8.
    pub logits8: Option<Tensor<E>>,
    /// At 1/4.
    pub logits4: Tensor<E>,
}

/// Which cascade prefix produces the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSet {
    /// Low-resolution branch only: the 1/16 head, upsampled x16.
    Sub4,
    /// Low + medium: the 1/8 head, upsampled x8.
    Sub24,
    /// All three branches: the 1/4 head, upsampled x4.
    Sub124,
}

impl BranchSet {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "4" | "sub4" => Some(BranchSet::Sub4),
            "24" | "sub24" => Some(BranchSet::Sub24),
            "124" | "sub124" => Some(BranchSet::Sub124),
            _ => None,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            BranchSet::Sub4 => "sub4",
            BranchSet::Sub24 => "sub24",
            BranchSet::Sub124 => "sub124",
        }
    }
}

/// Activations stashed by a training forward pass of the whole cascade.
pub struct CascadeTrace<E: Element> {
    trunk: Vec<ConvBlockStash<E>>,
    mid_dims: (usize, usize),
    tail: Vec<ConvBlockStash<E>>,
    pyramid: pyramid::PyramidStash<E>,
    cff1: CffStash<E>,
    high: Vec<ConvBlockStash<E>>,
    cff2: CffStash<E>,
    cff2_out_dims: (usize, usize),
    classifier_x: Tensor<E>,
}

/// Loss of one training step, broken down by head.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<E: Element> {
    pub total: E,
    pub loss16: E,
    pub loss8: E,
    pub loss4: E,
}

/// The cascade model. Parameters are deterministic functions of the build
/// seed; a built model is immutable during inference and shareable across
/// threads, while training mutates it single-writer.
pub struct IcnetModel<E: Element> {
    pub cfg: IcnetConfig,
    pub(crate) trunk: Vec<ConvBlock<E>>,
    pub(crate) tail: Vec<ConvBlock<E>>,
    pub(crate) pyramid: PyramidPool<E>,
    pub(crate) cff1: CffUnit<E>,
    pub(crate) cff2: CffUnit<E>,
    pub(crate) high: Vec<ConvBlock<E>>,
    pub(crate) classifier: crate::tensor::ConvParams<E>,
}

/// Build the cascade with He-initialized parameters, deterministically from
/// the seed.
pub fn build_icnet<E: Element>(cfg: &IcnetConfig, seed: u64) -> Result<IcnetModel<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = &cfg.widths;
    let c3 = cfg.cff_channels;
    let n = cfg.num_classes;

    let trunk = vec![
        ConvBlock::new(&mut rng, 3, w[0], 3, 2, 1),
        ConvBlock::new(&mut rng, w[0], w[1], 3, 2, 1),
        ConvBlock::new(&mut rng, w[1], w[1], 3, 1, 1),
        ConvBlock::new(&mut rng, w[1], w[2], 3, 2, 1),
        ConvBlock::new(&mut rng, w[2], w[2], 3, 1, 1),
    ];
    let tail = vec![
        ConvBlock::new(&mut rng, w[2], w[3], 3, 1, 2),
        ConvBlock::new(&mut rng, w[3], w[3], 3, 1, 2),
        ConvBlock::new(&mut rng, w[3], w[4], 3, 1, 4),
        ConvBlock::new(&mut rng, w[4], w[4], 3, 1, 4),
    ];
    let pyramid = PyramidPool::build(&mut rng, w[4], &cfg.pyramid_bins);
    let cff1 = CffUnit::build(&mut rng, cfg.fusion, w[4], w[2], c3, n);
    let hw = cfg.high_widths();
    let high = vec![
        ConvBlock::new(&mut rng, 3, hw[0], 3, 2, 1),
        ConvBlock::new(&mut rng, hw[0], hw[1], 3, 2, 1),
        ConvBlock::new(&mut rng, hw[1], hw[2], 3, 2, 1),
    ];
    let cff2 = CffUnit::build(&mut rng, cfg.fusion, c3, hw[2], c3, n);
    let classifier = he_conv(&mut rng, n, c3, 1, 1, 1);

    Ok(IcnetModel {
        cfg: cfg.clone(),
        trunk,
        tail,
        pyramid,
        cff1,
        cff2,
        high,
        classifier,
    })
}

fn check_input_dims<E: Element>(image: &Tensor<E>) -> Result<()> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("cascade expects 3-channel images, got {}", s.c)));
    }
    if s.h % 32 != 0 || s.w % 32 != 0 {
        return Err(Error::shape(format!(
            "input dims {}x{} must be divisible by 32",
            s.h, s.w
        )));
    }
    Ok(())
}

impl<E: Element> IcnetModel<E> {
    /// Training forward pass with all heads. Updates BN running statistics
    /// and returns the stash the backward pass consumes.
    pub fn forward_train(
        &mut self,
        image: &Tensor<E>,
        cnt: &mut MacCounter,
    ) -> Result<(CascadeOutputs<E>, CascadeTrace<E>)> {
        check_input_dims(image)?;
        let Shape { h, w, .. } = image.shape();

        // Medium input and shared trunk (output at 1/16 of full).
        let half = bilinear_resize(image, h / 2, w / 2)?;
        cnt.record_elems(half.shape());
        let mut cur = half;
        let mut trunk_st = Vec::with_capacity(self.trunk.len());
        for blk in &mut self.trunk {
            let (y, st) = blk.forward_train(&cur, cnt)?;
            trunk_st.push(st);
            cur = y;
        }
        let f_mid = cur;
        let mid_dims = f_mid.shape().spatial();

        // Low path: downsample the shared feature, dilated tail, pyramid.
        let low_in = bilinear_resize(&f_mid, mid_dims.0 / 2, mid_dims.1 / 2)?;
        cnt.record_elems(low_in.shape());
        let mut cur = low_in;
        let mut tail_st = Vec::with_capacity(self.tail.len());
        for blk in &mut self.tail {
            let (y, st) = blk.forward_train(&cur, cnt)?;
            tail_st.push(st);
            cur = y;
        }
        let (f_low, pyr_st) = self.pyramid.forward_train(&cur, cnt)?;

        // CFF1 fuses (low, medium) and carries the 1/16 head.
        let (f2p, aux1, cff1_st) = self
            .cff1
            .forward_train(CffInputs::new(&f_low, &f_mid)?, true, cnt)?;

        // High branch on the full image (output at 1/8 of full).
        let mut cur = image.clone();
        let mut high_st = Vec::with_capacity(self.high.len());
        for blk in &mut self.high {
            let (y, st) = blk.forward_train(&cur, cnt)?;
            high_st.push(st);
            cur = y;
        }
        let f_high = cur;

        // CFF2 fuses (CFF1 output, high) and carries the 1/8 head.
        let (f2pp, aux2, cff2_st) = self
            .cff2
            .forward_train(CffInputs::new(&f2p, &f_high)?, true, cnt)?;
        let cff2_out_dims = f2pp.shape().spatial();

        // Final head at 1/4 of full.
        let up = bilinear_resize(&f2pp, cff2_out_dims.0 * 2, cff2_out_dims.1 * 2)?;
        cnt.record_elems(up.shape());
        let logits4 = conv2d(&up, &self.classifier)?;
        cnt.record_conv(&self.classifier, up.shape().h, up.shape().w);

        Ok((
            CascadeOutputs {
                logits16: aux1,
                logits8: aux2,
                logits4,
            },
            CascadeTrace {
                trunk: trunk_st,
                mid_dims,
                tail: tail_st,
                pyramid: pyr_st,
                cff1: cff1_st,
                high: high_st,
                cff2: cff2_st,
                cff2_out_dims,
                classifier_x: up,
            },
        ))
    }

    /// Inference forward pass (BN running statistics, auxiliary heads only
    /// when requested for truncated-branch predictions).
    pub fn forward_infer(&self, image: &Tensor<E>, want_aux: bool, cnt: &mut MacCounter) -> Result<CascadeOutputs<E>> {
        check_input_dims(image)?;
        let Shape { h, w, .. } = image.shape();

        let half = bilinear_resize(image, h / 2, w / 2)?;
        cnt.record_elems(half.shape());
        let mut cur = half;
        for blk in &self.trunk {
            cur = blk.forward_infer(&cur, cnt)?;
        }
        let f_mid = cur;
        let (mh, mw) = f_mid.shape().spatial();

        let low_in = bilinear_resize(&f_mid, mh / 2, mw / 2)?;
        cnt.record_elems(low_in.shape());
        let mut cur = low_in;
        for blk in &self.tail {
            cur = blk.forward_infer(&cur, cnt)?;
        }
        let f_low = self.pyramid.forward_infer(&cur, cnt)?;

        let (f2p, aux1) = self
            .cff1
            .forward_infer(CffInputs::new(&f_low, &f_mid)?, want_aux, cnt)?;

        let mut cur = image.clone();
        for blk in &self.high {
            cur = blk.forward_infer(&cur, cnt)?;
        }
        let f_high = cur;

        let (f2pp, aux2) = self
            .cff2
            .forward_infer(CffInputs::new(&f2p, &f_high)?, want_aux, cnt)?;

        let (oh, ow) = f2pp.shape().spatial();
        let up = bilinear_resize(&f2pp, oh * 2, ow * 2)?;
        cnt.record_elems(up.shape());
        let logits4 = conv2d(&up, &self.classifier)?;
        cnt.record_conv(&self.classifier, up.shape().h, up.shape().w);

        Ok(CascadeOutputs {
            logits16: aux1,
            logits8: aux2,
            logits4,
        })
    }

    /// Cascade loss (weighted per-head softmax cross entropy against
    /// nearest-downsampled ground truth) and its head gradients.
    pub fn cascade_loss(
        &self,
        out: &CascadeOutputs<E>,
        gt: &[LabelMap],
        lambda: [f64; 3],
        ignore: u8,
    ) -> Result<(LossParts<E>, [Option<Tensor<E>>; 3])> {
        cascade_loss_impl(out, gt, lambda, ignore, self.cfg.num_classes)
    }

    /// Backward pass: seeds the three head gradients (already scaled by
    /// lambda) and accumulates parameter gradients.
    pub fn backward(
        &mut self,
        trace: &CascadeTrace<E>,
        d16: Option<&Tensor<E>>,
        d8: Option<&Tensor<E>>,
        d4: &Tensor<E>,
    ) -> Result<()> {
        // Final head.
        let (d_up, dw, db) = conv2d_grad(&trace.classifier_x, &self.classifier, d4)?;
        self.classifier.weight.add_grad(dw.data());
        self.classifier.bias.add_grad(db.data());
        let d_f2pp = bilinear_resize_grad(&d_up, trace.cff2_out_dims.0, trace.cff2_out_dims.1)?;

        // CFF2 and the high branch.
        let (d_f2p, d_high) = self.cff2.backward(&trace.cff2, &d_f2pp, d8)?;
        let mut d = d_high;
        for (blk, st) in self.high.iter_mut().zip(&trace.high).rev() {
            d = blk.backward(st, &d)?;
        }

        // CFF1, pyramid, tail.
        let (d_f_low, d_mid_proj) = self.cff1.backward(&trace.cff1, &d_f2p, d16)?;
        let d_tail_out = self.pyramid.backward(&trace.pyramid, &d_f_low)?;
        let mut d = d_tail_out;
        for (blk, st) in self.tail.iter_mut().zip(&trace.tail).rev() {
            d = blk.backward(st, &d)?;
        }

        // The shared feature gets gradients from both of its uses.
        let mut d_mid = bilinear_resize_grad(&d, trace.mid_dims.0, trace.mid_dims.1)?;
        for (g, &v) in d_mid.data_mut().iter_mut().zip(d_mid_proj.data()) {
            *g = *g + v;
        }
        let mut d = d_mid;
        for (blk, st) in self.trunk.iter_mut().zip(&trace.trunk).rev() {
            d = blk.backward(st, &d)?;
        }
        Ok(())
    }

    /// One full training step: forward, loss, backward. Gradients accumulate
    /// into the parameter buffers; the caller zeroes them between steps.
    pub fn loss_step(&mut self, images: &Tensor<E>, labels: &[LabelMap], ignore: u8) -> Result<LossParts<E>> {
        let mut cnt = MacCounter::off();
        let (out, trace) = self.forward_train(images, &mut cnt)?;
        let (parts, [d16, d8, d4]) = self.cascade_loss(&out, labels, self.cfg.effective_lambda(), ignore)?;
        self.backward(&trace, d16.as_ref(), d8.as_ref(), d4.as_ref().expect("final head gradient"))?;
        Ok(parts)
    }

    /// Logits of the chosen branch prefix, upsampled to full resolution.
    pub fn infer_branch_logits(&self, image: &Tensor<E>, branches: BranchSet) -> Result<Tensor<E>> {
        let want_aux = branches != BranchSet::Sub124;
        let out = self.forward_infer(image, want_aux, &mut MacCounter::off())?;
        let (h, w) = image.shape().spatial();
        let logits = match branches {
            BranchSet::Sub4 => out.logits16.expect("aux head requested"),
            BranchSet::Sub24 => out.logits8.expect("aux head requested"),
            BranchSet::Sub124 => out.logits4,
        };
        bilinear_resize(&logits, h, w)
    }

    /// Full-resolution prediction: the 1/4 logits upsampled x4 and decoded
    /// by per-pixel argmax (ties to the lowest class index). The guidance
    /// heads are abandoned.
    pub fn infer_full_res(&self, image: &Tensor<E>) -> Result<Vec<LabelMap>> {
        let logits = self.infer_branch_logits(image, BranchSet::Sub124)?;
        Ok(argmax_labels(&logits))
    }

    /// Prediction from a branch prefix.
    pub fn predict(&self, image: &Tensor<E>, branches: BranchSet) -> Result<Vec<LabelMap>> {
        let logits = self.infer_branch_logits(image, branches)?;
        Ok(argmax_labels(&logits))
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, _, t| {
            t.alloc_grad();
            t.zero_grad();
        });
    }

    pub fn visit_params(&self, f: &mut ParamFn<'_, E>) {
        for (i, blk) in self.trunk.iter().enumerate() {
            blk.visit(&format!("trunk.{i}"), f);
        }
        for (i, blk) in self.tail.iter().enumerate() {
            blk.visit(&format!("tail.{i}"), f);
        }
        self.pyramid.visit("pyramid", f);
        self.cff1.visit("cff1", f);
        for (i, blk) in self.high.iter().enumerate() {
            blk.visit(&format!("high.{i}"), f);
        }
        self.cff2.visit("cff2", f);
        visit_conv("classifier", &self.classifier, f);
    }

    pub fn visit_params_mut(&mut self, f: &mut ParamFnMut<'_, E>) {
        for (i, blk) in self.trunk.iter_mut().enumerate() {
            blk.visit_mut(&format!("trunk.{i}"), f);
        }
        for (i, blk) in self.tail.iter_mut().enumerate() {
            blk.visit_mut(&format!("tail.{i}"), f);
        }
        self.pyramid.visit_mut("pyramid", f);
        self.cff1.visit_mut("cff1", f);
        for (i, blk) in self.high.iter_mut().enumerate() {
            blk.visit_mut(&format!("high.{i}"), f);
        }
        self.cff2.visit_mut("cff2", f);
        visit_conv_mut("classifier", &mut self.classifier, f);
    }

    /// Trainable parameters flattened in visitor order.
    pub fn params_flat(&self) -> Vec<E> {
        let mut v = Vec::new();
        self.visit_params(&mut |_, kind, t| {
            if kind.trainable() {
                v.extend_from_slice(t.data());
            }
        });
        v
    }

    /// Overwrite trainable parameters from a flat vector in visitor order.
    pub fn set_params_flat(&mut self, v: &[E]) {
        let mut off = 0;
        self.visit_params_mut(&mut |_, kind, t| {
            if kind.trainable() {
                let n = t.shape().count();
                t.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
        });
        assert_eq!(off, v.len(), "flat parameter length mismatch");
    }

    /// Accumulated gradients flattened in visitor order (zeros where a
    /// gradient buffer was never touched).
    pub fn grads_flat(&self) -> Vec<E> {
        let mut v = Vec::new();
        self.visit_params(&mut |_, kind, t| {
            if kind.trainable() {
                match t.grad() {
                    Some(g) => v.extend_from_slice(g),
                    None => v.extend(std::iter::repeat(E::zero()).take(t.shape().count())),
                }
            }
        });
        v
    }

    /// Parameters of the two fusion F1 paths (the part the fusion-kind
    /// ablation changes).
    pub fn fusion_path_param_count(&self) -> usize {
        self.cff1.fusion_path_params() + self.cff2.fusion_path_params()
    }

    /// Total trainable parameter count under a name filter.
    pub fn param_count(&self, prefix: &str) -> usize {
        let mut count = 0;
        self.visit_params(&mut |name, kind, t| {
            if kind.trainable() && name.starts_with(prefix) {
                count += t.shape().count();
            }
        });
        count
    }

    /// Fold every BN layer into its preceding convolution, yielding the
    /// deployment model.
    pub fn merged_bn(&self) -> IcnetModel<E>
    where
        IcnetModel<E>: Clone,
    {
        let mut m = self.clone();
        for blk in m.trunk.iter_mut().chain(m.tail.iter_mut()).chain(m.high.iter_mut()) {
            blk.merge_bn();
        }
        m.pyramid.merge_bn();
        m.cff1.merge_bn();
        m.cff2.merge_bn();
        m
    }

    /// Symbolic description of the executed graph for the cost model,
    /// read from the actual layer shapes (so pruned models profile
    /// correctly).
    pub fn to_network_spec(&self, target: ProfileTarget) -> NetworkSpec {
        emit_spec(self, target)
    }
}

impl<E: Element> Clone for IcnetModel<E> {
    fn clone(&self) -> Self {
        IcnetModel {
            cfg: self.cfg.clone(),
            trunk: self.trunk.clone(),
            tail: self.tail.clone(),
            pyramid: self.pyramid.clone(),
            cff1: self.cff1.clone(),
            cff2: self.cff2.clone(),
            high: self.high.clone(),
            classifier: self.classifier.clone(),
        }
    }
}

/// Shared loss computation (also used by the single-scale baseline).
pub(crate) fn cascade_loss_impl<E: Element>(
    out: &CascadeOutputs<E>,
    gt: &[LabelMap],
    lambda: [f64; 3],
    ignore: u8,
    num_classes: usize,
) -> Result<(LossParts<E>, [Option<Tensor<E>>; 3])> {
    for lm in gt {
        lm.validate(num_classes)?;
    }
    let mut parts = [E::zero(); 3];
    let mut grads: [Option<Tensor<E>>; 3] = [None, None, None];
    let heads = [out.logits16.as_ref(), out.logits8.as_ref(), Some(&out.logits4)];
    for (i, head) in heads.iter().enumerate() {
        let Some(logits) = head else {
            if lambda[i] != 0.0 {
                return Err(Error::spec(
                    "cascade_loss: missing auxiliary head for a nonzero lambda",
                ));
            }
            continue;
        };
        let (lh, lw) = logits.shape().spatial();
        let down: Vec<LabelMap> = gt.iter().map(|g| g.resize_nearest(lh, lw)).collect();
        let r = softmax_xent_map(logits, &down, ignore)?;
        parts[i] = r.loss;
        let lam = E::from_f64(lambda[i]);
        let mut g = r.grad;
        for v in g.data_mut() {
            *v = *v * lam;
        }
        grads[i] = Some(g);
    }
    let total = E::from_f64(lambda[0]) * parts[0] + E::from_f64(lambda[1]) * parts[1] + E::from_f64(lambda[2]) * parts[2];
    Ok((
        LossParts {
            total,
            loss16: parts[0],
            loss8: parts[1],
            loss4: parts[2],
        },
        grads,
    ))
}

/// Per-pixel argmax over the class dimension, ties to the lowest index.
pub fn argmax_labels<E: Element>(logits: &Tensor<E>) -> Vec<LabelMap> {
    let Shape { n, c, h, w } = logits.shape();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut data = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut best = logits.at(ni, 0, y, x);
                let mut best_c = 0u8;
                for ci in 1..c {
                    let v = logits.at(ni, ci, y, x);
                    if v > best {
                        best = v;
                        best_c = ci as u8;
                    }
                }
                data[y * w + x] = best_c;
            }
        }
        out.push(LabelMap::new(h, w, data).expect("valid dims"));
    }
    out
}

/// Which executed graph to describe for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileTarget {
    /// Full training graph including both auxiliary heads.
    CascadeTrain,
    /// Ops needed for the sub4 prediction (1/16 head, upsampled to full).
    Sub4,
    /// Ops for the sub24 prediction (1/8 head).
    Sub24,
    /// Plain inference: all branches, no auxiliary heads, 1/4 head upsampled.
    Sub124,
}

impl ProfileTarget {
    pub fn name(self) -> &'static str {
        match self {
            ProfileTarget::CascadeTrain => "cascade_train",
            ProfileTarget::Sub4 => "sub4",
            ProfileTarget::Sub24 => "sub24",
            ProfileTarget::Sub124 => "sub124",
        }
    }
}

fn conv_block_layers<E: Element>(prefix: &str, blk: &ConvBlock<E>) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::conv(
        prefix.to_string(),
        blk.conv.c_in(),
        blk.conv.c_out(),
        blk.conv.kernel(),
        blk.conv.stride,
        blk.conv.dilation,
    )];
    if blk.bn.is_some() {
        layers.push(LayerSpec::pointwise(format!("{prefix}.bn"), blk.conv.c_out()));
    }
    if blk.relu {
        layers.push(LayerSpec::pointwise(format!("{prefix}.relu"), blk.conv.c_out()));
    }
    layers
}

/// Emit the executed op sequence as chained stages, in execution order, so
/// that profiling it reproduces the executed-op counter exactly.
fn emit_spec<E: Element>(model: &IcnetModel<E>, target: ProfileTarget) -> NetworkSpec {
    let cfg = &model.cfg;
    let n = cfg.num_classes;
    let (fh, fw) = (cfg.input_h, cfg.input_w);
    let (th, tw) = (fh / 32, fw / 32);
    let with_aux = matches!(target, ProfileTarget::CascadeTrain);

    let mut stages: Vec<Stage> = Vec::new();
    let mut push = |name: &str, from: StageInput, layers: Vec<LayerSpec>| {
        stages.push(Stage { name: name.into(), from, layers });
    };

    push("medium", StageInput::Network, vec![LayerSpec::resize("half", 3, 1, 2)]);
    let mut trunk_layers = Vec::new();
    for (i, blk) in model.trunk.iter().enumerate() {
        trunk_layers.extend(conv_block_layers(&format!("trunk.{i}"), blk));
    }
    let mid_c = model.trunk.last().expect("trunk nonempty").conv.c_out();
    push("trunk", StageInput::Stage("medium".into()), trunk_layers);

    push(
        "low_in",
        StageInput::Stage("trunk".into()),
        vec![LayerSpec::resize("down", mid_c, 1, 2)],
    );
    let mut tail_layers = Vec::new();
    for (i, blk) in model.tail.iter().enumerate() {
        tail_layers.extend(conv_block_layers(&format!("tail.{i}"), blk));
    }
    let tail_c = model.tail.last().expect("tail nonempty").conv.c_out();
    push("tail", StageInput::Stage("low_in".into()), tail_layers);

    let mut cat_c = tail_c;
    for (i, (&b, blk)) in model.pyramid.bins.iter().zip(&model.pyramid.reduce).enumerate() {
        let mut layers = vec![LayerSpec::adaptive_pool(format!("pyramid.pool{i}"), tail_c, (b, b))];
        layers.extend(conv_block_layers(&format!("pyramid.reduce{i}"), blk));
        layers.push(LayerSpec::resize_to(format!("pyramid.up{i}"), blk.conv.c_out(), th, tw));
        cat_c += blk.conv.c_out();
        push(&format!("pyr_reduce{i}"), StageInput::Stage("tail".into()), layers);
    }
    let mut merge_layers = vec![LayerSpec::concat("pyramid.concat", tail_c, cat_c)];
    merge_layers.extend(conv_block_layers("pyramid.merge", &model.pyramid.merge));
    let low_c = model.pyramid.merge.conv.c_out();
    push("pyr_merge", StageInput::Stage("tail".into()), merge_layers);

    // CFF1.
    let c3 = cfg.cff_channels;
    let (up1, fuse1, aux1_in) = model.cff1.emit_fuse_layers("cff1", low_c);
    push("cff1_up", StageInput::Stage("pyr_merge".into()), up1);
    if with_aux || target == ProfileTarget::Sub4 {
        push(
            "aux1",
            StageInput::Stage("cff1_up".into()),
            vec![LayerSpec::conv("cff1.aux", aux1_in, n, 1, 1, 1)],
        );
    }
    if target == ProfileTarget::Sub4 {
        push(
            "sub4_out",
            StageInput::Stage("aux1".into()),
            vec![LayerSpec::resize("up_full", n, 16, 1)],
        );
        return NetworkSpec { input: (3, fh, fw), stages };
    }
    push("cff1_fuse", StageInput::Stage("cff1_up".into()), fuse1);
    push(
        "cff1_proj",
        StageInput::Stage("trunk".into()),
        vec![
            LayerSpec::conv("cff1.proj", model.cff1.proj.c_in(), c3, 1, 1, 1),
            LayerSpec::pointwise("cff1.proj.bn", c3),
        ],
    );
    push(
        "cff1_join",
        StageInput::Stage("cff1_fuse".into()),
        vec![
            LayerSpec::pointwise("cff1.sum", c3),
            LayerSpec::pointwise("cff1.relu", c3),
        ],
    );

    if target != ProfileTarget::Sub24 {
        let mut high_layers = Vec::new();
        for (i, blk) in model.high.iter().enumerate() {
            high_layers.extend(conv_block_layers(&format!("high.{i}"), blk));
        }
        push("high", StageInput::Network, high_layers);
    }

    // CFF2.
    let (up2, fuse2, aux2_in) = model.cff2.emit_fuse_layers("cff2", c3);
    push("cff2_up", StageInput::Stage("cff1_join".into()), up2);
    if with_aux || target == ProfileTarget::Sub24 {
        push(
            "aux2",
            StageInput::Stage("cff2_up".into()),
            vec![LayerSpec::conv("cff2.aux", aux2_in, n, 1, 1, 1)],
        );
    }
    if target == ProfileTarget::Sub24 {
        push(
            "sub24_out",
            StageInput::Stage("aux2".into()),
            vec![LayerSpec::resize("up_full", n, 8, 1)],
        );
        return NetworkSpec { input: (3, fh, fw), stages };
    }
    push("cff2_fuse", StageInput::Stage("cff2_up".into()), fuse2);
    push(
        "cff2_proj",
        StageInput::Stage("high".into()),
        vec![
            LayerSpec::conv("cff2.proj", model.cff2.proj.c_in(), c3, 1, 1, 1),
            LayerSpec::pointwise("cff2.proj.bn", c3),
        ],
    );
    push(
        "cff2_join",
        StageInput::Stage("cff2_fuse".into()),
        vec![
            LayerSpec::pointwise("cff2.sum", c3),
            LayerSpec::pointwise("cff2.relu", c3),
        ],
    );

    let mut final_layers = vec![
        LayerSpec::resize("final.up", c3, 2, 1),
        LayerSpec::conv("classifier", c3, n, 1, 1, 1),
    ];
    if target == ProfileTarget::Sub124 {
        final_layers.push(LayerSpec::resize("up_full", n, 4, 1));
    }
    push("final", StageInput::Stage("cff2_join".into()), final_layers);

    NetworkSpec { input: (3, fh, fw), stages }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, relu, relu_grad};
    use rand::{Rng, SeedableRng};

    struct TwoUseSetup {
        trunk: Vec<ConvBlock<f64>>,
        proj: crate::tensor::ConvParams<f64>,
        tail: ConvBlock<f64>,
        image: Tensor<f64>,
    }

    fn two_use_setup() -> TwoUseSetup {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let trunk = vec![
            ConvBlock::new(&mut rng, 3, 2, 3, 2, 1),
            ConvBlock::new(&mut rng, 2, 3, 3, 2, 1),
        ];
        let mut tail = ConvBlock::new(&mut rng, 3, 2, 3, 1, 2);
        tail.bn = None;
        TwoUseSetup {
            trunk,
            proj: he_conv::<f64>(&mut rng, 2, 3, 1, 1, 1),
            tail,
            image: Tensor::from_fn(Shape::new(1, 1 + 2, 16, 16), |_, _, _, _| rng.gen_range(0.0..1.0)),
        }
    }

    fn run_trunk(
        trunk: &mut [ConvBlock<f64>],
        image: &Tensor<f64>,
        cnt: &mut MacCounter,
    ) -> (Tensor<f64>, Vec<ConvBlockStash<f64>>) {
        let mut cur = image.clone();
        let mut st = Vec::new();
        for blk in trunk.iter_mut() {
            let (y, s) = blk.forward_train(&cur, cnt).unwrap();
            st.push(s);
            cur = y;
        }
        (cur, st)
    }

    fn backward_trunk(trunk: &mut [ConvBlock<f64>], st: &[ConvBlockStash<f64>], d: &Tensor<f64>) {
        let mut d = d.clone();
        for (blk, s) in trunk.iter_mut().zip(st).rev() {
            d = blk.backward(s, &d).unwrap();
        }
    }

    /// Loss downstream of both consumers of the trunk feature: the tail path
    /// consumes a x2-downsampled copy, the projection path consumes it
    /// directly, both join in an elementwise sum and ReLU. Returns the loss
    /// and the gradients flowing to the two uses of the feature.
    #[allow(clippy::type_complexity)]
    fn head_forward_backward(
        f_a: &Tensor<f64>,
        f_b: &Tensor<f64>,
        proj: &mut crate::tensor::ConvParams<f64>,
        tail: &mut ConvBlock<f64>,
        cnt: &mut MacCounter,
    ) -> (f64, Tensor<f64>, Tensor<f64>) {
        let (mh, mw) = f_a.shape().spatial();
        let low = bilinear_resize(f_a, mh / 2, mw / 2).unwrap();
        let (t_out, t_st) = tail.forward_train(&low, cnt).unwrap();
        let p_out = conv2d(f_b, proj).unwrap();
        let p_small = bilinear_resize(&p_out, mh / 2, mw / 2).unwrap();
        let joined = add(&t_out, &p_small).unwrap();
        let act = relu(&joined);
        let loss: f64 = act.iter().sum();

        let d_act = Tensor::filled(act.shape(), 1.0);
        let d_joined = relu_grad(&joined, &d_act).unwrap();
        let d_low = tail.backward(&t_st, &d_joined).unwrap();
        let d_p = bilinear_resize_grad(&d_joined, mh, mw).unwrap();
        let (d_fb, dw, db) = conv2d_grad(f_b, proj, &d_p).unwrap();
        proj.weight.add_grad(dw.data());
        proj.bias.add_grad(db.data());
        let d_fa = bilinear_resize_grad(&d_low, mh, mw).unwrap();
        (loss, d_fa, d_fb)
    }

    /// The shared trunk's accumulated gradient equals the sum of the
    /// gradients of a reference model with duplicated trunk weights (copy A
    /// feeding the tail path, copy B the projection path).
    #[test]
    fn shared_trunk_gradient_is_sum_of_both_uses() {
        let mut cnt = MacCounter::off();

        // Shared run: one trunk, its output consumed twice.
        let mut s = two_use_setup();
        let (f_mid, st) = run_trunk(&mut s.trunk, &s.image, &mut cnt);
        let (loss_shared, d_fa, d_fb) =
            head_forward_backward(&f_mid, &f_mid, &mut s.proj, &mut s.tail, &mut cnt);
        let mut d_shared = d_fa;
        for (g, &v) in d_shared.data_mut().iter_mut().zip(d_fb.data()) {
            *g = *g + v;
        }
        backward_trunk(&mut s.trunk, &st, &d_shared);

        // Duplicated-weights reference: two trunk copies, one per consumer.
        let mut r = two_use_setup();
        let mut trunk_b = r.trunk.clone();
        let (f_a, st_a) = run_trunk(&mut r.trunk, &r.image, &mut cnt);
        let (f_b, st_b) = run_trunk(&mut trunk_b, &r.image, &mut cnt);
        assert_eq!(f_a.data(), f_b.data());
        let (loss_dup, d_fa, d_fb) = head_forward_backward(&f_a, &f_b, &mut r.proj, &mut r.tail, &mut cnt);
        backward_trunk(&mut r.trunk, &st_a, &d_fa);
        backward_trunk(&mut trunk_b, &st_b, &d_fb);

        assert_eq!(loss_shared, loss_dup);
        for i in 0..s.trunk.len() {
            let gs = s.trunk[i].conv.weight.grad().unwrap();
            let ga = r.trunk[i].conv.weight.grad().unwrap();
            let gb = trunk_b[i].conv.weight.grad().unwrap();
            for ((g, a), b) in gs.iter().zip(ga).zip(gb) {
                assert!((g - (a + b)).abs() < 1e-12, "{g} vs {a} + {b}");
            }
        }
    }
}
