//! The heavy single-scale segmenter: the full backbone (trunk + tail +
//! pyramid pooling + classifier) applied to the input at one resolution.
//! This is the reference the cascade is measured against, and the subject
//! of the input-scale, feature-stride and kernel-keep-rate studies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{he_conv, visit_conv, visit_conv_mut, ConvBlock, ConvBlockStash, MacCounter, ParamFn, ParamFnMut};
use super::pyramid::{PyramidPool, PyramidStash};
use super::{argmax_labels, IcnetConfig};
use crate::cost::{LayerSpec, NetworkSpec, Stage, StageInput};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{bilinear_resize, conv2d, conv2d_grad, softmax_xent_map, Element, Tensor};

/// Single-scale model with a configurable feature output stride.
pub struct BaselineModel<E: Element> {
    pub cfg: IcnetConfig,
    pub output_stride: usize,
    pub(crate) blocks: Vec<ConvBlock<E>>,
    pub(crate) pyramid: PyramidPool<E>,
    pub(crate) classifier: crate::tensor::ConvParams<E>,
}

pub struct BaselineTrace<E: Element> {
    blocks: Vec<ConvBlockStash<E>>,
    pyramid: PyramidStash<E>,
    classifier_x: Tensor<E>,
}

/// Tail layer geometry for a given output stride: (stride, dilation) of the
/// two tail stage groups. Stride 8 keeps both dilated; 16 and 32 trade
/// dilation for striding.
fn tail_geometry(output_stride: usize) -> Result<[(usize, usize); 2]> {
    match output_stride {
        8 => Ok([(1, 2), (1, 4)]),
        16 => Ok([(2, 1), (1, 2)]),
        32 => Ok([(2, 1), (2, 1)]),
        _ => Err(Error::config(format!(
            "output_stride must be 8, 16 or 32, got {output_stride}"
        ))),
    }
}

/// Build the baseline, deterministically from the seed.
pub fn build_baseline<E: Element>(cfg: &IcnetConfig, output_stride: usize, seed: u64) -> Result<BaselineModel<E>> {
    cfg.validate()?;
    let geo = tail_geometry(output_stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = &cfg.widths;
    let blocks = vec![
        ConvBlock::new(&mut rng, 3, w[0], 3, 2, 1),
        ConvBlock::new(&mut rng, w[0], w[1], 3, 2, 1),
        ConvBlock::new(&mut rng, w[1], w[1], 3, 1, 1),
        ConvBlock::new(&mut rng, w[1], w[2], 3, 2, 1),
        ConvBlock::new(&mut rng, w[2], w[2], 3, 1, 1),
        ConvBlock::new(&mut rng, w[2], w[3], 3, geo[0].0, geo[0].1),
        ConvBlock::new(&mut rng, w[3], w[3], 3, 1, geo[0].1),
        ConvBlock::new(&mut rng, w[3], w[4], 3, geo[1].0, geo[1].1),
        ConvBlock::new(&mut rng, w[4], w[4], 3, 1, geo[1].1),
    ];
    let pyramid = PyramidPool::build(&mut rng, w[4], &cfg.pyramid_bins);
    let classifier = he_conv(&mut rng, cfg.num_classes, w[4], 1, 1, 1);
    Ok(BaselineModel {
        cfg: cfg.clone(),
        output_stride,
        blocks,
        pyramid,
        classifier,
    })
}

impl<E: Element> BaselineModel<E> {
    fn check_dims(&self, image: &Tensor<E>) -> Result<()> {
        let s = image.shape();
        if s.h % self.output_stride != 0 || s.w % self.output_stride != 0 {
            return Err(Error::shape(format!(
                "baseline input dims {}x{} must be divisible by the output stride {}",
                s.h, s.w, self.output_stride
            )));
        }
        Ok(())
    }

    /// Logits at 1/output_stride of the input resolution.
    pub fn forward_train(&mut self, image: &Tensor<E>, cnt: &mut MacCounter) -> Result<(Tensor<E>, BaselineTrace<E>)> {
        self.check_dims(image)?;
        let mut cur = image.clone();
        let mut st = Vec::with_capacity(self.blocks.len());
        for blk in &mut self.blocks {
            let (y, s) = blk.forward_train(&cur, cnt)?;
            st.push(s);
            cur = y;
        }
        let (feat, pyr_st) = self.pyramid.forward_train(&cur, cnt)?;
        let logits = conv2d(&feat, &self.classifier)?;
        cnt.record_conv(&self.classifier, feat.shape().h, feat.shape().w);
        Ok((
            logits,
            BaselineTrace {
                blocks: st,
                pyramid: pyr_st,
                classifier_x: feat,
            },
        ))
    }

    pub fn forward_infer(&self, image: &Tensor<E>, cnt: &mut MacCounter) -> Result<Tensor<E>> {
        self.check_dims(image)?;
        let mut cur = image.clone();
        for blk in &self.blocks {
            cur = blk.forward_infer(&cur, cnt)?;
        }
        let feat = self.pyramid.forward_infer(&cur, cnt)?;
        let logits = conv2d(&feat, &self.classifier)?;
        cnt.record_conv(&self.classifier, feat.shape().h, feat.shape().w);
        Ok(logits)
    }

    pub fn backward(&mut self, trace: &BaselineTrace<E>, d_logits: &Tensor<E>) -> Result<()> {
        let (d_feat, dw, db) = conv2d_grad(&trace.classifier_x, &self.classifier, d_logits)?;
        self.classifier.weight.add_grad(dw.data());
        self.classifier.bias.add_grad(db.data());
        let mut d = self.pyramid.backward(&trace.pyramid, &d_feat)?;
        for (blk, st) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            d = blk.backward(st, &d)?;
        }
        Ok(())
    }

    /// Forward, loss at the feature scale, backward.
    pub fn loss_step(&mut self, images: &Tensor<E>, labels: &[LabelMap], ignore: u8) -> Result<E> {
        for lm in labels {
            lm.validate(self.cfg.num_classes)?;
        }
        let mut cnt = MacCounter::off();
        let (logits, trace) = self.forward_train(images, &mut cnt)?;
        let (lh, lw) = logits.shape().spatial();
        let down: Vec<LabelMap> = labels.iter().map(|g| g.resize_nearest(lh, lw)).collect();
        let r = softmax_xent_map(&logits, &down, ignore)?;
        self.backward(&trace, &r.grad)?;
        Ok(r.loss)
    }

    /// Full-resolution prediction: logits upsampled to the input dims, then
    /// per-pixel argmax.
    pub fn predict(&self, image: &Tensor<E>) -> Result<Vec<LabelMap>> {
        let logits = self.forward_infer(image, &mut MacCounter::off())?;
        let (h, w) = image.shape().spatial();
        let up = bilinear_resize(&logits, h, w)?;
        Ok(argmax_labels(&up))
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, _, t| {
            t.alloc_grad();
            t.zero_grad();
        });
    }

    pub fn visit_params(&self, f: &mut ParamFn<'_, E>) {
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&format!("backbone.{i}"), f);
        }
        self.pyramid.visit("pyramid", f);
        visit_conv("classifier", &self.classifier, f);
    }

    pub fn visit_params_mut(&mut self, f: &mut ParamFnMut<'_, E>) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("backbone.{i}"), f);
        }
        self.pyramid.visit_mut("pyramid", f);
        visit_conv_mut("classifier", &mut self.classifier, f);
    }

    /// Symbolic description of the inference graph at the given input dims
    /// (the final upsample back to input resolution included). Shapes come
    /// from the actual parameters so pruned models profile correctly.
    pub fn to_network_spec(&self, input_h: usize, input_w: usize) -> NetworkSpec {
        let n = self.cfg.num_classes;
        let (th, tw) = (input_h / self.output_stride, input_w / self.output_stride);

        let mut stages = Vec::new();
        let mut backbone = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            backbone.push(LayerSpec::conv(
                format!("backbone.{i}"),
                blk.conv.c_in(),
                blk.conv.c_out(),
                blk.conv.kernel(),
                blk.conv.stride,
                blk.conv.dilation,
            ));
            if blk.bn.is_some() {
                backbone.push(LayerSpec::pointwise(format!("backbone.{i}.bn"), blk.conv.c_out()));
            }
            backbone.push(LayerSpec::pointwise(format!("backbone.{i}.relu"), blk.conv.c_out()));
        }
        let tail_c = self.blocks.last().expect("backbone nonempty").conv.c_out();
        stages.push(Stage { name: "backbone".into(), from: StageInput::Network, layers: backbone });

        let mut cat_c = tail_c;
        for (i, (&b, blk)) in self.pyramid.bins.iter().zip(&self.pyramid.reduce).enumerate() {
            let mut layers = vec![LayerSpec::adaptive_pool(format!("pyramid.pool{i}"), tail_c, (b, b))];
            layers.push(LayerSpec::conv(
                format!("pyramid.reduce{i}"),
                blk.conv.c_in(),
                blk.conv.c_out(),
                1,
                1,
                1,
            ));
            if blk.bn.is_some() {
                layers.push(LayerSpec::pointwise(format!("pyramid.reduce{i}.bn"), blk.conv.c_out()));
            }
            layers.push(LayerSpec::pointwise(format!("pyramid.reduce{i}.relu"), blk.conv.c_out()));
            layers.push(LayerSpec::resize_to(format!("pyramid.up{i}"), blk.conv.c_out(), th, tw));
            cat_c += blk.conv.c_out();
            stages.push(Stage {
                name: format!("pyr_reduce{i}"),
                from: StageInput::Stage("backbone".into()),
                layers,
            });
        }
        let merge_c = self.pyramid.merge.conv.c_out();
        let mut merge = vec![
            LayerSpec::concat("pyramid.concat", tail_c, cat_c),
            LayerSpec::conv(
                "pyramid.merge",
                self.pyramid.merge.conv.c_in(),
                merge_c,
                self.pyramid.merge.conv.kernel(),
                1,
                1,
            ),
        ];
        if self.pyramid.merge.bn.is_some() {
            merge.push(LayerSpec::pointwise("pyramid.merge.bn", merge_c));
        }
        merge.push(LayerSpec::pointwise("pyramid.merge.relu", merge_c));
        stages.push(Stage { name: "pyr_merge".into(), from: StageInput::Stage("backbone".into()), layers: merge });
        stages.push(Stage {
            name: "head".into(),
            from: StageInput::Stage("pyr_merge".into()),
            layers: vec![
                LayerSpec::conv("classifier", self.classifier.c_in(), n, 1, 1, 1),
                LayerSpec::resize("up_full", n, self.output_stride, 1),
            ],
        });

        NetworkSpec { input: (3, input_h, input_w), stages }
    }

    /// Count of trainable parameters.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, kind, t| {
            if kind.trainable() {
                count += t.shape().count();
            }
        });
        count
    }
}

impl<E: Element> Clone for BaselineModel<E> {
    fn clone(&self) -> Self {
        BaselineModel {
            cfg: self.cfg.clone(),
            output_stride: self.output_stride,
            blocks: self.blocks.clone(),
            pyramid: self.pyramid.clone(),
            classifier: self.classifier.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn output_stride_variants_produce_expected_dims() {
        let cfg = IcnetConfig {
            widths: vec![4, 4, 4, 4, 4],
            pyramid_bins: vec![1, 2],
            num_classes: 3,
            ..Default::default()
        };
        for os in [8usize, 16, 32] {
            let m = build_baseline::<f32>(&cfg, os, 1).unwrap();
            let img = Tensor::zeros(Shape::new(1, 3, 96, 96));
            let logits = m.forward_infer(&img, &mut MacCounter::off()).unwrap();
            assert_eq!(logits.shape().spatial(), (96 / os, 96 / os), "os={os}");
            assert_eq!(logits.shape().c, 3);
        }
        assert!(build_baseline::<f32>(&cfg, 12, 1).is_err());
    }
}
