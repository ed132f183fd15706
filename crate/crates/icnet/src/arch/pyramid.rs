//! Pyramid pooling: per-bin adaptive average pooling, 1x1 reduction,
//! upsampling back to the feature dims, channel concatenation with the
//! input, and a 3x3 merge convolution.

use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvBlock, ConvBlockStash, MacCounter, ParamFn, ParamFnMut};
use crate::error::Result;
use crate::tensor::{
    adaptive_avg_pool, adaptive_avg_pool_grad, bilinear_resize, bilinear_resize_grad, concat_channels,
    split_channels_grad, Element, Shape, Tensor,
};

#[derive(Debug, Clone)]
pub struct PyramidPool<E: Element> {
    pub bins: Vec<usize>,
    pub reduce: Vec<ConvBlock<E>>,
    pub merge: ConvBlock<E>,
}

pub struct PyramidStash<E: Element> {
    in_dims: (usize, usize),
    reduce: Vec<ConvBlockStash<E>>,
    reduced_dims: Vec<(usize, usize)>,
    merge: ConvBlockStash<E>,
    channels: Vec<usize>,
}

impl<E: Element> PyramidPool<E> {
    pub fn build(rng: &mut ChaCha8Rng, channels: usize, bins: &[usize]) -> Self {
        let red = channels / bins.len();
        let reduce = bins
            .iter()
            .map(|_| ConvBlock::new(rng, channels, red, 1, 1, 1))
            .collect();
        let merge = ConvBlock::new(rng, channels + red * bins.len(), channels, 3, 1, 1);
        PyramidPool { bins: bins.to_vec(), reduce, merge }
    }

    pub fn forward_train(&mut self, x: &Tensor<E>, cnt: &mut MacCounter) -> Result<(Tensor<E>, PyramidStash<E>)> {
        let (h, w) = x.shape().spatial();
        let mut ups = Vec::with_capacity(self.bins.len());
        let mut reduce_st = Vec::new();
        let mut reduced_dims = Vec::new();
        for (i, &b) in self.bins.iter().enumerate() {
            let p = adaptive_avg_pool(x, b, b)?;
            cnt.record_elems(p.shape());
            let (r, st) = self.reduce[i].forward_train(&p, cnt)?;
            reduced_dims.push(r.shape().spatial());
            let u = bilinear_resize(&r, h, w)?;
            cnt.record_elems(u.shape());
            reduce_st.push(st);
            ups.push(u);
        }
        let mut parts: Vec<&Tensor<E>> = vec![x];
        parts.extend(ups.iter());
        let channels: Vec<usize> = parts.iter().map(|t| t.shape().c).collect();
        let cat = concat_channels(&parts)?;
        cnt.record_elems(cat.shape());
        let (y, merge_st) = self.merge.forward_train(&cat, cnt)?;
        Ok((
            y,
            PyramidStash {
                in_dims: (h, w),
                reduce: reduce_st,
                reduced_dims,
                merge: merge_st,
                channels,
            },
        ))
    }

    pub fn forward_infer(&self, x: &Tensor<E>, cnt: &mut MacCounter) -> Result<Tensor<E>> {
        let (h, w) = x.shape().spatial();
        let mut ups = Vec::with_capacity(self.bins.len());
        for (i, &b) in self.bins.iter().enumerate() {
            let p = adaptive_avg_pool(x, b, b)?;
            cnt.record_elems(p.shape());
            let r = self.reduce[i].forward_infer(&p, cnt)?;
            let u = bilinear_resize(&r, h, w)?;
            cnt.record_elems(u.shape());
            ups.push(u);
        }
        let mut parts: Vec<&Tensor<E>> = vec![x];
        parts.extend(ups.iter());
        let cat = concat_channels(&parts)?;
        cnt.record_elems(cat.shape());
        self.merge.forward_infer(&cat, cnt)
    }

    pub fn backward(&mut self, stash: &PyramidStash<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
        let d_cat = self.merge.backward(&stash.merge, dy)?;
        let parts = split_channels_grad(&d_cat, &stash.channels)?;
        let (h, w) = stash.in_dims;
        let mut dx = parts[0].clone();
        for (i, d_u) in parts[1..].iter().enumerate() {
            let (rh, rw) = stash.reduced_dims[i];
            let d_r = bilinear_resize_grad(d_u, rh, rw)?;
            let d_p = self.reduce[i].backward(&stash.reduce[i], &d_r)?;
            let d_x_i = adaptive_avg_pool_grad(&d_p, h, w)?;
            for (g, &v) in dx.data_mut().iter_mut().zip(d_x_i.data()) {
                *g = *g + v;
            }
        }
        debug_assert_eq!(dx.shape(), Shape::new(dy.shape().n, stash.channels[0], h, w));
        Ok(dx)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamFn<'_, E>) {
        for (i, blk) in self.reduce.iter().enumerate() {
            blk.visit(&format!("{prefix}.reduce{i}"), f);
        }
        self.merge.visit(&format!("{prefix}.merge"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, E>) {
        for (i, blk) in self.reduce.iter_mut().enumerate() {
            blk.visit_mut(&format!("{prefix}.reduce{i}"), f);
        }
        self.merge.visit_mut(&format!("{prefix}.merge"), f);
    }

    pub fn merge_bn(&mut self) {
        for blk in &mut self.reduce {
            blk.merge_bn();
        }
        self.merge.merge_bn();
    }
}
