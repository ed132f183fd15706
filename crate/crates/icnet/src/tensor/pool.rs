use super::{from_count, Element, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Bookkeeping for the backward pass: for max pooling the flat input index
/// of the (first) maximal element per output; empty for average pooling.
#[derive(Debug, Clone)]
pub struct PoolStash {
    pub argmax: Vec<usize>,
}

/// Windowed pooling without padding. Max-pool ties resolve to the first
/// maximal element in row-major scan order.
pub fn pool2d<E: Element>(
    x: &Tensor<E>,
    kind: PoolKind,
    window: usize,
    stride: usize,
) -> Result<(Tensor<E>, PoolStash)> {
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool2d: window and stride must be >= 1"));
    }
    let Shape { n, c, h, w } = x.shape();
    if window > h || window > w {
        return Err(Error::shape(format!(
            "pool2d: window {window} larger than input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let mut argmax = if kind == PoolKind::Max {
        vec![0usize; n * c * oh * ow]
    } else {
        Vec::new()
    };
    let inv = E::one() / from_count::<E>(window * window);

    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    match kind {
                        PoolKind::Max => {
                            let mut best = x.at(ni, ci, y0, x0);
                            let mut best_idx = x.idx(ni, ci, y0, x0);
                            for ky in 0..window {
                                for kx in 0..window {
                                    let v = x.at(ni, ci, y0 + ky, x0 + kx);
                                    if v > best {
                                        best = v;
                                        best_idx = x.idx(ni, ci, y0 + ky, x0 + kx);
                                    }
                                }
                            }
                            let oi = out.idx(ni, ci, oy, ox);
                            out.data_mut()[oi] = best;
                            argmax[oi] = best_idx;
                        }
                        PoolKind::Avg => {
                            let mut acc = E::zero();
                            for ky in 0..window {
                                for kx in 0..window {
                                    acc = acc + x.at(ni, ci, y0 + ky, x0 + kx);
                                }
                            }
                            out.set(ni, ci, oy, ox, acc * inv);
                        }
                    }
                }
            }
        }
    }
    Ok((out, PoolStash { argmax }))
}

/// Gradient of [`pool2d`]. Max routes the upstream gradient to the recorded
/// argmax element; avg spreads it uniformly over the window.
pub fn pool2d_grad<E: Element>(
    x: &Tensor<E>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    stash: &PoolStash,
    dy: &Tensor<E>,
) -> Result<Tensor<E>> {
    let Shape { n, c, h, w } = x.shape();
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    if dy.shape() != Shape::new(n, c, oh, ow) {
        return Err(Error::shape("pool2d_grad: dy shape mismatch"));
    }
    let mut dx = Tensor::zeros(x.shape());
    let inv = E::one() / from_count::<E>(window * window);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = dy.idx(ni, ci, oy, ox);
                    let g = dy.data()[oi];
                    match kind {
                        PoolKind::Max => {
                            let ii = stash.argmax[oi];
                            dx.data_mut()[ii] = dx.data_mut()[ii] + g;
                        }
                        PoolKind::Avg => {
                            for ky in 0..window {
                                for kx in 0..window {
                                    let ii = dx.idx(ni, ci, oy * stride + ky, ox * stride + kx);
                                    dx.data_mut()[ii] = dx.data_mut()[ii] + g * inv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Window `[lo, hi)` of output bin `i` out of `bins` over an axis of `len`,
/// by even partition. Bins are never empty, even when `bins > len`.
pub fn adaptive_window(len: usize, bins: usize, i: usize) -> (usize, usize) {
    let lo = i * len / bins;
    let hi = ((i + 1) * len + bins - 1) / bins;
    (lo, hi.max(lo + 1).min(len.max(lo + 1)))
}

/// Adaptive average pooling to a `bins_h x bins_w` grid.
pub fn adaptive_avg_pool<E: Element>(x: &Tensor<E>, bins_h: usize, bins_w: usize) -> Result<Tensor<E>> {
    if bins_h == 0 || bins_w == 0 {
        return Err(Error::shape("adaptive_avg_pool: bins must be >= 1"));
    }
    let Shape { n, c, h, w } = x.shape();
    let mut out = Tensor::zeros(Shape::new(n, c, bins_h, bins_w));
    for ni in 0..n {
        for ci in 0..c {
            for by in 0..bins_h {
                let (y0, y1) = adaptive_window(h, bins_h, by);
                for bx in 0..bins_w {
                    let (x0, x1) = adaptive_window(w, bins_w, bx);
                    let mut acc = E::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + x.at(ni, ci, y, xx);
                        }
                    }
                    out.set(ni, ci, by, bx, acc / from_count::<E>((y1 - y0) * (x1 - x0)));
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`adaptive_avg_pool`].
pub fn adaptive_avg_pool_grad<E: Element>(dy: &Tensor<E>, in_h: usize, in_w: usize) -> Result<Tensor<E>> {
    let Shape { n, c, h: bh, w: bw } = dy.shape();
    let mut dx = Tensor::zeros(Shape::new(n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            for by in 0..bh {
                let (y0, y1) = adaptive_window(in_h, bh, by);
                for bx in 0..bw {
                    let (x0, x1) = adaptive_window(in_w, bw, bx);
                    let g = dy.at(ni, ci, by, bx) / from_count::<E>((y1 - y0) * (x1 - x0));
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let ii = dx.idx(ni, ci, y, xx);
                            dx.data_mut()[ii] = dx.data_mut()[ii] + g;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn avg_of_constant_is_constant() {
        let x = Tensor::<f64>::filled(Shape::new(1, 2, 4, 4), 3.5);
        let (y, _) = pool2d(&x, PoolKind::Avg, 2, 2).unwrap();
        assert!(y.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn max_pool_example() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f64, 3.0, 2.0, 0.0]).unwrap();
        let (y, _) = pool2d(&x, PoolKind::Max, 2, 1).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn max_pool_tie_routes_to_first_in_scan_order() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![5.0f64, 5.0, 5.0, 5.0]).unwrap();
        let (_, stash) = pool2d(&x, PoolKind::Max, 2, 1).unwrap();
        assert_eq!(stash.argmax, vec![0]);
        let dy = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let dx = pool2d_grad(&x, PoolKind::Max, 2, 1, &stash, &dy).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_larger_than_input_errors() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(pool2d(&x, PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn adaptive_one_bin_equals_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 5, 7), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let y = adaptive_avg_pool(&x, 1, 1).unwrap();
        let mean = x.iter().sum::<f64>() / 35.0;
        // Same accumulation order as the implementation: exact equality.
        assert_eq!(y.data()[0], mean);
    }

    #[test]
    fn adaptive_bins_larger_than_input_are_nonempty() {
        let x = Tensor::new(Shape::new(1, 1, 1, 1), vec![2.0f64]).unwrap();
        let y = adaptive_avg_pool(&x, 3, 3).unwrap();
        assert!(y.iter().all(|&v| v == 2.0));
    }
}
