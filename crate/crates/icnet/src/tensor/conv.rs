use rayon::prelude::*;

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Parameters of a 2-D convolution: weight `(c_out, c_in, k, k)`, bias of
/// length `c_out` (stored as a `(1, c_out, 1, 1)` tensor), stride, dilation
/// and zero padding.
#[derive(Debug, Clone)]
pub struct ConvParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl<E: Element> ConvParams<E> {
    pub fn new(weight: Tensor<E>, bias: Tensor<E>, stride: usize, dilation: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(Error::shape(format!("conv kernel must be square, got {}x{}", ws.h, ws.w)));
        }
        if ws.h % 2 == 0 {
            return Err(Error::shape(format!("conv kernel size must be odd, got {}", ws.h)));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::shape("conv stride and dilation must be >= 1"));
        }
        let bs = bias.shape();
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape(format!(
                "conv bias must be (1, {}, 1, 1), got {bs}",
                ws.n
            )));
        }
        Ok(ConvParams { weight, bias, stride, dilation, padding })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }
    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    /// Output spatial dims for an input of `(h, w)`.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let span = self.dilation * (k - 1) + 1;
        let oh = (h + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "conv output would be empty: input {h}x{w}, k={k}, stride={}, dilation={}, padding={}",
                self.stride, self.dilation, self.padding
            ))),
        }
    }
}

/// Valid output-index range `[lo, hi)` such that `o*stride + t` stays inside
/// `[0, len)` for signed tap offset `t`.
fn valid_range(len: usize, stride: usize, t: isize) -> (usize, usize) {
    let lo = if t >= 0 {
        0
    } else {
        ((-t) as usize + stride - 1) / stride
    };
    let last = len as isize - 1 - t;
    if last < 0 {
        return (0, 0);
    }
    let hi = last as usize / stride + 1;
    (lo, hi.max(lo))
}

/// 2-D convolution with zero padding.
///
/// Per output element the accumulation starts at the bias and proceeds in a
/// fixed order (input channel, then kernel row, then kernel column), so f64
/// results are bitwise equal to a plain loop-nest evaluation in that order.
pub fn conv2d<E: Element>(x: &Tensor<E>, p: &ConvParams<E>) -> Result<Tensor<E>> {
    let Shape { n, c: ci, h, w } = x.shape();
    if ci != p.c_in() {
        return Err(Error::shape(format!(
            "conv2d: input has {ci} channels, weight expects {}",
            p.c_in()
        )));
    }
    let (oh, ow) = p.out_dims(h, w)?;
    let co = p.c_out();
    let k = p.kernel();
    let (s, d, pad) = (p.stride, p.dilation, p.padding as isize);

    let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
    let weight = p.weight.data();
    let bias = p.bias.data();
    let xdata = x.data();

    // Tap geometry, hoisted out of the pixel loops: for kernel column kc the
    // valid output range and the signed input offset.
    let taps: Vec<(usize, usize, isize)> = (0..k)
        .map(|kc| {
            let tx = (kc * d) as isize - pad;
            let (lo, hi) = valid_range(w, s, tx);
            (lo, hi.min(ow), tx)
        })
        .collect();

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, oplane)| {
            let (ni, o) = (plane / co, plane % co);
            oplane.fill(bias[o]);
            for c in 0..ci {
                let xplane = &xdata[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                let wrow = &weight[((o * ci + c) * k) * k..((o * ci + c) * k + k) * k];
                for oy in 0..oh {
                    let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                    for kr in 0..k {
                        let iy = (oy * s + kr * d) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let wk = &wrow[kr * k..(kr + 1) * k];
                        for (kc, &(xlo, xhi, tx)) in taps.iter().enumerate() {
                            if xlo >= xhi {
                                continue;
                            }
                            let wv = wk[kc];
                            if s == 1 {
                                let srcs = &xrow[(xlo as isize + tx) as usize..(xhi as isize - 1 + tx) as usize + 1];
                                for (ov, &xv) in orow[xlo..xhi].iter_mut().zip(srcs) {
                                    *ov = *ov + wv * xv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = (ox * s) as isize + tx;
                                    orow[ox] = orow[ox] + wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Deterministic multi-lane reduction of `sum(a[i] * b[i])`. The lane split
/// is fixed, so results are identical across runs (though not required to
/// match any oracle bitwise).
fn dot8<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [E::zero(); 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            lanes[l] = lanes[l] + ca[l] * cb[l];
        }
    }
    let mut acc = E::zero();
    for l in 0..8 {
        acc = acc + lanes[l];
    }
    for (&va, &vb) in ai.remainder().iter().zip(bi.remainder()) {
        acc = acc + va * vb;
    }
    acc
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_grad<E: Element>(
    x: &Tensor<E>,
    p: &ConvParams<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let Shape { n, c: ci, h, w } = x.shape();
    let (oh, ow) = p.out_dims(h, w)?;
    let co = p.c_out();
    if dy.shape() != Shape::new(n, co, oh, ow) {
        return Err(Error::shape(format!(
            "conv2d_grad: dy shape {} does not match output shape {}",
            dy.shape(),
            Shape::new(n, co, oh, ow)
        )));
    }
    let k = p.kernel();
    let (s, d, pad) = (p.stride, p.dilation, p.padding as isize);
    let weight = p.weight.data();
    let xdata = x.data();
    let dydata = dy.data();

    // dbias[o] = sum of dy over (n, oy, ox).
    let mut dbias = Tensor::zeros(p.bias.shape());
    {
        let db = dbias.data_mut();
        db.par_iter_mut().enumerate().for_each(|(o, dbo)| {
            let mut acc = E::zero();
            for ni in 0..n {
                let plane = &dydata[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
                acc = acc + dot_ones(plane);
            }
            *dbo = acc;
        });
    }

    // dweight[o, c, kr, kc] = sum over (n, oy, ox) of dy * x at the tap.
    let mut dweight = Tensor::zeros(p.weight.shape());
    dweight
        .data_mut()
        .par_chunks_mut(k * k)
        .enumerate()
        .for_each(|(pair, dwk)| {
            let (o, c) = (pair / ci, pair % ci);
            for kr in 0..k {
                let ty = (kr * d) as isize - pad;
                for kc in 0..k {
                    let tx = (kc * d) as isize - pad;
                    let (xlo, xhi) = valid_range(w, s, tx);
                    let xhi = xhi.min(ow);
                    if xlo >= xhi {
                        continue;
                    }
                    let mut acc = E::zero();
                    for ni in 0..n {
                        let xplane = &xdata[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                        let dyplane = &dydata[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
                        for oy in 0..oh {
                            let iy = oy as isize * s as isize + ty;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                            let dyrow = &dyplane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let src = &xrow[(xlo as isize + tx) as usize..(xhi as isize - 1 + tx) as usize + 1];
                                acc = acc + dot8(&dyrow[xlo..xhi], src);
                            } else {
                                for ox in xlo..xhi {
                                    let ix = (ox * s) as isize + tx;
                                    acc = acc + dyrow[ox] * xrow[ix as usize];
                                }
                            }
                        }
                    }
                    dwk[kr * k + kc] = acc;
                }
            }
        });

    // dx[n, c, iy, ix] accumulates w * dy over all taps that read (iy, ix).
    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dxplane)| {
            let (ni, c) = (plane / ci, plane % ci);
            for o in 0..co {
                let dyplane = &dydata[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
                let wbase = ((o * ci + c) * k) * k;
                for kr in 0..k {
                    let ty = (kr * d) as isize - pad;
                    for kc in 0..k {
                        let wv = weight[wbase + kr * k + kc];
                        let tx = (kc * d) as isize - pad;
                        let (xlo, xhi) = valid_range(w, s, tx);
                        let xhi = xhi.min(ow);
                        if xlo >= xhi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s as isize + ty;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dxrow = &mut dxplane[iy as usize * w..(iy as usize + 1) * w];
                            let dyrow = &dyplane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let dst = &mut dxrow[(xlo as isize + tx) as usize..(xhi as isize - 1 + tx) as usize + 1];
                                for (dv, &gy) in dst.iter_mut().zip(&dyrow[xlo..xhi]) {
                                    *dv = *dv + wv * gy;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = (ox * s) as isize + tx;
                                    dxrow[ix as usize] = dxrow[ix as usize] + wv * dyrow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((dx, dweight, dbias))
}

/// Deterministic multi-lane sum of a slice.
fn dot_ones<E: Element>(a: &[E]) -> E {
    let mut lanes = [E::zero(); 8];
    let mut it = a.chunks_exact(8);
    for ca in &mut it {
        for l in 0..8 {
            lanes[l] = lanes[l] + ca[l];
        }
    }
    let mut acc = E::zero();
    for l in 0..8 {
        acc = acc + lanes[l];
    }
    for &v in it.remainder() {
        acc = acc + v;
    }
    acc
}

/// Parameters of a stride-`s` transposed convolution: weight
/// `(c_in, c_out, k, k)`, output dims `(h-1)*s - 2p + k + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTransposeParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<E: Element> ConvTransposeParams<E> {
    pub fn new(
        weight: Tensor<E>,
        bias: Tensor<E>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(Error::shape("transposed conv kernel must be square"));
        }
        if stride == 0 {
            return Err(Error::shape("transposed conv stride must be >= 1"));
        }
        if output_padding >= stride {
            return Err(Error::shape("output_padding must be < stride"));
        }
        let bs = bias.shape();
        if bs != Shape::new(1, ws.c, 1, 1) {
            return Err(Error::shape(format!(
                "transposed conv bias must be (1, {}, 1, 1), got {bs}",
                ws.c
            )));
        }
        Ok(ConvTransposeParams { weight, bias, stride, padding, output_padding })
    }

    /// Unit that doubles spatial dims for odd `k`: padding `(k-1)/2`,
    /// output padding 1, stride 2.
    pub fn doubling(weight: Tensor<E>, bias: Tensor<E>) -> Result<Self> {
        let k = weight.shape().h;
        Self::new(weight, bias, 2, (k - 1) / 2, 1)
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().n
    }
    pub fn c_out(&self) -> usize {
        self.weight.shape().c
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let oh = (h - 1) * self.stride + k + self.output_padding;
        let ow = (w - 1) * self.stride + k + self.output_padding;
        let (oh, ow) = (
            oh.checked_sub(2 * self.padding),
            ow.checked_sub(2 * self.padding),
        );
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::shape("transposed conv output would be empty")),
        }
    }
}

/// Transposed convolution (fractionally strided). Each input pixel scatters
/// a copy of the kernel into the output at stride spacing; implemented as a
/// gather per output plane with fixed (c_in, kr, kc) accumulation order.
pub fn conv_transpose2d<E: Element>(x: &Tensor<E>, p: &ConvTransposeParams<E>) -> Result<Tensor<E>> {
    let Shape { n, c: ci, h, w } = x.shape();
    if ci != p.c_in() {
        return Err(Error::shape(format!(
            "conv_transpose2d: input has {ci} channels, weight expects {}",
            p.c_in()
        )));
    }
    let (oh, ow) = p.out_dims(h, w)?;
    let co = p.c_out();
    let k = p.kernel();
    let s = p.stride;
    let pad = p.padding as isize;

    let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
    let weight = p.weight.data();
    let bias = p.bias.data();
    let xdata = x.data();

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, oplane)| {
            let (ni, o) = (plane / co, plane % co);
            oplane.fill(bias[o]);
            for c in 0..ci {
                let xplane = &xdata[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                let wbase = ((c * co + o) * k) * k;
                for kr in 0..k {
                    // output row oy = iy*s + kr - pad
                    let ty = kr as isize - pad;
                    let (ylo, yhi) = scatter_range(h, s, ty, oh);
                    for kc in 0..k {
                        let wv = weight[wbase + kr * k + kc];
                        let tx = kc as isize - pad;
                        let (xlo, xhi) = scatter_range(w, s, tx, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        for iy in ylo..yhi {
                            let oy = (iy * s) as isize + ty;
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            let orow = &mut oplane[oy as usize * ow..(oy as usize + 1) * ow];
                            for ix in xlo..xhi {
                                let ox = (ix * s) as isize + tx;
                                orow[ox as usize] = orow[ox as usize] + wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Input-index range `[lo, hi)` such that `i*stride + t` lands inside
/// `[0, out_len)`.
fn scatter_range(in_len: usize, stride: usize, t: isize, out_len: usize) -> (usize, usize) {
    let lo = if t >= 0 {
        0
    } else {
        ((-t) as usize + stride - 1) / stride
    };
    let last = out_len as isize - 1 - t;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(in_len);
    (lo, hi.max(lo))
}

/// Gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_grad<E: Element>(
    x: &Tensor<E>,
    p: &ConvTransposeParams<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let Shape { n, c: ci, h, w } = x.shape();
    let (oh, ow) = p.out_dims(h, w)?;
    let co = p.c_out();
    if dy.shape() != Shape::new(n, co, oh, ow) {
        return Err(Error::shape("conv_transpose2d_grad: dy shape mismatch"));
    }
    let k = p.kernel();
    let s = p.stride;
    let pad = p.padding as isize;
    let weight = p.weight.data();
    let xdata = x.data();
    let dydata = dy.data();

    let mut dbias = Tensor::zeros(p.bias.shape());
    {
        let db = dbias.data_mut();
        db.par_iter_mut().enumerate().for_each(|(o, dbo)| {
            let mut acc = E::zero();
            for ni in 0..n {
                acc = acc + dot_ones(&dydata[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow]);
            }
            *dbo = acc;
        });
    }

    let mut dweight = Tensor::zeros(p.weight.shape());
    dweight
        .data_mut()
        .par_chunks_mut(k * k)
        .enumerate()
        .for_each(|(pair, dwk)| {
            let (c, o) = (pair / co, pair % co);
            for kr in 0..k {
                let ty = kr as isize - pad;
                let (ylo, yhi) = scatter_range(h, s, ty, oh);
                for kc in 0..k {
                    let tx = kc as isize - pad;
                    let (xlo, xhi) = scatter_range(w, s, tx, ow);
                    let mut acc = E::zero();
                    for ni in 0..n {
                        let xplane = &xdata[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                        let dyplane = &dydata[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
                        for iy in ylo..yhi {
                            let oy = (iy * s) as isize + ty;
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            let dyrow = &dyplane[oy as usize * ow..(oy as usize + 1) * ow];
                            for ix in xlo..xhi {
                                let ox = (ix * s) as isize + tx;
                                acc = acc + xrow[ix] * dyrow[ox as usize];
                            }
                        }
                    }
                    dwk[kr * k + kc] = acc;
                }
            }
        });

    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dxplane)| {
            let (ni, c) = (plane / ci, plane % ci);
            for o in 0..co {
                let dyplane = &dydata[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
                let wbase = ((c * co + o) * k) * k;
                for kr in 0..k {
                    let ty = kr as isize - pad;
                    let (ylo, yhi) = scatter_range(h, s, ty, oh);
                    for kc in 0..k {
                        let wv = weight[wbase + kr * k + kc];
                        let tx = kc as isize - pad;
                        let (xlo, xhi) = scatter_range(w, s, tx, ow);
                        for iy in ylo..yhi {
                            let oy = (iy * s) as isize + ty;
                            let dxrow = &mut dxplane[iy * w..(iy + 1) * w];
                            let dyrow = &dyplane[oy as usize * ow..(oy as usize + 1) * ow];
                            for ix in xlo..xhi {
                                let ox = (ix * s) as isize + tx;
                                dxrow[ix] = dxrow[ix] + wv * dyrow[ox as usize];
                            }
                        }
                    }
                }
            }
        });

    Ok((dx, dweight, dbias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent loop-nest oracle: seven plain loops, accumulation in
    /// (c_in, kernel row, kernel column) order starting at the bias.
    pub(crate) fn conv2d_oracle(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let Shape { n, c: ci, h, w } = x.shape();
        let (oh, ow) = p.out_dims(h, w).unwrap();
        let co = p.c_out();
        let k = p.kernel();
        let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
        for ni in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[o];
                        for c in 0..ci {
                            for kr in 0..k {
                                for kc in 0..k {
                                    let iy = (oy * p.stride + kr * p.dilation) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kc * p.dilation) as isize - p.padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += p.weight.at(o, c, kr, kc) * x.at(ni, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(ni, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::new(Shape::new(1, 1, 1, 1), vec![2.0f64]).unwrap();
        let w = Tensor::new(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let p = ConvParams::new(w, b, 1, 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 5, 7));
        let mut w = Tensor::zeros(Shape::new(3, 3, 3, 3));
        for c in 0..3 {
            w.set(c, c, 1, 1, 1.0);
        }
        let p = ConvParams::new(w, Tensor::zeros(Shape::new(1, 3, 1, 1)), 1, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_loop_nest_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // The spec's pinned case first: 1x2x5x5 input, k=3, s=2, d=2.
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 5, 5));
        let w = rand_tensor(&mut rng, Shape::new(3, 2, 3, 3));
        let b = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1));
        let p = ConvParams::new(w, b, 2, 2, 2).unwrap();
        let got = conv2d(&x, &p).unwrap();
        let want = conv2d_oracle(&x, &p);
        assert_eq!(got.shape(), want.shape());
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn matches_oracle_across_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let k = [1usize, 3, 5][rng.gen_range(0..3)];
            let s = rng.gen_range(1..=3);
            let d = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=d * (k - 1) / 2 + 1);
            let h = rng.gen_range(k.max(3)..=9);
            let w = rng.gen_range(k.max(3)..=9);
            let ci = rng.gen_range(1..=3);
            let co = rng.gen_range(1..=3);
            let batch = rng.gen_range(1..=2);
            let x = rand_tensor(&mut rng, Shape::new(batch, ci, h, w));
            let wt = rand_tensor(&mut rng, Shape::new(co, ci, k, k));
            let b = rand_tensor(&mut rng, Shape::new(1, co, 1, 1));
            let p = match ConvParams::new(wt, b, s, d, pad) {
                Ok(p) => p,
                Err(_) => continue,
            };
            if p.out_dims(h, w).is_err() {
                continue;
            }
            let got = conv2d(&x, &p).unwrap();
            let want = conv2d_oracle(&x, &p);
            assert_eq!(got.data(), want.data(), "k={k} s={s} d={d} pad={pad} h={h} w={w}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4));
        let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3));
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1));
        let p = ConvParams::new(w, b, 1, 1, 1).unwrap();
        let dy = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let (dx, dw, db) = conv2d_grad(&x, &p, &dy).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(dw.iter().all(|&v| v == 0.0));
        assert!(db.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_chain_rule() {
        // k=1, s=1, one pixel: dx = w^T dy, dw = x dy.
        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![2.0f64, 3.0]).unwrap();
        let w = Tensor::new(Shape::new(1, 2, 1, 1), vec![5.0, 7.0]).unwrap();
        let p = ConvParams::new(w, Tensor::zeros(Shape::new(1, 1, 1, 1)), 1, 1, 0).unwrap();
        let dy = Tensor::new(Shape::new(1, 1, 1, 1), vec![10.0]).unwrap();
        let (dx, dw, db) = conv2d_grad(&x, &p, &dy).unwrap();
        assert_eq!(dx.data(), &[50.0, 70.0]);
        assert_eq!(dw.data(), &[20.0, 30.0]);
        assert_eq!(db.data(), &[10.0]);
    }

    #[test]
    fn transpose_doubles_dims_and_scatters_kernel() {
        for k in [3usize, 5, 7] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let w = rand_tensor(&mut rng, Shape::new(1, 1, k, k));
            let p = ConvTransposeParams::doubling(w.clone(), Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
            // Delta at (2, 2) of a 6x6 input.
            let mut x = Tensor::zeros(Shape::new(1, 1, 6, 6));
            x.set(0, 0, 2, 2, 1.0);
            let y = conv_transpose2d(&x, &p).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 1, 12, 12), "k={k}");
            // Scatter oracle: output pixel (2*2 - pad + kr, 2*2 - pad + kc) = w[kr][kc].
            let pad = (k - 1) / 2;
            let mut want = Tensor::zeros(Shape::new(1, 1, 12, 12));
            for kr in 0..k {
                for kc in 0..k {
                    let oy = (4 + kr) as isize - pad as isize;
                    let ox = (4 + kc) as isize - pad as isize;
                    if oy >= 0 && oy < 12 && ox >= 0 && ox < 12 {
                        want.set(0, 0, oy as usize, ox as usize, w.at(0, 0, kr, kc));
                    }
                }
            }
            assert_eq!(y.data(), want.data(), "k={k}");
        }
    }
}
