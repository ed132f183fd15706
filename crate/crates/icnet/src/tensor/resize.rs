use rayon::prelude::*;

use super::{Element, Shape, Tensor};
use crate::error::Result;

/// Per-axis sampling plan for corner-aligned bilinear interpolation:
/// `src = dst * (in - 1) / (out - 1)`, or 0 when `out == 1`.
fn axis_plan<E: Element>(in_len: usize, out_len: usize) -> Vec<(usize, usize, E)> {
    (0..out_len)
        .map(|o| {
            if out_len == 1 || in_len == 1 {
                return (0, 0, E::zero());
            }
            let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let i0 = src.floor() as usize;
            let i0 = i0.min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, E::from_f64(src - i0 as f64))
        })
        .collect()
}

/// Corner-aligned bilinear resize. Resizing to the same dims is an exact
/// passthrough; linear ramps are reproduced exactly.
pub fn bilinear_resize<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let Shape { n, c, h, w } = x.shape();
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    // Constructing the output tensor validates out dims >= 1.
    let ys = axis_plan::<E>(h, out_h);
    let xs = axis_plan::<E>(w, out_w);
    let xdata = x.data();
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(plane, oplane)| {
            let xplane = &xdata[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let top = &xplane[y0 * w..y0 * w + w];
                let bot = &xplane[y1 * w..y1 * w + w];
                let orow = &mut oplane[oy * out_w..(oy + 1) * out_w];
                for (ov, &(x0, x1, wx)) in orow.iter_mut().zip(&xs) {
                    let one = E::one();
                    let t = (one - wx) * top[x0] + wx * top[x1];
                    let b = (one - wx) * bot[x0] + wx * bot[x1];
                    *ov = (one - wy) * t + wy * b;
                }
            }
        });
    Ok(out)
}

/// Gradient of [`bilinear_resize`]: the transpose of the interpolation,
/// scattering each output gradient onto its (up to) four source pixels.
pub fn bilinear_resize_grad<E: Element>(dy: &Tensor<E>, in_h: usize, in_w: usize) -> Result<Tensor<E>> {
    let Shape { n, c, h: oh, w: ow } = dy.shape();
    if oh == in_h && ow == in_w {
        return Ok(dy.clone());
    }
    let mut dx = Tensor::zeros(Shape::new(n, c, in_h, in_w));
    let ys = axis_plan::<E>(in_h, oh);
    let xs = axis_plan::<E>(in_w, ow);
    let dydata = dy.data();
    dx.data_mut()
        .par_chunks_mut(in_h * in_w)
        .enumerate()
        .for_each(|(plane, dxplane)| {
            let dyplane = &dydata[plane * oh * ow..(plane + 1) * oh * ow];
            let one = E::one();
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let dyrow = &dyplane[oy * ow..(oy + 1) * ow];
                for (&g, &(x0, x1, wx)) in dyrow.iter().zip(&xs) {
                    dxplane[y0 * in_w + x0] = dxplane[y0 * in_w + x0] + (one - wy) * (one - wx) * g;
                    dxplane[y0 * in_w + x1] = dxplane[y0 * in_w + x1] + (one - wy) * wx * g;
                    dxplane[y1 * in_w + x0] = dxplane[y1 * in_w + x0] + wy * (one - wx) * g;
                    dxplane[y1 * in_w + x1] = dxplane[y1 * in_w + x1] + wy * wx * g;
                }
            }
        });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::filled(Shape::new(1, 2, 3, 3), 4.25);
        let y = bilinear_resize(&x, 7, 5).unwrap();
        assert!(y.iter().all(|&v| v == 4.25));
        let z = bilinear_resize(&y, 3, 3).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn ramp_is_exact() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0f64, 1.0, 2.0]).unwrap();
        let y = bilinear_resize(&x, 1, 5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn same_dims_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let y = bilinear_resize(&x, 4, 5).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_per_pixel_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let y = bilinear_resize(&x, 8, 8).unwrap();
        for oy in 0..8 {
            for ox in 0..8 {
                let sy = oy as f64 * 3.0 / 7.0;
                let sx = ox as f64 * 3.0 / 7.0;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let want = (1.0 - fy) * ((1.0 - fx) * x.at(0, 0, y0, x0) + fx * x.at(0, 0, y0, x1))
                    + fy * ((1.0 - fx) * x.at(0, 0, y1, x0) + fx * x.at(0, 0, y1, x1));
                let got = y.at(0, 0, oy, ox);
                assert!((got - want).abs() < 1e-12, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn down_then_up_constant_identity() {
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 8, 8), -2.5);
        let d = bilinear_resize(&x, 4, 4).unwrap();
        let u = bilinear_resize(&d, 8, 8).unwrap();
        assert_eq!(u.data(), x.data());
    }
}
