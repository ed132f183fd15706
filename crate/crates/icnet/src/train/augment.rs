//! Sample augmentation: random resize in [resize_min, resize_max] (bilinear
//! for images, nearest for labels), horizontal mirror, then a random crop to
//! the training size, padding with the mean pixel / ignore label when the
//! resized sample is smaller than the crop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE};
use crate::tensor::{bilinear_resize, Element, Shape, Tensor};

/// Concrete augmentation decisions for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugParams {
    pub factor: f64,
    pub mirror: bool,
    pub crop_y: usize,
    pub crop_x: usize,
}

/// Horizontal mirror of an image tensor.
fn mirror_image<E: Element>(img: &Tensor<E>) -> Tensor<E> {
    let Shape { n, c, h, w } = img.shape();
    Tensor::from_fn(Shape::new(n, c, h, w), |ni, ci, y, x| img.at(ni, ci, y, w - 1 - x))
}

/// Apply fixed augmentation decisions. `crop_y`/`crop_x` are offsets into
/// the resized (and possibly mirrored) sample; axes smaller than the crop
/// are padded instead.
pub fn augment_with<E: Element>(
    image: &Tensor<E>,
    label: &LabelMap,
    crop: usize,
    p: &AugParams,
) -> Result<(Tensor<E>, LabelMap)> {
    let Shape { h, w, .. } = image.shape();
    if (h, w) != label.dims() {
        return Err(Error::shape("augment: image and label dims differ"));
    }
    let nh = ((h as f64 * p.factor).round() as usize).max(1);
    let nw = ((w as f64 * p.factor).round() as usize).max(1);
    let mut img = bilinear_resize(image, nh, nw)?;
    let mut lbl = label.resize_nearest(nh, nw);
    if p.mirror {
        img = mirror_image(&img);
        lbl = lbl.mirror();
    }

    // Mean pixel per channel, used as padding.
    let mean: Vec<E> = (0..3)
        .map(|c| {
            let plane = img.plane(0, c);
            let mut acc = E::zero();
            for &v in plane {
                acc = acc + v;
            }
            acc / E::from_f64(plane.len() as f64)
        })
        .collect();

    let mut out_img = Tensor::zeros(Shape::new(1, 3, crop, crop));
    for c in 0..3 {
        for y in 0..crop {
            for x in 0..crop {
                let i = out_img.idx(0, c, y, x);
                out_img.data_mut()[i] = mean[c];
            }
        }
    }
    let mut out_lbl = LabelMap::filled(crop, crop, IGNORE);

    let (oy, ox) = (p.crop_y.min(nh.saturating_sub(crop)), p.crop_x.min(nw.saturating_sub(crop)));
    let copy_h = crop.min(nh);
    let copy_w = crop.min(nw);
    for c in 0..3 {
        for y in 0..copy_h {
            for x in 0..copy_w {
                let v = img.at(0, c, oy + y, ox + x);
                out_img.set(0, c, y, x, v);
            }
        }
    }
    for y in 0..copy_h {
        for x in 0..copy_w {
            out_lbl.set(y, x, lbl.at(oy + y, ox + x));
        }
    }
    Ok((out_img, out_lbl))
}

/// Sample augmentation decisions from the rng and apply them. The draw
/// order (factor, mirror, crop offsets) is fixed for determinism.
pub fn augment_sample<E: Element>(
    image: &Tensor<E>,
    label: &LabelMap,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<E>, LabelMap)> {
    let factor = rng.gen_range(cfg.resize_min..=cfg.resize_max);
    let mirror = rng.gen_bool(cfg.mirror_prob);
    let Shape { h, w, .. } = image.shape();
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    let crop_y = rng.gen_range(0..=nh.saturating_sub(cfg.crop));
    let crop_x = rng.gen_range(0..=nw.saturating_sub(cfg.crop));
    augment_with(image, label, cfg.crop, &AugParams { factor, mirror, crop_y, crop_x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_scene, SceneSpec};
    use rand::SeedableRng;

    fn scene() -> (Tensor<f32>, LabelMap) {
        gen_synthetic_scene(&SceneSpec { height: 64, width: 64, ..Default::default() }).unwrap()
    }

    #[test]
    fn forced_double_mirror_is_identity() {
        let (img, lbl) = scene();
        let p = AugParams { factor: 1.0, mirror: true, crop_y: 0, crop_x: 0 };
        let (i1, l1) = augment_with(&img, &lbl, 64, &p).unwrap();
        let (i2, l2) = augment_with(&i1, &l1, 64, &p).unwrap();
        assert_eq!(i2.data(), img.data());
        assert_eq!(l2, lbl);
    }

    #[test]
    fn identity_params_are_identity() {
        let (img, lbl) = scene();
        let p = AugParams { factor: 1.0, mirror: false, crop_y: 0, crop_x: 0 };
        let (i, l) = augment_with(&img, &lbl, 64, &p).unwrap();
        assert_eq!(i.data(), img.data());
        assert_eq!(l, lbl);
    }

    #[test]
    fn augmentation_never_invents_classes() {
        let (img, lbl) = scene();
        let mut allowed = lbl.classes();
        allowed.push(IGNORE);
        let cfg = TrainConfig { crop: 32, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (_, out) = augment_sample(&img, &lbl, &cfg, &mut rng).unwrap();
            for v in out.classes() {
                assert!(allowed.contains(&v), "class {v} appeared from augmentation");
            }
        }
    }

    #[test]
    fn small_factor_pads_with_ignore() {
        let (img, lbl) = scene();
        let p = AugParams { factor: 0.5, mirror: false, crop_y: 0, crop_x: 0 };
        let (out_img, out_lbl) = augment_with(&img, &lbl, 64, &p).unwrap();
        assert_eq!(out_img.shape(), Shape::new(1, 3, 64, 64));
        // Bottom-right quadrant is padding.
        assert_eq!(out_lbl.at(63, 63), IGNORE);
        assert_ne!(out_lbl.at(0, 0), IGNORE);
    }
}
