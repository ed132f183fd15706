//! Phase timing probe; run explicitly with
//! `cargo test -p icnet --test perf_probe -- --ignored --nocapture`.

use icnet::arch::{build_icnet, IcnetConfig, MacCounter};
use icnet::data::{Dataset, SceneSpec};
use icnet::label::IGNORE;
use icnet::tensor::{Shape, Tensor};
use icnet::train::{augment_sample, SgdState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn phase_timing() {
    let cfg = IcnetConfig::default();
    let tc = TrainConfig::default();
    let mut model = build_icnet::<f32>(&cfg, 1).unwrap();
    let ds = Dataset::<f32>::synthetic(&SceneSpec::default(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let reps = 10;
    let mut t_aug = 0.0;
    let mut t_fwd = 0.0;
    let mut t_loss = 0.0;
    let mut t_bwd = 0.0;
    let mut t_sgd = 0.0;
    let mut sgd = SgdState::new();

    for _ in 0..reps {
        let t0 = Instant::now();
        let mut images = Tensor::zeros(Shape::new(tc.batch, 3, 96, 96));
        let mut labels = Vec::new();
        for b in 0..tc.batch {
            let idx = rng.gen_range(0..ds.len());
            let (img, lbl) = augment_sample(&ds.images[idx], &ds.labels[idx], &tc, &mut rng).unwrap();
            let plane = 3 * 96 * 96;
            images.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(img.data());
            labels.push(lbl);
        }
        t_aug += t0.elapsed().as_secs_f64();

        model.zero_grad();
        let t0 = Instant::now();
        let (out, trace) = model.forward_train(&images, &mut MacCounter::off()).unwrap();
        t_fwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let (_, [d16, d8, d4]) = model
            .cascade_loss(&out, &labels, cfg.effective_lambda(), IGNORE)
            .unwrap();
        t_loss += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        model
            .backward(&trace, d16.as_ref(), d8.as_ref(), d4.as_ref().unwrap())
            .unwrap();
        t_bwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        sgd.step(&mut model, 0.01, &tc).unwrap();
        t_sgd += t0.elapsed().as_secs_f64();
    }
    let scale = 1000.0 / reps as f64;
    println!(
        "aug {:.0}ms fwd {:.0}ms loss {:.0}ms bwd {:.0}ms sgd {:.0}ms total {:.0}ms",
        t_aug * scale,
        t_fwd * scale,
        t_loss * scale,
        t_bwd * scale,
        t_sgd * scale,
        (t_aug + t_fwd + t_loss + t_bwd + t_sgd) * scale
    );
}
