//! Deterministic synthetic segmentation scenes and the dataset directory
//! layout (`images/%06d.ppm`, `labels/%06d.pgm`, `manifest.txt`).
//!
//! Scenes are drawn back to front with class-correlated colors over a dark
//! background: large rectangles, disks, thin poles (1-3 px wide) and small
//! blobs, plus one guaranteed instance per class inside disjoint strips so
//! every requested class is present with probability 1. All placement
//! arithmetic is integer, so equal seeds give bitwise-equal scenes on any
//! platform.

mod pnm;

pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{Element, Shape, Tensor};

/// Scene recipe: dims, class count, per-category shape counts, seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub rectangles: usize,
    pub disks: usize,
    pub poles: usize,
    pub blobs: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 96,
            width: 96,
            num_classes: 5,
            rectangles: 3,
            disks: 3,
            poles: 2,
            blobs: 3,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::data(format!(
                "scene dims {}x{} must be divisible by 32",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::data("num_classes must be in 2..=254"));
        }
        if (self.num_classes - 1) * 6 > self.width - 2 {
            return Err(Error::data(format!(
                "width {} too small to guarantee {} object classes (needs >= {})",
                self.width,
                self.num_classes - 1,
                (self.num_classes - 1) * 6 + 2
            )));
        }
        Ok(())
    }

    /// Recipe for scene `index` of a dataset: same geometry, derived seed.
    pub fn for_index(&self, index: usize) -> SceneSpec {
        // SplitMix64 step over (seed, index) keeps per-scene streams
        // independent and platform-stable.
        let mut z = self
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        SceneSpec { seed: z ^ (z >> 31), ..self.clone() }
    }
}

/// Fixed palette; class colors cycle through it (background uses index 0).
const PALETTE: [[i32; 3]; 11] = [
    [40, 40, 46],
    [200, 60, 60],
    [70, 160, 220],
    [240, 210, 70],
    [90, 200, 110],
    [180, 90, 200],
    [230, 140, 50],
    [120, 220, 210],
    [160, 160, 90],
    [220, 100, 160],
    [100, 110, 230],
];

fn class_color(class: u8) -> [i32; 3] {
    if class == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + ((class as usize - 1) % (PALETTE.len() - 1))]
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[i32; 3]>,
    label: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: i64, x: i64, color: [i32; 3], class: u8) {
        // A 1-px border stays background so class 0 is always present.
        if y < 1 || x < 1 || y as usize >= self.h - 1 || x as usize >= self.w - 1 {
            return;
        }
        let i = y as usize * self.w + x as usize;
        self.rgb[i] = color;
        self.label[i] = class;
    }

    fn rect(&mut self, y0: i64, x0: i64, rh: i64, rw: i64, color: [i32; 3], class: u8) {
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                self.paint(y, x, color, class);
            }
        }
    }

    fn disk(&mut self, cy: i64, cx: i64, r: i64, color: [i32; 3], class: u8) {
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                    self.paint(y, x, color, class);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [i32; 3]) -> [i32; 3] {
    let d = rng.gen_range(-15..=15);
    [base[0] + d, base[1] + d, base[2] + d]
}

/// Class of the `j`-th random shape of category `cat` (0 rect, 1 disk,
/// 2 pole, 3 blob): categories map onto object classes, cycling when there
/// are fewer classes than categories.
fn shape_class(num_classes: usize, cat: usize, j: usize) -> u8 {
    (1 + (cat + 4 * j) % (num_classes - 1)) as u8
}

fn draw_pole(c: &mut Canvas, rng: &mut ChaCha8Rng, class: u8) {
    let color = jitter(rng, class_color(class));
    let thickness = rng.gen_range(1..=3i64);
    if rng.gen_bool(0.5) {
        let len = rng.gen_range((c.h as i64 * 2) / 5..=(c.h as i64 * 9) / 10);
        let y0 = rng.gen_range(1..(c.h as i64 - 1).max(2));
        let x0 = rng.gen_range(1..(c.w as i64 - 1).max(2));
        c.rect(y0, x0, len, thickness, color, class);
    } else {
        let len = rng.gen_range((c.w as i64 * 2) / 5..=(c.w as i64 * 9) / 10);
        let y0 = rng.gen_range(1..(c.h as i64 - 1).max(2));
        let x0 = rng.gen_range(1..(c.w as i64 - 1).max(2));
        c.rect(y0, x0, thickness, len, color, class);
    }
}

/// Deterministic synthetic scene: `(1, 3, h, w)` image in [0, 1] and its
/// label map.
pub fn gen_synthetic_scene<E: Element>(spec: &SceneSpec) -> Result<(Tensor<E>, LabelMap)> {
    spec.validate()?;
    let (h, w, n) = (spec.height, spec.width, spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![class_color(0); h * w],
        label: vec![0u8; h * w],
    };

    // Random shapes, back to front by category.
    for j in 0..spec.rectangles {
        let class = shape_class(n, 0, j);
        let color = jitter(&mut rng, class_color(class));
        let rh = rng.gen_range(h as i64 / 5..=(h as i64 * 9) / 20);
        let rw = rng.gen_range(w as i64 / 5..=(w as i64 * 9) / 20);
        let y0 = rng.gen_range(1..(h as i64 - 1).max(2));
        let x0 = rng.gen_range(1..(w as i64 - 1).max(2));
        canvas.rect(y0, x0, rh, rw, color, class);
    }
    for j in 0..spec.disks {
        let class = shape_class(n, 1, j);
        let color = jitter(&mut rng, class_color(class));
        let r = rng.gen_range((h.min(w) as i64) / 12..=(h.min(w) as i64 * 9) / 50);
        let cy = rng.gen_range(1..(h as i64 - 1).max(2));
        let cx = rng.gen_range(1..(w as i64 - 1).max(2));
        canvas.disk(cy, cx, r, color, class);
    }
    // At least one thin pole per scene, so small-region analysis always has
    // material.
    for j in 0..spec.poles.max(1) {
        draw_pole(&mut canvas, &mut rng, shape_class(n, 2, j));
    }
    for j in 0..spec.blobs {
        let class = shape_class(n, 3, j);
        let color = jitter(&mut rng, class_color(class));
        // Area capped below 0.5% of the scene.
        let cap = ((h * w) / 200).max(4) as i64;
        let bh = rng.gen_range(2..=6i64.min(cap / 2));
        let bw = rng.gen_range(2..=(cap / bh).min(6)).max(1);
        let y0 = rng.gen_range(1..(h as i64 - 1).max(2));
        let x0 = rng.gen_range(1..(w as i64 - 1).max(2));
        canvas.rect(y0, x0, bh, bw, color, class);
    }

    // One guaranteed shape per object class, each in its own strip, drawn
    // last (topmost). Categories rotate: rect, disk, pole, blob.
    let strips = n - 1;
    let strip_w = (w - 2) / strips;
    for class in 1..n as u8 {
        let cat = (class as usize - 1) % 4;
        let color = jitter(&mut rng, class_color(class));
        let x_lo = 1 + (class as usize - 1) * strip_w;
        let cx = x_lo as i64 + rng.gen_range(2..strip_w.max(3) as i64 - 1);
        let cy = rng.gen_range(4..(h as i64 - 4).max(5));
        match cat {
            0 => canvas.rect(cy - 3, cx - 3, 6, 6.min(strip_w as i64 - 2), color, class),
            1 => canvas.disk(cy, cx, 3.min(strip_w as i64 / 2 - 1).max(1), color, class),
            2 => {
                let len = rng.gen_range(h as i64 / 3..=(h as i64 * 2) / 3);
                canvas.rect(cy - len / 2, cx, len, rng.gen_range(1..=2), color, class);
            }
            _ => canvas.rect(cy - 1, cx - 1, 3, 3.min(strip_w as i64 - 2), color, class),
        }
    }

    // Seeded per-pixel noise, +-10 per channel on the 0..255 scale.
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = canvas.rgb[y * w + x];
            for ch in 0..3 {
                let noise = rng.gen_range(-10..=10i32);
                let v = (base[ch] + noise).clamp(0, 255);
                image.set(0, ch, y, x, E::from_f64(v as f64 / 255.0));
            }
        }
    }
    let label = LabelMap::new(h, w, canvas.label)?;
    Ok((image, label))
}

/// An in-memory dataset of scenes.
pub struct Dataset<E: Element> {
    pub images: Vec<Tensor<E>>,
    pub labels: Vec<LabelMap>,
    pub num_classes: usize,
}

impl<E: Element> Dataset<E> {
    pub fn len(&self) -> usize {
        self.images.len()
    }
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Generate `count` scenes from per-index derived seeds.
    pub fn synthetic(spec: &SceneSpec, count: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let (img, lbl) = gen_synthetic_scene(&spec.for_index(i))?;
            images.push(img);
            labels.push(lbl);
        }
        Ok(Dataset { images, labels, num_classes: spec.num_classes })
    }
}

/// Write a dataset under `dir` in the standard layout.
pub fn write_dataset<E: Element>(dir: &Path, ds: &Dataset<E>) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::new();
    for (i, (img, lbl)) in ds.images.iter().zip(&ds.labels).enumerate() {
        write_ppm(&dir.join(format!("images/{i:06}.ppm")), img)?;
        write_pgm(&dir.join(format!("labels/{i:06}.pgm")), lbl)?;
        let (h, w) = lbl.dims();
        manifest.push_str(&format!("{i:06} {w} {h}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`], validating every
/// image/label pair.
pub fn load_dataset<E: Element>(dir: &Path, num_classes: usize) -> Result<Dataset<E>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::data(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (id, w, h) = match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(w), Some(h)) => {
                let w: usize = w.parse().map_err(|_| Error::data(format!("manifest line {}: bad width", lineno + 1)))?;
                let h: usize = h.parse().map_err(|_| Error::data(format!("manifest line {}: bad height", lineno + 1)))?;
                (id, w, h)
            }
            _ => return Err(Error::data(format!("manifest line {}: expected `id width height`", lineno + 1))),
        };
        let img = read_ppm::<E>(&dir.join(format!("images/{id}.ppm")))?;
        let lbl = read_pgm(&dir.join(format!("labels/{id}.pgm")), num_classes)?;
        if img.shape().spatial() != lbl.dims() || lbl.dims() != (h, w) {
            return Err(Error::data(format!(
                "sample {id}: image dims {:?}, label dims {:?}, manifest says {}x{}",
                img.shape().spatial(),
                lbl.dims(),
                h,
                w
            )));
        }
        images.push(img);
        labels.push(lbl);
    }
    if images.is_empty() {
        return Err(Error::data(format!("dataset in {} is empty", dir.display())));
    }
    Ok(Dataset { images, labels, num_classes })
}
