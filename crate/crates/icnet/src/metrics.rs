//! Segmentation quality metrics: confusion matrix and mIoU, connected
//! components over label maps, and the region-size accuracy histogram used
//! to study where multi-branch refinement helps.

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE};

/// Class confusion counts; rows are ground truth, columns prediction.
/// Ignored ground-truth pixels are excluded. Accumulation across images is
/// plain addition, so dataset metrics come from summing matrices.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { n: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.dims() != pred.dims() {
            return Err(Error::shape(format!(
                "confusion update: gt dims {:?} vs pred dims {:?}",
                gt.dims(),
                pred.dims()
            )));
        }
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= self.n || (p != IGNORE && p as usize >= self.n) {
                return Err(Error::data(format!(
                    "confusion update: label {g}/{p} out of range for {} classes",
                    self.n
                )));
            }
            if p == IGNORE {
                return Err(Error::data("prediction contains the ignore value"));
            }
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class intersection over union and their mean. Classes absent from
/// both ground truth and prediction (zero union) are excluded from the mean.
#[derive(Debug, Clone)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou_from_confusion(cm: &ConfusionMatrix) -> MiouResult {
    let n = cm.num_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n {
        let tp = cm.at(c, c);
        let fp: u64 = (0..n).filter(|&g| g != c).map(|g| cm.at(g, c)).sum();
        let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| cm.at(c, p)).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    MiouResult {
        per_class,
        mean: if present == 0 { 0.0 } else { sum / present as f64 },
    }
}

/// mIoU of a single prediction against ground truth.
pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<MiouResult> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.update(gt, pred)?;
    Ok(miou_from_confusion(&cm))
}

/// Pixel connectivity for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "4" => Some(Connectivity::Four),
            "8" => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

/// Connected components of same-class pixels. Ignored pixels form no
/// region (id -1). Region ids are assigned in first-visit row-major order.
#[derive(Debug, Clone)]
pub struct Components {
    pub ids: Vec<i32>,
    pub sizes: Vec<u32>,
    pub width: usize,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect() }
    }
    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let p = self.parent[i as usize];
            self.parent[i as usize] = self.parent[p as usize];
            i = self.parent[i as usize];
        }
        i
    }
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins, keeping roots at the earliest pixel.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Union-find component labeling (row scan, merging left and up neighbors;
/// for 8-connectivity also the two upper diagonals).
pub fn connected_components(label: &LabelMap, connectivity: Connectivity) -> Components {
    let (h, w) = label.dims();
    let data = label.data();
    let mut uf = UnionFind::new(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = data[i];
            if v == IGNORE {
                continue;
            }
            if x > 0 && data[i - 1] == v {
                uf.union(i as u32, (i - 1) as u32);
            }
            if y > 0 && data[i - w] == v {
                uf.union(i as u32, (i - w) as u32);
            }
            if connectivity == Connectivity::Eight && y > 0 {
                if x > 0 && data[i - w - 1] == v {
                    uf.union(i as u32, (i - w - 1) as u32);
                }
                if x + 1 < w && data[i - w + 1] == v {
                    uf.union(i as u32, (i - w + 1) as u32);
                }
            }
        }
    }
    // Relabel roots by first visit in row-major order.
    let mut ids = vec![-1i32; h * w];
    let mut sizes: Vec<u32> = Vec::new();
    let mut root_to_id = vec![-1i32; h * w];
    for i in 0..h * w {
        if data[i] == IGNORE {
            continue;
        }
        let r = uf.find(i as u32) as usize;
        if root_to_id[r] < 0 {
            root_to_id[r] = sizes.len() as i32;
            sizes.push(0);
        }
        let id = root_to_id[r];
        ids[i] = id;
        sizes[id as usize] += 1;
    }
    Components { ids, sizes, width: w }
}

/// Where the regions of the accuracy histogram come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionSource {
    /// Regions from the ground-truth map; per-region accuracy becomes a
    /// recall-style measure (the default).
    Gt,
    /// Regions from the prediction map.
    Pred,
}

impl RegionSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gt" => Some(RegionSource::Gt),
            "pred" => Some(RegionSource::Pred),
            _ => None,
        }
    }
}

/// Histogram of mean per-region accuracy, binned by region size: a region
/// of `S` pixels lands in bin `ceil(S / K) - 1`; regions above `B * K`
/// pixels are ignored.
#[derive(Debug, Clone)]
pub struct RegionHistogram {
    pub bins: usize,
    pub interval: usize,
    pub acc_sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl RegionHistogram {
    pub fn new(bins: usize, interval: usize) -> Self {
        RegionHistogram {
            bins,
            interval,
            acc_sum: vec![0.0; bins],
            count: vec![0; bins],
        }
    }

    /// Accumulate regions of one (gt, pred) pair.
    pub fn update(
        &mut self,
        gt: &LabelMap,
        pred: &LabelMap,
        source: RegionSource,
        connectivity: Connectivity,
    ) -> Result<()> {
        if gt.dims() != pred.dims() {
            return Err(Error::shape("region histogram: dims mismatch"));
        }
        let source_map = match source {
            RegionSource::Gt => gt,
            RegionSource::Pred => pred,
        };
        let comps = connected_components(source_map, connectivity);
        let mut correct = vec![0u32; comps.sizes.len()];
        for (i, &id) in comps.ids.iter().enumerate() {
            if id >= 0 && gt.data()[i] != IGNORE && gt.data()[i] == pred.data()[i] {
                correct[id as usize] += 1;
            }
        }
        for (rid, &size) in comps.sizes.iter().enumerate() {
            let s = size as usize;
            if s == 0 || s > self.bins * self.interval {
                continue;
            }
            let bin = s.div_ceil(self.interval) - 1;
            self.acc_sum[bin] += correct[rid] as f64 / s as f64;
            self.count[bin] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RegionHistogram) {
        assert_eq!(self.bins, other.bins);
        assert_eq!(self.interval, other.interval);
        for i in 0..self.bins {
            self.acc_sum[i] += other.acc_sum[i];
            self.count[i] += other.count[i];
        }
    }

    /// Mean accuracy per bin; empty bins are `None`, never 0.
    pub fn mean_acc(&self) -> Vec<Option<f64>> {
        (0..self.bins)
            .map(|i| {
                if self.count[i] == 0 {
                    None
                } else {
                    Some(self.acc_sum[i] / self.count[i] as f64)
                }
            })
            .collect()
    }

    /// Per-bin accuracy difference `self - other` where both are populated.
    pub fn diff(&self, other: &RegionHistogram) -> Vec<Option<f64>> {
        self.mean_acc()
            .iter()
            .zip(other.mean_acc())
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            })
            .collect()
    }

    /// CSV rows `bin,lo,hi,count,mean_acc` (mean empty for empty bins).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lo,hi,count,mean_acc\n");
        for (i, acc) in self.mean_acc().iter().enumerate() {
            let lo = i * self.interval + 1;
            let hi = (i + 1) * self.interval;
            match acc {
                Some(a) => out.push_str(&format!("{i},{lo},{hi},{},{a:.6}\n", self.count[i])),
                None => out.push_str(&format!("{i},{lo},{hi},0,\n")),
            }
        }
        out
    }
}

/// Metrics CSV: one `class,iou` row per class plus an `mIoU` footer.
pub fn miou_csv(r: &MiouResult) -> String {
    let mut out = String::from("class,iou\n");
    for (c, iou) in r.per_class.iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("{c},{v:.6}\n")),
            None => out.push_str(&format!("{c},\n")),
        }
    }
    out.push_str(&format!("mIoU,{:.6}\n", r.mean));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8, ignore_p: f64) -> LabelMap {
        LabelMap::new(
            h,
            w,
            (0..h * w)
                .map(|_| if rng.gen_bool(ignore_p) { IGNORE } else { rng.gen_range(0..classes) })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = rand_map(&mut rng, 8, 8, 3, 0.1);
        let r = miou(&gt, &gt, 3).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn half_half_vs_all_zero_gives_quarter() {
        let mut data = vec![0u8; 64];
        data[32..].fill(1);
        let gt = LabelMap::new(8, 8, data).unwrap();
        let pred = LabelMap::filled(8, 8, 0);
        let r = miou(&pred, &gt, 2).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
        assert_eq!(r.per_class[1], Some(0.0));
        assert_eq!(r.mean, 0.25);
    }

    /// Brute-force set-arithmetic oracle for IoU.
    fn miou_oracle(pred: &LabelMap, gt: &LabelMap, n: usize) -> Vec<Option<f64>> {
        (0..n as u8)
            .map(|c| {
                let mut inter = 0u64;
                let mut uni = 0u64;
                for (&g, &p) in gt.data().iter().zip(pred.data()) {
                    if g == IGNORE {
                        continue;
                    }
                    let in_gt = g == c;
                    let in_pred = p == c;
                    if in_gt && in_pred {
                        inter += 1;
                    }
                    if in_gt || in_pred {
                        uni += 1;
                    }
                }
                if uni == 0 {
                    None
                } else {
                    Some(inter as f64 / uni as f64)
                }
            })
            .collect()
    }

    #[test]
    fn miou_matches_set_arithmetic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let gt = rand_map(&mut rng, 8, 8, 3, 0.15);
            let pred = rand_map(&mut rng, 8, 8, 3, 0.0);
            let r = miou(&pred, &gt, 3).unwrap();
            assert_eq!(r.per_class, miou_oracle(&pred, &gt, 3));
        }
    }

    #[test]
    fn miou_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = rand_map(&mut rng, 10, 10, 4, 0.1);
        let pred = rand_map(&mut rng, 10, 10, 4, 0.0);
        let r = miou(&pred, &gt, 4).unwrap();
        // Relabel classes with the cycle 0->1->2->3->0 in both maps.
        let relabel = |m: &LabelMap| {
            LabelMap::new(
                10,
                10,
                m.data().iter().map(|&v| if v == IGNORE { v } else { (v + 1) % 4 }).collect(),
            )
            .unwrap()
        };
        let r2 = miou(&relabel(&pred), &relabel(&gt), 4).unwrap();
        assert!((r.mean - r2.mean).abs() < 1e-12);
        for c in 0..4 {
            assert_eq!(r.per_class[c], r2.per_class[(c + 1) % 4]);
        }
    }

    #[test]
    fn uniform_map_is_one_region() {
        let m = LabelMap::filled(10, 10, 2);
        let c = connected_components(&m, Connectivity::Four);
        assert_eq!(c.sizes, vec![100]);
        assert!(c.ids.iter().all(|&v| v == 0));
    }

    #[test]
    fn checkerboard_under_four_connectivity_is_all_singletons() {
        let m = LabelMap::new(6, 6, (0..36).map(|i| ((i / 6 + i % 6) % 2) as u8).collect()).unwrap();
        let c = connected_components(&m, Connectivity::Four);
        assert_eq!(c.sizes.len(), 36);
        assert!(c.sizes.iter().all(|&s| s == 1));
        // Under 8-connectivity the two colors each merge into one region.
        let c8 = connected_components(&m, Connectivity::Eight);
        assert_eq!(c8.sizes.len(), 2);
    }

    /// BFS flood-fill oracle.
    fn components_oracle(label: &LabelMap) -> Vec<u32> {
        let (h, w) = label.dims();
        let mut seen = vec![false; h * w];
        let mut sizes = Vec::new();
        for start in 0..h * w {
            if seen[start] || label.data()[start] == IGNORE {
                continue;
            }
            let v = label.data()[start];
            let mut queue = vec![start];
            seen[start] = true;
            let mut size = 0u32;
            while let Some(i) = queue.pop() {
                size += 1;
                let (y, x) = (i / w, i % w);
                let mut push = |j: usize| {
                    if !seen[j] && label.data()[j] == v {
                        seen[j] = true;
                        queue.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            sizes.push(size);
        }
        sizes
    }

    #[test]
    fn component_sizes_match_flood_fill_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = rand_map(&mut rng, 9, 11, 3, 0.1);
            let got = connected_components(&m, Connectivity::Four);
            let mut a: Vec<u32> = got.sizes.clone();
            let mut b = components_oracle(&m);
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
            // Sizes plus ignored pixels account for every pixel.
            let ignored = m.data().iter().filter(|&&v| v == IGNORE).count() as u32;
            assert_eq!(got.sizes.iter().sum::<u32>() + ignored, 99);
        }
    }

    #[test]
    fn region_ids_are_first_visit_row_major() {
        let m = LabelMap::new(2, 4, vec![0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        let c = connected_components(&m, Connectivity::Four);
        assert_eq!(c.ids[0], 0);
        assert_eq!(c.ids[1], 1);
        assert_eq!(c.ids[2], 2);
        assert_eq!(c.ids[3], 3);
    }

    #[test]
    fn perfect_prediction_fills_every_populated_bin_with_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = rand_map(&mut rng, 12, 12, 3, 0.05);
        let mut h = RegionHistogram::new(10, 20);
        h.update(&gt, &gt, RegionSource::Gt, Connectivity::Four).unwrap();
        for acc in h.mean_acc().into_iter().flatten() {
            assert_eq!(acc, 1.0);
        }
        assert!(h.count.iter().any(|&c| c > 0));
    }

    #[test]
    fn region_size_bins_follow_ceil_rule() {
        // Single region of 100 pixels with K = 3000 lands in bin 0.
        let mut gt = LabelMap::filled(20, 20, 0);
        for y in 0..10 {
            for x in 0..10 {
                gt.set(y, x, 1);
            }
        }
        let mut h = RegionHistogram::new(30, 3000);
        h.update(&gt, &gt, RegionSource::Gt, Connectivity::Four).unwrap();
        assert_eq!(h.count[0], 2, "both the 100-px region and the background land in bin 0");
        // Cap: a region above bins * interval pixels is ignored.
        let big = LabelMap::filled(20, 20, 1);
        let mut h2 = RegionHistogram::new(2, 100);
        h2.update(&big, &big, RegionSource::Gt, Connectivity::Four).unwrap();
        assert_eq!(h2.count.iter().sum::<u64>(), 0);
    }

    #[test]
    fn self_difference_is_zero_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = rand_map(&mut rng, 16, 16, 4, 0.05);
        let pred = rand_map(&mut rng, 16, 16, 4, 0.0);
        let mut h = RegionHistogram::new(8, 40);
        h.update(&gt, &pred, RegionSource::Gt, Connectivity::Four).unwrap();
        for d in h.diff(&h).into_iter().flatten() {
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn accumulation_equals_pooled_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps: Vec<(LabelMap, LabelMap)> = (0..5)
            .map(|_| (rand_map(&mut rng, 8, 8, 3, 0.1), rand_map(&mut rng, 8, 8, 3, 0.0)))
            .collect();
        let mut merged = ConfusionMatrix::new(3);
        let mut summed = ConfusionMatrix::new(3);
        for (gt, pred) in &maps {
            summed.update(gt, pred).unwrap();
            let mut one = ConfusionMatrix::new(3);
            one.update(gt, pred).unwrap();
            merged.merge(&one);
        }
        let a = miou_from_confusion(&merged);
        let b = miou_from_confusion(&summed);
        assert_eq!(a.per_class, b.per_class);

        // Region histograms accumulate the same way.
        let mut acc = RegionHistogram::new(6, 20);
        let mut parts = RegionHistogram::new(6, 20);
        for (gt, pred) in &maps {
            acc.update(gt, pred, RegionSource::Gt, Connectivity::Four).unwrap();
            let mut one = RegionHistogram::new(6, 20);
            one.update(gt, pred, RegionSource::Gt, Connectivity::Four).unwrap();
            parts.merge(&one);
        }
        assert_eq!(acc.count, parts.count);
        for (a, b) in acc.acc_sum.iter().zip(&parts.acc_sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
