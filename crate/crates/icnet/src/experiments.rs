//! Reproducible study machinery behind the `ablate` command: benchmark
//! dataset construction, whole-dataset mIoU for cascade branches and
//! baselines, and the five studies (branch, fusion, input-scale,
//! feature-stride, keep-rate), each emitting one CSV.

use std::fmt::Write as _;

use crate::arch::{
    argmax_labels, build_baseline, build_icnet, BaselineModel, BranchSet, FusionKind, IcnetConfig, IcnetModel,
    MacCounter, ProfileTarget,
};
use crate::config::RunConfig;
use crate::cost::profile_network;
use crate::data::Dataset;
use crate::error::Result;
use crate::label::LabelMap;
use crate::metrics::{miou_from_confusion, ConfusionMatrix, Connectivity, RegionHistogram, RegionSource};
use crate::prune::{prune_baseline, PruneSpec};
use crate::tensor::{bilinear_resize, Tensor};
use crate::train::{train_loop, IterRecord, TrainConfig};

/// Train/test scene splits of the synthetic benchmark. The test split seeds
/// continue after the training split so the two never overlap.
pub struct Bench {
    pub train: Dataset<f32>,
    pub test: Dataset<f32>,
}

pub fn make_bench(cfg: &RunConfig) -> Result<Bench> {
    let spec = &cfg.data.scene;
    let train = Dataset::synthetic(spec, cfg.data.train_count)?;
    let mut test_spec = spec.clone();
    test_spec.seed = spec.for_index(cfg.data.train_count + 1_000_003).seed;
    let test = Dataset::synthetic(&test_spec, cfg.data.test_count)?;
    Ok(Bench { train, test })
}

/// Train a cascade model on the split, deterministically from the seeds.
pub fn train_icnet(
    model_cfg: &IcnetConfig,
    train_cfg: &TrainConfig,
    data: &Dataset<f32>,
    build_seed: u64,
) -> Result<(IcnetModel<f32>, Vec<IterRecord>)> {
    let mut model = build_icnet::<f32>(model_cfg, build_seed)?;
    let log = train_loop(&mut model, data, train_cfg, |_, _| {})?;
    Ok((model, log))
}

pub fn train_baseline(
    model_cfg: &IcnetConfig,
    output_stride: usize,
    train_cfg: &TrainConfig,
    data: &Dataset<f32>,
    build_seed: u64,
) -> Result<(BaselineModel<f32>, Vec<IterRecord>)> {
    let mut model = build_baseline::<f32>(model_cfg, output_stride, build_seed)?;
    let log = train_loop(&mut model, data, train_cfg, |_, _| {})?;
    Ok((model, log))
}

/// Dataset mIoU of one cascade branch prefix (confusion matrices summed
/// across the split).
pub fn miou_branch(model: &IcnetModel<f32>, data: &Dataset<f32>, branches: BranchSet) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(data.num_classes);
    for (img, gt) in data.images.iter().zip(&data.labels) {
        let pred = model.predict(img, branches)?;
        cm.update(gt, &pred[0])?;
    }
    Ok(miou_from_confusion(&cm).mean)
}

/// Dataset mIoU of the baseline with inputs rescaled by `scale`; logits are
/// upsampled back to the ground-truth resolution before the argmax.
pub fn miou_baseline_at_scale(model: &BaselineModel<f32>, data: &Dataset<f32>, scale: f64) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(data.num_classes);
    for (img, gt) in data.images.iter().zip(&data.labels) {
        let (h, w) = img.shape().spatial();
        let pred = if (scale - 1.0).abs() < 1e-12 {
            predict_full(model, img, h, w)?
        } else {
            let sh = round_to(model.output_stride, h as f64 * scale);
            let sw = round_to(model.output_stride, w as f64 * scale);
            let small = bilinear_resize(img, sh, sw)?;
            predict_full(model, &small, h, w)?
        };
        cm.update(gt, &pred)?;
    }
    Ok(miou_from_confusion(&cm).mean)
}

fn round_to(multiple: usize, v: f64) -> usize {
    let m = multiple as f64;
    (((v / m).round() as usize).max(1)) * multiple
}

fn predict_full(model: &BaselineModel<f32>, img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let logits = model.forward_infer(img, &mut MacCounter::off())?;
    let up = bilinear_resize(&logits, out_h, out_w)?;
    Ok(argmax_labels(&up).remove(0))
}

/// Accumulated region-accuracy histograms of the three branch predictions.
pub fn branch_region_histograms(
    model: &IcnetModel<f32>,
    data: &Dataset<f32>,
    bins: usize,
    interval: usize,
    source: RegionSource,
    connectivity: Connectivity,
) -> Result<[RegionHistogram; 3]> {
    let mut hists = [
        RegionHistogram::new(bins, interval),
        RegionHistogram::new(bins, interval),
        RegionHistogram::new(bins, interval),
    ];
    for (img, gt) in data.images.iter().zip(&data.labels) {
        for (i, b) in [BranchSet::Sub4, BranchSet::Sub24, BranchSet::Sub124].iter().enumerate() {
            let pred = model.predict(img, *b)?;
            hists[i].update(gt, &pred[0], source, connectivity)?;
        }
    }
    Ok(hists)
}

/// One row of the branch study (Table-3-shaped).
#[derive(Debug, Clone)]
pub struct BranchRow {
    pub item: String,
    pub miou: Option<f64>,
    pub macs: u64,
    pub total_activation_elems: u64,
}

/// Branch study: mIoU of each branch prefix plus modeled cost, with the
/// full-resolution heavy baseline as the cost reference.
pub fn branch_study(model: &IcnetModel<f32>, test: &Dataset<f32>) -> Result<Vec<BranchRow>> {
    let mut rows = Vec::new();
    let baseline = build_baseline::<f32>(&model.cfg, 8, 0)?;
    let bp = profile_network(&baseline.to_network_spec(model.cfg.input_h, model.cfg.input_w))?;
    rows.push(BranchRow {
        item: "baseline".into(),
        miou: None,
        macs: bp.total_macs,
        total_activation_elems: bp.total_activation_elems,
    });
    for (branches, target) in [
        (BranchSet::Sub4, ProfileTarget::Sub4),
        (BranchSet::Sub24, ProfileTarget::Sub24),
        (BranchSet::Sub124, ProfileTarget::Sub124),
    ] {
        let p = profile_network(&model.to_network_spec(target))?;
        rows.push(BranchRow {
            item: branches.name().into(),
            miou: Some(miou_branch(model, test, branches)?),
            macs: p.total_macs,
            total_activation_elems: p.total_activation_elems,
        });
    }
    Ok(rows)
}

pub fn branch_csv(rows: &[BranchRow]) -> String {
    let mut out = String::from("item,miou,macs,total_activation_elems\n");
    for r in rows {
        let miou = r.miou.map(|m| format!("{m:.4}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.item, miou, r.macs, r.total_activation_elems);
    }
    out
}

/// One row of the fusion study (Table-4-shaped).
#[derive(Debug, Clone)]
pub struct FusionRow {
    pub variant: String,
    pub label_guidance: bool,
    pub miou: f64,
    pub fusion_path_params: usize,
}

/// Fusion study: train DC3/DC5/DC7/CFF (guidance on) and CFF with guidance
/// off, evaluating the final branch.
pub fn fusion_study(
    base_cfg: &IcnetConfig,
    train_cfg: &TrainConfig,
    bench: &Bench,
    build_seed: u64,
) -> Result<Vec<FusionRow>> {
    let mut variants: Vec<(FusionKind, bool)> = vec![
        (FusionKind::Deconv(3), true),
        (FusionKind::Deconv(5), true),
        (FusionKind::Deconv(7), true),
        (FusionKind::Cff, true),
        (FusionKind::Cff, false),
    ];
    let mut rows = Vec::new();
    for (fusion, clg) in variants.drain(..) {
        let mut cfg = base_cfg.clone();
        cfg.fusion = fusion;
        cfg.label_guidance = clg;
        let (model, _) = train_icnet(&cfg, train_cfg, &bench.train, build_seed)?;
        rows.push(FusionRow {
            variant: fusion.name(),
            label_guidance: clg,
            miou: miou_branch(&model, &bench.test, BranchSet::Sub124)?,
            fusion_path_params: model.fusion_path_param_count(),
        });
    }
    Ok(rows)
}

pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut out = String::from("variant,label_guidance,miou,fusion_path_params\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{}", r.variant, r.label_guidance, r.miou, r.fusion_path_params);
    }
    out
}

/// Input-scale study rows (downsampled-input curve).
pub fn input_scale_study(model: &BaselineModel<f32>, test: &Dataset<f32>, scales: &[f64]) -> Result<Vec<(f64, f64)>> {
    scales
        .iter()
        .map(|&s| Ok((s, miou_baseline_at_scale(model, test, s)?)))
        .collect()
}

pub fn input_scale_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("scale,miou\n");
    for (s, m) in rows {
        let _ = writeln!(out, "{s},{m:.4}");
    }
    out
}

/// Feature-stride study row: output stride, mIoU, modeled MACs.
#[derive(Debug, Clone)]
pub struct StrideRow {
    pub output_stride: usize,
    pub miou: f64,
    pub macs: u64,
}

pub fn feature_stride_csv(rows: &[StrideRow]) -> String {
    let mut out = String::from("output_stride,miou,macs\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{}", r.output_stride, r.miou, r.macs);
    }
    out
}

/// Feature-stride study: train a baseline per output stride and evaluate at
/// native resolution.
pub fn feature_stride_study(
    base_cfg: &IcnetConfig,
    train_cfg: &TrainConfig,
    bench: &Bench,
    build_seed: u64,
) -> Result<Vec<StrideRow>> {
    let mut rows = Vec::new();
    for os in [8usize, 16, 32] {
        let (model, _) = train_baseline(base_cfg, os, train_cfg, &bench.train, build_seed)?;
        let p = profile_network(&model.to_network_spec(base_cfg.input_h, base_cfg.input_w))?;
        rows.push(StrideRow {
            output_stride: os,
            miou: miou_baseline_at_scale(&model, &bench.test, 1.0)?,
            macs: p.total_macs,
        });
    }
    Ok(rows)
}

/// Keep-rate study row.
#[derive(Debug, Clone)]
pub struct KeepRateRow {
    pub rate: f64,
    pub miou: f64,
    pub macs: u64,
}

/// Keep-rate study: prune a trained baseline at each rate (one-shot, no
/// fine-tuning) and evaluate.
pub fn keep_rate_study(
    model: &BaselineModel<f32>,
    test: &Dataset<f32>,
    rates: &[f64],
) -> Result<Vec<KeepRateRow>> {
    let mut rows = Vec::new();
    for &rate in rates {
        let (pruned, report) = prune_baseline(model, &PruneSpec::uniform(rate))?;
        rows.push(KeepRateRow {
            rate,
            miou: miou_baseline_at_scale(&pruned, test, 1.0)?,
            macs: report.total_macs_after,
        });
    }
    Ok(rows)
}

pub fn keep_rate_csv(rows: &[KeepRateRow]) -> String {
    let mut out = String::from("rate,miou,macs\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{}", r.rate, r.miou, r.macs);
    }
    out
}

/// Region-gain table: per-bin accuracy of the three branch predictions and
/// the two refinement gains.
pub fn region_gain_csv(h4: &RegionHistogram, h24: &RegionHistogram, h124: &RegionHistogram) -> String {
    let mut out = String::from("bin,lo,hi,count,acc_sub4,acc_sub24,acc_sub124,gain_24_over_4,gain_124_over_24\n");
    let (a4, a24, a124) = (h4.mean_acc(), h24.mean_acc(), h124.mean_acc());
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for i in 0..h4.bins {
        let gain24 = match (a24[i], a4[i]) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        let gain124 = match (a124[i], a24[i]) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            i,
            i * h4.interval + 1,
            (i + 1) * h4.interval,
            h4.count[i],
            fmt(a4[i]),
            fmt(a24[i]),
            fmt(a124[i]),
            fmt(gain24),
            fmt(gain124)
        );
    }
    out
}

/// Mean of the gains over the smallest and largest thirds of the populated
/// bins (front bins hold the small regions).
pub fn front_back_gain(h_better: &RegionHistogram, h_worse: &RegionHistogram) -> Option<(f64, f64)> {
    let diff = h_better.diff(h_worse);
    let populated: Vec<f64> = diff.into_iter().flatten().collect();
    if populated.len() < 3 {
        return None;
    }
    let third = populated.len().div_ceil(3);
    let front = populated[..third].iter().sum::<f64>() / third as f64;
    let back_slice = &populated[populated.len() - third..];
    let back = back_slice.iter().sum::<f64>() / back_slice.len() as f64;
    Some((front, back))
}
