//! L1-norm filter pruning: per convolution, filters are ranked by the sum
//! of their kernel's absolute weights and only the top `ceil(rate * c_out)`
//! are kept; the consuming layers' input channels and the filter's BN
//! parameters are removed consistently. Fusion projections and classifier
//! heads are exempt by default so channel contracts at the sum joins and
//! the class dimension survive.

use std::collections::{BTreeMap, BTreeSet};

use crate::arch::{BaselineModel, IcnetModel, ProfileTarget};
use crate::cost::profile_network;
use crate::error::{Error, Result};
use crate::tensor::{BnParams, ConvParams, Element, Shape, Tensor};

/// L1 score per output filter of a conv weight `(c_out, c_in, k, k)`,
/// accumulated in f64 in scan order.
pub fn l1_filter_scores<E: Element>(weight: &Tensor<E>) -> Vec<f64> {
    let Shape { n: c_out, .. } = weight.shape();
    let per_filter = weight.shape().count() / c_out;
    (0..c_out)
        .map(|o| {
            let mut acc = 0.0f64;
            for &v in &weight.data()[o * per_filter..(o + 1) * per_filter] {
                acc += Element::as_f64(v).abs();
            }
            acc
        })
        .collect()
}

/// Per-layer keep rates and the set of output-exempt layers.
#[derive(Debug, Clone)]
pub struct PruneSpec {
    pub default_rate: f64,
    pub overrides: BTreeMap<String, f64>,
    pub exempt: BTreeSet<String>,
}

impl PruneSpec {
    /// Uniform rate with the default exemptions (fusion paths, projections,
    /// auxiliary heads and the classifier).
    pub fn uniform(rate: f64) -> Self {
        let exempt = ["cff1.fuse", "cff1.proj", "cff1.aux", "cff2.fuse", "cff2.proj", "cff2.aux", "classifier"]
            .into_iter()
            .map(String::from)
            .collect();
        PruneSpec { default_rate: rate, overrides: BTreeMap::new(), exempt }
    }

    fn rate_for(&self, name: &str) -> f64 {
        *self.overrides.get(name).unwrap_or(&self.default_rate)
    }

    fn validate_rate(&self, name: &str) -> Result<f64> {
        let rate = self.rate_for(name);
        if rate <= 0.0 || rate > 1.0 {
            return Err(Error::config(format!(
                "keep rate for {name} must be in (0, 1], got {rate}"
            )));
        }
        Ok(rate)
    }
}

/// One pruned layer in the report.
#[derive(Debug, Clone)]
pub struct LayerPrune {
    pub name: String,
    pub kept: Vec<usize>,
    pub total: usize,
    pub rate: f64,
    pub scores: Vec<f64>,
    pub macs_before: u64,
    pub macs_after: u64,
}

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub layers: Vec<LayerPrune>,
    pub total_macs_before: u64,
    pub total_macs_after: u64,
}

impl PruneReport {
    pub fn mac_ratio(&self) -> f64 {
        self.total_macs_after as f64 / self.total_macs_before as f64
    }

    /// CSV `layer,kept,total,rate,macs_before,macs_after` with a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kept,total,rate,macs_before,macs_after\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{:.4},{},{}\n",
                l.name,
                l.kept.len(),
                l.total,
                l.rate,
                l.macs_before,
                l.macs_after
            ));
        }
        out.push_str(&format!(
            "total,,,,{},{}\n",
            self.total_macs_before, self.total_macs_after
        ));
        out
    }
}

/// Indices of the filters kept at `rate`: the top `ceil(rate * c_out)` by
/// score (ties to the lower index), reported in ascending order.
pub fn select_filters(scores: &[f64], rate: f64) -> Vec<usize> {
    let c = scores.len();
    let count = ((rate * c as f64).ceil() as usize).clamp(1, c);
    let mut order: Vec<usize> = (0..c).collect();
    // Stable sort keeps ties in ascending index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut kept: Vec<usize> = order.into_iter().take(count).collect();
    kept.sort_unstable();
    kept
}

fn slice_conv<E: Element>(p: &ConvParams<E>, kept_out: &[usize], kept_in: &[usize]) -> ConvParams<E> {
    let k = p.kernel();
    let weight = Tensor::from_fn(Shape::new(kept_out.len(), kept_in.len(), k, k), |o, c, kr, kc| {
        p.weight.at(kept_out[o], kept_in[c], kr, kc)
    });
    let bias = Tensor::from_fn(Shape::new(1, kept_out.len(), 1, 1), |_, o, _, _| p.bias.at(0, kept_out[o], 0, 0));
    ConvParams::new(weight, bias, p.stride, p.dilation, p.padding).expect("sliced conv stays valid")
}

fn slice_bn<E: Element>(bn: &BnParams<E>, kept: &[usize]) -> BnParams<E> {
    let pick = |t: &Tensor<E>| Tensor::from_fn(Shape::new(1, kept.len(), 1, 1), |_, o, _, _| t.at(0, kept[o], 0, 0));
    BnParams {
        gamma: pick(&bn.gamma),
        beta: pick(&bn.beta),
        running_mean: pick(&bn.running_mean),
        running_var: pick(&bn.running_var),
        epsilon: bn.epsilon,
        momentum: bn.momentum,
    }
}

fn all(c: usize) -> Vec<usize> {
    (0..c).collect()
}

struct Kept {
    map: BTreeMap<String, Vec<usize>>,
}

impl Kept {
    fn get(&self, name: &str) -> &[usize] {
        &self.map[name]
    }
}

/// Score and select every prunable layer of a model via its visitor.
fn select_all<E: Element, V>(visit: V, spec: &PruneSpec, prunable: &[&str]) -> Result<(Kept, Vec<(String, Vec<f64>, f64)>)>
where
    V: Fn(&mut dyn FnMut(&str, &Tensor<E>)),
{
    let mut map = BTreeMap::new();
    let mut picked = Vec::new();
    let mut err = None;
    visit(&mut |name: &str, weight: &Tensor<E>| {
        if err.is_some() {
            return;
        }
        let base = name.trim_end_matches(".weight");
        if !prunable.contains(&base) || spec.exempt.contains(base) {
            map.insert(base.to_string(), all(weight.shape().n));
            return;
        }
        let rate = match spec.validate_rate(base) {
            Ok(r) => r,
            Err(e) => {
                err = Some(e);
                return;
            }
        };
        let scores = l1_filter_scores(weight);
        let kept = select_filters(&scores, rate);
        picked.push((base.to_string(), scores, rate));
        map.insert(base.to_string(), kept);
    });
    match err {
        Some(e) => Err(e),
        None => Ok((Kept { map }, picked)),
    }
}

/// Concatenation input indices surviving a prune: `segments` lists, per
/// concat segment, its channel width before pruning and the kept indices.
fn concat_kept(segments: &[(usize, &[usize])]) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut offset = 0;
    for (width, seg_kept) in segments {
        kept.extend(seg_kept.iter().map(|&i| offset + i));
        offset += width;
    }
    kept
}

/// Prune the cascade model. Returns the structurally smaller model and a
/// report with modeled MAC counts from the cost model (inference graph).
pub fn prune_network<E: Element>(model: &IcnetModel<E>, spec: &PruneSpec) -> Result<(IcnetModel<E>, PruneReport)> {
    let prunable: Vec<String> = (0..model.cfg.widths.len())
        .map(|i| format!("trunk.{i}"))
        .chain((0..4).map(|i| format!("tail.{i}")))
        .chain((0..model.cfg.pyramid_bins.len()).map(|i| format!("pyramid.reduce{i}")))
        .chain(["pyramid.merge".to_string()])
        .chain((0..3).map(|i| format!("high.{i}")))
        .collect();
    let prunable_refs: Vec<&str> = prunable.iter().map(|s| s.as_str()).collect();

    let (kept, picked) = select_all::<E, _>(
        |f| {
            model.visit_params(&mut |name, kind, t| {
                if kind == crate::arch::ParamKind::Weight {
                    f(name, t);
                }
            })
        },
        spec,
        &prunable_refs,
    )?;

    let mut pruned = model.clone();

    // Trunk chain.
    let trunk_in: Vec<Vec<usize>> = (0..pruned.trunk.len())
        .map(|i| {
            if i == 0 {
                all(3)
            } else {
                kept.get(&format!("trunk.{}", i - 1)).to_vec()
            }
        })
        .collect();
    for (i, blk) in pruned.trunk.iter_mut().enumerate() {
        let out = kept.get(&format!("trunk.{i}"));
        blk.conv = slice_conv(&blk.conv, out, &trunk_in[i]);
        if let Some(bn) = &blk.bn {
            blk.bn = Some(slice_bn(bn, out));
        }
    }
    let trunk_last = format!("trunk.{}", pruned.trunk.len() - 1);

    // Tail chain.
    for i in 0..pruned.tail.len() {
        let k_in = if i == 0 {
            kept.get(&trunk_last).to_vec()
        } else {
            kept.get(&format!("tail.{}", i - 1)).to_vec()
        };
        let out = kept.get(&format!("tail.{i}"));
        let blk = &mut pruned.tail[i];
        blk.conv = slice_conv(&blk.conv, out, &k_in);
        if let Some(bn) = &blk.bn {
            blk.bn = Some(slice_bn(bn, out));
        }
    }
    let tail_last = format!("tail.{}", pruned.tail.len() - 1);

    // Pyramid: reductions read the tail output; the merge conv reads the
    // concatenation [tail | reductions...].
    let tail_kept = kept.get(&tail_last).to_vec();
    let mut segments: Vec<(usize, Vec<usize>)> = vec![(model.tail.last().unwrap().conv.c_out(), tail_kept.clone())];
    for (i, blk) in pruned.pyramid.reduce.iter_mut().enumerate() {
        let out = kept.get(&format!("pyramid.reduce{i}"));
        blk.conv = slice_conv(&blk.conv, out, &tail_kept);
        if let Some(bn) = &blk.bn {
            blk.bn = Some(slice_bn(bn, out));
        }
        segments.push((model.pyramid.reduce[i].conv.c_out(), out.to_vec()));
    }
    let seg_refs: Vec<(usize, &[usize])> = segments.iter().map(|(w, k)| (*w, k.as_slice())).collect();
    let merge_in = concat_kept(&seg_refs);
    let merge_out = kept.get("pyramid.merge");
    pruned.pyramid.merge.conv = slice_conv(&pruned.pyramid.merge.conv, merge_out, &merge_in);
    if let Some(bn) = &pruned.pyramid.merge.bn {
        pruned.pyramid.merge.bn = Some(slice_bn(bn, merge_out));
    }

    // High branch chain.
    for i in 0..pruned.high.len() {
        let k_in = if i == 0 {
            all(3)
        } else {
            kept.get(&format!("high.{}", i - 1)).to_vec()
        };
        let out = kept.get(&format!("high.{i}"));
        let blk = &mut pruned.high[i];
        blk.conv = slice_conv(&blk.conv, out, &k_in);
        if let Some(bn) = &blk.bn {
            blk.bn = Some(slice_bn(bn, out));
        }
    }

    // Exempt consumers: input channels follow their producers.
    let c3 = model.cfg.cff_channels;
    pruned.cff1.reslice_inputs(kept.get("pyramid.merge"), kept.get(&trunk_last));
    let high_last = format!("high.{}", pruned.high.len() - 1);
    pruned.cff2.reslice_inputs(&all(c3), kept.get(&high_last));

    // Report.
    let before = profile_network(&model.to_network_spec(ProfileTarget::Sub124))?;
    let after = profile_network(&pruned.to_network_spec(ProfileTarget::Sub124))?;
    let layer_macs = |p: &crate::cost::CostProfile, name: &str| {
        p.layers.iter().filter(|l| l.layer == name).map(|l| l.macs).sum::<u64>()
    };
    let mut layers = Vec::new();
    for (name, scores, rate) in picked {
        layers.push(LayerPrune {
            kept: kept.get(&name).to_vec(),
            total: scores.len(),
            rate,
            macs_before: layer_macs(&before, &name),
            macs_after: layer_macs(&after, &name),
            name,
            scores,
        });
    }
    let report = PruneReport {
        layers,
        total_macs_before: before.total_macs,
        total_macs_after: after.total_macs,
    };
    Ok((pruned, report))
}

/// Prune the single-scale baseline (backbone chain + pyramid; classifier
/// exempt).
pub fn prune_baseline<E: Element>(
    model: &BaselineModel<E>,
    spec: &PruneSpec,
) -> Result<(BaselineModel<E>, PruneReport)> {
    let nblocks = model.blocks.len();
    let prunable: Vec<String> = (0..nblocks)
        .map(|i| format!("backbone.{i}"))
        .chain((0..model.cfg.pyramid_bins.len()).map(|i| format!("pyramid.reduce{i}")))
        .chain(["pyramid.merge".to_string()])
        .collect();
    let prunable_refs: Vec<&str> = prunable.iter().map(|s| s.as_str()).collect();

    let (kept, picked) = select_all::<E, _>(
        |f| {
            model.visit_params(&mut |name, kind, t| {
                if kind == crate::arch::ParamKind::Weight {
                    f(name, t);
                }
            })
        },
        spec,
        &prunable_refs,
    )?;

    let mut pruned = model.clone();
    for i in 0..nblocks {
        let k_in = if i == 0 {
            all(3)
        } else {
            kept.get(&format!("backbone.{}", i - 1)).to_vec()
        };
        let out = kept.get(&format!("backbone.{i}"));
        let blk = &mut pruned.blocks[i];
        blk.conv = slice_conv(&blk.conv, out, &k_in);
        if let Some(bn) = &blk.bn {
            blk.bn = Some(slice_bn(bn, out));
        }
    }
    let back_last = format!("backbone.{}", nblocks - 1);
    let tail_kept = kept.get(&back_last).to_vec();
    let mut segments: Vec<(usize, Vec<usize>)> =
        vec![(model.blocks.last().unwrap().conv.c_out(), tail_kept.clone())];
    for (i, blk) in pruned.pyramid.reduce.iter_mut().enumerate() {
        let out = kept.get(&format!("pyramid.reduce{i}"));
        blk.conv = slice_conv(&blk.conv, out, &tail_kept);
        if let Some(bn) = &blk.bn {
            blk.bn = Some(slice_bn(bn, out));
        }
        segments.push((model.pyramid.reduce[i].conv.c_out(), out.to_vec()));
    }
    let seg_refs: Vec<(usize, &[usize])> = segments.iter().map(|(w, k)| (*w, k.as_slice())).collect();
    let merge_in = concat_kept(&seg_refs);
    let merge_out = kept.get("pyramid.merge");
    pruned.pyramid.merge.conv = slice_conv(&pruned.pyramid.merge.conv, merge_out, &merge_in);
    if let Some(bn) = &pruned.pyramid.merge.bn {
        pruned.pyramid.merge.bn = Some(slice_bn(bn, merge_out));
    }
    pruned.classifier = slice_conv(&pruned.classifier, &all(model.cfg.num_classes), merge_out);

    let (h, w) = (model.cfg.input_h, model.cfg.input_w);
    let before = profile_network(&model.to_network_spec(h, w))?;
    let after = profile_network(&pruned.to_network_spec(h, w))?;
    let layer_macs = |p: &crate::cost::CostProfile, name: &str| {
        p.layers.iter().filter(|l| l.layer == name).map(|l| l.macs).sum::<u64>()
    };
    let mut layers = Vec::new();
    for (name, scores, rate) in picked {
        layers.push(LayerPrune {
            kept: kept.get(&name).to_vec(),
            total: scores.len(),
            rate,
            macs_before: layer_macs(&before, &name),
            macs_after: layer_macs(&after, &name),
            name,
            scores,
        });
    }
    Ok((
        pruned,
        PruneReport {
            layers,
            total_macs_before: before.total_macs,
            total_macs_after: after.total_macs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_filter_scores_zero() {
        let w = Tensor::<f64>::zeros(Shape::new(2, 3, 3, 3));
        assert_eq!(l1_filter_scores(&w), vec![0.0, 0.0]);
    }

    #[test]
    fn ones_filter_counts_entries() {
        let w = Tensor::<f64>::filled(Shape::new(1, 2, 3, 3), 1.0);
        assert_eq!(l1_filter_scores(&w), vec![18.0]);
    }

    #[test]
    fn scores_match_direct_abs_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::from_fn(Shape::new(4, 3, 3, 3), |_, _, _, _| rng.gen_range(-2.0..2.0));
        let got = l1_filter_scores(&w);
        for o in 0..4 {
            let mut want = 0.0;
            for c in 0..3 {
                for kr in 0..3 {
                    for kc in 0..3 {
                        want += w.at(o, c, kr, kc).abs();
                    }
                }
            }
            assert_eq!(got[o], want);
        }
    }

    #[test]
    fn descending_sort_selection_pinned_case() {
        assert_eq!(select_filters(&[5.0, 1.0, 3.0, 2.0], 0.5), vec![0, 2]);
        // Ties break toward the lower index.
        assert_eq!(select_filters(&[2.0, 2.0, 2.0, 1.0], 0.5), vec![0, 1]);
        // ceil(rate * c) with a floor of one filter.
        assert_eq!(select_filters(&[1.0, 2.0], 0.01), vec![1]);
    }
}
