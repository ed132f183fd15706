//! Analytic cost model for convolutional networks: exact per-layer MAC
//! counts (`c_out * c_in * k^2 * h' * w'` for convolutions), activation
//! element counts, per-stage grouping, and a receptive-field calculator.
//!
//! Counts are multiply-accumulates, not FLOPs (one MAC = one multiply plus
//! one add); non-conv layers are charged their output element count. Counts
//! are canonical dense counts: boundary-skip optimizations in the executing
//! kernels do not reduce them.

use crate::error::{Error, Result};

/// What a layer does, as far as cost accounting is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// Convolution; `transposed` flips the shape rule from `ceil(h/s)` to
    /// `h*s`.
    Conv { transposed: bool },
    /// Windowed pooling (`ceil(h/s)` shape rule) or adaptive pooling to a
    /// fixed output grid.
    Pool { adaptive_out: Option<(usize, usize)> },
    /// Interpolation, either by a rational factor or to absolute dims.
    Resize { target: ResizeTarget },
    /// Elementwise work: activations, normalization, sums, concatenation.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeTarget {
    Scale { num: usize, den: usize },
    Abs { h: usize, w: usize },
}

/// Symbolic description of one layer for cost analysis.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub s: usize,
    pub d: usize,
    pub op_kind: OpKind,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, s: usize, d: usize) -> Self {
        LayerSpec { name: name.into(), c_in, c_out, k, s, d, op_kind: OpKind::Conv { transposed: false } }
    }

    pub fn conv_transposed(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, s: usize) -> Self {
        LayerSpec { name: name.into(), c_in, c_out, k, s, d: 1, op_kind: OpKind::Conv { transposed: true } }
    }

    pub fn pointwise(name: impl Into<String>, c: usize) -> Self {
        LayerSpec { name: name.into(), c_in: c, c_out: c, k: 1, s: 1, d: 1, op_kind: OpKind::Pointwise }
    }

    /// Pointwise layer that changes the channel count (channel concatenation).
    pub fn concat(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        LayerSpec { name: name.into(), c_in, c_out, k: 1, s: 1, d: 1, op_kind: OpKind::Pointwise }
    }

    pub fn resize(name: impl Into<String>, c: usize, num: usize, den: usize) -> Self {
        LayerSpec {
            name: name.into(),
            c_in: c,
            c_out: c,
            k: 1,
            s: 1,
            d: 1,
            op_kind: OpKind::Resize { target: ResizeTarget::Scale { num, den } },
        }
    }

    pub fn resize_to(name: impl Into<String>, c: usize, h: usize, w: usize) -> Self {
        LayerSpec {
            name: name.into(),
            c_in: c,
            c_out: c,
            k: 1,
            s: 1,
            d: 1,
            op_kind: OpKind::Resize { target: ResizeTarget::Abs { h, w } },
        }
    }

    pub fn adaptive_pool(name: impl Into<String>, c: usize, out: (usize, usize)) -> Self {
        LayerSpec { name: name.into(), c_in: c, c_out: c, k: 1, s: 1, d: 1, op_kind: OpKind::Pool { adaptive_out: Some(out) } }
    }

    pub fn pool(name: impl Into<String>, c: usize, k: usize, s: usize) -> Self {
        LayerSpec { name: name.into(), c_in: c, c_out: c, k, s, d: 1, op_kind: OpKind::Pool { adaptive_out: None } }
    }

    /// Output spatial dims for an input of `(h, w)`.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.op_kind {
            OpKind::Conv { transposed: false } | OpKind::Pool { adaptive_out: None } => {
                (h.div_ceil(self.s), w.div_ceil(self.s))
            }
            OpKind::Conv { transposed: true } => (h * self.s, w * self.s),
            OpKind::Pool { adaptive_out: Some(out) } => out,
            OpKind::Resize { target: ResizeTarget::Scale { num, den } } => {
                ((h * num).div_ceil(den), (w * num).div_ceil(den))
            }
            OpKind::Resize { target: ResizeTarget::Abs { h, w } } => (h, w),
            OpKind::Pointwise => (h, w),
        }
    }
}

/// Exact MAC count of a convolution layer on an `(h, w)` input under the
/// same-padding shape rule `h' = ceil(h/s)`. For transposed convolutions
/// the count is `c_out * c_in * k^2 * h * w` (one kernel scatter per input
/// pixel), which equals `c_out * c_in * k^2 * h' * w' / s^2`.
pub fn conv_cost(l: &LayerSpec, h: usize, w: usize) -> u64 {
    let (oh, ow) = l.out_dims(h, w);
    match l.op_kind {
        OpKind::Conv { transposed: false } => {
            (l.c_out * l.c_in * l.k * l.k) as u64 * (oh * ow) as u64
        }
        OpKind::Conv { transposed: true } => (l.c_out * l.c_in * l.k * l.k) as u64 * (h * w) as u64,
        _ => (l.c_out * oh * ow) as u64,
    }
}

/// Where a stage draws its input from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageInput {
    /// The network input image.
    Network,
    /// The output of a previously declared stage.
    Stage(String),
}

/// A named chain of layers. Joins (sums, concatenations) are expressed as
/// pointwise layers inside the chain that continues past them; the side
/// branches end at the join and their cost is carried by their own stages.
#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub from: StageInput,
    pub layers: Vec<LayerSpec>,
}

/// Ordered stages plus the network input dims `(c, h, w)`.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub input: (usize, usize, usize),
    pub stages: Vec<Stage>,
}

/// Per-layer cost record.
#[derive(Debug, Clone)]
pub struct LayerCost {
    pub stage: String,
    pub layer: String,
    pub macs: u64,
    /// Output elements of the layer.
    pub activation_elems: u64,
    /// Input plus output elements while the layer executes.
    pub live_elems: u64,
}

/// Profiling result: exact integer totals over per-layer records.
#[derive(Debug, Clone)]
pub struct CostProfile {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    /// Sum of all layer output element counts.
    pub total_activation_elems: u64,
    /// Peak of `in + out` elements over layers (live tensors under
    /// sequential execution).
    pub peak_live_elems: u64,
}

impl CostProfile {
    pub fn stage_macs(&self, stage: &str) -> u64 {
        self.layers.iter().filter(|l| l.stage == stage).map(|l| l.macs).sum()
    }

    /// Activation bytes for a dtype of `elem_size` bytes.
    pub fn total_activation_bytes(&self, elem_size: usize) -> u64 {
        self.total_activation_elems * elem_size as u64
    }

    /// CSV with one row per layer and a trailing total row.
    /// Columns: `stage,layer,macs,activation_bytes` (f32 activations).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,layer,macs,activation_bytes\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{},{}\n", l.stage, l.layer, l.macs, l.activation_elems * 4));
        }
        out.push_str(&format!("total,,{},{}\n", self.total_macs, self.total_activation_elems * 4));
        out
    }
}

/// Propagate shapes through every stage and tally exact per-layer costs.
pub fn profile_network(net: &NetworkSpec) -> Result<CostProfile> {
    let (c0, h0, w0) = net.input;
    let mut outputs: Vec<(String, (usize, usize, usize))> = Vec::new();
    let mut layers = Vec::new();
    let mut total_macs = 0u64;
    let mut total_act = 0u64;
    let mut peak = 0u64;

    for stage in &net.stages {
        let (mut c, mut h, mut w) = match &stage.from {
            StageInput::Network => (c0, h0, w0),
            StageInput::Stage(name) => outputs
                .iter()
                .rev()
                .find(|(n, _)| n == name)
                .map(|(_, dims)| *dims)
                .ok_or_else(|| {
                    Error::spec(format!("stage {} draws from unknown stage {name}", stage.name))
                })?,
        };
        for l in &stage.layers {
            if l.c_in != c {
                return Err(Error::spec(format!(
                    "layer {}/{} expects {} input channels but receives {c}",
                    stage.name, l.name, l.c_in
                )));
            }
            let macs = conv_cost(l, h, w);
            let (oh, ow) = l.out_dims(h, w);
            let out_elems = (l.c_out * oh * ow) as u64;
            let in_elems = (c * h * w) as u64;
            layers.push(LayerCost {
                stage: stage.name.clone(),
                layer: l.name.clone(),
                macs,
                activation_elems: out_elems,
                live_elems: in_elems + out_elems,
            });
            total_macs += macs;
            total_act += out_elems;
            peak = peak.max(in_elems + out_elems);
            c = l.c_out;
            h = oh;
            w = ow;
        }
        outputs.push((stage.name.clone(), (c, h, w)));
    }

    Ok(CostProfile {
        layers,
        total_macs,
        total_activation_elems: total_act,
        peak_live_elems: peak,
    })
}

/// Receptive field of a chain of conv/pool layers:
/// `1 + sum_i (k_i - 1) * d_i * prod_{j<i} s_j`.
pub fn receptive_field(chain: &[LayerSpec]) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for l in chain {
        rf += (l.k - 1) * l.d * jump;
        jump *= l.s;
    }
    rf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Loop-nest MAC counter: one count per (output pixel, output channel,
    /// input channel, kernel tap), padding taps included.
    fn conv_cost_oracle(l: &LayerSpec, h: usize, w: usize) -> u64 {
        let (oh, ow) = l.out_dims(h, w);
        let mut count = 0u64;
        for _o in 0..l.c_out {
            for _c in 0..l.c_in {
                for _kr in 0..l.k {
                    for _kc in 0..l.k {
                        count += (oh * ow) as u64;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn pinned_conv_cost_case() {
        let l = LayerSpec::conv("l", 64, 128, 3, 1, 1);
        assert_eq!(conv_cost(&l, 32, 32), 75_497_472);
    }

    #[test]
    fn doubling_resolution_quadruples_stride1_cost() {
        let l = LayerSpec::conv("l", 32, 48, 3, 1, 1);
        assert_eq!(conv_cost(&l, 64, 64), 4 * conv_cost(&l, 32, 32));
        assert_eq!(conv_cost(&l, 128, 256), 4 * conv_cost(&l, 64, 128));
    }

    #[test]
    fn doubling_both_channel_counts_quadruples_cost() {
        let narrow = LayerSpec::conv("a", 32, 48, 3, 1, 1);
        let wide = LayerSpec::conv("b", 64, 96, 3, 1, 1);
        assert_eq!(conv_cost(&wide, 20, 20), 4 * conv_cost(&narrow, 20, 20));
    }

    #[test]
    fn homogeneity_in_each_factor() {
        let base = LayerSpec::conv("a", 16, 24, 3, 1, 1);
        let c2 = LayerSpec::conv("b", 32, 24, 3, 1, 1);
        let o3 = LayerSpec::conv("c", 16, 72, 3, 1, 1);
        assert_eq!(conv_cost(&c2, 10, 10), 2 * conv_cost(&base, 10, 10));
        assert_eq!(conv_cost(&o3, 10, 10), 3 * conv_cost(&base, 10, 10));
        // k scaling goes as k^2: 1 -> 3 multiplies by 9.
        let k1 = LayerSpec::conv("d", 16, 24, 1, 1, 1);
        assert_eq!(conv_cost(&base, 10, 10), 9 * conv_cost(&k1, 10, 10));
    }

    #[test]
    fn matches_loop_nest_counter_on_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let l = LayerSpec::conv(
                "r",
                rng.gen_range(1..=64),
                rng.gen_range(1..=64),
                [1, 3, 5, 7][rng.gen_range(0..4)],
                rng.gen_range(1..=3),
                rng.gen_range(1..=2),
            );
            let h = rng.gen_range(1..=40);
            let w = rng.gen_range(1..=40);
            assert_eq!(conv_cost(&l, h, w), conv_cost_oracle(&l, h, w));
        }
    }

    #[test]
    fn single_conv_profile_equals_conv_cost() {
        let l = LayerSpec::conv("only", 3, 8, 3, 1, 1);
        let net = NetworkSpec {
            input: (3, 16, 16),
            stages: vec![Stage {
                name: "s".into(),
                from: StageInput::Network,
                layers: vec![l.clone()],
            }],
        };
        let p = profile_network(&net).unwrap();
        assert_eq!(p.total_macs, conv_cost(&l, 16, 16));
    }

    #[test]
    fn stride_preserving_net_scales_squarely_with_resolution() {
        let mk = |h, w| NetworkSpec {
            input: (8, h, w),
            stages: vec![Stage {
                name: "s".into(),
                from: StageInput::Network,
                layers: vec![
                    LayerSpec::conv("a", 8, 16, 3, 1, 1),
                    LayerSpec::conv("b", 16, 16, 3, 1, 2),
                    LayerSpec::conv("c", 16, 8, 1, 1, 1),
                ],
            }],
        };
        let lo = profile_network(&mk(512, 1024)).unwrap();
        let hi = profile_network(&mk(1024, 2048)).unwrap();
        assert_eq!(hi.total_macs, 4 * lo.total_macs);
    }

    #[test]
    fn totals_are_permutation_independent_within_a_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = NetworkSpec {
            input: (4, 32, 32),
            stages: vec![Stage {
                name: "s".into(),
                from: StageInput::Network,
                layers: vec![
                    LayerSpec::conv("a", 4, 8, 3, 1, 1),
                    LayerSpec::conv("b", 8, 8, 3, 1, 1),
                    LayerSpec::conv("c", 8, 8, 1, 1, 1),
                ],
            }],
        };
        let p = profile_network(&net).unwrap();
        let mut per_layer: Vec<u64> = p.layers.iter().map(|l| l.macs).collect();
        let want = p.total_macs;
        for _ in 0..10 {
            // Integer addition commutes exactly, whatever the order.
            for i in (1..per_layer.len()).rev() {
                per_layer.swap(i, rng.gen_range(0..=i));
            }
            assert_eq!(per_layer.iter().sum::<u64>(), want);
        }
    }

    #[test]
    fn inconsistent_chain_names_the_layer() {
        let net = NetworkSpec {
            input: (3, 16, 16),
            stages: vec![Stage {
                name: "s".into(),
                from: StageInput::Network,
                layers: vec![
                    LayerSpec::conv("ok", 3, 8, 3, 1, 1),
                    LayerSpec::conv("broken", 16, 8, 3, 1, 1),
                ],
            }],
        };
        let err = profile_network(&net).unwrap_err().to_string();
        assert!(err.contains("broken"), "{err}");
    }

    #[test]
    fn receptive_field_cases() {
        assert_eq!(receptive_field(&[LayerSpec::conv("a", 1, 1, 3, 1, 1)]), 3);
        assert_eq!(receptive_field(&[LayerSpec::conv("a", 1, 1, 3, 1, 2)]), 5);
        assert_eq!(
            receptive_field(&[
                LayerSpec::conv("a", 1, 1, 3, 1, 1),
                LayerSpec::conv("b", 1, 1, 3, 1, 1)
            ]),
            5
        );
        // Stride doubles the step of later layers.
        assert_eq!(
            receptive_field(&[
                LayerSpec::conv("a", 1, 1, 3, 2, 1),
                LayerSpec::conv("b", 1, 1, 3, 1, 1)
            ]),
            7
        );
    }
}
