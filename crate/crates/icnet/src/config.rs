//! Run configuration: INI-style files (`[section]`, `key = value`, `#`
//! comments) with a fixed key schema shared by the file parser, the
//! `--section.key value` flag overrides, the `--help` listing and the
//! resolved-config echo. Unknown keys, type errors and duplicates are
//! rejected with their line number.

use crate::arch::{FusionKind, IcnetConfig};
use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::metrics::{Connectivity, RegionSource};
use crate::train::TrainConfig;

/// Dataset-related settings beyond the scene recipe itself.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Dataset directory (holding `train/` and `test/` splits).
    pub dir: String,
    pub train_count: usize,
    pub test_count: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".into(),
            train_count: 1000,
            test_count: 200,
            scene: SceneSpec::default(),
        }
    }
}

/// Evaluation and study settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub hist_bins: usize,
    pub hist_interval: usize,
    pub region_source: RegionSource,
    pub connectivity: Connectivity,
    /// Which `ablate` studies to run.
    pub studies: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hist_bins: 30,
            hist_interval: 3000,
            region_source: RegionSource::Gt,
            connectivity: Connectivity::Four,
            studies: ALL_STUDIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const ALL_STUDIES: [&str; 5] = ["branch", "fusion", "input-scale", "feature-stride", "keep-rate"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: IcnetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// The full key schema: section, key, value syntax, help line.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("model", "num_classes", "count", "number of classes including background"),
    ("model", "input_h", "pixels", "nominal input height (divisible by 32)"),
    ("model", "input_w", "pixels", "nominal input width (divisible by 32)"),
    ("model", "widths", "list", "channel widths of the 5 backbone stage groups"),
    ("model", "share_stages", "count", "leading stage groups shared by low/medium paths (must be 3)"),
    ("model", "cff_channels", "count", "channels of the fused features"),
    ("model", "fusion", "cff|deconv3|deconv5|deconv7", "fusion unit variant"),
    ("model", "label_guidance", "bool", "train with auxiliary losses at 1/16 and 1/8"),
    ("model", "lambda", "l1,l2,l3", "loss weights of the 1/16, 1/8 and 1/4 heads"),
    ("model", "pyramid_bins", "list", "adaptive pooling bin sizes of the pyramid"),
    ("train", "base_lr", "float", "base learning rate of the poly schedule"),
    ("train", "power", "float", "poly schedule exponent"),
    ("train", "max_iter", "count", "training iterations"),
    ("train", "momentum", "float", "SGD momentum"),
    ("train", "weight_decay", "float", "L2 weight decay (conv weights and BN gamma)"),
    ("train", "batch", "count", "mini-batch size"),
    ("train", "crop", "pixels", "training crop size (multiple of 32)"),
    ("train", "resize_min", "float", "lower bound of random resize"),
    ("train", "resize_max", "float", "upper bound of random resize"),
    ("train", "mirror_prob", "float", "probability of horizontal mirroring"),
    ("train", "seed", "u64", "training stream seed"),
    ("train", "decay_biases", "bool", "apply weight decay to biases and BN beta too"),
    ("train", "finetune_iters", "count", "fine-tuning iterations after pruning"),
    ("data", "dir", "path", "dataset directory with train/ and test/ splits"),
    ("data", "train_count", "count", "scenes in the training split"),
    ("data", "test_count", "count", "scenes in the test split"),
    ("data", "height", "pixels", "scene height (divisible by 32)"),
    ("data", "width", "pixels", "scene width (divisible by 32)"),
    ("data", "num_classes", "count", "classes drawn in scenes (matches model.num_classes)"),
    ("data", "rectangles", "count", "large rectangles per scene"),
    ("data", "disks", "count", "disks per scene"),
    ("data", "poles", "count", "thin poles per scene (at least one is always drawn)"),
    ("data", "blobs", "count", "small blobs per scene"),
    ("data", "seed", "u64", "scene generator seed"),
    ("eval", "hist_bins", "count", "region histogram bin count"),
    ("eval", "hist_interval", "count", "region histogram bin width in pixels"),
    ("eval", "region_source", "gt|pred", "map the histogram regions come from"),
    ("eval", "connectivity", "4|8", "pixel connectivity for components"),
    ("eval", "studies", "list", "ablate studies: branch,fusion,input-scale,feature-stride,keep-rate"),
];

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(line, format!("cannot parse `{value}` as {what}")))
}

fn parse_bool(value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(bad(line, format!("cannot parse `{other}` as bool"))),
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|p| parse_num(p, line, what))
        .collect()
}

impl RunConfig {
    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        let e = &mut self.eval;
        match (section, key) {
            ("model", "num_classes") => m.num_classes = parse_num(value, line, "count")?,
            ("model", "input_h") => m.input_h = parse_num(value, line, "pixels")?,
            ("model", "input_w") => m.input_w = parse_num(value, line, "pixels")?,
            ("model", "widths") => m.widths = parse_list(value, line, "count")?,
            ("model", "share_stages") => m.share_stages = parse_num(value, line, "count")?,
            ("model", "cff_channels") => m.cff_channels = parse_num(value, line, "count")?,
            ("model", "fusion") => {
                m.fusion = FusionKind::parse(value.trim())
                    .ok_or_else(|| bad(line, format!("unknown fusion `{value}`")))?
            }
            ("model", "label_guidance") => m.label_guidance = parse_bool(value, line)?,
            ("model", "lambda") => {
                let v: Vec<f64> = parse_list(value, line, "float")?;
                if v.len() != 3 {
                    return Err(bad(line, "lambda needs exactly 3 components"));
                }
                m.lambda = [v[0], v[1], v[2]];
            }
            ("model", "pyramid_bins") => m.pyramid_bins = parse_list(value, line, "count")?,
            ("train", "base_lr") => t.base_lr = parse_num(value, line, "float")?,
            ("train", "power") => t.power = parse_num(value, line, "float")?,
            ("train", "max_iter") => t.max_iter = parse_num(value, line, "count")?,
            ("train", "momentum") => t.momentum = parse_num(value, line, "float")?,
            ("train", "weight_decay") => t.weight_decay = parse_num(value, line, "float")?,
            ("train", "batch") => t.batch = parse_num(value, line, "count")?,
            ("train", "crop") => t.crop = parse_num(value, line, "pixels")?,
            ("train", "resize_min") => t.resize_min = parse_num(value, line, "float")?,
            ("train", "resize_max") => t.resize_max = parse_num(value, line, "float")?,
            ("train", "mirror_prob") => t.mirror_prob = parse_num(value, line, "float")?,
            ("train", "seed") => t.seed = parse_num(value, line, "u64")?,
            ("train", "decay_biases") => t.decay_biases = parse_bool(value, line)?,
            ("train", "finetune_iters") => t.finetune_iters = parse_num(value, line, "count")?,
            ("data", "dir") => d.dir = value.trim().to_string(),
            ("data", "train_count") => d.train_count = parse_num(value, line, "count")?,
            ("data", "test_count") => d.test_count = parse_num(value, line, "count")?,
            ("data", "height") => d.scene.height = parse_num(value, line, "pixels")?,
            ("data", "width") => d.scene.width = parse_num(value, line, "pixels")?,
            ("data", "num_classes") => d.scene.num_classes = parse_num(value, line, "count")?,
            ("data", "rectangles") => d.scene.rectangles = parse_num(value, line, "count")?,
            ("data", "disks") => d.scene.disks = parse_num(value, line, "count")?,
            ("data", "poles") => d.scene.poles = parse_num(value, line, "count")?,
            ("data", "blobs") => d.scene.blobs = parse_num(value, line, "count")?,
            ("data", "seed") => d.scene.seed = parse_num(value, line, "u64")?,
            ("eval", "hist_bins") => e.hist_bins = parse_num(value, line, "count")?,
            ("eval", "hist_interval") => e.hist_interval = parse_num(value, line, "count")?,
            ("eval", "region_source") => {
                e.region_source = RegionSource::parse(value.trim())
                    .ok_or_else(|| bad(line, format!("unknown region source `{value}`")))?
            }
            ("eval", "connectivity") => {
                e.connectivity = Connectivity::parse(value.trim())
                    .ok_or_else(|| bad(line, format!("connectivity must be 4 or 8, got `{value}`")))?
            }
            ("eval", "studies") => {
                let studies: Vec<String> = value.split(',').map(|s| s.trim().to_string()).collect();
                for s in &studies {
                    if !ALL_STUDIES.contains(&s.as_str()) {
                        return Err(bad(line, format!("unknown study `{s}`")));
                    }
                }
                e.studies = studies;
            }
            _ => return Err(bad(line, format!("unknown key `{section}.{key}`"))),
        }
        Ok(())
    }

    /// Current value of one key, rendered the way the parser accepts it.
    pub fn get(&self, section: &str, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match (section, key) {
            ("model", "num_classes") => m.num_classes.to_string(),
            ("model", "input_h") => m.input_h.to_string(),
            ("model", "input_w") => m.input_w.to_string(),
            ("model", "widths") => list(&m.widths),
            ("model", "share_stages") => m.share_stages.to_string(),
            ("model", "cff_channels") => m.cff_channels.to_string(),
            ("model", "fusion") => m.fusion.name(),
            ("model", "label_guidance") => m.label_guidance.to_string(),
            ("model", "lambda") => format!("{},{},{}", m.lambda[0], m.lambda[1], m.lambda[2]),
            ("model", "pyramid_bins") => list(&m.pyramid_bins),
            ("train", "base_lr") => t.base_lr.to_string(),
            ("train", "power") => t.power.to_string(),
            ("train", "max_iter") => t.max_iter.to_string(),
            ("train", "momentum") => t.momentum.to_string(),
            ("train", "weight_decay") => t.weight_decay.to_string(),
            ("train", "batch") => t.batch.to_string(),
            ("train", "crop") => t.crop.to_string(),
            ("train", "resize_min") => t.resize_min.to_string(),
            ("train", "resize_max") => t.resize_max.to_string(),
            ("train", "mirror_prob") => t.mirror_prob.to_string(),
            ("train", "seed") => t.seed.to_string(),
            ("train", "decay_biases") => t.decay_biases.to_string(),
            ("train", "finetune_iters") => t.finetune_iters.to_string(),
            ("data", "dir") => d.dir.clone(),
            ("data", "train_count") => d.train_count.to_string(),
            ("data", "test_count") => d.test_count.to_string(),
            ("data", "height") => d.scene.height.to_string(),
            ("data", "width") => d.scene.width.to_string(),
            ("data", "num_classes") => d.scene.num_classes.to_string(),
            ("data", "rectangles") => d.scene.rectangles.to_string(),
            ("data", "disks") => d.scene.disks.to_string(),
            ("data", "poles") => d.scene.poles.to_string(),
            ("data", "blobs") => d.scene.blobs.to_string(),
            ("data", "seed") => d.scene.seed.to_string(),
            ("eval", "hist_bins") => e.hist_bins.to_string(),
            ("eval", "hist_interval") => e.hist_interval.to_string(),
            ("eval", "region_source") => match e.region_source {
                RegionSource::Gt => "gt".into(),
                RegionSource::Pred => "pred".into(),
            },
            ("eval", "connectivity") => match e.connectivity {
                Connectivity::Four => "4".into(),
                Connectivity::Eight => "8".into(),
            },
            ("eval", "studies") => e.studies.join(","),
            _ => unreachable!("get of unknown key {section}.{key}"),
        }
    }

    /// Render the fully resolved configuration; parsing it back reproduces
    /// this config.
    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        let mut current = "";
        for (section, key, _, _) in KEYS {
            if *section != current {
                out.push_str(&format!("\n[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", self.get(section, key)));
        }
        out
    }

    /// Cross-field checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.scene.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.data.scene.num_classes != self.model.num_classes {
            return Err(Error::config(format!(
                "data.num_classes {} does not match model.num_classes {}",
                self.data.scene.num_classes, self.model.num_classes
            )));
        }
        if self.eval.hist_bins == 0 || self.eval.hist_interval == 0 {
            return Err(Error::config("hist_bins and hist_interval must be >= 1"));
        }
        Ok(())
    }
}

/// Parse an INI-style configuration on top of the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    apply_config(&mut cfg, text)?;
    Ok(cfg)
}

/// Parse INI text into an existing config (file first, flags later).
pub fn apply_config(cfg: &mut RunConfig, text: &str) -> Result<()> {
    let mut section = String::new();
    let mut seen = std::collections::BTreeSet::<(String, String)>::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| bad(line, "unterminated section header"))?
                .trim();
            if !KEYS.iter().any(|(s, _, _, _)| *s == name) {
                return Err(bad(line, format!("unknown section `[{name}]`")));
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(bad(line, format!("expected `key = value`, got `{content}`")));
        };
        let key = key.trim();
        if section.is_empty() {
            return Err(bad(line, format!("key `{key}` before any [section] header")));
        }
        if !seen.insert((section.clone(), key.to_string())) {
            return Err(bad(line, format!("duplicate key `{section}.{key}`")));
        }
        cfg.set(&section, key, value.trim(), line)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_and_echo_lists_every_key() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let echo = cfg.echo();
        for (section, key, _, _) in KEYS {
            assert!(
                echo.contains(&format!("{key} = ")),
                "echo missing {section}.{key}"
            );
        }
        // The echo round-trips.
        let back = parse_config(&echo).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lambda_parses_the_guidance_weights() {
        let cfg = parse_config("[model]\nlambda = 0.4,0.4,1\n").unwrap();
        assert_eq!(cfg.model.lambda, [0.4, 0.4, 1.0]);
    }

    #[test]
    fn type_errors_name_the_line() {
        let err = parse_config("[train]\nbase_lr = 0.01\npower = abc\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("abc"), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected_with_lines() {
        let err = parse_config("[train]\nbatches = 4\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("unknown key"), "{err}");

        let err = parse_config("[train]\nbatch = 4\nbatch = 8\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("duplicate"), "{err}");

        let err = parse_config("[nope]\n").unwrap_err().to_string();
        assert!(err.contains("unknown section"), "{err}");
    }

    #[test]
    fn comments_and_flags_apply() {
        let mut cfg = parse_config("[model] # comment\nnum_classes = 7 # trailing\n").unwrap();
        assert_eq!(cfg.model.num_classes, 7);
        // Flag-style override of a key set by file is legal.
        cfg.set("model", "num_classes", "9", 0).unwrap();
        assert_eq!(cfg.model.num_classes, 9);
    }

    #[test]
    fn every_schema_key_is_settable_and_gettable() {
        let mut cfg = RunConfig::default();
        for (section, key, _, _) in KEYS {
            let v = cfg.get(section, key);
            cfg.set(section, key, &v, 0)
                .unwrap_or_else(|e| panic!("{section}.{key}: {e}"));
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn cross_field_validation() {
        let mut cfg = RunConfig::default();
        cfg.data.scene.num_classes = 7;
        assert!(cfg.validate().is_err());
    }
}
