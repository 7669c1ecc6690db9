//! Run configuration: JSON file merged over the defaults, then dotted
//! command-line overrides, then a strict typed parse.

use std::path::{Path, PathBuf};

use featherpoint::bench::synth::{BENCH_HEIGHT, BENCH_WIDTH};
use featherpoint::bench::{BORDER_MARGIN, EPS_PX};
use featherpoint::deploy::DEFAULT_BUDGET_BYTES;
use featherpoint::keypoints::{ThresholdMode, FIXED_THRESHOLDS, NMS_RADIUS};
use featherpoint::nas::NasConfig;
use featherpoint::nn::ArchSpec;
use featherpoint::quant::QuantConfig;
use featherpoint::train::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_N_TRAIN: usize = 64;
pub const DEFAULT_N_VAL: usize = 16;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_EVAL_PAIRS: usize = 16;
pub const DEFAULT_GEN_SEQUENCES: usize = 4;
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n_train: usize,
    pub n_val: usize,
    /// Side of the square training scenes, a multiple of 8.
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticData,
    /// Evaluate on this HPatches-layout directory instead of synthetic pairs.
    pub hpatches_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub eps_px: f64,
    /// One report is written per mode.
    pub threshold_modes: Vec<ThresholdMode>,
    pub nms_radius: usize,
    pub border: usize,
    /// Synthetic benchmark size, used when no HPatches directory is given.
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub height: usize,
    pub width: usize,
    pub budget_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Alternating illumination and viewpoint sequences.
    pub sequences: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ArchSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub nas: NasConfig,
    pub quant: QuantConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
    pub gen: GenConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut threshold_modes = vec![ThresholdMode::Adaptive];
        threshold_modes.extend(FIXED_THRESHOLDS.iter().map(|&v| ThresholdMode::Fixed(v)));
        RunConfig {
            seed: DEFAULT_SEED,
            data: DataConfig {
                synthetic: SyntheticData {
                    n_train: DEFAULT_N_TRAIN,
                    n_val: DEFAULT_N_VAL,
                    size: DEFAULT_IMAGE_SIZE,
                },
                hpatches_dir: None,
            },
            model: ArchSpec::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            nas: NasConfig::default(),
            quant: QuantConfig::default(),
            eval: EvalConfig {
                eps_px: EPS_PX,
                threshold_modes,
                nms_radius: NMS_RADIUS,
                border: BORDER_MARGIN,
                pairs: DEFAULT_EVAL_PAIRS,
                height: BENCH_HEIGHT,
                width: BENCH_WIDTH,
            },
            report: ReportConfig {
                height: BENCH_HEIGHT,
                width: BENCH_WIDTH,
                budget_bytes: DEFAULT_BUDGET_BYTES,
            },
            gen: GenConfig {
                sequences: DEFAULT_GEN_SEQUENCES,
                height: BENCH_HEIGHT,
                width: BENCH_WIDTH,
            },
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
        }
    }
}

/// Top-level keys, usable as `--seed 3` without a dot.
pub fn top_level_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    }
}

/// Every leaf of the default configuration as `path = json`.
pub fn default_lines() -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            _ => out.push(format!("{prefix} = {v}")),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

pub fn defaults_help() -> String {
    let mut s = String::from(
        "Configuration defaults (override in a JSON file with --config, or per key with --<path> <json>, e.g. --train.epochs 5):\n",
    );
    for l in default_lines() {
        s.push_str("  ");
        s.push_str(&l);
        s.push('\n');
    }
    s
}

/// Recursive merge; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `value` is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, path: &str, value: &str) -> Result<(), CliError> {
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{path}`")));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj: &mut Map<String, Value> = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .get_mut(*k)
            .ok_or_else(|| CliError::Config(format!("unknown configuration key `{}`", keys[..=i].join("."))))?;
    }
    unreachable!()
}

/// Defaults, then the file, then overrides, parsed with full-path errors.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing { path: path.to_path_buf(), reason: e.to_string() })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let v: Value = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut root, v);
    }
    for (k, v) in overrides {
        apply_override(&mut root, k, v)?;
    }
    let cfg: RunConfig =
        serde_path_to_error::deserialize(root).map_err(|e| CliError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let s = &self.data.synthetic;
        if s.size == 0 || s.size % 8 != 0 {
            bad.push(format!("data.synthetic.size {} must be a nonzero multiple of 8", s.size));
        }
        if s.n_train == 0 || s.n_val == 0 {
            bad.push("data.synthetic.n_train and n_val must be positive".to_string());
        }
        if self.train.batch == 0 {
            bad.push("train.batch must be positive".to_string());
        }
        if self.quant.calibration_batches == 0 {
            bad.push("quant.calibration_batches must be positive".to_string());
        }
        if self.eval.threshold_modes.is_empty() {
            bad.push("eval.threshold_modes must not be empty".to_string());
        }
        for (name, h, w) in [
            ("eval", self.eval.height, self.eval.width),
            ("report", self.report.height, self.report.width),
            ("gen", self.gen.height, self.gen.width),
        ] {
            if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
                bad.push(format!("{name}.height and {name}.width must be nonzero multiples of 8"));
            }
        }
        if let Err(e) = self.model.validate() {
            bad.push(format!("model: {e}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }
}
