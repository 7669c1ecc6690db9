//! One function per subcommand. Every output is written under `out_dir`
//! and is a deterministic function of the configuration and input files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use featherpoint::bench::synth::{benchmark_pairs, generate_sequence};
use featherpoint::bench::{hpatches, run_benchmark, EvalReport, InferenceConfig, PairKind, SequencePair};
use featherpoint::deploy::{memory_report, Precision};
use featherpoint::keypoints::ThresholdMode;
use featherpoint::nas::{search, SuperNet};
use featherpoint::nn::serialize;
use featherpoint::nn::{build_student, FeatureModel, ModelGraph};
use featherpoint::quant::{dynamic_range_report, Manifest, QuantReport, QuantizedModel};
use featherpoint::rng::sub_seed;
use featherpoint::train::{train, Dataset, EpochMetrics};
use featherpoint::{Error, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const MODEL_FILE: &str = "model.fpt.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const ARCH_FILE: &str = "arch.json";
pub const SEARCH_LOG_FILE: &str = "search_log.jsonl";
pub const SEARCH_MODEL_FILE: &str = "search_model.fpt.json";
pub const MANIFEST_FILE: &str = "quant_manifest.json";
pub const QUANT_REPORT_FILE: &str = "quant_report.json";
pub const HPATCHES_DIR: &str = "hpatches";

type Result<T> = std::result::Result<T, CliError>;

fn create_out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    Ok(&cfg.out_dir)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// JSON Lines writer that flushes after each record, so a diverged run
/// keeps the epochs it finished.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok(JsonLines {
            out: BufWriter::new(f),
            path,
        })
    }

    fn push<T: Serialize>(&mut self, v: &T) -> featherpoint::Result<()> {
        let line = serde_json::to_string(v)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|source| Error::Io {
                path: self.path.clone(),
                source,
            })
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let s = &cfg.data.synthetic;
    Ok(Dataset::synthetic(sub_seed(cfg.seed, "data"), s.n_train, s.n_val, s.size)?)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    if !path.is_file() {
        return Err(CliError::Missing { path: path.to_path_buf(), reason: "no such file".into() });
    }
    Ok(serialize::load(path)?)
}

#[derive(Serialize)]
struct FinalLosses {
    val_det: f64,
    val_desc: f64,
    val_total: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    param_count: usize,
    s_det: f64,
    s_desc: f64,
    /// Absent when no epoch ran.
    final_validation: Option<FinalLosses>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = create_out_dir(cfg)?;
    let data = dataset(cfg)?;
    let mut model = build_student(&cfg.model, sub_seed(cfg.seed, "init"))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut log = JsonLines::create(metrics_path.clone())?;
    let outcome = train(&mut model, &data, &cfg.train, &cfg.loss, sub_seed(cfg.seed, "train"), |m: &EpochMetrics| {
        log::info!("epoch {} val_total {:.4}", m.epoch, m.val_total);
        log.push(m)
    })?;
    let model_path = dir.join(MODEL_FILE);
    serialize::save(&model, &model_path)?;
    let summary = TrainSummary {
        epochs: outcome.metrics.len(),
        param_count: model.count_params(),
        s_det: outcome.weights.s_det,
        s_desc: outcome.weights.s_desc,
        final_validation: outcome.metrics.last().map(|m| FinalLosses {
            val_det: m.val_det,
            val_desc: m.val_desc,
            val_total: m.val_total,
        }),
    };
    let summary_path = dir.join(TRAIN_SUMMARY_FILE);
    write_json(&summary_path, &summary)?;
    Ok(vec![model_path, metrics_path, summary_path])
}

pub fn cmd_search(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = create_out_dir(cfg)?;
    let data = dataset(cfg)?;
    let mut net = SuperNet::from_config(&cfg.model, &cfg.nas, sub_seed(cfg.seed, "init"))?;
    let log_path = dir.join(SEARCH_LOG_FILE);
    let mut log = JsonLines::create(log_path.clone())?;
    let outcome = search(
        &mut net,
        &data,
        &cfg.train,
        &cfg.loss,
        &cfg.nas.schedule(),
        cfg.nas.epochs,
        cfg.nas.logit_lr_scale,
        sub_seed(cfg.seed, "search"),
        |e| log.push(e),
    )?;
    let arch_path = dir.join(ARCH_FILE);
    write_json(&arch_path, &outcome.spec)?;
    let model_path = dir.join(SEARCH_MODEL_FILE);
    serialize::save(&net.discretize()?, &model_path)?;
    Ok(vec![arch_path, log_path, model_path])
}

/// HPatches directory when configured, synthetic pairs otherwise.
pub fn eval_pairs(cfg: &RunConfig) -> Result<Vec<SequencePair>> {
    match &cfg.data.hpatches_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::Missing { path: dir.clone(), reason: "not a directory".into() });
            }
            Ok(hpatches::load(dir)?.pairs)
        }
        None => Ok(benchmark_pairs(sub_seed(cfg.seed, "bench"), cfg.eval.pairs, cfg.eval.height, cfg.eval.width)?),
    }
}

fn inference(cfg: &RunConfig, mode: ThresholdMode) -> InferenceConfig {
    InferenceConfig {
        mode,
        nms_radius: cfg.eval.nms_radius,
        eps_px: cfg.eval.eps_px,
        border: cfg.eval.border,
    }
}

fn calibration_batches(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Tensor>> {
    data.train
        .chunks(cfg.train.batch)
        .take(cfg.quant.calibration_batches)
        .map(|c| Ok(Tensor::stack_batch(&c.iter().map(|p| p.to_tensor()).collect::<Vec<_>>())?))
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Scores {
    pub rep_i: f64,
    pub rep_v: f64,
    pub cor_i: f64,
    pub cor_v: f64,
    pub mean_keypoints: f64,
}

impl From<&EvalReport> for Scores {
    fn from(r: &EvalReport) -> Self {
        Scores {
            rep_i: r.rep_i,
            rep_v: r.rep_v,
            cor_i: r.cor_i,
            cor_v: r.cor_v,
            mean_keypoints: r.mean_keypoints,
        }
    }
}

/// `100 (int8 - float) / float`; `None` where the float score is zero.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DeltaPct {
    pub rep_i: Option<f64>,
    pub rep_v: Option<f64>,
    pub cor_i: Option<f64>,
    pub cor_v: Option<f64>,
}

fn pct(f: f64, q: f64) -> Option<f64> {
    (f != 0.0).then(|| 100.0 * (q - f) / f)
}

impl DeltaPct {
    pub fn of(f: &Scores, q: &Scores) -> Self {
        DeltaPct {
            rep_i: pct(f.rep_i, q.rep_i),
            rep_v: pct(f.rep_v, q.rep_v),
            cor_i: pct(f.cor_i, q.cor_i),
            cor_v: pct(f.cor_v, q.cor_v),
        }
    }
}

#[derive(Serialize)]
struct ModeComparison {
    mode: String,
    float: Scores,
    int8: Scores,
    delta_pct: DeltaPct,
}

#[derive(Serialize)]
struct QuantComparisonReport {
    calibration_batches: usize,
    modes: Vec<ModeComparison>,
    dynamic_range: QuantReport,
}

pub fn cmd_quantize(cfg: &RunConfig, model_path: &Path) -> Result<Vec<PathBuf>> {
    let dir = create_out_dir(cfg)?;
    let model = load_model(model_path)?;
    let data = dataset(cfg)?;
    let batches = calibration_batches(cfg, &data)?;
    let (q, cal) = QuantizedModel::calibrated(&model, &batches, &cfg.quant)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &q.manifest)?;
    let pairs = eval_pairs(cfg)?;
    let mut modes = Vec::new();
    for &mode in &cfg.eval.threshold_modes {
        let ic = inference(cfg, mode);
        let f = Scores::from(&run_benchmark(&model, &pairs, &ic)?);
        let i = Scores::from(&run_benchmark(&q, &pairs, &ic)?);
        modes.push(ModeComparison {
            mode: mode.label(),
            float: f,
            int8: i,
            delta_pct: DeltaPct::of(&f, &i),
        });
    }
    let report = QuantComparisonReport {
        calibration_batches: batches.len(),
        modes,
        dynamic_range: dynamic_range_report(&cal, &q.manifest)?,
    };
    let report_path = dir.join(QUANT_REPORT_FILE);
    write_json(&report_path, &report)?;
    Ok(vec![manifest_path, report_path])
}

pub fn eval_file_name(mode: ThresholdMode, quantized: bool) -> String {
    format!("eval_{}{}.json", if quantized { "int8_" } else { "" }, mode.label())
}

/// With a manifest, evaluates the fake-quantized model instead.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path, manifest_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    let dir = create_out_dir(cfg)?;
    let model = load_model(model_path)?;
    let quantized = match manifest_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Missing { path: p.to_path_buf(), reason: e.to_string() })?;
            let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Some(QuantizedModel::new(&model, manifest)?)
        }
        None => None,
    };
    let net: &dyn FeatureModel = match &quantized {
        Some(q) => q,
        None => &model,
    };
    let pairs = eval_pairs(cfg)?;
    let mut written = Vec::new();
    for &mode in &cfg.eval.threshold_modes {
        let report = run_benchmark(net, &pairs, &inference(cfg, mode))?;
        let path = dir.join(eval_file_name(mode, quantized.is_some()));
        write_json(&path, &report)?;
        written.push(path);
    }
    Ok(written)
}

pub fn memory_file_name(p: Precision) -> &'static str {
    match p {
        Precision::Float32 => "memory_float32.json",
        Precision::Int8 => "memory_int8.json",
    }
}

pub fn cmd_report(cfg: &RunConfig, model_path: &Path) -> Result<Vec<PathBuf>> {
    let dir = create_out_dir(cfg)?;
    let model = load_model(model_path)?;
    let shape = [1, 1, cfg.report.height, cfg.report.width];
    let mut written = Vec::new();
    for p in [Precision::Float32, Precision::Int8] {
        let r = memory_report(&model, &shape, p, cfg.report.budget_bytes)?;
        let path = dir.join(memory_file_name(p));
        write_json(&path, &r)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `out_dir/hpatches` with alternating `i_` and `v_` sequences.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = create_out_dir(cfg)?.join(HPATCHES_DIR);
    let sequences = (0..cfg.gen.sequences)
        .map(|i| {
            let kind = if i % 2 == 0 { PairKind::Illumination } else { PairKind::Viewpoint };
            generate_sequence(sub_seed(cfg.seed, &format!("gen.{i}")), kind, cfg.gen.height, cfg.gen.width)
        })
        .collect::<featherpoint::Result<Vec<_>>>()?;
    hpatches::export(&dir, &sequences)?;
    Ok(vec![dir])
}
