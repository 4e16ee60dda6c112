use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qdnn::data::{load_csv, load_idx, Dataset};
use qdnn::engine::{Tape, Tensor};
use qdnn::mode::BitMode;
use qdnn::quantize::{quantize_weights, switch_codes, thresholds, CodeTensor, Family};
use qdnn::store::{atomic_write, ByteAccounting, PackedModel, StoredWeights};
use qdnn::trainer::{fit_with, EpochRecord};
use qdnn::Error;
use serde::Serialize;

use crate::config::{check_fit, RunConfig};
use crate::failure::{Failure, EXIT_DIVERGED};

pub const MODEL_FILE: &str = "model.qdnn";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// CSV with an explicit header so empty tables still name their columns.
fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>, Failure> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer.write_record(header).map_err(|e| Failure::from(Error::Csv(e)))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Failure::from(Error::Csv(e)))?;
    }
    writer.into_inner().map_err(|e| Failure::from(Error::Io(e.into_error())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    atomic_write(path, bytes).map_err(|e| Failure { code: 1, message: format!("cannot write {}: {e}", path.display()) })
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure { code: 1, message: format!("cannot create {}: {e}", dir.display()) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mode: u8,
    pub accuracy: f64,
    /// Mean training loss over the last epoch.
    pub train_loss: f64,
}

pub fn train(config_path: &Path) -> Result<(), Failure> {
    let config = RunConfig::load(config_path)?;
    let (train, valid) = config.load_data()?;
    let mut net = config.build_net()?;
    check_fit(&net, &train)?;
    check_fit(&net, &valid)?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    write_file(&dir.join(RESOLVED_CONFIG_FILE), config.to_toml().as_bytes())?;

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut last_epoch = None;
    let result = fit_with(&mut net, &train, &valid, &config.train, |epoch, recs| {
        let line: Vec<String> = recs.iter().map(|r| format!("{}b {:.4}", r.mode, r.accuracy)).collect();
        eprintln!("epoch {:>3}/{}: {}", epoch + 1, config.train.epochs, line.join("  "));
        records.extend_from_slice(recs);
        last_epoch = Some(epoch);
    });
    write_file(&dir.join(TRAIN_LOG_FILE), &csv_bytes(&["epoch", "mode", "loss", "accuracy"], &records)?)?;
    let report = match result {
        Ok(report) => report,
        Err(Error::NonFinite { mode, value }) => {
            let last = last_epoch.map_or("none".to_string(), |e| e.to_string());
            return Err(Failure { code: EXIT_DIVERGED, message: format!("training diverged: non-finite loss {value} in {mode}; last finite epoch: {last}") });
        }
        Err(e) => return Err(e.into()),
    };

    let last_loss: BTreeMap<u8, f64> = records.iter().map(|r| (r.mode, r.loss)).collect();
    let summary: Vec<SummaryRow> = report
        .final_accuracy
        .iter()
        .map(|(&mode, &accuracy)| SummaryRow { mode, accuracy, train_loss: last_loss.get(&mode).copied().unwrap_or(f64::NAN) })
        .collect();
    write_file(&dir.join(SUMMARY_FILE), &csv_bytes(&["mode", "accuracy", "train_loss"], &summary)?)?;
    let model_path = dir.join(MODEL_FILE);
    let stored = config.stored_bits();
    let bytes = PackedModel::from_net(&net, stored)?.write(&model_path)?;

    println!("{:<8}{:>10}{:>12}", "mode", "accuracy", "train loss");
    for row in &summary {
        println!("{:<8}{:>10.4}{:>12.4}", format!("{}-bit", row.mode), row.accuracy, row.train_loss);
    }
    println!("model: {} ({}, {bytes} bytes)", model_path.display(), stored);
    Ok(())
}

/// Where `eval` takes its samples from.
#[derive(Debug, Clone)]
pub enum EvalData {
    /// The evaluation split of a run config.
    Config(PathBuf),
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv(PathBuf),
}

impl EvalData {
    fn load(&self) -> Result<Dataset, Failure> {
        let data = |e: Error| Failure::data(e.to_string());
        match self {
            EvalData::Config(path) => Ok(RunConfig::load(path)?.load_data()?.1),
            EvalData::Idx { images, labels } => load_idx(images, labels).map_err(data),
            EvalData::Csv(path) => load_csv(path).map_err(data),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub stored_bits: u8,
    pub mode: u8,
    pub samples: usize,
    pub accuracy: f64,
    pub loss: f64,
}

pub fn eval(model: &Path, bits: Option<BitMode>, source: &EvalData, json: bool) -> Result<(), Failure> {
    let packed = PackedModel::read(model)?;
    let mode = bits.unwrap_or(packed.stored_bits);
    let loaded = packed.instantiate(mode)?;
    let data = source.load()?;
    check_fit(loaded.net(), &data)?;
    let result = loaded.evaluate(&data)?;
    let report = EvalReport {
        model: model.display().to_string(),
        stored_bits: packed.stored_bits.bits(),
        mode: mode.bits(),
        samples: data.len(),
        accuracy: result.accuracy,
        loss: result.loss,
    };
    if json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        println!("{mode}: accuracy {:.4} loss {:.4} over {} samples", report.accuracy, report.loss, report.samples);
    }
    Ok(())
}

pub fn switch(model: &Path, to: BitMode, out: &Path) -> Result<(), Failure> {
    let packed = PackedModel::read(model)?;
    if to == packed.stored_bits {
        return Err(Failure::usage(format!("{} is already stored at {to}", model.display())));
    }
    let switched = packed.switch(to)?;
    let before = packed.to_bytes().len();
    let after = switched.write(out)?;
    println!("{} ({}, {before} bytes) -> {} ({to}, {after} bytes)", model.display(), packed.stored_bits, out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub layer: usize,
    pub mode: u8,
    pub code: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub bits: u8,
    pub index: usize,
    pub numerator: u64,
    pub denominator: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParameterCounts {
    pub weights: usize,
    pub biases: usize,
    pub norm_learnable: usize,
    pub norm_statistics: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub stored_bits: u8,
    pub modes: Vec<u8>,
    pub layers: usize,
    pub quantized_layers: Vec<usize>,
    pub parameters: ParameterCounts,
    pub bytes: ByteAccounting,
    /// Normalization bytes over total file bytes.
    pub norm_byte_ratio: f64,
}

/// Low-bit modes a model file can run.
fn runnable_low_modes(packed: &PackedModel) -> Vec<BitMode> {
    let stored = packed.stored_bits;
    packed.modes.iter().copied().filter(|m| !m.is_full() && (stored.is_full() || *m <= stored)).collect()
}

/// Codes of one layer keyed by mode bits.
type ModeCodes = BTreeMap<u8, CodeTensor>;

/// Codes of every quantized layer in each low-bit mode the file can run.
pub fn layer_codes(packed: &PackedModel) -> Result<Vec<(usize, ModeCodes)>, Failure> {
    let modes = runnable_low_modes(packed);
    let mut out = Vec::new();
    for (index, layer) in packed.layers.iter().enumerate().filter(|(_, l)| l.quantized) {
        let mut per_mode = BTreeMap::new();
        for &m in &modes {
            let codes = match &layer.weights {
                StoredWeights::Codes(codes) => switch_codes(codes, m.bits())?,
                StoredWeights::Raw(values) => {
                    let w = Tensor::new(values.clone(), &layer.kind.weight_shape())?;
                    quantize_weights(&Tape::no_grad(), &w, m.bits(), Family::Aligned)?.codes
                }
            };
            per_mode.insert(m.bits(), codes);
        }
        out.push((index, per_mode));
    }
    Ok(out)
}

pub fn inspect_report(packed: &PackedModel) -> InspectReport {
    let mut params = ParameterCounts::default();
    for layer in &packed.layers {
        let [fan_in, channels] = layer.kind.weight_shape();
        params.weights += fan_in * channels;
        params.biases += layer.bias.as_ref().map_or(0, Vec::len);
        if let Some(norm) = &layer.norm {
            params.norm_learnable += norm.affine.iter().map(|(g, b)| g.len() + b.len()).sum::<usize>();
            params.norm_statistics += norm.stats.iter().map(|s| s.mean.len() + s.var.len()).sum::<usize>();
        }
    }
    let bytes = packed.accounting();
    InspectReport {
        stored_bits: packed.stored_bits.bits(),
        modes: packed.modes.iter().map(|m| m.bits()).collect(),
        layers: packed.layers.len(),
        quantized_layers: packed.layers.iter().enumerate().filter(|(_, l)| l.quantized).map(|(i, _)| i).collect(),
        parameters: params,
        bytes,
        norm_byte_ratio: bytes.norm as f64 / bytes.total as f64,
    }
}

pub fn inspect(model: &Path, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    let packed = PackedModel::read(model)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| model.with_extension("inspect"));
    create_dir(&out)?;

    let codes = layer_codes(&packed)?;
    let histograms: Vec<HistogramRow> = codes
        .iter()
        .flat_map(|(layer, per_mode)| {
            per_mode
                .iter()
                .flat_map(move |(&mode, c)| c.histogram().into_iter().enumerate().map(move |(code, count)| HistogramRow { layer: *layer, mode, code, count }))
        })
        .collect();
    let mut threshold_rows = Vec::new();
    for mode in runnable_low_modes(&packed) {
        let bits = mode.bits();
        for (index, t) in thresholds(bits, Family::Aligned)?.values.iter().enumerate() {
            threshold_rows.push(ThresholdRow { bits, index, numerator: *t.numer(), denominator: *t.denom(), value: *t.numer() as f64 / *t.denom() as f64 });
        }
    }
    let report = inspect_report(&packed);
    write_file(&out.join("histograms.csv"), &csv_bytes(&["layer", "mode", "code", "count"], &histograms)?)?;
    write_file(&out.join("thresholds.csv"), &csv_bytes(&["bits", "index", "numerator", "denominator", "value"], &threshold_rows)?)?;
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("accounting.json"), report_json.as_bytes())?;

    if json {
        println!("{report_json}");
        return Ok(());
    }
    let modes: Vec<String> = report.modes.iter().map(|m| m.to_string()).collect();
    println!("{}: stored at {}, modes {{{}}}, {} layers", model.display(), packed.stored_bits, modes.join(", "), report.layers);
    for (layer, per_mode) in &codes {
        let bins: Vec<String> = per_mode.iter().map(|(m, c)| format!("{m}b {}/{}", c.histogram().iter().filter(|&&n| n > 0).count(), 1usize << m)).collect();
        println!("  layer {layer}: occupied code bins {}", bins.join(", "));
    }
    let b = report.bytes;
    println!(
        "bytes: header {} | packed weights {} | raw weights {} | biases {} | normalization {} | total {}",
        b.header, b.packed_weights, b.raw_weights, b.biases, b.norm, b.total
    );
    let p = report.parameters;
    println!("parameters: weights {} | biases {} | norm learnable {} | norm statistics {}", p.weights, p.biases, p.norm_learnable, p.norm_statistics);
    println!("normalization share of file: {:.4}", report.norm_byte_ratio);
    println!("histograms, thresholds and accounting written to {}", out.display());
    Ok(())
}
