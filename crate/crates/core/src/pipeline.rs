//! End-to-end training, evaluation, prediction and the depth sweep.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::autoencoder::{
    finetune_supervised, finetune_unsupervised, predict_rss_batch, unfold, SoftmaxHead,
};
use crate::bundle::{BundleMetadata, ModelBundle};
use crate::config::RunConfig;
use crate::dataset::{self, LabeledDataset, Quantizer};
use crate::error::{Error, Result};
use crate::pretrain::{pretrain_stack, LayerStack};
use crate::rng::derive_seed;

const SPLIT_STREAM: u64 = 100;
const PRETRAIN_STREAM: u64 = 101;
const RANDOM_INIT_STREAM: u64 = 102;
const UNSUPERVISED_STREAM: u64 = 103;
const SUPERVISED_STREAM: u64 = 104;

/// How the encoder weights are initialized before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Pretrained,
    /// Small Gaussian weights with unit `σ`, for baselines.
    Random,
}

/// One row of the training metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// `pretrain_<block>`, `finetune` or `supervised`.
    pub phase: String,
    pub epoch: usize,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub bundle: ModelBundle,
    pub metrics: Vec<MetricRow>,
}

fn rows<'a>(phase: &str, trace: &'a [f64]) -> impl Iterator<Item = MetricRow> + 'a {
    let phase = phase.to_string();
    trace.iter().enumerate().map(move |(i, &error)| MetricRow {
        phase: phase.clone(),
        epoch: i + 1,
        error,
    })
}

/// Trains on every row of `train` with the hidden sizes of `cfg`.
pub fn train_model(train: &LabeledDataset, cfg: &RunConfig, init: Init) -> Result<Trained> {
    cfg.validate()?;
    let (x, stats) =
        dataset::standardize(&train.features(), None).map_err(|e| e.in_stage("standardize"))?;
    let mut metrics = Vec::new();

    let stack = match init {
        Init::Pretrained => {
            let pcfg = cfg.pretrain_config(derive_seed(cfg.seed, PRETRAIN_STREAM));
            let pre = pretrain_stack(x.view(), &cfg.hidden_sizes, &pcfg)
                .map_err(|e| e.in_stage("pretrain"))?;
            for (t, trace) in pre.traces.iter().enumerate() {
                metrics.extend(rows(
                    &format!("pretrain_{}", t + 1),
                    &trace.reconstruction_error,
                ));
            }
            pre.stack
        }
        Init::Random => LayerStack::random_init(
            x.ncols(),
            &cfg.hidden_sizes,
            derive_seed(cfg.seed, RANDOM_INIT_STREAM),
        )
        .map_err(|e| e.in_stage("initialize"))?,
    };
    let net = unfold(&stack).map_err(|e| e.in_stage("unfold"))?;

    let ucfg = cfg.finetune_config(derive_seed(cfg.seed, UNSUPERVISED_STREAM));
    let (net, trace) =
        finetune_unsupervised(&net, x.view(), &ucfg).map_err(|e| e.in_stage("finetune"))?;
    metrics.extend(rows("finetune", &trace));

    let rss = train.rss();
    let quantizer = Quantizer::fit(&rss, cfg.bins).map_err(|e| e.in_stage("quantize"))?;
    let labels: Vec<usize> = rss.iter().map(|&r| quantizer.label(r)).collect();
    let head = SoftmaxHead::new(net.code_dim(), quantizer.centers())
        .map_err(|e| e.in_stage("quantize"))?;

    let scfg = cfg.finetune_config(derive_seed(cfg.seed, SUPERVISED_STREAM));
    let (net, head, trace) = finetune_supervised(&net, &head, x.view(), &labels, &scfg)
        .map_err(|e| e.in_stage("supervised"))?;
    metrics.extend(rows("supervised", &trace));

    Ok(Trained {
        bundle: ModelBundle {
            net,
            head,
            stats,
            metadata: BundleMetadata {
                seed: cfg.seed,
                config_hash: cfg.hash(),
                pretrain_epochs: cfg.pretrain_epochs,
                train_epochs: cfg.train_epochs,
            },
        },
        metrics,
    })
}

/// Splits `data` into `cfg.n_train` training rows and a held-out rest.
pub fn split(data: &LabeledDataset, cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    dataset::split(data, cfg.n_train, derive_seed(cfg.seed, SPLIT_STREAM))
        .map_err(|e| e.in_stage("split"))
}

/// Predicted RSS in dBm for raw feature rows.
pub fn predict(bundle: &ModelBundle, features: &Array2<f64>) -> Result<Vec<f64>> {
    let x = bundle.stats.apply(features)?;
    predict_rss_batch(x.view(), &bundle.net, &bundle.head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub index: usize,
    pub truth_dbm: f64,
    pub pred_dbm: f64,
}

impl Residual {
    pub fn residual_dbm(&self) -> f64 {
        self.pred_dbm - self.truth_dbm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Fraction of rows predicted within the tolerance.
    pub accuracy: f64,
    /// Mean squared error in dBm².
    pub mse: f64,
    pub residuals: Vec<Residual>,
}

pub fn evaluate(
    bundle: &ModelBundle,
    data: &LabeledDataset,
    tolerance_dbm: f64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let pred = predict(bundle, &data.features())?;
    let truth = data.rss();
    let accuracy = dataset::accuracy(&pred, &truth, tolerance_dbm)?;
    let mse = pred
        .iter()
        .zip(&truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    let residuals = pred
        .iter()
        .zip(&truth)
        .enumerate()
        .map(|(index, (&pred_dbm, &truth_dbm))| Residual {
            index,
            truth_dbm,
            pred_dbm,
        })
        .collect();
    Ok(EvalReport {
        accuracy,
        mse,
        residuals,
    })
}

/// Result of one depth in the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub hidden_sizes: Vec<usize>,
    pub test_accuracy: f64,
    pub test_mse: f64,
}

/// Trains one model per block count on the same split.
pub fn sweep(data: &LabeledDataset, cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let (train, test) = split(data, cfg)?;
    cfg.sweep_configs()
        .into_iter()
        .map(|sizes| {
            let run = RunConfig {
                hidden_sizes: sizes.clone(),
                ..cfg.clone()
            };
            log::info!("sweep: training hidden sizes {sizes:?}");
            let trained = train_model(&train, &run, Init::Pretrained)?;
            let report = evaluate(&trained.bundle, &test, cfg.tolerance_dbm)?;
            Ok(SweepRow {
                hidden_sizes: sizes,
                test_accuracy: report.accuracy,
                test_mse: report.mse,
            })
        })
        .collect()
}

fn csv_text<F>(header: &[&str], mut write_rows: F) -> Result<String>
where
    F: FnMut(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::InvalidParameter(format!("csv encoding: {e}"));
    w.write_record(header).map_err(to_err)?;
    write_rows(&mut w).map_err(to_err)?;
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidParameter(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    csv_text(&["phase", "epoch", "error"], |w| {
        rows.iter().try_for_each(|r| {
            w.write_record([r.phase.clone(), r.epoch.to_string(), r.error.to_string()])
        })
    })
}

pub fn residuals_csv(report: &EvalReport) -> Result<String> {
    csv_text(&["index", "truth_dbm", "pred_dbm", "residual_dbm"], |w| {
        report.residuals.iter().try_for_each(|r| {
            w.write_record([
                r.index.to_string(),
                r.truth_dbm.to_string(),
                r.pred_dbm.to_string(),
                r.residual_dbm().to_string(),
            ])
        })
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    csv_text(
        &["blocks", "hidden_sizes", "test_accuracy", "test_mse"],
        |w| {
            rows.iter().try_for_each(|r| {
                let sizes: Vec<String> = r.hidden_sizes.iter().map(usize::to_string).collect();
                w.write_record([
                    r.hidden_sizes.len().to_string(),
                    sizes.join(" "),
                    r.test_accuracy.to_string(),
                    r.test_mse.to_string(),
                ])
            })
        },
    )
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes every file or none: contents go to temporary siblings first and are
/// renamed into place only after all writes succeed.
pub fn write_all_or_nothing(files: &[(&Path, String)]) -> Result<()> {
    let mut written = Vec::new();
    for (path, contents) in files {
        let tmp = partial_path(path);
        if let Err(e) = std::fs::write(&tmp, contents) {
            let _ = std::fs::remove_file(&tmp);
            written.iter().for_each(|t| drop(std::fs::remove_file(t)));
            return Err(Error::io(*path, e));
        }
        written.push(tmp);
    }
    for ((path, _), tmp) in files.iter().zip(&written) {
        if let Err(e) = std::fs::rename(tmp, path) {
            written.iter().for_each(|t| drop(std::fs::remove_file(t)));
            return Err(Error::io(*path, e));
        }
    }
    Ok(())
}
