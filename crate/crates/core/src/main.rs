use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use gbrbm::bundle::ModelBundle;
use gbrbm::config::RunConfig;
use gbrbm::dataset::{self, generate_synthetic, LabeledDataset, FEATURE_COUNT};
use gbrbm::pipeline::{self, Init};
use gbrbm::{Error, Result};

/// GBRBM-pretrained deep autoencoder for UAV-ground RSS prediction.
#[derive(Parser)]
#[command(name = "gbrbm", version, after_long_help = RunConfig::key_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines; see `--help` for keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.synth.seed = seed;
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("--out is required".into()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic dataset as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-trains, fine-tunes and saves a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training CSV; the first `n_train` shuffled rows are used.
        #[arg(long)]
        data: PathBuf,
        /// Per-epoch metrics CSV (default: `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Runs the block-count sweep instead; `--out` receives the summary.
        #[arg(long)]
        sweep: bool,
    },
    /// Reports accuracy and MSE of a model on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the `tolerance_dbm` key.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Predicts RSS for feature rows from a CSV or from flags.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// CSV with the nine feature columns.
        #[arg(long, conflicts_with_all = FEATURE_FLAGS)]
        data: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureFlags,
    },
    /// Trains one model per block count and writes a summary CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

const FEATURE_FLAGS: [&str; FEATURE_COUNT] = [
    "uav_lat",
    "uav_lon",
    "uav_elev_angle",
    "cell_lat",
    "cell_lon",
    "cell_elev",
    "cell_building",
    "mast_height",
    "uav_alt",
];

#[derive(Args)]
struct FeatureFlags {
    #[arg(long, allow_negative_numbers = true)]
    uav_lat: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    uav_lon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    uav_elev_angle: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    cell_lat: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    cell_lon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    cell_elev: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    cell_building: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    mast_height: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    uav_alt: Option<f64>,
}

impl FeatureFlags {
    fn row(&self) -> Result<Array2<f64>> {
        let values = [
            self.uav_lat,
            self.uav_lon,
            self.uav_elev_angle,
            self.cell_lat,
            self.cell_lon,
            self.cell_elev,
            self.cell_building,
            self.mast_height,
            self.uav_alt,
        ];
        let mut row = Vec::with_capacity(FEATURE_COUNT);
        for (value, name) in values.iter().zip(FEATURE_FLAGS) {
            let v = value.ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "missing feature flag --{}",
                    name.replace('_', "-")
                ))
            })?;
            row.push(v);
        }
        Ok(Array2::from_shape_vec((1, FEATURE_COUNT), row).expect("one row"))
    }
}

fn load_data(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load_csv(path).map_err(|e| e.in_stage("load"))
}

fn lines(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}\n")).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.run_config()?;
            let data = generate_synthetic(&cfg.synth)?;
            let out = common.out()?;
            let tmp = out.with_extension("csv.partial");
            data.save_csv(&tmp)
                .and_then(|_| {
                    std::fs::rename(&tmp, out).map_err(|e| Error::Io {
                        path: out.to_path_buf(),
                        source: e,
                    })
                })
                .inspect_err(|_| drop(std::fs::remove_file(&tmp)))?;
            println!("wrote {} rows to {}", data.len(), out.display());
        }
        Command::Train {
            common,
            data,
            metrics,
            sweep,
        } => {
            let cfg = common.run_config()?;
            let out = common.out()?;
            let data = load_data(&data)?;
            if sweep {
                return write_sweep(&data, &cfg, out);
            }
            let (train, test) = pipeline::split(&data, &cfg)?;
            let trained = pipeline::train_model(&train, &cfg, Init::Pretrained)?;
            let metrics_path = metrics.unwrap_or_else(|| {
                let mut p = out.as_os_str().to_os_string();
                p.push(".metrics.csv");
                PathBuf::from(p)
            });
            pipeline::write_all_or_nothing(&[
                (out, trained.bundle.to_text()),
                (&metrics_path, pipeline::metrics_csv(&trained.metrics)?),
            ])
            .map_err(|e| e.in_stage("save"))?;
            let report = pipeline::evaluate(&trained.bundle, &test, cfg.tolerance_dbm)?;
            println!("model: {}", out.display());
            println!("metrics: {}", metrics_path.display());
            println!(
                "held-out rows: {}  accuracy(±{} dBm): {:.4}  mse: {:.4} dB^2",
                test.len(),
                cfg.tolerance_dbm,
                report.accuracy,
                report.mse
            );
        }
        Command::Eval {
            common,
            model,
            data,
            tolerance,
        } => {
            let cfg = common.run_config()?;
            let tolerance = tolerance.unwrap_or(cfg.tolerance_dbm);
            let bundle = ModelBundle::load(&model)?;
            let data = load_data(&data)?;
            let report = pipeline::evaluate(&bundle, &data, tolerance)?;
            if let Some(out) = &common.out {
                pipeline::write_all_or_nothing(&[(out, pipeline::residuals_csv(&report)?)])?;
            }
            let abs: Vec<f64> = report
                .residuals
                .iter()
                .map(|r| r.residual_dbm().abs())
                .collect();
            let mean_abs = abs.iter().sum::<f64>() / abs.len() as f64;
            let max_abs = abs.iter().copied().fold(0.0, f64::max);
            println!("rows: {}", report.residuals.len());
            println!("accuracy(±{tolerance} dBm): {:.4}", report.accuracy);
            println!("mse: {:.4} dB^2", report.mse);
            println!("mean |residual|: {mean_abs:.4} dB  max |residual|: {max_abs:.4} dB");
        }
        Command::Predict {
            common,
            model,
            data,
            features,
        } => {
            let bundle = ModelBundle::load(&model)?;
            let x = match &data {
                Some(path) => dataset::load_features_csv(path).map_err(|e| e.in_stage("load"))?,
                None => features.row()?,
            };
            let text = lines(&pipeline::predict(&bundle, &x)?);
            match &common.out {
                Some(out) => pipeline::write_all_or_nothing(&[(out, text)])?,
                None => print!("{text}"),
            }
        }
        Command::Sweep { common, data } => {
            let cfg = common.run_config()?;
            let out = common.out()?;
            let data = load_data(&data)?;
            write_sweep(&data, &cfg, out)?;
        }
    }
    Ok(())
}

fn write_sweep(data: &LabeledDataset, cfg: &RunConfig, out: &Path) -> Result<()> {
    let rows = pipeline::sweep(data, cfg)?;
    pipeline::write_all_or_nothing(&[(out, pipeline::sweep_csv(&rows)?)])?;
    for r in &rows {
        println!(
            "blocks {}  accuracy {:.4}  mse {:.4}",
            r.hidden_sizes.len(),
            r.test_accuracy,
            r.test_mse
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
