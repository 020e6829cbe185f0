//! Command-line behaviour: outputs, determinism, error reporting and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gbrbm::autoencoder::{predict_rss_batch, unfold, SoftmaxHead};
use gbrbm::bundle::ModelBundle;
use gbrbm::config::RunConfig;
use gbrbm::dataset::{self, LabeledDataset, Quantizer};
use gbrbm::pipeline;
use gbrbm::pretrain::pretrain_stack;
use gbrbm::rng::derive_seed;

fn gbrbm(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbrbm"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_values(out: &Output) -> Vec<f64> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| l.parse().unwrap())
        .collect()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, cfg: &RunConfig) -> PathBuf {
        let path = self.path("run.cfg");
        std::fs::write(&path, cfg.to_text()).unwrap();
        path
    }
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig {
        hidden_sizes: vec![10, 6],
        bins: 8,
        pretrain_epochs: 4,
        train_epochs: 6,
        n_train: 90,
        ..RunConfig::default()
    };
    cfg.synth.n_train = 90;
    cfg.synth.n_test = 30;
    cfg
}

fn synth(ws: &Workspace, cfg: &RunConfig, name: &str) -> PathBuf {
    let out = ws.path(name);
    let res = gbrbm(&[&"synth", &"--config", &ws.config(cfg), &"--out", &out]);
    assert!(res.status.success(), "{}", stderr(&res));
    out
}

fn train(ws: &Workspace, cfg: &RunConfig, data: &Path, model: &str) -> PathBuf {
    let out = ws.path(model);
    let res = gbrbm(&[
        &"train",
        &"--config",
        &ws.config(cfg),
        &"--data",
        &data,
        &"--out",
        &out,
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    out
}

#[test]
fn synth_writes_the_default_split_size_deterministically() {
    let ws = Workspace::new();
    let a = synth(&ws, &RunConfig::default(), "a.csv");
    let b = synth(&ws, &RunConfig::default(), "b.csv");
    assert_eq!(LabeledDataset::load_csv(&a).unwrap().len(), 887);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut odd = RunConfig::default();
    odd.synth.n_train = 13;
    odd.synth.n_test = 7;
    let c = synth(&ws, &odd, "c.csv");
    assert_eq!(LabeledDataset::load_csv(&c).unwrap().len(), 20);

    let bad = gbrbm(&[&"synth", &"--out", &ws.path("missing/dir/x.csv")]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("missing/dir"), "{}", stderr(&bad));
}

#[test]
fn train_is_deterministic_and_logs_every_epoch() {
    let ws = Workspace::new();
    let cfg = small_config();
    let data = synth(&ws, &cfg, "data.csv");
    let before = std::fs::read(&data).unwrap();
    let a = train(&ws, &cfg, &data, "a.model");
    let b = train(&ws, &cfg, &data, "b.model");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&data).unwrap(), before);

    let metrics = std::fs::read_to_string(ws.path("a.model.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("phase,epoch,error"));
    let phases: Vec<String> = lines
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    let count = |p: &str| phases.iter().filter(|x| x.as_str() == p).count();
    assert_eq!(count("pretrain_1"), cfg.pretrain_epochs);
    assert_eq!(count("pretrain_2"), cfg.pretrain_epochs);
    assert!((1..=cfg.train_epochs).contains(&count("finetune")));
    assert!((1..=cfg.train_epochs).contains(&count("supervised")));

    let bundle = ModelBundle::load(&a).unwrap();
    assert_eq!(bundle.metadata.config_hash, cfg.hash());
    assert_eq!(bundle.layer_dims(), vec![9, 10, 6, 10, 9]);
}

#[test]
fn zero_learning_rate_leaves_the_unfolded_model_untouched() {
    let ws = Workspace::new();
    let cfg = RunConfig {
        learning_rate: 0.0,
        ..small_config()
    };
    let data_path = synth(&ws, &cfg, "data.csv");
    let model = train(&ws, &cfg, &data_path, "zero.model");
    let bundle = ModelBundle::load(&model).unwrap();

    let data = LabeledDataset::load_csv(&data_path).unwrap();
    let (train_rows, _) = pipeline::split(&data, &cfg).unwrap();
    let (x, _) = dataset::standardize(&train_rows.features(), None).unwrap();
    let pcfg = cfg.pretrain_config(derive_seed(cfg.seed, 101));
    let untrained = unfold(
        &pretrain_stack(x.view(), &cfg.hidden_sizes, &pcfg)
            .unwrap()
            .stack,
    )
    .unwrap();
    let centers = Quantizer::fit(&train_rows.rss(), cfg.bins)
        .unwrap()
        .centers();
    let head = SoftmaxHead::new(untrained.code_dim(), centers.clone()).unwrap();
    assert_eq!(bundle.net, untrained);
    assert_eq!(bundle.head, head);

    let expected = predict_rss_batch(x.view(), &untrained, &head).unwrap();
    let saved = pipeline::predict(&bundle, &train_rows.features()).unwrap();
    let uniform = centers.iter().sum::<f64>() / centers.len() as f64;
    for (a, b) in expected.iter().zip(&saved) {
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a - uniform).abs() < 1e-9);
    }
}

#[test]
fn eval_and_predict_agree_and_are_repeatable() {
    let ws = Workspace::new();
    let cfg = small_config();
    let data = synth(&ws, &cfg, "data.csv");
    let model = train(&ws, &cfg, &data, "m.model");
    let rows = LabeledDataset::load_csv(&data).unwrap();

    let res_a = ws.path("res_a.csv");
    let res_b = ws.path("res_b.csv");
    let ea = gbrbm(&[
        &"eval", &"--model", &model, &"--data", &data, &"--out", &res_a,
    ]);
    let eb = gbrbm(&[
        &"eval", &"--model", &model, &"--data", &data, &"--out", &res_b,
    ]);
    assert!(ea.status.success(), "{}", stderr(&ea));
    assert_eq!(ea.stdout, eb.stdout);
    assert!(String::from_utf8_lossy(&ea.stdout).contains("accuracy"));
    let residuals = std::fs::read_to_string(&res_a).unwrap();
    assert_eq!(residuals, std::fs::read_to_string(&res_b).unwrap());
    let mut lines = residuals.lines();
    assert_eq!(lines.next(), Some("index,truth_dbm,pred_dbm,residual_dbm"));
    let eval_preds: Vec<f64> = lines
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(eval_preds.len(), rows.len());

    let batch = gbrbm(&[&"predict", &"--model", &model, &"--data", &data]);
    assert!(batch.status.success(), "{}", stderr(&batch));
    let batch_preds = stdout_values(&batch);
    assert_eq!(batch_preds, eval_preds);

    let bundle = ModelBundle::load(&model).unwrap();
    let (lo, hi) = (
        bundle.head.bin_centers[0],
        bundle.head.bin_centers[cfg.bins - 1],
    );
    assert!(batch_preds.iter().all(|p| (lo..=hi).contains(p)));

    let r = &rows.rows[3];
    let values = r.features().map(|v| v.to_string());
    let names = [
        "--uav-lat",
        "--uav-lon",
        "--uav-elev-angle",
        "--cell-lat",
        "--cell-lon",
        "--cell-elev",
        "--cell-building",
        "--mast-height",
        "--uav-alt",
    ];
    let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![&"predict", &"--model", &model];
    for (n, v) in names.iter().zip(&values) {
        args.push(n);
        args.push(v);
    }
    let single = gbrbm(&args);
    assert!(single.status.success(), "{}", stderr(&single));
    assert_eq!(stdout_values(&single), vec![eval_preds[3]]);

    args.truncate(args.len() - 2);
    let missing = gbrbm(&args);
    assert!(!missing.status.success());
    assert!(
        stderr(&missing).contains("--uav-alt"),
        "{}",
        stderr(&missing)
    );
}

#[test]
fn training_accuracy_is_at_least_held_out_accuracy() {
    let ws = Workspace::new();
    let mut cfg = RunConfig {
        hidden_sizes: vec![48, 32],
        bins: 16,
        pretrain_epochs: 30,
        train_epochs: 500,
        learning_rate: 0.05,
        n_train: 40,
        ..RunConfig::default()
    };
    cfg.synth.n_train = 40;
    cfg.synth.n_test = 100;
    let data = LabeledDataset::load_csv(synth(&ws, &cfg, "data.csv")).unwrap();
    let (train_rows, test_rows) = pipeline::split(&data, &cfg).unwrap();
    let trained = pipeline::train_model(&train_rows, &cfg, pipeline::Init::Pretrained).unwrap();
    let on_train = pipeline::evaluate(&trained.bundle, &train_rows, cfg.tolerance_dbm).unwrap();
    let on_test = pipeline::evaluate(&trained.bundle, &test_rows, cfg.tolerance_dbm).unwrap();
    assert!(
        on_train.accuracy >= on_test.accuracy,
        "{} < {}",
        on_train.accuracy,
        on_test.accuracy
    );
}

#[test]
fn damaged_or_future_models_are_refused() {
    let ws = Workspace::new();
    let cfg = small_config();
    let data = synth(&ws, &cfg, "data.csv");
    let model = train(&ws, &cfg, &data, "m.model");
    let text = std::fs::read_to_string(&model).unwrap();

    let truncated = ws.path("truncated.model");
    std::fs::write(&truncated, &text[..text.len() * 2 / 3]).unwrap();
    let res = gbrbm(&[&"eval", &"--model", &truncated, &"--data", &data]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("checksum"), "{}", stderr(&res));

    let future = ws.path("future.model");
    std::fs::write(&future, text.replacen("version 1", "version 2", 1)).unwrap();
    let res = gbrbm(&[&"predict", &"--model", &future, &"--data", &data]);
    assert!(!res.status.success());
    let msg = stderr(&res);
    assert!(
        msg.contains("version 2") && msg.contains("version 1"),
        "{msg}"
    );
}

#[test]
fn failures_name_the_stage_and_leave_no_outputs() {
    let ws = Workspace::new();
    let cfg = small_config();
    let data_path = synth(&ws, &cfg, "data.csv");
    let mut rows = LabeledDataset::load_csv(&data_path).unwrap();
    rows.rows.iter_mut().for_each(|r| r.rss = -75.0);
    let flat = ws.path("flat.csv");
    rows.save_csv(&flat).unwrap();

    let out = ws.path("never.model");
    let res = gbrbm(&[
        &"train",
        &"--config",
        &ws.config(&cfg),
        &"--data",
        &flat,
        &"--out",
        &out,
    ]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("`quantize`"), "{}", stderr(&res));
    assert!(!out.exists());
    assert!(!ws.path("never.model.metrics.csv").exists());
    assert!(!ws.path("never.model.partial").exists());

    let bad_cfg = ws.path("bad.cfg");
    std::fs::write(&bad_cfg, "colour = blue\n").unwrap();
    let res = gbrbm(&[
        &"train",
        &"--config",
        &bad_cfg,
        &"--data",
        &data_path,
        &"--out",
        &out,
    ]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("colour"));

    let missing = gbrbm(&[
        &"eval",
        &"--model",
        &ws.path("nope.model"),
        &"--data",
        &data_path,
    ]);
    assert!(!missing.status.success());
}

#[test]
fn help_lists_every_config_key() {
    let res = gbrbm(&[&"--help"]);
    assert!(res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    for (key, _) in gbrbm::config::KEYS {
        assert!(text.contains(key), "missing {key}");
    }
}
