use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use chebmixer::data::{check_compatible, format_float, gen_sbm, import_planetoid, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Dataset, SbmParams};
use chebmixer::model::prepare_operator;
use chebmixer::training::{evaluate, make_splits, mask_of, OptimizerState, Split, Trainer};
use chebmixer::verify::{run_suite, Suite, VerifyOptions};

use crate::run_config::RunConfig;
use crate::{CliError, ConfigArgs};

pub const METRICS_SCHEMA: u32 = 1;

fn print(v: &Value) {
    println!("{v}");
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn run_config(cfg: &ConfigArgs) -> Result<RunConfig, CliError> {
    RunConfig::build(cfg.config.as_deref(), &cfg.sets, cfg.seed)
}

/// Loads the dataset and fills in what the config leaves to the data:
/// input width, class count and, without `splits.tsv`, a seeded split.
fn prepare(rc: &mut RunConfig, data: &Path) -> Result<Dataset, CliError> {
    let mut ds = load_dataset(data)?;
    let d_raw = ds.features.shape()[1];
    if let Some(d) = rc.d_raw.filter(|&d| d != d_raw) {
        return Err(CliError::Usage(format!("config sets d_raw = {d} but the dataset has {d_raw} features")));
    }
    if let Some(c) = rc.classes.filter(|&c| c != ds.classes) {
        return Err(CliError::Usage(format!("config sets classes = {c} but the dataset has {}", ds.classes)));
    }
    rc.train.model.input_dim = d_raw;
    rc.train.model.classes = ds.classes;
    if ds.splits.is_none() {
        ds.splits = Some(make_splits(ds.n(), rc.train.split, rc.train.seed)?);
    }
    Ok(ds)
}

fn require_seed(rc: &RunConfig) -> Result<(), CliError> {
    if rc.seed_given {
        Ok(())
    } else {
        Err(CliError::Usage("a seed is required: pass --seed or set `seed` in the config".into()))
    }
}

fn metrics_line(r: &chebmixer::training::EpochRecord) -> Value {
    json!({
        "schema": METRICS_SCHEMA,
        "epoch": r.epoch,
        "train_loss": r.train_loss,
        "train_acc": r.train_acc,
        "val_acc": r.val_acc,
        "epoch_seconds": r.epoch_seconds,
    })
}

pub fn train(data: Option<PathBuf>, out: Option<PathBuf>, cfg: &ConfigArgs) -> Result<u8, CliError> {
    let started = Instant::now();
    let mut rc = run_config(cfg)?;
    if data.is_some() {
        rc.data = data;
    }
    if out.is_some() {
        rc.out = out;
    }
    let data = rc
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set `data` in the config".into()))?;
    let out = rc.out.get_or_insert_with(|| PathBuf::from("run")).clone();
    require_seed(&rc)?;
    rc.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let ds = prepare(&mut rc, &data)?;
    let trainer = Trainer::new(&ds, &rc.train)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut write_failure = None;
    let (params, history) = trainer.run(|r| {
        if write_failure.is_none() {
            if let Err(e) = writeln!(metrics, "{}", metrics_line(r)) {
                write_failure = Some(e);
            }
        }
        log::info!("epoch {} loss {:.6} train {:.4} val {:.4}", r.epoch, r.train_loss, r.train_acc, r.val_acc);
    })?;
    if let Some(e) = write_failure {
        return Err(io_err(&metrics_path)(e));
    }
    metrics.flush().map_err(io_err(&metrics_path))?;

    let model_cfg = &trainer.config().model;
    let splits = ds.splits.as_deref().expect("prepared");
    let test_acc = if mask_of(splits, Split::Test).is_empty() {
        None
    } else {
        Some(evaluate(&ds, &params, model_cfg, Split::Test)?)
    };
    let t = trainer.config();
    let extra = vec![
        ("seed".to_string(), t.seed.to_string()),
        ("train_frac".to_string(), t.split.0.to_string()),
        ("val_frac".to_string(), t.split.1.to_string()),
        ("test_frac".to_string(), t.split.2.to_string()),
        ("best_epoch".to_string(), history.best_epoch.to_string()),
        ("dataset".to_string(), ds.name.clone()),
    ];
    let ckpt = out.join("best.ckpt");
    save_checkpoint(&params, model_cfg, &extra, &ckpt)?;

    rc.train = trainer.config().clone();
    let result = json!({
        "dataset": ds.name,
        "best_epoch": history.best_epoch,
        "epochs_run": history.records.len(),
        "val_acc": history.best_val_acc,
        "test_acc": test_acc,
        "param_count": params.param_count(),
        "total_seconds": started.elapsed().as_secs_f64(),
        "seed": rc.train.seed,
        "config": rc.echo(),
    });
    let result_path = out.join("result.json");
    fs::write(&result_path, format!("{result:#}\n")).map_err(io_err(&result_path))?;
    eprintln!(
        "test accuracy {} (best epoch {} of {})",
        test_acc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        history.best_epoch,
        history.records.len()
    );
    print(&result);
    Ok(0)
}

pub fn eval(data: &Path, model: &Path, split: &str, cfg: &ConfigArgs) -> Result<u8, CliError> {
    let which: Split = split.parse().map_err(|e: chebmixer::Error| CliError::Usage(e.to_string()))?;
    let ckpt = load_checkpoint(model)?;
    let extra = |k: &str| ckpt.extra.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());

    let mut base = chebmixer::training::TrainConfig {
        model: ckpt.config.clone(),
        ..Default::default()
    };
    if let Some(s) = extra("seed").and_then(|s| s.parse().ok()) {
        base.seed = s;
    }
    let frac = |k: &str, d: f64| extra(k).and_then(|s| s.parse().ok()).unwrap_or(d);
    base.split = (frac("train_frac", base.split.0), frac("val_frac", base.split.1), frac("test_frac", base.split.2));
    let mut rc = RunConfig::build_on(base, cfg.config.as_deref(), &cfg.sets, cfg.seed)?;

    let mut ds = load_dataset(data)?;
    rc.train.model.input_dim = ds.features.shape()[1];
    rc.train.model.classes = ds.classes;
    check_compatible(&ckpt.config, &rc.train.model)?;
    if ds.splits.is_none() {
        ds.splits = Some(make_splits(ds.n(), rc.train.split, rc.train.seed)?);
    }
    let acc = evaluate(&ds, &ckpt.params, &rc.train.model, which)?;
    let mut result = json!({
        "dataset": ds.name,
        "split": which.to_string(),
        "accuracy": acc,
        "param_count": ckpt.params.param_count(),
    });
    result[format!("{which}_acc")] = json!(acc);
    print(&result);
    Ok(0)
}

pub fn verify(suites: &[String], seed: u64, fault: Option<&str>) -> Result<u8, CliError> {
    let parse = |s: &str| s.parse::<Suite>().map_err(|e| CliError::Usage(e.to_string()));
    let selected = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites.iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?
    };
    let opts = VerifyOptions {
        seed,
        inject_fault: fault.map(parse).transpose()?,
    };
    let mut all = true;
    for suite in selected {
        let r = run_suite(suite, &opts);
        all &= r.passed;
        eprintln!(
            "{:<14} {}  worst {:.3e} (tol {:.0e})  {}",
            r.suite,
            if r.passed { "pass" } else { "FAIL" },
            r.worst_error,
            r.tolerance,
            r.detail
        );
        print(&json!({
            "suite": r.suite.to_string(),
            "passed": r.passed,
            "cases": r.cases,
            "worst_error": if r.worst_error.is_finite() { json!(r.worst_error) } else { Value::Null },
            "tolerance": r.tolerance,
            "seconds": r.seconds,
            "detail": r.detail,
        }));
    }
    Ok(if all { 0 } else { 1 })
}

pub fn extract(data: &Path, k: usize, out: Option<&Path>, cfg: &ConfigArgs) -> Result<u8, CliError> {
    let mut rc = run_config(cfg)?;
    rc.train.model.k = k;
    let ds = load_dataset(data)?;
    let op = prepare_operator(&ds.graph, &rc.train.model)?;
    let hops = op.extract(&ds.features, k)?;
    let (n, h, d) = (hops.nodes(), hops.k_order() + 1, hops.channels());
    let mut text = format!("# nodes={n}\thops={h}\tchannels={d}\tsource={:?}\n", hops.source()).to_lowercase();
    text.push_str("node\thop");
    for c in 0..d {
        text.push_str(&format!("\tc{c}"));
    }
    text.push('\n');
    let x = hops.data();
    for i in 0..n {
        for j in 0..h {
            text.push_str(&format!("{i}\t{j}"));
            for c in 0..d {
                text.push('\t');
                text.push_str(&format_float(x.get3(i, j, c)));
            }
            text.push('\n');
        }
    }
    match out {
        Some(path) => {
            fs::write(path, text).map_err(io_err(path))?;
            print(&json!({ "out": path.display().to_string(), "shape": [n, h, d] }));
        }
        None => print!("{text}"),
    }
    Ok(0)
}

pub fn gen_synth(p: &SbmParams, out: &Path) -> Result<u8, CliError> {
    let ds = gen_sbm(p).map_err(|e| CliError::Usage(e.to_string()))?;
    save_dataset(&ds, out)?;
    print(&json!({
        "out": out.display().to_string(),
        "name": ds.name,
        "nodes": ds.n(),
        "edges": ds.graph.undirected_edges().len(),
        "classes": ds.classes,
        "d_raw": ds.features.shape()[1],
    }));
    Ok(0)
}

pub fn bench(data: &Path, epochs: usize, cfg: &ConfigArgs) -> Result<u8, CliError> {
    if epochs == 0 {
        return Err(CliError::Usage("--epochs must be positive".into()));
    }
    let mut rc = run_config(cfg)?;
    let ds = prepare(&mut rc, data)?;
    let setup = Instant::now();
    let trainer = Trainer::new(&ds, &rc.train)?;
    let setup_seconds = setup.elapsed().as_secs_f64();
    let mut params = trainer.init_params()?;
    let mut state = OptimizerState::new(params.named_tensors().into_iter().map(|(_, t)| t));
    let mut times = Vec::with_capacity(epochs);
    for e in 1..=epochs {
        let t = Instant::now();
        trainer.epoch(&mut params, &mut state, e)?;
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / epochs as f64;
    let var = if epochs > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (epochs - 1) as f64
    } else {
        0.0
    };
    let m = &trainer.config().model;
    print(&json!({
        "dataset": ds.name,
        "nodes": ds.n(),
        "epochs": epochs,
        "mean_epoch_seconds": mean,
        "stdev_epoch_seconds": var.sqrt(),
        "min_epoch_seconds": times.iter().copied().fold(f64::INFINITY, f64::min),
        "max_epoch_seconds": times.iter().copied().fold(0.0, f64::max),
        "setup_seconds": setup_seconds,
        "param_count": params.param_count(),
        "extractor": m.extractor.to_string(),
        "aggregator": m.aggregator.to_string(),
        "k": m.k,
        "layers": m.layers,
    }));
    Ok(0)
}

pub fn convert_planetoid(content: &Path, cites: &Path, name: &str, row_normalize: bool, out: &Path) -> Result<u8, CliError> {
    let ds = import_planetoid(content, cites, name, row_normalize)?;
    save_dataset(&ds, out)?;
    print(&json!({
        "out": out.display().to_string(),
        "nodes": ds.n(),
        "edges": ds.graph.undirected_edges().len(),
        "classes": ds.classes,
        "d_raw": ds.features.shape()[1],
        "row_normalized": row_normalize,
    }));
    Ok(0)
}
