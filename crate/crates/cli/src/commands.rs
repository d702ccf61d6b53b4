use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use medkan_core::arch::{checkpoint, Checkpoint};
use medkan_core::data::{load_npz_dataset, synth_blobs, Dataset, Splits, SynthConfig};
use medkan_core::gradcheck::{registered_checks, run_suite, CheckCase, SuiteReport, SUITE_TOLERANCE};
use medkan_core::tensor::{DType, Element, Tensor};
use medkan_core::train::{evaluate, gradcam, predict_logits, train, EvalReport, Flow, MetricsCsv};
use serde_json::json;

use crate::bench::{run_bench, to_csv, BenchOptions};
use crate::config::RunConfig;
use crate::exit::{CliError, CliResult, ExitClass};
use crate::{Cli, Command, Common};

macro_rules! with_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// `--threads`, then `MEDKAN_THREADS`, then the hardware parallelism.
pub fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("MEDKAN_THREADS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("MEDKAN_THREADS={s:?} is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(CliError::config("thread count must be at least 1"));
    }
    Ok(n)
}

pub(crate) fn dispatch(cli: Cli) -> CliResult<ExitClass> {
    let threads = resolve_threads(cli.common.threads)?;
    // Fails only if a pool already exists in this process, which keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let c = &cli.common;
    match cli.command {
        Command::Train => cmd_train(c, threads),
        Command::Eval {
            split,
            batch_size,
            dump_logits,
        } => cmd_eval(c, &split, batch_size, dump_logits.as_deref(), threads),
        Command::Gradcheck => cmd_gradcheck(&registered_checks(), threads),
        Command::Bench {
            ks,
            widths,
            batches,
            warmup,
            iters,
        } => cmd_bench(
            c,
            BenchOptions {
                ks,
                widths,
                batches,
                max_threads: threads,
                warmup,
                iters,
            },
        ),
        Command::Gradcam {
            index,
            class,
            layer,
            split,
        } => cmd_gradcam(c, index, class, layer.as_deref(), &split),
        Command::MakeSynth {
            classes,
            per_class,
            size,
            channels,
            noise,
        } => cmd_make_synth(c, classes, per_class, size, channels, noise),
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref().ok_or_else(|| CliError::config(format!("missing --{flag}")))
}

fn pick_split(splits: Splits, name: &str) -> CliResult<Dataset> {
    match name {
        "train" => Ok(splits.train),
        "val" => Ok(splits.val),
        "test" => Ok(splits.test),
        other => Err(CliError::config(format!("unknown split {other:?}; use train, val or test"))),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

// ------------------------------------------------------------------ train

struct RunResult {
    seed: u64,
    best_epoch: usize,
    best_val_acc: f64,
    test: EvalReport,
}

fn train_one<T: Element>(rc: &RunConfig, splits: &Splits, dir: &Path, seed: u64) -> CliResult<RunResult> {
    create_dir(dir)?;
    let mut csv = MetricsCsv::create(dir.join("metrics.csv"))?;
    let tc = medkan_core::train::TrainConfig {
        seed,
        ..rc.train.clone()
    };
    let out = train::<T>(&rc.model, &splits.train, &splits.val, &tc, &mut |r, _, _| {
        csv.append(r)?;
        eprintln!(
            "seed {seed} epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.seconds
        );
        Ok(Flow::Continue)
    })?;
    out.best.save(dir.join("best.ckpt"))?;
    out.last.save(dir.join("final.ckpt"))?;
    let meta = &out.best.train_state.as_ref().expect("best carries state").meta;
    let (model, store) = out.best.restore()?;
    let test = evaluate(&model, &store, &splits.test, tc.batch_size)?;
    Ok(RunResult {
        seed,
        best_epoch: meta.best_epoch.unwrap_or(0),
        best_val_acc: meta.best_val_acc.unwrap_or(0.0),
        test,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn summary_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".into(), |x| x.to_string())
}

fn cmd_train(c: &Common, threads: usize) -> CliResult<ExitClass> {
    let mut rc = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &c.data {
        rc.data = Some(d.clone());
    }
    if let Some(o) = &c.out {
        rc.out = o.clone();
    }
    if let Some(r) = c.runs {
        rc.runs = r;
    }
    if let Some(s) = c.seed {
        rc.train.seed = s;
    }
    rc.threads = Some(threads);
    rc.validate()?;
    let data = rc
        .data
        .clone()
        .ok_or_else(|| CliError::config("no dataset: pass --data or set \"data\" in the config"))?;
    let params = rc.model.param_count()?;
    let splits = load_npz_dataset(&data)?.prepare(Some(rc.model.input_size))?;
    eprintln!("{params} parameters, {} training samples", splits.train.len());
    create_dir(&rc.out)?;
    write_file(&rc.out.join("config.echo.json"), rc.to_json() + "\n")?;

    let mut results = Vec::with_capacity(rc.runs);
    for r in 0..rc.runs {
        let dir = if rc.runs == 1 { rc.out.clone() } else { rc.out.join(format!("run{r}")) };
        let seed = rc.train.seed + r as u64;
        results.push(with_dtype!(rc.train.dtype, train_one(&rc, &splits, &dir, seed))?);
    }

    if rc.runs > 1 {
        let mut s = String::from("run,seed,best_epoch,best_val_acc,test_acc,test_auc\n");
        for (r, res) in results.iter().enumerate() {
            let _ = writeln!(
                s,
                "{r},{},{},{},{},{}",
                res.seed,
                res.best_epoch,
                res.best_val_acc,
                res.test.acc,
                fmt_opt(res.test.auc)
            );
        }
        let col = |f: &dyn Fn(&RunResult) -> Option<f64>| -> (String, String) {
            let v: Option<Vec<f64>> = results.iter().map(f).collect();
            match v {
                Some(v) => {
                    let (m, sd) = summary_stats(&v);
                    (m.to_string(), sd.to_string())
                }
                None => ("nan".into(), "nan".into()),
            }
        };
        let (va_m, va_s) = col(&|r| Some(r.best_val_acc));
        let (ta_m, ta_s) = col(&|r| Some(r.test.acc));
        let (tu_m, tu_s) = col(&|r| r.test.auc);
        let _ = writeln!(s, "mean,,,{va_m},{ta_m},{tu_m}");
        let _ = writeln!(s, "sd,,,{va_s},{ta_s},{tu_s}");
        write_file(&rc.out.join("summary.csv"), s)?;
    }

    let runs: Vec<_> = results
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "best_epoch": r.best_epoch,
                "best_val_acc": r.best_val_acc,
                "test_acc": r.test.acc,
                "test_auc": r.test.auc,
            })
        })
        .collect();
    println!("{}", json!({ "out": rc.out, "params": params, "threads": threads, "runs": runs }));
    Ok(ExitClass::Ok)
}

// ------------------------------------------------------------------ eval

fn eval_with<T: Element>(
    ckpt: &Path,
    ds: &Dataset,
    batch_size: usize,
    dump: Option<&Path>,
) -> CliResult<EvalReport> {
    let (model, store) = Checkpoint::<T>::load(ckpt)?.restore()?;
    let logits = predict_logits(&model, &store, ds, batch_size)?;
    if let Some(path) = dump {
        let c = ds.num_classes;
        let mut s = String::from("index,label");
        for k in 0..c {
            let _ = write!(s, ",logit_{k}");
        }
        s.push('\n');
        for (i, row) in logits.data().chunks(c).enumerate() {
            let _ = write!(s, "{i},{}", ds.labels[i]);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        write_file(path, s)?;
    }
    Ok(EvalReport::from_logits(&logits, &ds.labels)?)
}

fn load_for_checkpoint(c: &Common, split: &str) -> CliResult<(PathBuf, DType, Dataset)> {
    let ckpt = required(&c.ckpt, "ckpt")?.to_path_buf();
    let data = required(&c.data, "data")?;
    if !ckpt.is_file() {
        return Err(CliError::data(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let (cfg, dtype) = checkpoint::peek(&ckpt)?;
    let ds = pick_split(load_npz_dataset(data)?, split)?.prepare(Some(cfg.input_size))?;
    medkan_core::train::check_compatible(&cfg, &ds)?;
    Ok((ckpt, dtype, ds))
}

fn cmd_eval(c: &Common, split: &str, batch_size: usize, dump: Option<&Path>, threads: usize) -> CliResult<ExitClass> {
    if batch_size == 0 {
        return Err(CliError::config("batch size must be at least 1"));
    }
    let (ckpt, dtype, ds) = load_for_checkpoint(c, split)?;
    let r = with_dtype!(dtype, eval_with(&ckpt, &ds, batch_size, dump))?;
    println!(
        "{}",
        json!({
            "split": split,
            "n": r.n,
            "acc": r.acc,
            "auc": r.auc,
            "loss": r.loss,
            "class_counts": r.class_counts,
            "class_correct": r.class_correct,
            "threads": threads,
        })
    );
    Ok(ExitClass::Ok)
}

// ------------------------------------------------------------------ gradcheck

/// Human-readable per-kind table of a suite run.
pub fn gradcheck_report(report: &SuiteReport) -> String {
    let mut s = String::new();
    for k in &report.kinds {
        let status = if k.worst_rel < report.tolerance { "ok" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{:<10} {:<4} worst_rel={:.3e} cases={} checked={} at {}",
            k.kind, status, k.worst_rel, k.cases, k.checked, k.worst_at
        );
    }
    s
}

pub(crate) fn cmd_gradcheck(cases: &[CheckCase], threads: usize) -> CliResult<ExitClass> {
    let report = run_suite(cases, SUITE_TOLERANCE);
    print!("{}", gradcheck_report(&report));
    println!("tolerance={:e} threads={threads}", report.tolerance);
    let first = report.failures().next().cloned();
    match first {
        None => Ok(ExitClass::Ok),
        Some(k) => Err(CliError::new(
            ExitClass::CheckFailed,
            format!("gradient check failed for {} at {} (rel {:.3e})", k.kind, k.worst_at, k.worst_rel),
        )),
    }
}

/// Runs an arbitrary case list through the `gradcheck` command path.
pub fn gradcheck_exit_code(cases: &[CheckCase]) -> i32 {
    match cmd_gradcheck(cases, 1) {
        Ok(c) => c.code(),
        Err(e) => {
            eprintln!("{}", e.line());
            e.class.code()
        }
    }
}

// ------------------------------------------------------------------ bench

fn cmd_bench(c: &Common, opts: BenchOptions) -> CliResult<ExitClass> {
    eprintln!(
        "{}",
        json!({
            "ks": opts.ks,
            "widths": opts.widths,
            "batches": opts.batches,
            "max_threads": opts.max_threads,
            "warmup": opts.warmup,
            "iters": opts.iters,
        })
    );
    let rows = run_bench(&opts, &mut |pair| {
        for r in pair {
            eprintln!("{}", r.csv());
        }
    })?;
    let csv = to_csv(&rows);
    if let Some(dir) = &c.out {
        create_dir(dir)?;
        write_file(&dir.join("bench.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(ExitClass::Ok)
}

// ------------------------------------------------------------------ gradcam

fn gradcam_with<T: Element>(
    ckpt: &Path,
    image: &Tensor<f32>,
    class: Option<usize>,
    layer: Option<&str>,
) -> CliResult<medkan_core::train::Heatmap> {
    let (model, store) = Checkpoint::<T>::load(ckpt)?.restore()?;
    Ok(gradcam(&model, &store, &image.cast::<T>(), class, layer)?)
}

fn cmd_gradcam(c: &Common, index: usize, class: Option<usize>, layer: Option<&str>, split: &str) -> CliResult<ExitClass> {
    let (ckpt, dtype, ds) = load_for_checkpoint(c, split)?;
    if index >= ds.len() {
        return Err(CliError::data(format!("image index {index} out of range for {} samples", ds.len())));
    }
    let (x, labels) = ds.batch(&[index]);
    let hm = with_dtype!(dtype, gradcam_with(&ckpt, &x, class, layer))?;
    let base = c.out.clone().unwrap_or_else(|| PathBuf::from("gradcam"));
    if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let ppm = base.with_extension("ppm");
    let raw = base.with_extension("f32");
    write_file(&ppm, hm.to_ppm())?;
    write_file(&raw, hm.to_raw())?;
    println!(
        "{}",
        json!({
            "index": index,
            "label": labels[0],
            "predicted": hm.predicted,
            "target": hm.target,
            "target_prob": hm.probs[hm.target],
            "layer": format!("stage{}", hm.layer),
            "height": hm.height,
            "width": hm.width,
            "ppm": ppm,
            "raw": raw,
        })
    );
    Ok(ExitClass::Ok)
}

// ------------------------------------------------------------------ make-synth

fn cmd_make_synth(
    c: &Common,
    classes: Option<usize>,
    per_class: Option<usize>,
    size: Option<usize>,
    channels: Option<usize>,
    noise: Option<f64>,
) -> CliResult<ExitClass> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = classes {
        cfg.num_classes = v;
    }
    if let Some(v) = per_class {
        cfg.n_per_class = v;
    }
    if let Some(v) = size {
        cfg.height = v;
        cfg.width = v;
    }
    if let Some(v) = channels {
        cfg.channels = v;
    }
    if let Some(v) = noise {
        cfg.noise = v;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("synth.npz"));
    let splits = synth_blobs(&cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    splits.save_npz(&out, true)?;
    println!(
        "{}",
        json!({
            "out": out,
            "config": cfg,
            "train": splits.train.len(),
            "val": splits.val.len(),
            "test": splits.test.len(),
        })
    );
    Ok(ExitClass::Ok)
}
