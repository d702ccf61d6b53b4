use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig};
use super::metrics::EvalReport;
use crate::arch::{Checkpoint, MedKan, MedKanConfig, TrainState};
use crate::data::Dataset;
use crate::error::{config_err, data_err, Result};
use crate::tensor::{DType, Element, Graph, ParamStore, Tensor};

/// Optimization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 150,
            patience: 20,
            seed: 0,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(config_err("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(config_err("max_epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.weight_decay)
    }
}

/// Early stopping on a score that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`; returns whether it is a new best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.map_or(true, |b| score > b) {
            self.best = Some(score);
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,val_loss,val_acc,val_auc,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let auc = self.val_auc.map_or("nan".to_string(), |a| a.to_string());
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, auc, self.seconds
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(data_err(format!("metrics row needs 6 fields: {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| data_err(format!("bad number {s:?} in metrics row")));
        let auc = num(f[4])?;
        Ok(Self {
            epoch: f[0].parse().map_err(|_| data_err(format!("bad epoch {:?}", f[0])))?,
            train_loss: num(f[1])?,
            val_loss: num(f[2])?,
            val_acc: num(f[3])?,
            val_auc: (!auc.is_nan()).then_some(auc),
            seconds: num(f[5])?,
        })
    }
}

/// Appends epoch rows to a CSV file, flushing after each.
pub struct MetricsCsv {
    out: BufWriter<File>,
}

impl MetricsCsv {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(data_err(format!("unexpected metrics header {other:?}"))),
    }
    lines
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| EpochRecord::parse_csv_row(&l?))
        .collect()
}

/// Returned by the per-epoch observer of [`train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub struct TrainOutcome<T> {
    /// Weights at the best validation accuracy.
    pub best: Checkpoint<T>,
    /// Weights and optimizer state after the last epoch run.
    pub last: Checkpoint<T>,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Sample order of `epoch`: a permutation drawn from its own ChaCha8
/// stream, so any epoch can be replayed from `(seed, epoch)` alone.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Checks that a dataset matches the model's input geometry and classes.
pub fn check_compatible(cfg: &MedKanConfig, ds: &Dataset) -> Result<()> {
    let (c, h, w) = ds.image_shape();
    if (c, h, w) != (cfg.in_channels, cfg.input_size, cfg.input_size) {
        return Err(config_err(format!(
            "{} split has images {c}×{h}×{w} but the model expects {}×{}×{}",
            ds.name, cfg.in_channels, cfg.input_size, cfg.input_size
        )));
    }
    if ds.num_classes != cfg.num_classes {
        return Err(config_err(format!(
            "{} split has {} classes but the model has {}",
            ds.name, ds.num_classes, cfg.num_classes
        )));
    }
    Ok(())
}

/// Logits for every sample of `ds`, in order.
pub fn predict_logits<T: Element>(
    model: &MedKan,
    store: &ParamStore<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Tensor<T>> {
    check_compatible(model.config(), ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len() * ds.num_classes);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = ds.batch(chunk);
        out.extend_from_slice(model.predict(store, &x.cast::<T>())?.data());
    }
    Tensor::new(&[ds.len(), ds.num_classes], out)
}

pub fn evaluate<T: Element>(model: &MedKan, store: &ParamStore<T>, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    EvalReport::from_logits(&predict_logits(model, store, ds, batch_size)?, &ds.labels)
}

/// Runs one epoch of minibatch Adam; returns the sample-weighted mean loss.
fn train_epoch<T: Element>(
    model: &MedKan,
    store: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let adam = cfg.adam();
    let order = epoch_order(ds.len(), cfg.seed, epoch);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = ds.batch(chunk);
        let mut g = Graph::with_params(store);
        let xv = g.constant(x.cast::<T>());
        let logits = model.forward(&mut g, xv)?;
        let loss = g.cross_entropy(logits, &labels)?;
        total += g.value(loss).item().as_f64() * chunk.len() as f64;
        let grads = g.backward(loss)?.into_param_grads();
        adam_step(store.tensors_mut(), &grads, state, &adam)?;
    }
    Ok(total / ds.len() as f64)
}

/// Trains a freshly initialized model with early stopping on validation
/// accuracy.
///
/// `on_epoch` sees every log row together with the current weights and may
/// end training early by returning [`Flow::Stop`].
pub fn train<T: Element>(
    model_cfg: &MedKanConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &MedKan, &ParamStore<T>) -> Result<Flow>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.dtype != T::DTYPE {
        return Err(config_err(format!("train config asks for {} but the run uses {}", cfg.dtype, T::DTYPE)));
    }
    for ds in [train_set, val_set] {
        if ds.is_empty() {
            return Err(data_err(format!("{} split is empty", ds.name)));
        }
        check_compatible(model_cfg, ds)?;
    }
    let (model, mut store) = MedKan::init::<T>(model_cfg, cfg.seed)?;
    let params: Vec<Tensor<T>> = store.iter().map(|(_, t)| t.clone()).collect();
    let mut state = TrainState::fresh(&params, cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = None;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let train_loss = train_epoch(&model, &mut store, &mut state, train_set, cfg, epoch)?;
        let report = evaluate(&model, &store, val_set, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss: report.loss,
            val_acc: report.acc,
            val_auc: report.auc,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = stopper.update(epoch, report.acc);
        state.meta.epoch = epoch;
        state.meta.best_val_acc = stopper.best;
        state.meta.best_epoch = stopper.best_epoch;
        state.meta.epochs_since_best = stopper.since_best;
        if improved {
            best = Some(Checkpoint::from_store(model_cfg, &store, Some(state.clone())));
        }
        log.push(rec);
        let flow = on_epoch(log.last().unwrap(), &model, &store)?;
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
        if flow == Flow::Stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("the first epoch always improves"),
        last: Checkpoint::from_store(model_cfg, &store, Some(state)),
        log,
        stopped_early,
    })
}
