use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{self, Mode, ModelConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::{augment, poly_lr, sgd_step, total_loss, OptimState, TrainConfig};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const NAN_DUMP: &str = "nan_dump.json";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub main_loss: f64,
    pub aux_loss: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iters: usize,
    pub losses: Vec<f64>,
    pub best_miou: Option<f64>,
    pub best_iter: Option<usize>,
    pub final_miou: Option<f64>,
    pub seconds: f64,
}

/// Confusion matrix of eval-mode predictions over one split.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, data: &Dataset, split: &str) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for &i in data.split(split)? {
        let s = data.get(i)?;
        let logits = model::predict(params, cfg, &s.image)?;
        let pred: Vec<u8> = logits.argmax_channels().into_iter().map(|c| c as u8).collect();
        cm.update(&pred, &s.label.data)?;
    }
    Ok(cm)
}

/// Endless shuffled walk over the training indices, one permutation per
/// epoch, each from its own stream.
struct Batches<'a> {
    indices: &'a [usize],
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Batches<'a> {
    fn new(indices: &'a [usize], seed: u64) -> Self {
        Batches {
            indices,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = self.indices.to_vec();
            self.order
                .shuffle(&mut rng::stream(self.seed, &format!("train.shuffle.epoch{}", self.epoch)));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

struct Run<'a> {
    out: &'a Path,
    log: BufWriter<File>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_row(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).expect("log rows serialize");
        let path = self.path(LOG_FILE);
        writeln!(self.log, "{line}")
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn dump_nan(&self, iter: usize, lr: f64, err: &Error, params: &ParamStore, history: &[LogRow]) -> Result<()> {
        let norms: serde_json::Map<String, serde_json::Value> = params
            .iter()
            .map(|(name, t)| {
                let finite = t.is_finite();
                let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                (name.to_string(), json!({ "finite": finite, "l2": if finite { json!(norm) } else { json!(null) } }))
            })
            .collect();
        let start = history.len().saturating_sub(10);
        let dump = json!({
            "iter": iter,
            "lr": lr,
            "error": err.to_string(),
            "recent": &history[start..],
            "params": norms,
        });
        let path = self.path(NAN_DUMP);
        fs::write(&path, serde_json::to_string_pretty(&dump).expect("dump serializes"))
            .map_err(|e| Error::io(path, e))
    }
}

/// Train a freshly initialised model on `data`'s train split, validating on
/// its val split. Writes the log and checkpoints into `out`.
pub fn train_loop(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    let mut errs = model_cfg.validate();
    errs.extend(cfg.validate());
    if model_cfg.num_classes != data.num_classes() {
        errs.push(format!(
            "model.num_classes is {} but the dataset has {} classes",
            model_cfg.num_classes,
            data.num_classes()
        ));
    }
    let train_idx = data.split("train")?;
    if train_idx.is_empty() {
        errs.push("dataset has no training samples".into());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut run = Run {
        out,
        log: BufWriter::new(log),
    };

    let start = Instant::now();
    let mut params = model::init_params(model_cfg, cfg.seed)?;
    run.write_row(&json!({
        "event": "start",
        "rng": rng::ALGORITHM,
        "seed": cfg.seed,
        "parameters": params.num_scalars(),
        "model": model_cfg,
        "train": cfg,
    }))?;

    let mut state = OptimState::new(&params);
    let mut batches = Batches::new(train_idx, cfg.seed);
    let mut history: Vec<LogRow> = Vec::with_capacity(cfg.total_iters);
    let mut best: Option<(f64, usize)> = None;
    let mut final_miou = None;
    let has_val = !data.split("val")?.is_empty();

    for iter in 0..cfg.total_iters {
        let lr = poly_lr(cfg.base_lr, iter, cfg.total_iters, cfg.power)?;
        let step = (|| -> Result<LogRow> {
            let mut images = Vec::with_capacity(cfg.batch_size);
            let mut labels = Vec::with_capacity(cfg.batch_size * cfg.crop_size * cfg.crop_size);
            for slot in 0..cfg.batch_size {
                let s = data.get(batches.next_index())?;
                let mut r = rng::stream(cfg.seed, &format!("train.augment.iter{iter}.slot{slot}"));
                let a = augment(&s, cfg, &mut r)?;
                images.push(a.sample.image);
                labels.extend_from_slice(&a.sample.label.data);
            }
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape)?;
            let image = tape.constant(Tensor::stack(&images)?)?;
            let out = model::model_forward(&mut tape, image, &bound, model_cfg, Mode::Train)?;
            let parts = total_loss(&mut tape, &out, &labels, cfg)?;
            if parts.empty {
                warn!("iteration {iter}: no valid pixel in batch");
            }
            let loss = tape.value(parts.total).item()?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            tape.backward(parts.total)?;
            let grads = bound.grads(&tape);
            drop(tape);
            sgd_step(&mut params, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
            Ok(LogRow {
                iter,
                lr,
                loss,
                main_loss: parts.main,
                aux_loss: parts.aux,
                val_miou: None,
            })
        })();
        let mut row = match step {
            Ok(row) => row,
            Err(e @ Error::NonFinite { .. }) => {
                run.dump_nan(iter, lr, &e, &params, &history)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = iter + 1;
        if has_val && (done % cfg.eval_interval == 0 || done == cfg.total_iters) {
            let miou = evaluate(&params, model_cfg, data, "val")?.miou()?.mean;
            info!("iter {done}: loss {:.4}, val mIoU {:.4}", row.loss, miou);
            row.val_miou = Some(miou);
            final_miou = Some(miou);
            if best.map_or(true, |(b, _)| miou > b) {
                best = Some((miou, done));
                params.save(&run.path(BEST_CHECKPOINT))?;
            }
        }
        run.write_row(&row)?;
        history.push(row);
    }

    params.save(&run.path(LAST_CHECKPOINT))?;
    if best.is_none() {
        params.save(&run.path(BEST_CHECKPOINT))?;
    }
    Ok(TrainSummary {
        iters: cfg.total_iters,
        losses: history.iter().map(|r| r.loss).collect(),
        best_miou: best.map(|b| b.0),
        best_iter: best.map(|b| b.1),
        final_miou,
        seconds: start.elapsed().as_secs_f64(),
    })
}
