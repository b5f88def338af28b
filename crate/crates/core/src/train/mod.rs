//! Mini-batch SGD training with stratified batches and an error-driven
//! learning-rate schedule that reverts to the best state on every decay.

mod schedule;

pub use schedule::{Schedule, Step};

use crate::error::{Error, Result};
use crate::net::{category_mean_l1, distribution_term, ForwardOutputs, LossBreakdown, MacNetwork};
use crate::percept::CategoryAttributeMatrix;
use crate::rng;
use crate::synth::{Dataset, PatchSample};
use crate::tensor::{OptimizerState, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Joint gradient norm limit per batch; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 10.0,
            lr_floor: 1e-8,
            max_epochs: 60,
            seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, categories: usize) -> Result<()> {
        if self.batch_size == 0 || categories == 0 || !self.batch_size.is_multiple_of(categories) {
            return Err(Error::Config(format!(
                "batch size {} not divisible by {categories} categories",
                self.batch_size
            )));
        }
        if !(self.lr_floor < self.learning_rate) {
            return Err(Error::Config("lr_floor must be below learning_rate".into()));
        }
        if !(self.lr_decay > 1.0) {
            return Err(Error::Config("lr_decay must exceed 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        OptimizerState::new(self.learning_rate, self.momentum, self.weight_decay).map(|_| ())
    }
}

/// Splits sample indices into batches holding `batch_size / K` samples of
/// every category. Leftovers are dropped; order is fixed by `epoch_seed`.
pub fn stratified_batches(labels: &[usize], categories: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if categories == 0 || !batch_size.is_multiple_of(categories) || batch_size == 0 {
        return Err(Error::Config(format!(
            "batch size {batch_size} not divisible by {categories} categories"
        )));
    }
    let per = batch_size / categories;
    let mut by_cat = vec![Vec::new(); categories];
    for (i, &l) in labels.iter().enumerate() {
        let bucket = by_cat
            .get_mut(l)
            .ok_or_else(|| Error::Data(format!("label {l} out of range for {categories} categories")))?;
        bucket.push(i);
    }
    let mut r = rng::rng(epoch_seed);
    for (c, idx) in by_cat.iter_mut().enumerate() {
        if idx.len() < per {
            return Err(Error::Data(format!(
                "category {c} has {} samples, batch needs {per}",
                idx.len()
            )));
        }
        idx.shuffle(&mut r);
    }
    let batches = by_cat.iter().map(|v| v.len() / per).min().unwrap_or(0);
    Ok((0..batches)
        .map(|b| by_cat.iter().flat_map(|v| v[b * per..(b + 1) * per].iter().copied()).collect())
        .collect())
}

/// Metrics of a network on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub cross_entropy: f64,
    pub accuracy: f64,
    /// Final-layer attribute loss over the whole split; absent without aux heads.
    pub u: Option<f64>,
    /// Distribution-matching term over the whole split.
    pub d: Option<f64>,
}

const EVAL_CHUNK: usize = 64;

/// Runs the network over `samples` in fixed-size chunks.
pub fn predict(net: &MacNetwork, samples: &[PatchSample]) -> Result<ForwardOutputs> {
    let parts: Vec<ForwardOutputs> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|c| net.forward(c))
        .collect::<Result<_>>()?;
    let stack = |ts: Vec<&Tensor>| -> Result<Tensor> {
        let cols = ts[0].shape()[1];
        let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&[data.len() / cols, cols], data)
    };
    let stages = parts.first().map_or(0, |p| p.layer_attributes.len());
    Ok(ForwardOutputs {
        layer_attributes: (0..stages)
            .map(|s| stack(parts.iter().map(|p| &p.layer_attributes[s]).collect()))
            .collect::<Result<_>>()?,
        attributes: match parts[0].attributes {
            Some(_) => Some(stack(parts.iter().map(|p| p.attributes.as_ref().expect("uniform")).collect())?),
            None => None,
        },
        logits: stack(parts.iter().map(|p| &p.logits).collect())?,
        probabilities: stack(parts.iter().map(|p| &p.probabilities).collect())?,
    })
}

pub fn evaluate(net: &MacNetwork, samples: &[PatchSample], a: Option<&CategoryAttributeMatrix>) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let out = predict(net, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let n = labels.len() as f64;
    let mut ce = 0.0;
    let mut correct = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let row = out.probabilities.row(i);
        ce -= row[l].max(f64::MIN_POSITIVE).ln();
        if argmax(row) == l {
            correct += 1;
        }
    }
    let (u, d) = match (&out.attributes, a) {
        (Some(phi), Some(a)) => (
            Some(category_mean_l1(phi, &labels, a)?.0),
            Some(distribution_term(phi, net.config())?.0),
        ),
        (Some(phi), None) => (None, Some(distribution_term(phi, net.config())?.0)),
        _ => (None, None),
    };
    Ok(EvalMetrics {
        cross_entropy: ce / n,
        accuracy: correct as f64 / n,
        u,
        d,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train: LossBreakdown,
    pub val_cross_entropy: f64,
    pub val_accuracy: f64,
    pub val_u: Option<f64>,
    pub val_d: Option<f64>,
    pub decayed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_accuracy).reduce(f64::max)
    }
}

/// Everything besides the network needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub schedule: Schedule,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub finished: bool,
}

/// A training run that can be advanced one epoch at a time.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    a: Option<&'a CategoryAttributeMatrix>,
    net: MacNetwork,
    best: MacNetwork,
    state: TrainState,
    log: TrainLog,
    update_ids: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: MacNetwork, data: &'a Dataset, a: Option<&'a CategoryAttributeMatrix>, cfg: &TrainConfig) -> Result<Self> {
        let k = data.num_categories();
        cfg.validate(k)?;
        if net.config().categories != k {
            return Err(Error::Config(format!(
                "network has {} categories, corpus has {k}",
                net.config().categories
            )));
        }
        if let Some(a) = a {
            if a.k() != k {
                return Err(Error::Config(format!("attribute matrix has {} rows, corpus has {k} categories", a.k())));
            }
        } else if net.num_aux_heads() > 0 {
            return Err(Error::Config("aux heads need a category-attribute matrix".into()));
        }
        if data.val.is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        let nc = net.config();
        // With both attribute weights at zero nothing reaches the aux heads; keep them frozen.
        let update_ids = if nc.lambda_attr == 0.0 && nc.lambda_dist == 0.0 {
            net.classifier_param_ids()
        } else {
            (0..net.params().len()).collect()
        };
        let state = TrainState {
            epochs_done: 0,
            schedule: Schedule::new(cfg.learning_rate, cfg.lr_decay, cfg.lr_floor),
            best_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            finished: false,
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            a,
            best: net.clone(),
            net,
            state,
            log: TrainLog::default(),
            update_ids,
        })
    }

    /// Continues a run from a saved current network, best network, state and log.
    pub fn resume(
        current: MacNetwork,
        best: MacNetwork,
        state: TrainState,
        log: TrainLog,
        data: &'a Dataset,
        a: Option<&'a CategoryAttributeMatrix>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if log.records.len() != state.epochs_done {
            return Err(Error::Data(format!(
                "log has {} epochs, state says {}",
                log.records.len(),
                state.epochs_done
            )));
        }
        let mut t = Trainer::new(current, data, a, cfg)?;
        t.best = best;
        t.state = state;
        t.log = log;
        Ok(t)
    }

    pub fn network(&self) -> &MacNetwork {
        &self.net
    }

    pub fn best(&self) -> &MacNetwork {
        &self.best
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn finished(&self) -> bool {
        self.state.finished
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<LossBreakdown> {
        let train = &self.data.train;
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let epoch_seed = rng::mix(self.cfg.seed, epoch as u64);
        let batches = stratified_batches(&labels, self.data.num_categories(), self.cfg.batch_size, epoch_seed)?;
        let opt = OptimizerState::new(self.state.schedule.learning_rate, self.cfg.momentum, self.cfg.weight_decay)?;
        let mut sum: Option<LossBreakdown> = None;
        for (bi, batch) in batches.iter().enumerate() {
            let patches: Vec<&Tensor> = batch.iter().map(|&i| &train[i].patch).collect();
            let blabels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut trace = self.net.trace(self.net.batch_tensor(&patches)?)?;
            let (loss, parts) = self.net.attach_loss(&mut trace, &blabels, self.a)?;
            let non_finite = Error::NonFinite {
                batch: bi,
                epoch,
                seed: self.cfg.seed,
            };
            if !parts.total.is_finite() {
                return Err(non_finite);
            }
            let grads = trace.graph.backward(loss)?;
            if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(non_finite);
            }
            drop(trace);
            let params = self.net.params_mut();
            params.accumulate(&grads)?;
            if let Some(c) = self.cfg.grad_clip {
                params.clip_grad_norm(&self.update_ids, c);
            }
            params.step(&self.update_ids, &opt)?;
            params.clear_grads();
            sum = Some(match sum {
                None => parts,
                Some(s) => add_breakdown(s, &parts),
            });
        }
        let mut mean = sum.ok_or_else(|| Error::Data("no full batch in the training split".into()))?;
        scale_breakdown(&mut mean, 1.0 / batches.len() as f64);
        Ok(mean)
    }

    /// Runs one epoch and applies the schedule. Returns `None` once finished.
    pub fn step_epoch(&mut self) -> Result<Option<&EpochRecord>> {
        if self.state.finished {
            return Ok(None);
        }
        let epoch = self.state.epochs_done + 1;
        let lr = self.state.schedule.learning_rate;
        let train = self.train_epoch(epoch)?;
        let val = evaluate(&self.net, &self.data.val, self.a)?;
        if val.accuracy > self.state.best_accuracy {
            self.state.best_accuracy = val.accuracy;
            self.state.best_epoch = epoch;
            self.best = self.net.clone();
        }
        let step = self.state.schedule.observe(1.0 - val.accuracy);
        if step == Step::Decayed {
            self.net = self.best.clone();
        }
        self.state.epochs_done = epoch;
        self.state.finished = step == Step::Stop || epoch >= self.cfg.max_epochs;
        self.log.records.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train,
            val_cross_entropy: val.cross_entropy,
            val_accuracy: val.accuracy,
            val_u: val.u,
            val_d: val.d,
            decayed: step != Step::Continue,
        });
        Ok(self.log.records.last())
    }

    /// Runs to completion, calling `on_epoch` after every epoch.
    pub fn run(mut self, mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<(MacNetwork, TrainLog)> {
        while self.step_epoch()?.is_some() {
            on_epoch(&self)?;
        }
        Ok((self.best, self.log))
    }

    /// Training state as JSON, for storing alongside a checkpoint.
    pub fn state_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.state)?)
    }
}

fn add_breakdown(mut a: LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    a.cross_entropy += b.cross_entropy;
    for (x, y) in a.u_layers.iter_mut().zip(&b.u_layers) {
        *x += y;
    }
    a.u_final += b.u_final;
    a.d += b.d;
    a.total += b.total;
    a
}

fn scale_breakdown(a: &mut LossBreakdown, s: f64) {
    a.cross_entropy *= s;
    a.u_layers.iter_mut().for_each(|x| *x *= s);
    a.u_final *= s;
    a.d *= s;
    a.total *= s;
}

/// Trains to completion and returns the best-validation network with its log.
pub fn train(net: MacNetwork, data: &Dataset, a: Option<&CategoryAttributeMatrix>, cfg: &TrainConfig) -> Result<(MacNetwork, TrainLog)> {
    Trainer::new(net, data, a, cfg)?.run(|_| Ok(()))
}
