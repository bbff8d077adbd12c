use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::autograd::{Graph, Tensor};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{make_batch, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{backend, Evaluator, MetricReport};
use crate::nn::{Binder, GradMode, ParamId, ParamStore};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads {
            let m = self.m.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub lr_current: f64,
    /// Seed of the per-epoch shuffles.
    pub rng_seed: u64,
    /// Best validation mean PQ so far.
    pub best_val_metric: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            epoch: 0,
            step: 0,
            lr_current: cfg.lr,
            rng_seed: cfg.seed,
            best_val_metric: None,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub batch: Vec<String>,
    pub loss: LossReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_total: f64,
    pub val: Option<MetricReport>,
}

/// Owns the model, optimiser state and schedule.
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub state: TrainState,
    log: Option<Box<dyn Write>>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let state = TrainState::new(&model.cfg);
        Self {
            model,
            opt: Adam::default(),
            state,
            log: None,
        }
    }

    /// Line-delimited JSON step records go to `w`.
    pub fn with_log(mut self, w: Box<dyn Write>) -> Self {
        self.log = Some(w);
        self
    }

    /// Forward, loss, backward and one optimiser update.
    pub fn train_step(&mut self, samples: &[&Sample]) -> Result<LossReport> {
        let batch = make_batch(samples, self.model.coarse_factor())?;
        let graph = Graph::new();
        let grads = {
            let b = Binder::new(&graph, &self.model.store, GradMode::Trainable);
            let fwd = self.model.forward(&b, &batch.images)?;
            let (loss, report) = self.model.loss(&fwd, &batch)?;
            if !report.all_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: batch.ids.join(","),
                    detail: serde_json::to_string(&report).unwrap_or_default(),
                });
            }
            let g = graph.backward(loss);
            let grads: Vec<(ParamId, Tensor)> = b
                .bound()
                .into_iter()
                .filter(|(id, _)| self.model.store.is_trainable(*id))
                .filter_map(|(id, v)| g.get(v).map(|t| (id, t.clone())))
                .collect();
            (grads, report)
        };
        drop(graph);
        let (grads, report) = grads;
        self.opt.step(&mut self.model.store, &grads, self.state.lr_current);
        self.state.step += 1;
        if let Some(w) = self.log.as_mut() {
            let rec = StepRecord {
                epoch: self.state.epoch,
                step: self.state.step,
                lr: self.state.lr_current,
                batch: batch.ids.clone(),
                loss: report,
            };
            let line = serde_json::to_string(&rec).expect("record serialises");
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(report)
    }

    /// One pass over `train` in a seeded order; advances the schedule.
    pub fn run_epoch(&mut self, train: &[&Sample]) -> Result<(usize, f64)> {
        if train.is_empty() {
            return Err(Error::Validation {
                field: "train".into(),
                message: "training split is empty".into(),
            });
        }
        let epoch = self.state.epoch;
        self.state.lr_current = self.model.cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.state.rng_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.model.cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            total += self.train_step(&samples)?.total;
            steps += 1;
        }
        self.state.epoch += 1;
        self.state.lr_current = self.model.cfg.lr_at_epoch(self.state.epoch);
        if let Some(w) = self.log.as_mut() {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok((steps, total / steps as f64))
    }

    /// Trains for `cfg.epochs`, validating every `val_every` epochs and
    /// keeping the parameters with the best mean PQ. `on_epoch` returning
    /// false stops early.
    pub fn fit(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochSummary) -> bool) -> Result<Vec<EpochSummary>> {
        let train = data.split(Split::Train);
        let val = data.split(Split::Val);
        if train.is_empty() {
            return Err(Error::Validation {
                field: "train".into(),
                message: "training split is empty".into(),
            });
        }
        let mut best: Option<ParamStore> = None;
        let mut history = Vec::new();
        let every = self.model.cfg.val_every.max(1);
        while self.state.epoch < self.model.cfg.epochs {
            let lr = self.model.cfg.lr_at_epoch(self.state.epoch);
            let (steps, mean_total) = self.run_epoch(&train)?;
            let val_report = if !val.is_empty() && self.state.epoch.is_multiple_of(every) {
                let r = evaluate(&self.model, &val)?;
                if self.state.best_val_metric.is_none_or(|b| r.mean_pq > b) {
                    self.state.best_val_metric = Some(r.mean_pq);
                    best = Some(self.model.store.clone());
                }
                Some(r)
            } else {
                None
            };
            let summary = EpochSummary {
                epoch: self.state.epoch - 1,
                lr,
                steps,
                mean_total,
                val: val_report,
            };
            let go_on = on_epoch(&summary);
            history.push(summary);
            if !go_on {
                break;
            }
        }
        if let Some(store) = best {
            self.model.store = store;
        }
        Ok(history)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.model, &self.state, path)
    }
}

/// Metrics of the full inference path over `samples`.
pub fn evaluate(model: &Model, samples: &[&Sample]) -> Result<MetricReport> {
    let cfg = &model.cfg;
    let mut ev = Evaluator::new(cfg.num_semantic_classes, cfg.num_instance_classes, backend(cfg.metrics_backend));
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let batch = make_batch(chunk, model.coarse_factor())?;
        let preds = model.predict(&batch.images)?;
        for (s, p) in chunk.iter().zip(&preds) {
            ev.add(&p.semantic, &s.semantic, &p.instances.to_instance_map(), &s.instance)?;
        }
    }
    Ok(ev.finish())
}

const CHECKPOINT_KIND: &str = "coseg-model";

pub fn save_checkpoint(model: &Model, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::json!({
        "kind": CHECKPOINT_KIND,
        "config": model.cfg,
        "state": state,
    });
    let tensors: Vec<(&str, &Tensor)> = model.store.iter().map(|(_, p)| (p.name.as_str(), &*p.value)).collect();
    checkpoint::write(path, &meta, &tensors)
}

/// Rebuilds the model from the stored configuration and restores every tensor.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, TrainState)> {
    let file = checkpoint::read(path)?;
    if file.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(Error::CorruptFile("not a model checkpoint".into()));
    }
    let cfg: ExperimentConfig = serde_json::from_value(file.meta["config"].clone())
        .map_err(|e| Error::CorruptFile(format!("bad config in checkpoint: {e}")))?;
    let state: TrainState = serde_json::from_value(file.meta["state"].clone())
        .map_err(|e| Error::CorruptFile(format!("bad train state in checkpoint: {e}")))?;
    let mut model = Model::new(&cfg)?;
    restore(&mut model.store, file.tensors)?;
    Ok((model, state))
}

/// Loads checkpoint weights into an existing model; every tensor must match
/// by name and shape.
pub fn load_weights(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    restore(&mut model.store, checkpoint::read(path)?.tensors)
}

fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut problems = Vec::new();
    let mut updates = Vec::new();
    for (name, t) in tensors {
        match store.id(&name) {
            None => problems.push(format!("unexpected tensor `{name}`")),
            Some(id) if store.get(id).shape() != t.shape() => problems.push(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            )),
            Some(id) => updates.push((id, t)),
        }
    }
    let seen: std::collections::BTreeSet<ParamId> = updates.iter().map(|(id, _)| *id).collect();
    for (id, p) in store.iter() {
        let named = problems.iter().any(|m| m.contains(&format!("`{}`", p.name)));
        if !seen.contains(&id) && !named {
            problems.push(format!("missing tensor `{}`", p.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::TopologyMismatch(problems.join("; ")));
    }
    for (id, t) in updates {
        store.set(id, t);
    }
    Ok(())
}
