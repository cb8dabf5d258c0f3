//! Continual training loop.
//!
//! Tasks arrive one at a time. Each task is trained on its own data only,
//! the codebook ensemble is refreshed once at the task boundary, and the
//! model is then evaluated on the test sets of every task seen so far. The
//! trainer keeps parameters, optimizer moments and the ensemble between
//! tasks and nothing else.

use std::collections::HashSet;
use std::ops::Range;

use pcl_tensor::{backward, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Mode, ToyModel};
use crate::baselines::MATCH_WEIGHT;
use crate::datagen::{self, Sample, StreamKind, TaskData, TaskStream};
use crate::error::{Error, Result};
use crate::init::{self, derive_seed};
use crate::io;
use crate::metrics::AccuracyMatrix;
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Upper bound; each task uses `min(batch, task size)`.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the orthogonality penalty.
    pub lambda: f64,
    /// Weight of the ensemble regularizer.
    pub beta: f64,
    /// Weight of the hard-selection matching term.
    pub match_weight: f64,
    /// Apply the two codebook penalties whenever the mode trains the
    /// codebook.
    pub codebook_losses: bool,
    /// Restrict the training cross-entropy to the current task's classes.
    pub mask_past_classes: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pc,
            epochs: 5,
            batch: 64,
            lr: 0.007,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.1,
            beta: 1.0,
            match_weight: MATCH_WEIGHT,
            codebook_losses: true,
            mask_past_classes: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta >= 0.0 && self.match_weight >= 0.0) {
            return Err(Error::Config("train: loss weights must be nonnegative".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train: invalid learning rate {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("train: epochs and batch must be positive".into()));
        }
        Ok(())
    }
}

/// Values of each loss term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub orth: f64,
    pub reg: f64,
    pub matching: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

/// A training example with its frozen encoding precomputed.
pub struct Encoded<'a> {
    pub sample: &'a Sample,
    pub query: Tensor,
}

/// `CE + λ·L_or + β·L_re (+ matching)` over `batch`. Cross-entropy is the
/// batch mean over the logits of `classes`; labels are taken relative to
/// its start.
pub fn total_loss<'t>(
    tape: &'t Tape,
    model: &ToyModel,
    batch: &[Encoded<'_>],
    cfg: &TrainConfig,
    classes: Range<usize>,
) -> Result<(Var<'t>, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mode = cfg.mode;
    let mut ce: Option<Var<'t>> = None;
    let mut matching: Option<Var<'t>> = None;
    for e in batch {
        let out = model.forward(tape, &e.sample.x, &e.query, mode)?;
        let logits = out.logits.slice_cols(classes.start, classes.end)?;
        let label = e.sample.y.checked_sub(classes.start).filter(|&y| y < classes.len());
        let label = label.ok_or_else(|| Error::Data(format!("label {} outside {classes:?}", e.sample.y)))?;
        let term = logits.cross_entropy(&[label])?;
        ce = Some(match ce {
            None => term,
            Some(acc) => acc.add(term)?,
        });
        if let Some(m) = out.matching {
            matching = Some(match matching {
                None => m,
                Some(acc) => acc.add(m)?,
            });
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let ce = ce.expect("nonempty").scale(scale)?;
    let matching = matching.map(|m| m.scale(scale)).transpose()?;
    let (orth, reg) = if mode.uses_codebook() && cfg.codebook_losses {
        (
            Some(model.codebook.orth_loss(tape, &model.store)?),
            Some(model.codebook.reg_loss(tape, &model.store)?),
        )
    } else {
        (None, None)
    };
    combine(ce, orth, reg, matching, cfg)
}

/// Weighted sum of the loss terms that are present.
pub fn combine<'t>(
    ce: Var<'t>,
    orth: Option<Var<'t>>,
    reg: Option<Var<'t>>,
    matching: Option<Var<'t>>,
    cfg: &TrainConfig,
) -> Result<(Var<'t>, LossTerms)> {
    let mut terms = LossTerms {
        ce: ce.item(),
        ..LossTerms::default()
    };
    let mut total = ce;
    if let Some(o) = orth {
        terms.orth = o.item();
        total = total.add(o.scale(cfg.lambda)?)?;
    }
    if let Some(r) = reg {
        terms.reg = r.item();
        total = total.add(r.scale(cfg.beta)?)?;
    }
    if let Some(m) = matching {
        terms.matching = m.item();
        total = total.add(m.scale(cfg.match_weight)?)?;
    }
    terms.total = total.item();
    Ok((total, terms))
}

/// Everything the trainer carries from one task to the next.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub entries: Vec<StateEntry>,
    pub tasks_done: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Param,
    AdamFirstMoment,
    AdamSecondMoment,
    CodebookEnsemble,
}

#[derive(Debug, Clone)]
pub struct StateEntry {
    pub name: String,
    pub kind: StateKind,
    pub value: Tensor,
}

impl TrainerState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries: Vec<(&str, &Tensor)> = self.entries.iter().map(|e| (e.name.as_str(), &e.value)).collect();
        io::encode_tensors(&entries)
    }

    /// `(name, kind, shape)` per entry.
    pub fn inventory(&self) -> Vec<(String, StateKind, (usize, usize))> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.kind, e.value.shape()))
            .collect()
    }
}

/// True if any patch row of any sample occurs byte-for-byte in `bytes`.
pub fn bytes_contain_samples(bytes: &[u8], samples: &[Sample]) -> bool {
    let Some(first) = samples.first() else {
        return false;
    };
    let width = first.x.cols() * 8;
    let encoded: Vec<Vec<u8>> = samples
        .iter()
        .flat_map(|s| (0..s.x.rows()).map(move |r| s.x.row(r).iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let rows: HashSet<&[u8]> = encoded.iter().map(Vec::as_slice).collect();
    bytes.len() >= width && bytes.windows(width).any(|w| rows.contains(w))
}

/// Accuracy of one stage: fractions per seen task, plus extra evaluations
/// for domain streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub task: usize,
    pub accuracies: Vec<f64>,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    /// Held-out domain accuracy (domain streams).
    pub unseen_accuracy: Option<f64>,
    /// Accuracy on the merged test set of all seen tasks.
    pub merged_accuracy: f64,
    pub mean_loss_first_epoch: f64,
    pub mean_loss_last_epoch: f64,
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub matrix: AccuracyMatrix,
    pub stages: Vec<StageReport>,
    pub log: Vec<StepLog>,
}

pub struct Trainer {
    pub model: ToyModel,
    pub cfg: TrainConfig,
    adam: Adam,
    tasks_done: usize,
}

impl Trainer {
    pub fn new(mut model: ToyModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.set_mode(cfg.mode);
        let adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self {
            model,
            cfg,
            adam,
            tasks_done: 0,
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// Optimizes on `task` alone for the configured epochs and returns the
    /// per-step loss log.
    pub fn train_task(&mut self, task: &TaskData, seen: usize) -> Result<Vec<StepLog>> {
        if task.train.is_empty() {
            return Err(Error::Data(format!("task {} has no training data", task.id)));
        }
        let encoded: Vec<Encoded> = task
            .train
            .iter()
            .map(|s| {
                Ok(Encoded {
                    sample: s,
                    query: self.model.encode_query(&s.x)?,
                })
            })
            .collect::<Result<_>>()?;
        let batch = self.cfg.batch.min(encoded.len());
        let start = match task.classes.iter().min() {
            Some(&lo) if self.cfg.mask_past_classes => lo,
            _ => 0,
        };
        let classes = start..seen;
        let mut rng = init::rng(derive_seed(self.cfg.seed, &format!("order/task{}", task.id)));
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut log = Vec::new();
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let items: Vec<Encoded> = chunk
                    .iter()
                    .map(|&i| Encoded {
                        sample: encoded[i].sample,
                        query: encoded[i].query.clone(),
                    })
                    .collect();
                let tape = Tape::new();
                let (loss, terms) = total_loss(&tape, &self.model, &items, &self.cfg, classes.clone())?;
                let grads = backward(loss)?;
                self.adam.step(&mut self.model.store, &grads, self.cfg.lr);
                log.push(StepLog {
                    task: task.id,
                    epoch,
                    step,
                    terms,
                });
                step += 1;
            }
        }
        Ok(log)
    }

    /// Serializable snapshot of everything kept between tasks.
    pub fn state(&self) -> TrainerState {
        let mut entries: Vec<StateEntry> = self
            .model
            .store
            .iter()
            .map(|(_, p)| StateEntry {
                name: p.name.clone(),
                kind: StateKind::Param,
                value: p.value().clone(),
            })
            .collect();
        for (id, m, v) in self.adam.moments() {
            let name = &self.model.store.get(id).name;
            entries.push(StateEntry {
                name: format!("adam.m.{name}"),
                kind: StateKind::AdamFirstMoment,
                value: m.clone(),
            });
            entries.push(StateEntry {
                name: format!("adam.v.{name}"),
                kind: StateKind::AdamSecondMoment,
                value: v.clone(),
            });
        }
        entries.push(StateEntry {
            name: "codebook.ema".into(),
            kind: StateKind::CodebookEnsemble,
            value: self.model.codebook.ema().clone(),
        });
        TrainerState {
            entries,
            tasks_done: self.tasks_done,
            steps: self.adam.steps(),
        }
    }

    /// Accuracy on `samples` over the first `seen` classes.
    pub fn evaluate(&self, samples: &[Sample], seen: usize) -> Result<f64> {
        self.model.accuracy(samples, self.cfg.mode, seen)
    }

    /// Runs the whole stream. `hook` is called after every stage with the
    /// trainer and that stage's report.
    pub fn train_stream(
        &mut self,
        stream: &TaskStream,
        mut hook: impl FnMut(&Trainer, &StageReport) -> Result<()>,
    ) -> Result<StreamOutcome> {
        let mut matrix = AccuracyMatrix::new(stream.tasks.len());
        let mut stages = Vec::new();
        let mut log = Vec::new();
        for (t, task) in stream.tasks.iter().enumerate() {
            let seen = stream.seen_classes(t + 1);
            let steps = self.train_task(task, seen)?;
            self.model.codebook.ema_update(&self.model.store);
            self.tasks_done += 1;
            let accuracies = stream.tasks[..=t]
                .iter()
                .map(|prev| self.evaluate(&prev.test, seen))
                .collect::<Result<Vec<f64>>>()?;
            matrix.record_eval(accuracies.clone())?;
            let unseen_accuracy = match stream.spec.kind {
                StreamKind::ClassInc => None,
                _ if stream.unseen_test.is_empty() => None,
                _ => Some(self.evaluate(&stream.unseen_test, seen)?),
            };
            let merged = datagen::merged_test(&stream.tasks[..=t]);
            let merged_accuracy = self.evaluate(&merged, seen)?;
            let epoch_mean = |e: usize| {
                let v: Vec<f64> = steps.iter().filter(|s| s.epoch == e).map(|s| s.terms.total).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            let report = StageReport {
                task: t + 1,
                average_accuracy: matrix.average_accuracy(t + 1)?,
                forgetting: if t >= 1 { Some(matrix.forgetting(t + 1)?) } else { None },
                accuracies,
                unseen_accuracy,
                merged_accuracy,
                mean_loss_first_epoch: epoch_mean(0),
                mean_loss_last_epoch: epoch_mean(self.cfg.epochs - 1),
            };
            log.extend(steps);
            hook(self, &report)?;
            stages.push(report);
        }
        Ok(StreamOutcome { matrix, stages, log })
    }
}
