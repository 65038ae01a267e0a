//! Epoch loops for cross-entropy training and student-teacher distillation,
//! plus evaluation.

use std::time::Instant;

use crate::cells::{CellState, StateNodes};
use crate::data::{augment, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::params::Bound;
use crate::tensor::{Float, Graph, NodeId, Tensor};
use crate::training::optim::Sgd;

/// Per-run training switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Let gradients flow across one batch boundary by re-running the previous
    /// batch inside the current graph.
    pub state_backprop: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            seed: 0,
            augment: false,
            state_backprop: false,
        }
    }
}

/// One finished mini-batch, as seen by an [`Observer`].
pub struct BatchEvent<'a, T> {
    pub epoch: usize,
    pub batch: usize,
    pub indices: &'a [usize],
    pub logits: &'a Tensor<T>,
    pub loss: f64,
    /// The network after the optimizer step and state write-back.
    pub network: &'a Network<T>,
}

/// Hooks into the epoch loop. `()` ignores everything.
pub trait Observer<T> {
    /// Called after the epoch-start reset, before the first batch.
    fn epoch_start(&mut self, _epoch: usize, _network: &Network<T>) {}

    fn batch_end(&mut self, _event: &BatchEvent<'_, T>) {}
}

impl<T> Observer<T> for () {}

/// Mean loss and accuracy over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub train_acc: f64,
}

/// Mixture weight of the distillation objective; checked to lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambda(f64);

impl Lambda {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `(1 - lambda) * CE(student_logits, labels) + lambda * L1(student_feat, teacher_feat)`.
pub fn distill_loss<T: Float>(
    g: &mut Graph<T>,
    student_logits: NodeId,
    labels: &[usize],
    student_feat: NodeId,
    teacher_feat: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    let lambda = Lambda::new(lambda)?.value();
    let ce = g.softmax_cross_entropy(student_logits, labels)?;
    let l1 = g.l1_loss(student_feat, teacher_feat)?;
    let ce = g.scale(ce, 1.0 - lambda)?;
    let l1 = g.scale(l1, lambda)?;
    g.add(ce, l1)
}

struct Teacher<'a, T> {
    network: &'a Network<T>,
    lambda: f64,
}

/// The previous batch, kept for `state_backprop`.
struct Previous<T> {
    images: Tensor<T>,
    states: Vec<CellState<T>>,
}

fn argmax_hits<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            best == label
        })
        .count()
}

#[allow(clippy::too_many_arguments)]
fn run_epoch<T: Float>(
    network: &mut Network<T>,
    teacher: Option<Teacher<'_, T>>,
    dataset: &Dataset,
    opt: &mut Sgd<T>,
    options: &TrainOptions,
    epoch: usize,
    observer: &mut dyn Observer<T>,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if network.mode() != Mode::Train {
        return Err(Error::State("training requires train mode".into()));
    }
    network.reset_states();
    if !network.states_are_zero() {
        return Err(Error::State("cell states not zero at epoch start".into()));
    }
    observer.epoch_start(epoch, network);

    let plan = BatchPlan::new(options.seed, options.batch_size)?;
    let mut aug_rng = plan.augment_rng(epoch);
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    let mut previous: Option<Previous<T>> = None;

    for (b, indices) in plan.batches(dataset.len(), epoch).iter().enumerate() {
        let (mut images, labels) = dataset.gather::<T>(indices)?;
        if options.augment {
            images = augment(&images, &mut aug_rng)?;
        }

        let mut g = Graph::new();
        let p: Bound = network.store.bind(&mut g, true);
        let states: Vec<StateNodes> = match (&previous, options.state_backprop && network.is_ptl()) {
            (Some(prev), true) => {
                let x_prev = g.constant(prev.images.clone());
                let s_prev: Vec<StateNodes> = prev.states.iter().map(|s| s.bind(&mut g)).collect();
                network.forward_graph(&mut g, &p, x_prev, &s_prev)?.states
            }
            _ => network.bind_states(&mut g),
        };
        let x = g.constant(images.clone());
        let out = network.forward_graph(&mut g, &p, x, &states)?;
        let loss = match &teacher {
            None => g.softmax_cross_entropy(out.logits, &labels)?,
            Some(t) => {
                let (_, t_feat) = t.network.predict(&images)?;
                if t_feat.shape() != g.shape(out.feature) {
                    return Err(Error::InvalidArgument(format!(
                        "teacher feature {:?} does not match student feature {:?}",
                        t_feat.shape(),
                        g.shape(out.feature)
                    )));
                }
                let tf = g.constant(t_feat);
                distill_loss(&mut g, out.logits, &labels, out.feature, tf, t.lambda)?
            }
        };
        let loss_value = g.value(loss).as_f64_scalar()?;
        if !loss_value.is_finite() {
            return Err(Error::State(format!("loss became non-finite at epoch {epoch}, batch {b}")));
        }

        let mut grads = g.backward(loss)?;
        let grad_list: Vec<Tensor<T>> = p
            .ids()
            .iter()
            .map(|&id| {
                grads
                    .take(id)
                    .ok_or_else(|| Error::State("missing parameter gradient".into()))
            })
            .collect::<Result<_>>()?;
        if options.state_backprop && network.is_ptl() {
            previous = Some(Previous {
                images,
                states: network.states().to_vec(),
            });
        }
        opt.step(&mut network.store, &grad_list, epoch)?;
        network.write_states(&g, &out.states)?;

        let logits = g.value(out.logits);
        loss_sum += loss_value * indices.len() as f64;
        hits += argmax_hits(logits, &labels);
        observer.batch_end(&BatchEvent {
            epoch,
            batch: b,
            indices,
            logits,
            loss: loss_value,
            network,
        });
    }
    let m = dataset.len() as f64;
    Ok(EpochStats {
        loss: loss_sum / m,
        train_acc: hits as f64 / m,
    })
}

trait ScalarValue {
    fn as_f64_scalar(&self) -> Result<f64>;
}

impl<T: Float> ScalarValue for Tensor<T> {
    fn as_f64_scalar(&self) -> Result<f64> {
        self.item()
            .map(Float::as_f64)
            .ok_or_else(|| Error::NonScalarRoot(self.shape().to_vec()))
    }
}

/// One epoch of cross-entropy training. Resets every cell state first, then
/// runs seeded shuffled mini-batches: forward, loss, backward, optimizer
/// step, detached state write-back.
pub fn train_epoch<T: Float>(
    network: &mut Network<T>,
    dataset: &Dataset,
    opt: &mut Sgd<T>,
    options: &TrainOptions,
    epoch: usize,
    observer: &mut dyn Observer<T>,
) -> Result<EpochStats> {
    run_epoch(network, None, dataset, opt, options, epoch, observer)
}

/// One epoch of student-teacher distillation. The teacher must be in eval
/// mode and is only read.
#[allow(clippy::too_many_arguments)]
pub fn distill_epoch<T: Float>(
    student: &mut Network<T>,
    teacher: &Network<T>,
    lambda: f64,
    dataset: &Dataset,
    opt: &mut Sgd<T>,
    options: &TrainOptions,
    epoch: usize,
    observer: &mut dyn Observer<T>,
) -> Result<EpochStats> {
    if teacher.mode() != Mode::Eval {
        return Err(Error::State("teacher must be in eval mode".into()));
    }
    let lambda = Lambda::new(lambda)?.value();
    run_epoch(
        student,
        Some(Teacher { network: teacher, lambda }),
        dataset,
        opt,
        options,
        epoch,
        observer,
    )
}

/// Eval-mode accuracy with per-class breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let total: usize = self.total.iter().sum();
        if total == 0 {
            0.0
        } else {
            self.correct.iter().sum::<usize>() as f64 / total as f64
        }
    }

    pub fn class_accuracy(&self, class: usize) -> f64 {
        match self.total[class] {
            0 => 0.0,
            n => self.correct[class] as f64 / n as f64,
        }
    }
}

/// Evaluates with zero cell states, in dataset order, without touching the
/// network's stored states.
pub fn evaluate<T: Float>(network: &Network<T>, dataset: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let (eval, _) = evaluate_with_logits(network, dataset, batch_size)?;
    Ok(eval)
}

/// As [`evaluate`], also returning the logits of every sample `[M, K]`.
pub fn evaluate_with_logits<T: Float>(
    network: &Network<T>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<(Evaluation, Tensor<T>)> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let k = network.config().classes;
    if dataset.classes() > k {
        return Err(Error::Data(format!(
            "dataset has {} classes but the network predicts {k}",
            dataset.classes()
        )));
    }
    let mut eval = Evaluation {
        correct: vec![0; k],
        total: vec![0; k],
    };
    let mut parts = Vec::new();
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (images, labels) = dataset.gather::<T>(chunk)?;
        let (logits, _) = network.predict(&images)?;
        for (row, &label) in logits.data().chunks_exact(k).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            eval.total[label] += 1;
            eval.correct[label] += usize::from(best == label);
        }
        parts.push(logits);
    }
    Ok((eval, Tensor::cat_batch(&parts)?))
}

/// One row of a training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-epoch rows, strictly increasing in epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::InvalidArgument(format!(
                    "epoch {} does not follow epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "epoch,loss,train_acc,eval_acc,lr,seconds";

    /// CSV with header and LF line endings; a missing eval accuracy is empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let eval = r.eval_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
            // Round to 12 significant digits so 0.01 * 0.1^2 prints as 0.0001.
            let lr: f64 = format!("{:.11e}", r.lr).parse().unwrap_or(r.lr);
            out.push_str(&format!(
                "{},{:.9},{:.6},{},{},{:.3}\n",
                r.epoch, r.loss, r.train_acc, eval, lr, r.seconds
            ));
        }
        out
    }
}

/// Settings of a multi-epoch run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub train: TrainOptions,
    /// Record wall time; when false the seconds column is 0 so logs are
    /// byte-reproducible.
    pub timing: bool,
}

/// Runs `epochs` of training (or distillation when `teacher` is given),
/// evaluating on `eval` after each epoch.
pub fn fit<T: Float>(
    network: &mut Network<T>,
    teacher: Option<(&Network<T>, f64)>,
    train: &Dataset,
    eval: Option<&Dataset>,
    opt: &mut Sgd<T>,
    options: &FitOptions,
    observer: &mut dyn Observer<T>,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    network.set_mode(Mode::Train);
    for epoch in 0..options.epochs {
        let start = Instant::now();
        let stats = match teacher {
            None => train_epoch(network, train, opt, &options.train, epoch, observer)?,
            Some((t, lambda)) => distill_epoch(network, t, lambda, train, opt, &options.train, epoch, observer)?,
        };
        let eval_acc = eval
            .map(|d| evaluate(network, d, options.train.batch_size).map(|e| e.accuracy()))
            .transpose()?;
        let seconds = if options.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        report.push(EpochRow {
            epoch,
            loss: stats.loss,
            train_acc: stats.train_acc,
            eval_acc,
            lr: opt.lr(epoch),
            seconds,
        })?;
    }
    Ok(report)
}
