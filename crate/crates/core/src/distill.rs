//! Losses, optimiser and training loops for the teacher, the distilled
//! student and the supervised-only ablation rows.
//!
//! A student step records the frozen teacher and the student on one tape.
//! The teacher's nodes are built with `trainable = false`, so no backward
//! work is attached to them and their parameters never receive a gradient.

use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMapPair, AttentionVars};
use crate::autograd::{Tape, Var};
use crate::data::{DistillationBatch, PairedDataset};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::nn::{apply_bn_updates, BnStatUpdate, Graph, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Batches buffered ahead of the optimiser.
const PREFETCH_DEPTH: usize = 2;

/// Loss values of one step. `total` is always `l_ce + lambda_kd * l_kd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub per_block_kd: Vec<f64>,
    pub l_kd: f64,
    pub lambda_kd: f64,
    pub total: f64,
}

/// Cosine similarity of two equally shaped batches of maps, averaged over the batch.
///
/// A sample whose map has (near-)zero norm contributes similarity 0.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.cosine_similarity(va, vb)?;
    Ok(tape.value(c).item().as_f64())
}

/// Per-block kd losses `((1 - S_c) + (1 - S_s)) / 2` and their mean.
pub fn kd_loss<T: Scalar>(teacher: &[AttentionMapPair<T>], student: &[AttentionMapPair<T>]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let to_vars = |tape: &mut Tape<T>, maps: &[AttentionMapPair<T>]| -> Vec<AttentionVars> {
        maps.iter()
            .map(|m| AttentionVars {
                channel: tape.constant(m.channel.clone()),
                spatial: tape.constant(m.spatial.clone()),
            })
            .collect()
    };
    let t = to_vars(&mut tape, teacher);
    let s = to_vars(&mut tape, student);
    let (_, blocks) = kd_loss_graph(&mut tape, &t, &s)?;
    let blocks: Vec<f64> = blocks.iter().map(|&b| tape.value(b).item().as_f64()).collect();
    Ok((mean_block_kd(&blocks), blocks))
}

/// Reported `l_kd`; shared by [`kd_loss`] and [`total_loss`] so both agree bit for bit.
fn mean_block_kd(blocks: &[f64]) -> f64 {
    if blocks.is_empty() {
        0.0
    } else {
        blocks.iter().sum::<f64>() / blocks.len() as f64
    }
}

/// Graph form of [`kd_loss`]; returns the mean and the per-block loss nodes.
/// With no attention blocks the mean is the constant 0.
pub fn kd_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[AttentionVars],
    student: &[AttentionVars],
) -> Result<(Var, Vec<Var>)> {
    if teacher.len() != student.len() {
        return Err(Error::Alignment {
            block: teacher.len().min(student.len()),
            message: format!("teacher has {} attention blocks, student has {}", teacher.len(), student.len()),
        });
    }
    let mut blocks = Vec::with_capacity(teacher.len());
    for (i, (t, s)) in teacher.iter().zip(student).enumerate() {
        for (what, a, b) in [("channel", t.channel, s.channel), ("spatial", t.spatial, s.spatial)] {
            if tape.value(a).shape() != tape.value(b).shape() {
                return Err(Error::Alignment {
                    block: i,
                    message: format!(
                        "{what} map shapes differ: teacher {:?}, student {:?}",
                        tape.value(a).shape(),
                        tape.value(b).shape()
                    ),
                });
            }
        }
        let sc = tape.cosine_similarity(t.channel, s.channel)?;
        let ss = tape.cosine_similarity(t.spatial, s.spatial)?;
        let both = tape.add(sc, ss)?;
        let half = tape.scale(both, T::from_f64(-0.5));
        blocks.push(tape.shift(half, T::one()));
    }
    let mean = match blocks.split_first() {
        None => tape.constant(Tensor::scalar(T::zero())),
        Some((&first, rest)) => {
            let mut acc = first;
            for &b in rest {
                acc = tape.add(acc, b)?;
            }
            tape.scale(acc, T::from_f64(1.0 / blocks.len() as f64))
        }
    };
    Ok((mean, blocks))
}

/// Mean softmax cross-entropy of `(n, classes)` logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, labels)?;
    Ok(tape.value(ce).item().as_f64())
}

/// Combines the two objectives; `l_kd` is the mean of `per_block_kd` (0 when empty).
pub fn total_loss(l_ce: f64, per_block_kd: Vec<f64>, lambda_kd: f64) -> Result<LossBreakdown> {
    if !(lambda_kd >= 0.0 && lambda_kd.is_finite()) {
        return Err(Error::Config(format!("lambda_kd must be finite and non-negative, got {lambda_kd}")));
    }
    let l_kd = mean_block_kd(&per_block_kd);
    Ok(LossBreakdown {
        l_ce,
        per_block_kd,
        l_kd,
        lambda_kd,
        total: l_ce + lambda_kd * l_kd,
    })
}

/// Step-decay learning rate plus the remaining optimisation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub bn_momentum: f64,
    /// Random horizontal flips, applied identically to a pair.
    pub augment: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr0: 0.1,
            lr_decay: 0.4,
            decay_every: 20,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 100,
            bn_momentum: 0.1,
            augment: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v = mu v + (g + wd p)`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        let n = store.params().len();
        if grads.len() != n {
            return Err(Error::Internal(format!("{} gradients for {n} parameters", grads.len())));
        }
        self.velocity.resize(n, None);
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        for ((p, g), v) in store.params_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if g.shape() != p.tensor.shape() {
                return Err(Error::Internal(format!(
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            let vel = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, &gv), vv) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Losses, parameter gradients and pending batch-norm updates of one forward/backward pass.
pub struct StepOutput<T> {
    pub losses: LossBreakdown,
    pub grads: Vec<Option<Tensor<T>>>,
    pub bn_updates: Vec<BnStatUpdate<T>>,
    pub degenerate_cosines: usize,
}

/// Teacher side of a distillation step: the frozen network and its input.
pub type TeacherInput<'a, T> = (&'a Network<T>, &'a Tensor<T>);

/// One forward/backward pass of `l_ce + lambda * l_kd` for the student.
/// Without a teacher the loss is cross-entropy alone and `lambda` is ignored.
pub fn loss_and_gradients<T: Scalar>(
    student: &Network<T>,
    teacher: Option<TeacherInput<'_, T>>,
    student_input: &Tensor<T>,
    labels: &[usize],
    lambda_kd: f64,
    mode: Mode,
) -> Result<StepOutput<T>> {
    let mut tape = Tape::new();
    let teacher_maps = match teacher {
        Some((net, input)) => {
            let mut tg = Graph::with_tape(tape, net.store(), Mode::Eval, false);
            let x = tg.input(input.clone());
            let out = net.forward_graph(&mut tg, x)?;
            tape = tg.into_parts().0;
            Some(out.attention_maps)
        }
        None => None,
    };
    let mut g = Graph::with_tape(tape, student.store(), mode, true);
    let x = g.input(student_input.clone());
    let out = student.forward_graph(&mut g, x)?;
    let ce = g.tape.cross_entropy(out.logits, labels)?;
    let l_ce = g.tape.value(ce).item().as_f64();
    let (loss, per_block, lambda) = match &teacher_maps {
        Some(tmaps) => {
            let (kd, blocks) = kd_loss_graph(&mut g.tape, tmaps, &out.attention_maps)?;
            let weighted = g.tape.scale(kd, T::from_f64(lambda_kd));
            let total = g.tape.add(ce, weighted)?;
            let per: Vec<f64> = blocks.iter().map(|&b| g.tape.value(b).item().as_f64()).collect();
            (total, per, lambda_kd)
        }
        None => (ce, Vec::new(), 0.0),
    };
    let losses = total_loss(l_ce, per_block, lambda)?;
    let mut grads = g.tape.backward(loss)?;
    let param_grads = g.param_grads(&mut grads);
    let degenerate_cosines = g.tape.degenerate_cosines();
    let (_, bn_updates) = g.into_parts();
    Ok(StepOutput {
        losses,
        grads: param_grads,
        bn_updates,
        degenerate_cosines,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Student,
    Supervised,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema_version: u32,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub l_ce: f64,
    pub l_kd: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_l_ce: f64,
    pub mean_l_kd: f64,
    pub mean_total: f64,
    pub mean_per_block_kd: Vec<f64>,
    pub degenerate_cosines: usize,
}

/// Callbacks fired during training; an error aborts the run.
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _summary: &EpochSummary, _network: &Network<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl<T: Scalar> TrainObserver<T> for NoopObserver {}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<LossBreakdown>,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub schedule: TrainSchedule,
    pub lambda_kd: f64,
    /// Drives shuffling and augmentation.
    pub seed: u64,
}

/// Trains on high-resolution inputs with cross-entropy only.
pub fn train_teacher<T: Scalar>(
    network: &mut Network<T>,
    data: &PairedDataset<T>,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    run(network, None, data, Phase::Teacher, options, observer)
}

/// Trains on prepared low-resolution inputs with cross-entropy only.
pub fn train_supervised<T: Scalar>(
    network: &mut Network<T>,
    data: &PairedDataset<T>,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    run(network, None, data, Phase::Supervised, options, observer)
}

/// Distils `teacher` (fed high-resolution images, frozen) into `student`
/// (fed the paired prepared low-resolution images).
pub fn train_student<T: Scalar>(
    student: &mut Network<T>,
    teacher: &Network<T>,
    data: &PairedDataset<T>,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    let (nt, ns) = (teacher.config.attention_block_count(), student.config.attention_block_count());
    if nt != ns {
        return Err(Error::Alignment {
            block: nt.min(ns),
            message: format!("teacher has {nt} attention blocks, student has {ns}"),
        });
    }
    if teacher.config.num_classes != student.config.num_classes {
        return Err(Error::Config(format!(
            "teacher predicts {} classes, student {}",
            teacher.config.num_classes, student.config.num_classes
        )));
    }
    let before = teacher.store().fingerprint();
    let outcome = run(student, Some(teacher), data, Phase::Student, options, observer)?;
    if teacher.store().fingerprint() != before {
        return Err(Error::Internal("teacher parameters changed during distillation".into()));
    }
    Ok(outcome)
}

fn run<T: Scalar>(
    network: &mut Network<T>,
    teacher: Option<&Network<T>>,
    data: &PairedDataset<T>,
    phase: Phase,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    let schedule = &options.schedule;
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let classes = network.config.num_classes;
    if let Some(bad) = data.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!("label {bad} out of range for {classes} classes")));
    }
    let mut sgd = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut outcome = TrainOutcome::default();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut acc = EpochAccumulator::default();
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<DistillationBatch<T>>(PREFETCH_DEPTH);
            scope.spawn(move || {
                for batch in data.batches(epoch, schedule.batch_size, options.seed, schedule.augment) {
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            });
            for (step, batch) in rx.iter().enumerate() {
                let (input, teacher_side) = match (phase, teacher) {
                    (Phase::Teacher, _) => (&batch.hr_images, None),
                    (Phase::Supervised, _) => (&batch.lr_images, None),
                    (Phase::Student, Some(t)) => (&batch.lr_images, Some((t, &batch.hr_images))),
                    (Phase::Student, None) => return Err(Error::Internal("student phase without a teacher".into())),
                };
                let out = loss_and_gradients(network, teacher_side, input, &batch.labels, options.lambda_kd, Mode::Train)?;
                let l = &out.losses;
                if !(l.total.is_finite() && l.l_ce.is_finite() && l.l_kd.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: step,
                        detail: format!("l_ce={} l_kd={} total={}", l.l_ce, l.l_kd, l.total),
                    });
                }
                apply_bn_updates(network.store_mut(), out.bn_updates, schedule.bn_momentum);
                sgd.step(network.store_mut(), &out.grads, lr)?;
                observer.on_step(&StepRecord {
                    schema_version: METRICS_SCHEMA_VERSION,
                    phase,
                    epoch,
                    step,
                    l_ce: l.l_ce,
                    l_kd: l.l_kd,
                    total: l.total,
                    lr,
                })?;
                acc.push(&out.losses, out.degenerate_cosines);
                outcome.steps.push(out.losses);
            }
            Ok(())
        })?;
        let summary = acc.finish(epoch, lr);
        observer.on_epoch(&summary, network)?;
        log::info!(
            "{phase:?} epoch {epoch}: lr {lr:.4} l_ce {:.4} l_kd {:.4} total {:.4}",
            summary.mean_l_ce,
            summary.mean_l_kd,
            summary.mean_total
        );
        outcome.epochs.push(summary);
    }
    Ok(outcome)
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    l_ce: f64,
    l_kd: f64,
    total: f64,
    per_block: Vec<f64>,
    degenerate: usize,
}

impl EpochAccumulator {
    fn push(&mut self, l: &LossBreakdown, degenerate: usize) {
        self.steps += 1;
        self.l_ce += l.l_ce;
        self.l_kd += l.l_kd;
        self.total += l.total;
        self.per_block.resize(l.per_block_kd.len(), 0.0);
        for (a, b) in self.per_block.iter_mut().zip(&l.per_block_kd) {
            *a += b;
        }
        self.degenerate += degenerate;
    }

    fn finish(self, epoch: usize, lr: f64) -> EpochSummary {
        let n = self.steps.max(1) as f64;
        EpochSummary {
            epoch,
            lr,
            steps: self.steps,
            mean_l_ce: self.l_ce / n,
            mean_l_kd: self.l_kd / n,
            mean_total: self.total / n,
            mean_per_block_kd: self.per_block.iter().map(|v| v / n).collect(),
            degenerate_cosines: self.degenerate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_hand_computed_momentum_steps() {
        // f(x) = x^2, gradient 2x, from x = 1 with lr 0.1 and momentum 0.9
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::scalar(1.0));
        let mut sgd = Sgd::new(0.9, 0.0);
        let grad = |s: &ParamStore<f64>| vec![Some(Tensor::scalar(2.0 * s.params()[0].tensor.item()))];
        let g = grad(&store);
        sgd.step(&mut store, &g, 0.1).unwrap();
        assert!((store.params()[0].tensor.item() - 0.8).abs() < 1e-12);
        let g = grad(&store);
        sgd.step(&mut store, &g, 0.1).unwrap();
        assert!((store.params()[0].tensor.item() - 0.46).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(2.0));
        let mut sgd = Sgd::new(0.0, 0.5);
        sgd.step(&mut store, &[Some(Tensor::scalar(0.0))], 0.1).unwrap();
        assert!((store.params()[0].tensor.item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn schedule_steps_every_twenty_epochs() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(19), 0.1);
        assert_eq!(s.lr_at(20), 0.1 * 0.4);
        assert!((s.lr_at(40) - 0.016).abs() < 1e-15);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(matches!(total_loss(1.0, vec![], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn identical_maps_give_zero_kd() {
        let m = AttentionMapPair {
            channel: Tensor::from_fn(&[2, 4, 1, 1], |i| i as f32 * 0.37 - 1.0),
            spatial: Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f32).sin()),
        };
        let (mean, blocks) = kd_loss(&[m.clone(), m.clone()], &[m.clone(), m]).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(blocks, vec![0.0, 0.0]);
    }

    #[test]
    fn misaligned_maps_name_the_block() {
        let a = AttentionMapPair {
            channel: Tensor::<f64>::zeros(&[1, 4, 1, 1]),
            spatial: Tensor::zeros(&[1, 1, 2, 2]),
        };
        let mut b = a.clone();
        b.spatial = Tensor::zeros(&[1, 1, 3, 3]);
        match kd_loss(&[a.clone(), a.clone()], &[a, b]) {
            Err(Error::Alignment { block, .. }) => assert_eq!(block, 1),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }
}
