//! Mini-batch training with gradient accumulation, periodic evaluation and
//! snapshots.

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::loss::{softmax, softmax_cross_entropy};
use super::network::{Gradients, Mode, Network};
use super::solver::{sgd_update, SolverConfig, SolverState};
use super::tensor::Tensor;
use super::ModelError;
use crate::dataset::RecordSource;
use crate::image::{normalize, NormalizationSpec};
use crate::metrics::topk_accuracy;
use crate::parallel::{try_map_indexed, Exec};
use crate::rng::{streams, SeededRng};

/// Loads records `idxs` as a normalized NCHW batch with their labels.
pub fn load_batch(src: &dyn RecordSource, idxs: &[usize]) -> Result<(Tensor, Vec<usize>), ModelError> {
    let (h, w, c) = src.dims();
    let spec = NormalizationSpec::symmetric(c);
    let mut samples = Vec::with_capacity(idxs.len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let (img, label) = src.record(i)?;
        samples.push(normalize(&img, &spec)?.to_chw());
        labels.push(label);
    }
    Ok((Tensor::stack(&samples, c, h, w)?, labels))
}

fn check_source(net: &Network, src: &dyn RecordSource, what: &str) -> Result<(), ModelError> {
    if src.is_empty() {
        return Err(ModelError::Data(format!("{what} set is empty")));
    }
    let i = net.config().input;
    let d = src.dims();
    if d != (i.height, i.width, i.channels) {
        return Err(ModelError::Shape(format!(
            "{what} records are {}x{}x{}, network expects {}x{}x{}",
            d.0, d.1, d.2, i.height, i.width, i.channels
        )));
    }
    Ok(())
}

/// Outcome of one parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Mean of the micro-batch losses.
    pub loss: f64,
    pub micro_batches: usize,
    pub lr: f64,
}

/// Runs forward/backward on each micro-batch, averages the gradients over
/// the number actually given and applies one update at iteration `iter`.
/// With `freeze_batch_norm`, batch norm runs on its running statistics.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_and_step(
    net: &mut Network,
    state: &mut SolverState,
    solver: &SolverConfig,
    iter: usize,
    micro: &[(Tensor, Vec<usize>)],
    freeze_batch_norm: bool,
) -> Result<StepReport, ModelError> {
    if micro.is_empty() {
        return Err(ModelError::Data("no micro-batches to accumulate".into()));
    }
    let mut total = Gradients::zeros_like(net);
    let mut loss_sum = 0.0;
    for (x, y) in micro {
        let (logits, cache) = if freeze_batch_norm {
            let p = net.forward(x, Mode::Eval)?;
            (p.logits, p.cache)
        } else {
            net.forward_train(x)?
        };
        let (loss, dl) = softmax_cross_entropy(&logits, y)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { iteration: iter });
        }
        loss_sum += loss;
        total.add_assign(&net.backward(&cache, &dl)?);
    }
    total.scale(1.0 / micro.len() as f64);
    sgd_update(net, &total, state, solver, iter)?;
    Ok(StepReport {
        loss: loss_sum / micro.len() as f64,
        micro_batches: micro.len(),
        lr: solver.lr_at(iter),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Micro-iteration after which the evaluation ran.
    pub iteration: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub examples: usize,
}

/// Class probabilities and labels for records `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Eval-mode predictions for the first `limit` records (all when `None`),
/// batched and optionally spread across threads.
pub fn predict_source(net: &Network, src: &dyn RecordSource, batch_size: usize, limit: Option<usize>, exec: Exec) -> Result<Predictions, ModelError> {
    check_source(net, src, "prediction")?;
    let n = limit.map_or(src.len(), |l| l.min(src.len()));
    let bs = batch_size.max(1);
    let batches = try_map_indexed(exec, n.div_ceil(bs), |b| {
        let idxs: Vec<usize> = (b * bs..((b + 1) * bs).min(n)).collect();
        let (x, labels) = load_batch(src, &idxs)?;
        let p = softmax(&net.forward(&x, Mode::Eval)?.logits);
        let k = p.shape()[1];
        Ok::<_, ModelError>((p.data().chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>(), labels))
    })?;
    let mut out = Predictions {
        probs: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for (p, l) in batches {
        out.probs.extend(p);
        out.labels.extend(l);
    }
    Ok(out)
}

/// Top-1/top-5 accuracy and mean loss over `test_iter` batches.
pub fn evaluate(net: &Network, src: &dyn RecordSource, batch_size: usize, test_iter: usize, exec: Exec) -> Result<Evaluation, ModelError> {
    let p = predict_source(net, src, batch_size, Some(batch_size.saturating_mul(test_iter)), exec)?;
    let k = net.config().num_classes;
    let loss = p
        .probs
        .iter()
        .zip(&p.labels)
        .map(|(row, &y)| -row[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / p.labels.len() as f64;
    Ok(Evaluation {
        iteration: 0,
        loss,
        top1: topk_accuracy(&p.probs, &p.labels, 1)?,
        top5: topk_accuracy(&p.probs, &p.labels, k.min(5))?,
        examples: p.labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    pub freeze_batch_norm: bool,
    /// Strategy for evaluation batches; updates are always sequential.
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLog {
    /// Micro-iteration at which the update window started.
    pub iteration: usize,
    pub update: usize,
    pub loss: f64,
    pub lr: f64,
    pub micro_batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Update(UpdateLog),
    Eval(Evaluation),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// One snapshot per evaluation, in order.
    pub snapshots: Vec<Checkpoint>,
    pub updates: Vec<UpdateLog>,
    pub evaluations: Vec<Evaluation>,
}

impl TrainOutcome {
    /// Snapshot with the highest validation top-1; the earliest wins ties.
    pub fn best(&self) -> Option<(&Checkpoint, &Evaluation)> {
        let mut best: Option<usize> = None;
        for (i, e) in self.evaluations.iter().enumerate() {
            if best.is_none_or(|b| e.top1 > self.evaluations[b].top1) {
                best = Some(i);
            }
        }
        best.map(|i| (&self.snapshots[i], &self.evaluations[i]))
    }
}

pub fn train(
    net: Network,
    solver: &SolverConfig,
    train_src: &dyn RecordSource,
    val_src: &dyn RecordSource,
    class_names: Vec<String>,
    seed: u64,
    opts: TrainOptions,
) -> Result<TrainOutcome, ModelError> {
    train_observed(net, solver, train_src, val_src, class_names, seed, opts, &mut |_| {})
}

/// [`train`] with a callback for every update and evaluation.
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    mut net: Network,
    solver: &SolverConfig,
    train_src: &dyn RecordSource,
    val_src: &dyn RecordSource,
    class_names: Vec<String>,
    seed: u64,
    opts: TrainOptions,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome, ModelError> {
    solver.validate()?;
    if class_names.len() != net.config().num_classes {
        return Err(ModelError::Config(format!(
            "{} class names for {} classes",
            class_names.len(),
            net.config().num_classes
        )));
    }
    let mut state = SolverState::new(&net);
    let mut outcome = TrainOutcome {
        final_checkpoint: Checkpoint::from_network(&net, 0, class_names.clone()).with_solver(solver, &state),
        snapshots: Vec::new(),
        updates: Vec::new(),
        evaluations: Vec::new(),
    };
    if solver.max_iter == 0 {
        return Ok(outcome);
    }
    check_source(&net, train_src, "training")?;
    check_source(&net, val_src, "validation")?;
    let shuffle = SeededRng::new(seed, streams::SHUFFLE);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut window: Vec<(Tensor, Vec<usize>)> = Vec::with_capacity(solver.iter_size);
    let mut window_start = 0;
    for it in 0..solver.max_iter {
        let mut idxs = Vec::with_capacity(solver.batch_size);
        while idxs.len() < solver.batch_size {
            if cursor == order.len() {
                order = (0..train_src.len()).collect();
                order.shuffle(&mut shuffle.child(epoch));
                epoch += 1;
                cursor = 0;
            }
            idxs.push(order[cursor]);
            cursor += 1;
        }
        if window.is_empty() {
            window_start = it;
        }
        window.push(load_batch(train_src, &idxs)?);
        let done = it + 1 == solver.max_iter;
        if window.len() == solver.iter_size || done {
            let r = accumulate_and_step(&mut net, &mut state, solver, window_start, &window, opts.freeze_batch_norm)?;
            let log = UpdateLog {
                iteration: window_start,
                update: outcome.updates.len(),
                loss: r.loss,
                lr: r.lr,
                micro_batches: r.micro_batches,
            };
            observer(&TrainEvent::Update(log.clone()));
            outcome.updates.push(log);
            window.clear();
        }
        if (it + 1) % solver.test_interval == 0 || done {
            let mut e = evaluate(&net, val_src, solver.batch_size, solver.test_iter, opts.exec)?;
            e.iteration = it + 1;
            observer(&TrainEvent::Eval(e.clone()));
            outcome.evaluations.push(e);
            outcome
                .snapshots
                .push(Checkpoint::from_network(&net, (it + 1) as u64, class_names.clone()).with_solver(solver, &state));
        }
    }
    outcome.final_checkpoint = outcome.snapshots.last().expect("final evaluation").clone();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::super::config::{InputDims, NetworkConfig};
    use super::*;
    use crate::image::ImageTensor;

    fn records(n: usize, size: usize, seed: u64) -> Vec<(ImageTensor, usize)> {
        let mut r = SeededRng::new(seed, 0);
        (0..n)
            .map(|i| {
                let data = (0..size * size).map(|_| r.unit() as f32).collect();
                (ImageTensor::new(size, size, 1, data).unwrap(), i % 2)
            })
            .collect()
    }

    fn small_solver() -> SolverConfig {
        SolverConfig {
            base_lr: 0.05,
            weight_decay: 1e-4,
            momentum: 0.9,
            gamma: 0.5,
            batch_size: 2,
            max_iter: 6,
            test_iter: 2,
            test_interval: 4,
            stepsize: 4,
            iter_size: 2,
            lr_mult: Default::default(),
        }
    }

    fn net() -> Network {
        Network::new(
            NetworkConfig::resnet_toy(
                InputDims {
                    height: 8,
                    width: 8,
                    channels: 1,
                },
                2,
            ),
            1,
        )
        .unwrap()
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn zero_iterations_return_initial_checkpoint() {
        let n = net();
        let mut s = small_solver();
        s.max_iter = 0;
        let data = records(4, 8, 0);
        let out = train(n.clone(), &s, &data, &data, names(), 1, TrainOptions::default()).unwrap();
        assert!(out.updates.is_empty() && out.snapshots.is_empty());
        assert_eq!(out.final_checkpoint.to_network().unwrap().params(), n.params());
    }

    #[test]
    fn schedule_of_updates_and_snapshots() {
        let data = records(6, 8, 0);
        let mut s = small_solver();
        s.max_iter = 7;
        let out = train(net(), &s, &data, &data, names(), 3, TrainOptions::default()).unwrap();
        // Windows of two micro-batches, the last one partial.
        let starts: Vec<_> = out.updates.iter().map(|u| (u.iteration, u.micro_batches)).collect();
        assert_eq!(starts, vec![(0, 2), (2, 2), (4, 2), (6, 1)]);
        assert_eq!(out.updates[2].lr, 0.025);
        let evals: Vec<_> = out.evaluations.iter().map(|e| e.iteration).collect();
        assert_eq!(evals, vec![4, 7]);
        assert_eq!(out.snapshots.len(), 2);
        assert_eq!(out.final_checkpoint.iteration, 7);
        assert!(out.best().is_some());
    }

    #[test]
    fn deterministic_given_seed() {
        let data = records(6, 8, 0);
        let s = small_solver();
        let a = train(net(), &s, &data, &data, names(), 3, TrainOptions::default()).unwrap();
        let b = train(net(), &s, &data, &data, names(), 3, TrainOptions::default()).unwrap();
        assert_eq!(a.final_checkpoint.to_bytes().unwrap(), b.final_checkpoint.to_bytes().unwrap());
        let c = train(net(), &s, &data, &data, names(), 4, TrainOptions::default()).unwrap();
        assert_ne!(a.final_checkpoint, c.final_checkpoint);
    }

    #[test]
    fn accumulation_with_one_micro_batch_is_plain_sgd() {
        let data = records(4, 8, 2);
        let s = small_solver();
        let batch = load_batch(&data, &[0, 1]).unwrap();
        let mut a = net();
        let mut sa = SolverState::new(&a);
        accumulate_and_step(&mut a, &mut sa, &s, 0, std::slice::from_ref(&batch), false).unwrap();
        let mut b = net();
        let mut sb = SolverState::new(&b);
        let (logits, cache) = b.forward_train(&batch.0).unwrap();
        let (_, dl) = softmax_cross_entropy(&logits, &batch.1).unwrap();
        let g = b.backward(&cache, &dl).unwrap();
        sgd_update(&mut b, &g, &mut sb, &s, 0).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn dims_mismatch_rejected() {
        let data = records(4, 6, 0);
        let err = train(net(), &small_solver(), &data, &data, names(), 1, TrainOptions::default()).unwrap_err();
        assert!(matches!(err, ModelError::Shape(_)));
    }

    #[test]
    fn sequential_and_parallel_eval_agree() {
        let data = records(7, 8, 5);
        let n = net();
        let a = predict_source(&n, &data, 3, None, Exec::Sequential).unwrap();
        let b = predict_source(&n, &data, 3, None, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.probs.len(), 7);
    }
}
