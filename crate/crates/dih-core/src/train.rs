//! SGD with Nesterov momentum, weight decay, and a step learning-rate
//! schedule, plus the four end-to-end training modes.
//!
//! All four modes share one loss-graph builder: the hard-label term is a
//! negative log-likelihood at temperature 1, and each distillation target
//! contributes a squared-temperature-scaled soft cross-entropy term. CE is
//! the builder with no targets, KD with one, the cohort modes with the
//! cohort's softened outputs. The degenerate identities between modes are
//! therefore bit-exact by construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use crate::cohort::Cohort;
use crate::data::Dataset;
use crate::distill::{self, BlendWeight, Temperature};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::par;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ce,
    Kd,
    Dih,
    Ensemble,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ce => "CE",
            Mode::Kd => "KD",
            Mode::Dih => "DIH",
            Mode::Ensemble => "ENSEMBLE",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(Mode::Ce),
            "KD" => Ok(Mode::Kd),
            "DIH" => Ok(Mode::Dih),
            "ENSEMBLE" => Ok(Mode::Ensemble),
            other => Err(Error::Contract(format!("unknown training mode {other:?}"))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha: BlendWeight,
    pub tau: Temperature,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_step_every: usize,
    pub lr_gamma: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Contract(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Contract(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Contract(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        if self.lr_step_every == 0 {
            return Err(Error::Contract("lr_step_every must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Contract(format!(
                "lr_gamma must be in (0, 1], got {}",
                self.lr_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Per-epoch trace of one run plus its final summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub final_test_acc: f64,
    pub wall_time_secs: f64,
}

impl RunMetrics {
    /// One row per epoch plus a summary row. Wall time stays out of the
    /// file so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,test_acc\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc
            ));
        }
        out.push_str(&format!("summary,,,,{}\n", self.final_test_acc));
        out
    }
}

/// One Nesterov step over a flat parameter buffer.
///
/// With the decayed gradient `g' = g + weight_decay * w`:
/// `v <- momentum * v + g'` and `w <- w - lr * (g' + momentum * v)`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension {
            op: "sgd_step",
            lhs: vec![params.len(), velocity.len()],
            rhs: vec![grads.len()],
        });
    }
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        velocity[i] = momentum * velocity[i] + g;
        params[i] -= lr * (g + momentum * velocity[i]);
    }
    Ok(())
}

/// Learning rate at an epoch: `lr0 * gamma^floor(epoch / step_every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_gamma.powi((epoch / config.lr_step_every) as i32)
}

/// Who, if anyone, teaches the student.
pub enum TeachSource<'a> {
    None,
    Teacher(&'a Network),
    Cohort(&'a Cohort),
}

/// Softens each row of a logit tensor at `tau` into a probability tensor.
pub fn soften_rows(logits: &Tensor, tau: Temperature) -> Result<Tensor> {
    let m = logits.rows();
    let c = logits.cols();
    let rows: Vec<Result<Vec<f64>>> = par::map_range(m, |i| {
        Ok(distill::softmax_t(logits.row(i), tau)?.probs().to_vec())
    });
    let mut values = Vec::with_capacity(m * c);
    for row in rows {
        values.extend_from_slice(&row?);
    }
    Tensor::from_vec(vec![m, c], values)
}

/// Row-wise ensemble average of several softened members.
pub fn ensemble_rows(members: &[Tensor], tau: Temperature) -> Result<Tensor> {
    let m = members[0].rows();
    let c = members[0].cols();
    let rows: Vec<Result<Vec<f64>>> = par::map_range(m, |i| {
        let dists: Vec<distill::Distribution> = members
            .iter()
            .map(|t| distill::softmax_t(t.row(i), tau))
            .collect::<Result<_>>()?;
        Ok(distill::ensemble_average(&dists)?.probs().to_vec())
    });
    let mut values = Vec::with_capacity(m * c);
    for row in rows {
        values.extend_from_slice(&row?);
    }
    Tensor::from_vec(vec![m, c], values)
}

/// Produces the constant distillation targets for one input batch.
type TargetFn<'a> = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>> + 'a>;

fn check_classes(name: &str, theirs: usize, ours: usize) -> Result<()> {
    if theirs != ours {
        return Err(Error::Contract(format!(
            "{name} has {theirs} classes, expected {ours}"
        )));
    }
    Ok(())
}

/// Trains a student under the configured mode. CE ignores any teacher; KD
/// requires a teacher network; DIH and ENSEMBLE require a fitted cohort.
pub fn train(
    student: Network,
    source: TeachSource,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, RunMetrics)> {
    config.validate()?;
    let c = student.num_classes();
    check_classes("training data", train_data.num_classes(), c)?;
    check_classes("test data", test_data.num_classes(), c)?;
    let tau = config.tau;

    let targets: TargetFn = match (config.mode, &source) {
        (Mode::Ce, _) => Box::new(|_x| Ok(vec![])),
        (Mode::Kd, TeachSource::Teacher(teacher)) => {
            check_classes("teacher", teacher.num_classes(), c)?;
            let teacher = *teacher;
            Box::new(move |x| Ok(vec![soften_rows(&teacher.forward(x)?, tau)?]))
        }
        (Mode::Dih, TeachSource::Cohort(cohort)) => {
            check_classes("cohort", cohort.teacher().num_classes(), c)?;
            let cohort = *cohort;
            Box::new(move |x| {
                cohort
                    .logits(x)?
                    .iter()
                    .map(|member| soften_rows(member, tau))
                    .collect()
            })
        }
        (Mode::Ensemble, TeachSource::Cohort(cohort)) => {
            check_classes("cohort", cohort.teacher().num_classes(), c)?;
            let cohort = *cohort;
            Box::new(move |x| Ok(vec![ensemble_rows(&cohort.logits(x)?, tau)?]))
        }
        (mode, _) => {
            return Err(Error::Contract(format!(
                "mode {} is missing its {}",
                mode.as_str(),
                if mode == Mode::Kd { "teacher" } else { "cohort" }
            )))
        }
    };

    run_training(student, targets, train_data, test_data, config)
}

/// Trains against an explicit subset of cohort members (the ablation path).
/// `active` selects members in cohort order: heads by depth, then the
/// teacher's own classifier last. An empty selection degenerates to plain
/// cross-entropy training.
pub fn train_with_active_members(
    student: Network,
    cohort: &Cohort,
    active: &[bool],
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, RunMetrics)> {
    config.validate()?;
    if active.len() != cohort.size() {
        return Err(Error::Contract(format!(
            "{} member flags for a cohort of {}",
            active.len(),
            cohort.size()
        )));
    }
    let c = student.num_classes();
    check_classes("training data", train_data.num_classes(), c)?;
    check_classes("test data", test_data.num_classes(), c)?;
    check_classes("cohort", cohort.teacher().num_classes(), c)?;
    let tau = config.tau;
    let active = active.to_vec();

    let targets: TargetFn = Box::new(move |x| {
        if !active.iter().any(|&on| on) {
            return Ok(vec![]);
        }
        cohort
            .logits(x)?
            .iter()
            .zip(active.iter())
            .filter(|(_, &on)| on)
            .map(|(member, _)| soften_rows(member, tau))
            .collect()
    });

    run_training(student, targets, train_data, test_data, config)
}

/// Records the blended batch loss on a tape: each softened member target
/// contributes a `alpha * tau^2 / M`-weighted soft cross-entropy term, and
/// the true labels a `1 - alpha`-weighted negative log-likelihood at
/// temperature 1. With no members the loss is the plain negative
/// log-likelihood, unweighted. Returns the loss id and the student's
/// parameter leaf ids in canonical order.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    student: &Network,
    x: &Tensor,
    labels: &[usize],
    member_targets: &[Tensor],
    alpha: BlendWeight,
    tau: Temperature,
) -> Result<(ValId, Vec<ValId>)> {
    let alpha = alpha.get();
    let tau = tau.get();
    let x_id = tape.constant(x);
    let (logits, _, param_ids) = student.forward_on_tape(tape, x_id, true)?;

    let log_probs = tape.log_softmax(logits)?;
    let hard = tape.nll(log_probs, labels)?;
    let loss = if member_targets.is_empty() {
        tape.weighted_sum(&[(1.0, hard)])?
    } else {
        let scaled = tape.scale(logits, 1.0 / tau);
        let soft_log_probs = tape.log_softmax(scaled)?;
        let member_weight = alpha * tau * tau / member_targets.len() as f64;
        let mut terms = Vec::with_capacity(member_targets.len() + 1);
        for target in member_targets {
            let target_id = tape.constant(target);
            terms.push((member_weight, tape.soft_ce(soft_log_probs, target_id)?));
        }
        terms.push((1.0 - alpha, hard));
        tape.weighted_sum(&terms)?
    };
    Ok((loss, param_ids))
}

fn run_training(
    mut student: Network,
    targets: TargetFn,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, RunMetrics)> {
    let started = Instant::now();
    let n = train_data.len();

    let mut velocities: Vec<Vec<f64>> =
        student.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        indices.shuffle(&mut shuffle_rng);

        let mut loss_acc = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let (x, labels) = train_data.batch(chunk);
            let member_targets = targets(&x)?;

            let mut tape = Tape::new();
            let (loss, param_ids) = batch_loss_on_tape(
                &mut tape,
                &student,
                &x,
                &labels,
                &member_targets,
                config.alpha,
                config.tau,
            )?;
            loss_acc += tape.values(loss)[0] * chunk.len() as f64;

            tape.backward(loss)?;
            for (param, id) in student.params_mut().into_iter().zip(param_ids.iter()) {
                if let Some(g) = tape.grad(*id) {
                    param.set_grad(g.to_vec())?;
                }
            }
            for (param, velocity) in student.params_mut().into_iter().zip(velocities.iter_mut()) {
                let grads = param.grad().map(<[f64]>::to_vec);
                if let Some(grads) = grads {
                    sgd_step(
                        param.values_mut(),
                        &grads,
                        velocity,
                        lr,
                        config.momentum,
                        config.weight_decay,
                    )?;
                }
                param.clear_grad();
            }
        }

        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_acc / n as f64,
            train_acc: evaluate(&student, train_data)?,
            test_acc: evaluate(&student, test_data)?,
        });
    }

    let final_test_acc = if records.is_empty() {
        evaluate(&student, test_data)?
    } else {
        records[records.len() - 1].test_acc
    };
    let metrics = RunMetrics {
        epochs: records,
        final_test_acc,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((student, metrics))
}

/// Percentage of samples whose argmax prediction matches the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    check_classes("evaluation data", data.num_classes(), net.num_classes())?;
    let logits = net.forward(data.inputs())?;
    let correct: Vec<bool> = par::map_range(data.len(), |i| {
        distill::argmax_logits(logits.row(i)) == data.labels()[i]
    });
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}
