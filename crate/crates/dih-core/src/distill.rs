//! Temperature-scaled probability math and the distillation losses.
//!
//! Everything here is a pure function of its inputs: softened softmax,
//! entropy, cross-entropy, KL divergence, the canonical distillation loss
//! with its squared-temperature factor, the blended student losses, the
//! cohort-averaged loss, and ensemble averaging. Cohort and teacher logits
//! are always treated as constants; gradients (when these quantities are
//! rebuilt on a tape for training) flow only into the student.

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms so a zero target never
/// produces an infinite loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// A categorical distribution over classes. Entries are in `[0, 1]` and sum
/// to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Contract(format!(
                "distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(&bad) = probs.iter().find(|&&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::Contract(format!("probability {bad} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Distribution { probs: vec![1.0 / classes as f64; classes] }
    }

    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Contract(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        Ok(Distribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Softening temperature; values below 1 are rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 1.0 {
            return Err(Error::Contract(format!("temperature must be >= 1, got {tau}")));
        }
        Ok(Temperature(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Trade-off weight between the distillation term and the hard-label term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendWeight(f64);

impl BlendWeight {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Contract(format!("blend weight must be in [0, 1], got {alpha}")));
        }
        Ok(BlendWeight(alpha))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Softmax of `logits / tau`, computed with max subtraction.
pub fn softmax_t(logits: &[f64], tau: Temperature) -> Result<Distribution> {
    if logits.len() < 2 {
        return Err(Error::Contract(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    let t = tau.get();
    let max = logits.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v / t - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Distribution::new(exps.iter().map(|e| e / sum).collect())
}

/// Shannon entropy in nats, with `0 ln 0 := 0`.
pub fn entropy(p: &Distribution) -> f64 {
    p.probs
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Cross-entropy `-sum_i p_i ln q_i` in nats; `q` is floored at
/// [`PROB_FLOOR`] inside the logarithm.
pub fn cross_entropy(p: &Distribution, q: &Distribution) -> f64 {
    p.probs
        .iter()
        .zip(q.probs.iter())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| -pv * qv.max(PROB_FLOOR).ln())
        .sum()
}

/// Kullback-Leibler divergence `sum_i p_i ln(p_i / q_i)` in nats, with the
/// same flooring as [`cross_entropy`].
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> f64 {
    p.probs
        .iter()
        .zip(q.probs.iter())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - qv.max(PROB_FLOOR).ln()))
        .sum()
}

/// Canonical distillation loss: the squared temperature times the
/// cross-entropy of the softened student distribution relative to the
/// softened teacher distribution.
pub fn kd_loss(teacher_logits: &[f64], student_logits: &[f64], tau: Temperature) -> Result<f64> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::Dimension {
            op: "kd_loss",
            lhs: vec![teacher_logits.len()],
            rhs: vec![student_logits.len()],
        });
    }
    let p_teacher = softmax_t(teacher_logits, tau)?;
    let q_student = softmax_t(student_logits, tau)?;
    Ok(tau.get() * tau.get() * cross_entropy(&p_teacher, &q_student))
}

const TAU_ONE: Temperature = Temperature(1.0);

fn hard_ce(student_logits: &[f64], true_label: usize) -> Result<f64> {
    if true_label >= student_logits.len() {
        return Err(Error::Contract(format!(
            "label {true_label} out of range for {} classes",
            student_logits.len()
        )));
    }
    let q = softmax_t(student_logits, TAU_ONE)?;
    let p = Distribution::one_hot(true_label, student_logits.len())?;
    Ok(cross_entropy(&p, &q))
}

/// Blended student loss: `alpha` times the distillation term plus
/// `1 - alpha` times the hard-label cross-entropy at temperature 1.
pub fn student_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    true_label: usize,
    alpha: BlendWeight,
    tau: Temperature,
) -> Result<f64> {
    let soft = kd_loss(teacher_logits, student_logits, tau)?;
    let hard = hard_ce(student_logits, true_label)?;
    Ok(alpha.get() * soft + (1.0 - alpha.get()) * hard)
}

/// Cohort-averaged distillation loss: the arithmetic mean of the canonical
/// loss against every cohort member.
pub fn dih_loss(
    cohort_logits: &[Vec<f64>],
    student_logits: &[f64],
    tau: Temperature,
) -> Result<f64> {
    if cohort_logits.is_empty() {
        return Err(Error::Contract("distillation from an empty cohort".into()));
    }
    let mut acc = 0.0;
    for member in cohort_logits {
        acc += kd_loss(member, student_logits, tau)?;
    }
    Ok(acc / cohort_logits.len() as f64)
}

/// Cohort student loss: `alpha` times the cohort-averaged distillation term
/// plus `1 - alpha` times the hard-label cross-entropy at temperature 1.
pub fn student_dih_loss(
    cohort_logits: &[Vec<f64>],
    student_logits: &[f64],
    true_label: usize,
    alpha: BlendWeight,
    tau: Temperature,
) -> Result<f64> {
    let soft = dih_loss(cohort_logits, student_logits, tau)?;
    let hard = hard_ce(student_logits, true_label)?;
    Ok(alpha.get() * soft + (1.0 - alpha.get()) * hard)
}

/// Coordinatewise arithmetic mean of distributions.
pub fn ensemble_average(dists: &[Distribution]) -> Result<Distribution> {
    let Some(first) = dists.first() else {
        return Err(Error::Contract("ensemble average of no distributions".into()));
    };
    let c = first.len();
    if let Some(bad) = dists.iter().find(|d| d.len() != c) {
        return Err(Error::Dimension { op: "ensemble_average", lhs: vec![c], rhs: vec![bad.len()] });
    }
    let mut mean = vec![0.0; c];
    for d in dists {
        for (m, &p) in mean.iter_mut().zip(d.probs.iter()) {
            *m += p;
        }
    }
    let k = dists.len() as f64;
    for m in &mut mean {
        *m /= k;
    }
    Distribution::new(mean)
}

/// Index of the largest probability; ties break toward the lowest index.
pub fn argmax_class(p: &Distribution) -> usize {
    let mut best = 0;
    for (i, &v) in p.probs.iter().enumerate().skip(1) {
        if v > p.probs[best] {
            best = i;
        }
    }
    best
}

/// Argmax over raw logits, with the same tie-breaking. Temperature scaling
/// never changes the ordering, so this matches `argmax_class(softmax_t(..))`
/// for any temperature.
pub fn argmax_logits(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
