//! Intermediate classifier heads on a frozen teacher.
//!
//! `attach_heads` puts one affine-plus-activation head on every mounting
//! position of a trained teacher; `fit_heads` trains all heads jointly from
//! shared backbone passes while the teacher's own parameters stay untouched.
//! The teacher plus its fitted heads form the cohort that co-teaches a
//! student.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::distill::argmax_logits;
use crate::error::{Error, Result};
use crate::net::{Activation, Network};
use crate::par;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};
use crate::train::{lr_at, sgd_step, TrainConfig};

/// Parameters of a head mounted at position `i`: `(N_i + 1) * C` of them.
pub fn head_param_count(activation_width: usize, num_classes: usize) -> usize {
    (activation_width + 1) * num_classes
}

/// A lightweight classifier head: `g(W a + b)` over a mounted activation.
#[derive(Debug, Clone)]
pub struct IntermediateHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    /// Index into the teacher's `mount_positions`.
    pub mount_index: usize,
}

impl IntermediateHead {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        activation: Activation,
        mount_index: usize,
    ) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Contract("head weight must be a matrix".into()));
        }
        let c = weight.shape()[1];
        if bias.shape() != [c] {
            return Err(Error::Dimension {
                op: "head bias",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(IntermediateHead { weight, bias, activation, mount_index })
    }

    pub fn activation_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    /// Head logits for a batch of mounted activations; softmax is applied
    /// downstream.
    pub fn logits(&self, mount_activation: &Tensor) -> Result<Tensor> {
        let n_i = self.activation_width();
        if mount_activation.shape().len() != 2 || mount_activation.cols() != n_i {
            return Err(Error::Dimension {
                op: "head_logits",
                lhs: mount_activation.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let m = mount_activation.rows();
        let c = self.num_classes();
        let mut h = vec![0.0; m * c];
        tensor::matmul(mount_activation.values(), self.weight.values(), &mut h, m, n_i, c);
        let mut hb = vec![0.0; m * c];
        tensor::add_bias(&h, self.bias.values(), &mut hb, m, c);
        let out = match self.activation {
            Activation::Relu => {
                let mut a = vec![0.0; m * c];
                tensor::relu(&hb, &mut a);
                a
            }
            Activation::Identity => hb,
        };
        Tensor::from_vec(vec![m, c], out)
    }
}

/// A frozen teacher plus its `k` intermediate heads: `k + 1` teachers.
#[derive(Debug, Clone)]
pub struct Cohort {
    teacher: Network,
    heads: Vec<IntermediateHead>,
}

impl Cohort {
    pub fn new(teacher: Network, heads: Vec<IntermediateHead>) -> Result<Self> {
        if heads.len() != teacher.mount_positions().len() {
            return Err(Error::Contract(format!(
                "{} heads for {} mount positions",
                heads.len(),
                teacher.mount_positions().len()
            )));
        }
        let widths = teacher.mount_widths();
        for (j, head) in heads.iter().enumerate() {
            if head.mount_index != j {
                return Err(Error::Contract(format!(
                    "head {j} declares mount index {}",
                    head.mount_index
                )));
            }
            if head.activation_width() != widths[j] {
                return Err(Error::Dimension {
                    op: "cohort head width",
                    lhs: vec![head.activation_width()],
                    rhs: vec![widths[j]],
                });
            }
            if head.num_classes() != teacher.num_classes() {
                return Err(Error::Contract(format!(
                    "head {j} has {} classes, teacher has {}",
                    head.num_classes(),
                    teacher.num_classes()
                )));
            }
        }
        Ok(Cohort { teacher, heads })
    }

    /// Attaches one freshly initialized head per mounting position. The
    /// teacher must expose at least one.
    pub fn attach_heads(teacher: Network, activation: Activation, seed: u64) -> Result<Self> {
        if teacher.mount_positions().is_empty() {
            return Err(Error::Contract("teacher exposes no mount positions".into()));
        }
        let c = teacher.num_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut heads = Vec::with_capacity(teacher.mount_positions().len());
        for (j, n_i) in teacher.mount_widths().into_iter().enumerate() {
            let bound = (6.0 / n_i as f64).sqrt();
            let mut weight = Tensor::zeros(vec![n_i, c]);
            for w in weight.values_mut() {
                *w = rng.random_range(-bound..bound);
            }
            heads.push(IntermediateHead::new(weight, Tensor::zeros(vec![c]), activation, j)?);
        }
        Cohort::new(teacher, heads)
    }

    pub fn teacher(&self) -> &Network {
        &self.teacher
    }

    pub fn heads(&self) -> &[IntermediateHead] {
        &self.heads
    }

    /// Cohort size `k + 1`: the heads plus the teacher's final classifier.
    pub fn size(&self) -> usize {
        self.heads.len() + 1
    }

    /// Logits of every cohort member from one backbone pass, heads in depth
    /// order and the teacher's own classifier last.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (final_logits, mounts) = self.teacher.forward_with_activations(x)?;
        let mut out = Vec::with_capacity(self.size());
        for head in &self.heads {
            out.push(head.logits(&mounts[head.mount_index])?);
        }
        out.push(final_logits);
        Ok(out)
    }

    /// Training accuracy of each head, in percent.
    pub fn head_accuracies(&self, data: &Dataset) -> Result<Vec<f64>> {
        let (_, mounts) = self.teacher.forward_with_activations(data.inputs())?;
        self.heads
            .iter()
            .map(|head| {
                let logits = head.logits(&mounts[head.mount_index])?;
                let correct: Vec<bool> = par::map_range(data.len(), |i| {
                    argmax_logits(logits.row(i)) == data.labels()[i]
                });
                let hits = correct.iter().filter(|&&c| c).count();
                Ok(100.0 * hits as f64 / data.len() as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadFitEpoch {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch of the summed per-head cross-entropy.
    pub joint_loss: f64,
    /// Training accuracy of each head after this epoch, in percent.
    pub head_train_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadFitMetrics {
    pub epochs: Vec<HeadFitEpoch>,
}

/// Trains all heads jointly by minimizing the sum of per-head cross-entropy
/// losses at temperature 1, reusing one backbone pass per batch. The
/// teacher's parameters are never touched.
pub fn fit_heads(
    mut cohort: Cohort,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(Cohort, HeadFitMetrics)> {
    config.validate()?;
    if data.num_classes() != cohort.teacher.num_classes() {
        return Err(Error::Contract(format!(
            "dataset has {} classes, cohort has {}",
            data.num_classes(),
            cohort.teacher.num_classes()
        )));
    }

    let n = data.len();
    let mut velocities: Vec<(Vec<f64>, Vec<f64>)> = cohort
        .heads
        .iter()
        .map(|h| (vec![0.0; h.weight.numel()], vec![0.0; h.bias.numel()]))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        indices.shuffle(&mut shuffle_rng);

        let mut loss_acc = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let (x, labels) = data.batch(chunk);
            // One backbone pass shared by every head; the backbone never
            // enters the tape, so no gradient can reach it.
            let (_, mounts) = cohort.teacher.forward_with_activations(&x)?;

            let mut tape = Tape::new();
            let mut head_params = Vec::with_capacity(cohort.heads.len());
            let mut terms = Vec::with_capacity(cohort.heads.len());
            for head in &cohort.heads {
                let mount = tape.constant(&mounts[head.mount_index]);
                let w = tape.param(&head.weight);
                let b = tape.param(&head.bias);
                let h = tape.matmul(mount, w)?;
                let h = tape.add_bias(h, b)?;
                let z = match head.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Identity => h,
                };
                let lp = tape.log_softmax(z)?;
                terms.push((1.0, tape.nll(lp, &labels)?));
                head_params.push((w, b));
            }
            let loss = tape.weighted_sum(&terms)?;
            loss_acc += tape.values(loss)[0] * chunk.len() as f64;
            tape.backward(loss)?;

            for ((head, (w_id, b_id)), (vw, vb)) in cohort
                .heads
                .iter_mut()
                .zip(head_params.iter())
                .zip(velocities.iter_mut())
            {
                if let Some(g) = tape.grad(*w_id) {
                    sgd_step(
                        head.weight.values_mut(),
                        g,
                        vw,
                        lr,
                        config.momentum,
                        config.weight_decay,
                    )?;
                }
                if let Some(g) = tape.grad(*b_id) {
                    sgd_step(
                        head.bias.values_mut(),
                        g,
                        vb,
                        lr,
                        config.momentum,
                        config.weight_decay,
                    )?;
                }
            }
        }

        records.push(HeadFitEpoch {
            epoch,
            lr,
            joint_loss: loss_acc / n as f64,
            head_train_acc: cohort.head_accuracies(data)?,
        });
    }

    Ok((cohort, HeadFitMetrics { epochs: records }))
}
