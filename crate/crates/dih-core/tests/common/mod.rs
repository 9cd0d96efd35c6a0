//! Shared test support: a central-difference gradient oracle and pure
//! evaluation-path batch losses. Everything here goes through the direct
//! (non-tape) forward pass and the scalar loss functions, so it stays
//! independent of the reverse-mode path it is used to check.

use dih_core::distill::{self, BlendWeight, Distribution, Temperature};
use dih_core::net::Network;
use dih_core::tensor::Tensor;

/// Which distillation targets enter the pure batch loss.
pub enum PureTargets<'a> {
    /// Plain cross-entropy training.
    None,
    /// One loss term per member logit tensor (KD has one member, the cohort
    /// modes several).
    Members(&'a [Tensor]),
    /// A single term against the ensemble average of the members' softened
    /// distributions.
    Ensemble(&'a [Tensor]),
}

/// Batch loss computed purely from forward evaluation and the scalar loss
/// functions: the mean over rows of the blended per-sample loss.
pub fn batch_loss_pure(
    student: &Network,
    x: &Tensor,
    labels: &[usize],
    targets: &PureTargets,
    alpha: BlendWeight,
    tau: Temperature,
) -> f64 {
    let logits = student.forward(x).expect("forward");
    let m = logits.rows();
    let tau1 = Temperature::new(1.0).unwrap();
    let mut acc = 0.0;
    for (r, &label) in labels.iter().enumerate().take(m) {
        let row = logits.row(r);
        let hard = distill::cross_entropy(
            &Distribution::one_hot(label, row.len()).unwrap(),
            &distill::softmax_t(row, tau1).unwrap(),
        );
        let sample_loss = match targets {
            PureTargets::None => hard,
            PureTargets::Members(members) => {
                let member_rows: Vec<Vec<f64>> =
                    members.iter().map(|t| t.row(r).to_vec()).collect();
                distill::student_dih_loss(&member_rows, row, label, alpha, tau)
                    .expect("student_dih_loss")
            }
            PureTargets::Ensemble(members) => {
                let dists: Vec<Distribution> = members
                    .iter()
                    .map(|t| distill::softmax_t(t.row(r), tau).unwrap())
                    .collect();
                let target = distill::ensemble_average(&dists).unwrap();
                let softened = distill::softmax_t(row, tau).unwrap();
                let soft = tau.get() * tau.get() * distill::cross_entropy(&target, &softened);
                alpha.get() * soft + (1.0 - alpha.get()) * hard
            }
        };
        acc += sample_loss;
    }
    acc / m as f64
}

/// Central-difference gradient of `f` with respect to every parameter of
/// the network, one vector per parameter tensor in canonical order.
pub fn finite_diff_param_grads(
    net: &Network,
    step: f64,
    f: impl Fn(&Network) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = net.clone();
    let layout: Vec<usize> = work.params().iter().map(|p| p.numel()).collect();
    let mut grads = Vec::with_capacity(layout.len());
    for (pi, &numel) in layout.iter().enumerate() {
        let mut g = vec![0.0; numel];
        for (ci, gv) in g.iter_mut().enumerate() {
            let original = work.params()[pi].values()[ci];
            work.params_mut()[pi].values_mut()[ci] = original + step;
            let plus = f(&work);
            work.params_mut()[pi].values_mut()[ci] = original - step;
            let minus = f(&work);
            work.params_mut()[pi].values_mut()[ci] = original;
            *gv = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn finite_diff_vec_grad(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let original = work[i];
        work[i] = original + step;
        let plus = f(&work);
        work[i] = original - step;
        let minus = f(&work);
        work[i] = original;
        g[i] = (plus - minus) / (2.0 * step);
    }
    g
}

/// Asserts `analytic` against `reference` coordinate by coordinate with a
/// relative tolerance and an absolute floor.
pub fn assert_grads_close(
    analytic: &[f64],
    reference: &[f64],
    rel_tol: f64,
    abs_floor: f64,
    context: &str,
) {
    assert_eq!(analytic.len(), reference.len(), "{context}: length mismatch");
    for (i, (&a, &r)) in analytic.iter().zip(reference.iter()).enumerate() {
        let tol = abs_floor.max(rel_tol * a.abs().max(r.abs()));
        assert!(
            (a - r).abs() <= tol,
            "{context}: coordinate {i}: analytic {a} vs reference {r} (tol {tol})"
        );
    }
}

/// Deterministic pseudo-random batch for tests that need fixed inputs
/// without pulling a generator into every test file.
pub fn wave_tensor(rows: usize, cols: usize, phase: f64) -> Tensor {
    let values: Vec<f64> = (0..rows * cols)
        .map(|i| (i as f64 * 0.7310 + phase).sin() * 1.3)
        .collect();
    Tensor::from_vec(vec![rows, cols], values).unwrap()
}
