//! Central-difference checks of every reverse-mode gradient path, from the
//! single primitives up to full multi-mode batch losses on small networks.
//! The reference side never touches the tape: it re-evaluates losses
//! through the direct forward pass and the scalar loss functions.

mod common;

use common::{
    assert_grads_close, batch_loss_pure, finite_diff_param_grads, finite_diff_vec_grad,
    wave_tensor, PureTargets,
};
use dih_core::cohort::Cohort;
use dih_core::distill::{self, BlendWeight, Temperature};
use dih_core::net::{Activation, Network};
use dih_core::tape::Tape;
use dih_core::tensor::Tensor;
use dih_core::train::{batch_loss_on_tape, ensemble_rows, soften_rows};

const FD_STEP: f64 = 1e-5;

#[test]
fn matmul_gradients_match_central_differences() {
    let a = wave_tensor(3, 4, 0.1);
    let b = wave_tensor(4, 2, 2.3);

    let mut tape = Tape::new();
    let a_id = tape.param(&a);
    let b_id = tape.param(&b);
    let prod = tape.matmul(a_id, b_id).unwrap();
    let root = tape.sum(prod);
    tape.backward(root).unwrap();

    let sum_of_product = |av: &[f64], bv: &[f64]| -> f64 {
        let mut out = vec![0.0; 3 * 2];
        dih_core::tensor::matmul_seq(av, bv, &mut out, 3, 4, 2);
        out.iter().sum()
    };
    let fd_a = finite_diff_vec_grad(a.values(), FD_STEP, |av| sum_of_product(av, b.values()));
    let fd_b = finite_diff_vec_grad(b.values(), FD_STEP, |bv| sum_of_product(a.values(), bv));

    assert_grads_close(tape.grad(a_id).unwrap(), &fd_a, 1e-6, 1e-9, "matmul dA");
    assert_grads_close(tape.grad(b_id).unwrap(), &fd_b, 1e-6, 1e-9, "matmul dB");
}

#[test]
fn add_bias_gradient_is_column_sum() {
    let x = wave_tensor(5, 3, 0.7);
    let bias = Tensor::from_vec(vec![3], vec![0.3, -0.8, 0.05]).unwrap();

    let mut tape = Tape::new();
    let x_id = tape.constant(&x);
    let b_id = tape.param(&bias);
    let out = tape.add_bias(x_id, b_id).unwrap();
    // Weight the output so the bias gradient is not trivially all-ones.
    let lp = tape.log_softmax(out).unwrap();
    let root = tape.nll(lp, &[0, 2, 1, 0, 2]).unwrap();
    tape.backward(root).unwrap();

    let eval = |bv: &[f64]| -> f64 {
        let mut out = vec![0.0; 5 * 3];
        dih_core::tensor::add_bias(x.values(), bv, &mut out, 5, 3);
        let mut lp = vec![0.0; 5 * 3];
        dih_core::tensor::log_softmax(&out, &mut lp, 5, 3);
        let labels = [0usize, 2, 1, 0, 2];
        -labels.iter().enumerate().map(|(r, &y)| lp[r * 3 + y]).sum::<f64>() / 5.0
    };
    let fd = finite_diff_vec_grad(bias.values(), FD_STEP, eval);
    assert_grads_close(tape.grad(b_id).unwrap(), &fd, 1e-6, 1e-9, "add_bias dbias");
}

#[test]
fn relu_gradient_is_the_indicator_away_from_zero() {
    // Inputs kept away from 0 so the central difference is clean.
    let x = Tensor::from_vec(vec![6], vec![-2.0, -0.5, 0.4, 1.1, -1.7, 3.0]).unwrap();
    let mut tape = Tape::new();
    let x_id = tape.param(&x);
    let r = tape.relu(x_id);
    let root = tape.sum(r);
    tape.backward(root).unwrap();

    let eval = |xv: &[f64]| -> f64 { xv.iter().map(|&v| v.max(0.0)).sum() };
    let fd = finite_diff_vec_grad(x.values(), FD_STEP, eval);
    assert_grads_close(tape.grad(x_id).unwrap(), &fd, 1e-6, 1e-9, "relu dx");

    let expected: Vec<f64> = x.values().iter().map(|&v| f64::from(v > 0.0)).collect();
    assert_eq!(tape.grad(x_id).unwrap(), expected.as_slice());
}

#[test]
fn kd_loss_gradient_wrt_student_logits() {
    let teacher_logits = vec![1.2, -0.7, 0.4, 2.0];
    let student_logits = vec![0.3, 0.9, -1.1, 0.0];
    let tau = Temperature::new(5.0).unwrap();

    // Tape side: single-row batch, soft term only.
    let teacher = Tensor::from_vec(vec![1, 4], teacher_logits.clone()).unwrap();
    let target = soften_rows(&teacher, tau).unwrap();
    let mut tape = Tape::new();
    let z = tape.param(&Tensor::from_vec(vec![1, 4], student_logits.clone()).unwrap());
    let scaled = tape.scale(z, 1.0 / tau.get());
    let lp = tape.log_softmax(scaled).unwrap();
    let t_id = tape.constant(&target);
    let soft = tape.soft_ce(lp, t_id).unwrap();
    let root = tape.weighted_sum(&[(tau.get() * tau.get(), soft)]).unwrap();
    assert!((tape.values(root)[0]
        - distill::kd_loss(&teacher_logits, &student_logits, tau).unwrap())
    .abs()
        < 1e-12);
    tape.backward(root).unwrap();

    let fd = finite_diff_vec_grad(&student_logits, FD_STEP, |s| {
        distill::kd_loss(&teacher_logits, s, tau).unwrap()
    });
    assert_grads_close(tape.grad(z).unwrap(), &fd, 1e-5, 1e-9, "kd_loss dstudent");
}

fn student_net(seed: u64) -> Network {
    // 2 blocks, well under 200 parameters.
    Network::from_dims(3, &[5, 5], 4, Activation::Relu, true, vec![])
        .unwrap()
        .init_params(seed)
}

#[allow(clippy::too_many_arguments)]
fn check_net_gradients(
    student: &Network,
    x: &Tensor,
    labels: &[usize],
    member_targets: &[Tensor],
    pure_targets: &PureTargets,
    alpha: BlendWeight,
    tau: Temperature,
    context: &str,
) {
    let mut tape = Tape::new();
    let (loss, param_ids) =
        batch_loss_on_tape(&mut tape, student, x, labels, member_targets, alpha, tau).unwrap();

    // The recorded loss value agrees with the pure evaluation path.
    let pure = batch_loss_pure(student, x, labels, pure_targets, alpha, tau);
    assert!(
        (tape.values(loss)[0] - pure).abs() < 1e-10,
        "{context}: tape loss {} vs pure loss {pure}",
        tape.values(loss)[0]
    );

    tape.backward(loss).unwrap();
    let fd = finite_diff_param_grads(student, FD_STEP, |net| {
        batch_loss_pure(net, x, labels, pure_targets, alpha, tau)
    });
    for (pi, (id, fd_grad)) in param_ids.iter().zip(fd.iter()).enumerate() {
        let analytic = tape.grad(*id).unwrap_or(&[]);
        assert_grads_close(analytic, fd_grad, 1e-4, 1e-6, &format!("{context} param {pi}"));
    }
}

#[test]
fn two_block_network_ce_gradients_match_central_differences() {
    let student = student_net(5);
    assert!(student.param_count().total <= 200);
    let x = wave_tensor(4, 3, 1.9);
    let labels = [0usize, 3, 1, 2];
    check_net_gradients(
        &student,
        &x,
        &labels,
        &[],
        &PureTargets::None,
        BlendWeight::new(0.0).unwrap(),
        Temperature::new(1.0).unwrap(),
        "CE",
    );
}

#[test]
fn all_four_modes_gradcheck_on_one_network() {
    let alpha = BlendWeight::new(0.1).unwrap();
    let tau = Temperature::new(5.0).unwrap();
    let student = student_net(7);
    let x = wave_tensor(4, 3, 0.4);
    let labels = [2usize, 0, 3, 1];

    // A random frozen teacher with mounts and random heads; no fitting is
    // needed for gradient checks since only the student receives gradients.
    let teacher = Network::from_dims(3, &[6, 6, 6], 4, Activation::Relu, true, vec![0, 1])
        .unwrap()
        .init_params(40);
    let cohort = Cohort::attach_heads(teacher, Activation::Relu, 41).unwrap();

    // CE.
    check_net_gradients(&student, &x, &labels, &[], &PureTargets::None, alpha, tau, "mode CE");

    // KD: one member, the teacher's own logits.
    let teacher_logits = cohort.teacher().forward(&x).unwrap();
    let kd_targets = vec![soften_rows(&teacher_logits, tau).unwrap()];
    let kd_members = vec![teacher_logits.clone()];
    check_net_gradients(
        &student,
        &x,
        &labels,
        &kd_targets,
        &PureTargets::Members(&kd_members),
        alpha,
        tau,
        "mode KD",
    );

    // DIH: every cohort member.
    let members = cohort.logits(&x).unwrap();
    let dih_targets: Vec<Tensor> =
        members.iter().map(|m| soften_rows(m, tau).unwrap()).collect();
    check_net_gradients(
        &student,
        &x,
        &labels,
        &dih_targets,
        &PureTargets::Members(&members),
        alpha,
        tau,
        "mode DIH",
    );

    // ENSEMBLE: single averaged target.
    let ens_target = vec![ensemble_rows(&members, tau).unwrap()];
    check_net_gradients(
        &student,
        &x,
        &labels,
        &ens_target,
        &PureTargets::Ensemble(&members),
        alpha,
        tau,
        "mode ENSEMBLE",
    );
}

#[test]
fn deeper_composed_loss_still_checks() {
    // A residual net with identity blocks mixed in, alpha at both endpoints.
    let student = Network::from_dims(4, &[7, 7, 7], 3, Activation::Relu, true, vec![])
        .unwrap()
        .init_params(23);
    let x = wave_tensor(6, 4, 2.2);
    let labels = [0usize, 1, 2, 0, 1, 2];
    let teacher = Network::from_dims(4, &[5], 3, Activation::Relu, false, vec![0])
        .unwrap()
        .init_params(55);
    let cohort = Cohort::attach_heads(teacher, Activation::Relu, 56).unwrap();
    let members = cohort.logits(&x).unwrap();
    let tau = Temperature::new(2.0).unwrap();
    let targets: Vec<Tensor> = members.iter().map(|m| soften_rows(m, tau).unwrap()).collect();

    for &a in &[0.0, 0.5, 1.0] {
        let alpha = BlendWeight::new(a).unwrap();
        check_net_gradients(
            &student,
            &x,
            &labels,
            &targets,
            &PureTargets::Members(&members),
            alpha,
            tau,
            &format!("alpha {a}"),
        );
    }
}
