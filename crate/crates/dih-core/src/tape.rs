//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Tape` records every primitive executed during one forward pass into a
//! linear list of nodes, then replays the list in reverse to accumulate
//! vector-Jacobian products. Tapes live for a single forward/backward pair
//! and are discarded afterwards; a second backward call on the same tape is
//! rejected.
//!
//! Gradient bookkeeping is demand-driven: a slot accumulates a gradient only
//! if a parameter leaf is reachable below it, so constant subtrees (teacher
//! logits, input batches) cost nothing on the way back.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

struct Slot {
    values: Vec<f64>,
    shape: Vec<usize>,
    /// True when a gradient-requiring leaf is reachable through this slot.
    needs_grad: bool,
}

enum Node {
    Matmul { a: ValId, b: ValId, out: ValId, m: usize, k: usize, n: usize },
    AddBias { x: ValId, bias: ValId, out: ValId, m: usize, n: usize },
    Relu { x: ValId, out: ValId },
    Add { a: ValId, b: ValId, out: ValId },
    Scale { x: ValId, factor: f64, out: ValId },
    LogSoftmax { z: ValId, out: ValId, m: usize, n: usize },
    /// Mean over rows of `-logp[r, labels[r]]`.
    Nll { logp: ValId, labels: Vec<usize>, out: ValId, m: usize, n: usize },
    /// Mean over rows of `-sum_j target[r, j] * logq[r, j]`; the target is a
    /// constant distribution and receives no gradient.
    SoftCe { logq: ValId, target: ValId, out: ValId, m: usize },
    Sum { x: ValId, out: ValId },
    WeightedSum { terms: Vec<(f64, ValId)>, out: ValId },
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_slot(&mut self, values: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> ValId {
        let id = ValId(self.slots.len());
        self.slots.push(Slot { values, shape, needs_grad });
        self.grads.push(None);
        id
    }

    /// Registers a leaf that will not receive a gradient.
    pub fn constant(&mut self, t: &Tensor) -> ValId {
        self.push_slot(t.values().to_vec(), t.shape().to_vec(), false)
    }

    /// Registers a leaf whose gradient is wanted after `backward`.
    pub fn param(&mut self, t: &Tensor) -> ValId {
        self.push_slot(t.values().to_vec(), t.shape().to_vec(), true)
    }

    pub fn values(&self, id: ValId) -> &[f64] {
        &self.slots[id.0].values
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        &self.slots[id.0].shape
    }

    /// Gradient of the backward root with respect to this slot, if one was
    /// requested and reached.
    pub fn grad(&self, id: ValId) -> Option<&[f64]> {
        if self.slots[id.0].needs_grad {
            self.grads[id.0].as_deref()
        } else {
            None
        }
    }

    fn dims2(&self, id: ValId) -> (usize, usize) {
        let shape = &self.slots[id.0].shape;
        match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("tape ops are defined on vectors and matrices, got {shape:?}"),
        }
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (m, k_a) = self.dims2(a);
        let (k_b, n) = self.dims2(b);
        if k_a != k_b {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.slots[a.0].shape.clone(),
                rhs: self.slots[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul(&self.slots[a.0].values, &self.slots[b.0].values, &mut out, m, k_a, n);
        let needs = self.slots[a.0].needs_grad || self.slots[b.0].needs_grad;
        let out_id = self.push_slot(out, vec![m, n], needs);
        self.nodes.push(Node::Matmul { a, b, out: out_id, m, k: k_a, n });
        Ok(out_id)
    }

    pub fn add_bias(&mut self, x: ValId, bias: ValId) -> Result<ValId> {
        let (m, n) = self.dims2(x);
        let bias_shape = &self.slots[bias.0].shape;
        if bias_shape.len() != 1 || bias_shape[0] != n {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.slots[x.0].shape.clone(),
                rhs: bias_shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::add_bias(&self.slots[x.0].values, &self.slots[bias.0].values, &mut out, m, n);
        let needs = self.slots[x.0].needs_grad || self.slots[bias.0].needs_grad;
        let out_id = self.push_slot(out, vec![m, n], needs);
        self.nodes.push(Node::AddBias { x, bias, out: out_id, m, n });
        Ok(out_id)
    }

    pub fn relu(&mut self, x: ValId) -> ValId {
        let mut out = vec![0.0; self.slots[x.0].values.len()];
        tensor::relu(&self.slots[x.0].values, &mut out);
        let shape = self.slots[x.0].shape.clone();
        let needs = self.slots[x.0].needs_grad;
        let out_id = self.push_slot(out, shape, needs);
        self.nodes.push(Node::Relu { x, out: out_id });
        out_id
    }

    /// Elementwise sum of two same-shape values (the residual connection).
    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.slots[a.0].shape.clone(),
                rhs: self.slots[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.slots[a.0]
            .values
            .iter()
            .zip(self.slots[b.0].values.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.slots[a.0].shape.clone();
        let needs = self.slots[a.0].needs_grad || self.slots[b.0].needs_grad;
        let out_id = self.push_slot(out, shape, needs);
        self.nodes.push(Node::Add { a, b, out: out_id });
        Ok(out_id)
    }

    pub fn scale(&mut self, x: ValId, factor: f64) -> ValId {
        let out: Vec<f64> = self.slots[x.0].values.iter().map(|v| v * factor).collect();
        let shape = self.slots[x.0].shape.clone();
        let needs = self.slots[x.0].needs_grad;
        let out_id = self.push_slot(out, shape, needs);
        self.nodes.push(Node::Scale { x, factor, out: out_id });
        out_id
    }

    pub fn log_softmax(&mut self, z: ValId) -> Result<ValId> {
        let (m, n) = self.dims2(z);
        if n < 2 {
            return Err(Error::Contract(format!(
                "log_softmax needs at least 2 classes, got {n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        tensor::log_softmax(&self.slots[z.0].values, &mut out, m, n);
        let needs = self.slots[z.0].needs_grad;
        let out_id = self.push_slot(out, vec![m, n], needs);
        self.nodes.push(Node::LogSoftmax { z, out: out_id, m, n });
        Ok(out_id)
    }

    /// Negative log-likelihood of integer labels, averaged over the batch.
    pub fn nll(&mut self, logp: ValId, labels: &[usize]) -> Result<ValId> {
        let (m, n) = self.dims2(logp);
        if labels.len() != m {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {m} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Contract(format!("label {bad} out of range for {n} classes")));
        }
        let vals = &self.slots[logp.0].values;
        let mut acc = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            acc -= vals[r * n + y];
        }
        let loss = acc / m as f64;
        let needs = self.slots[logp.0].needs_grad;
        let out_id = self.push_slot(vec![loss], vec![1], needs);
        self.nodes.push(Node::Nll { logp, labels: labels.to_vec(), out: out_id, m, n });
        Ok(out_id)
    }

    /// Cross-entropy of log-probabilities against a constant target
    /// distribution, averaged over the batch.
    pub fn soft_ce(&mut self, logq: ValId, target: ValId) -> Result<ValId> {
        let (m, _) = self.dims2(logq);
        if self.slots[target.0].shape != self.slots[logq.0].shape {
            return Err(Error::Dimension {
                op: "soft_ce",
                lhs: self.slots[logq.0].shape.clone(),
                rhs: self.slots[target.0].shape.clone(),
            });
        }
        let q = &self.slots[logq.0].values;
        let p = &self.slots[target.0].values;
        let mut acc = 0.0;
        for (pv, qv) in p.iter().zip(q.iter()) {
            acc -= pv * qv;
        }
        let loss = acc / m as f64;
        let needs = self.slots[logq.0].needs_grad;
        let out_id = self.push_slot(vec![loss], vec![1], needs);
        self.nodes.push(Node::SoftCe { logq, target, out: out_id, m });
        Ok(out_id)
    }

    pub fn sum(&mut self, x: ValId) -> ValId {
        let total: f64 = self.slots[x.0].values.iter().sum();
        let needs = self.slots[x.0].needs_grad;
        let out_id = self.push_slot(vec![total], vec![1], needs);
        self.nodes.push(Node::Sum { x, out: out_id });
        out_id
    }

    /// Linear combination of scalar values.
    pub fn weighted_sum(&mut self, terms: &[(f64, ValId)]) -> Result<ValId> {
        if terms.is_empty() {
            return Err(Error::Contract("weighted_sum of no terms".into()));
        }
        let mut acc = 0.0;
        let mut needs = false;
        for &(w, id) in terms {
            if self.slots[id.0].values.len() != 1 {
                return Err(Error::Contract("weighted_sum term is not a scalar".into()));
            }
            acc += w * self.slots[id.0].values[0];
            needs |= self.slots[id.0].needs_grad;
        }
        let out_id = self.push_slot(vec![acc], vec![1], needs);
        self.nodes.push(Node::WeightedSum { terms: terms.to_vec(), out: out_id });
        Ok(out_id)
    }

    fn accumulate(&mut self, id: ValId, delta: &[f64]) {
        if !self.slots[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(delta.iter()) {
                    *gv += dv;
                }
            }
            None => self.grads[id.0] = Some(delta.to_vec()),
        }
    }

    /// Runs the reverse pass from a scalar root, populating gradients for
    /// every reachable parameter leaf. May be called once per tape.
    pub fn backward(&mut self, root: ValId) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.slots[root.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.slots[root.0].shape
            )));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            // Nodes own only ids and small metadata; moving one out and back
            // sidesteps the borrow on self during accumulation.
            let node = std::mem::replace(&mut self.nodes[idx], Node::Sum {
                x: ValId(0),
                out: ValId(0),
            });
            self.backward_node(&node);
            self.nodes[idx] = node;
        }
        Ok(())
    }

    fn backward_node(&mut self, node: &Node) {
        match node {
            Node::Matmul { a, b, out, m, k, n } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                let (m, k, n) = (*m, *k, *n);
                if self.slots[a.0].needs_grad {
                    // dA = dOut * B^T
                    let mut b_t = vec![0.0; k * n];
                    tensor::transpose(&self.slots[b.0].values, &mut b_t, k, n);
                    let mut d_a = vec![0.0; m * k];
                    tensor::matmul(&d_out, &b_t, &mut d_a, m, n, k);
                    self.accumulate(*a, &d_a);
                }
                if self.slots[b.0].needs_grad {
                    // dB = A^T * dOut
                    let mut a_t = vec![0.0; m * k];
                    tensor::transpose(&self.slots[a.0].values, &mut a_t, m, k);
                    let mut d_b = vec![0.0; k * n];
                    tensor::matmul(&a_t, &d_out, &mut d_b, k, m, n);
                    self.accumulate(*b, &d_b);
                }
            }
            Node::AddBias { x, bias, out, m, n } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                self.accumulate(*x, &d_out);
                if self.slots[bias.0].needs_grad {
                    let mut d_bias = vec![0.0; *n];
                    for i in 0..*m {
                        for j in 0..*n {
                            d_bias[j] += d_out[i * n + j];
                        }
                    }
                    self.accumulate(*bias, &d_bias);
                }
            }
            Node::Relu { x, out } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                let d_x: Vec<f64> = self.slots[x.0]
                    .values
                    .iter()
                    .zip(d_out.iter())
                    .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
                    .collect();
                self.accumulate(*x, &d_x);
            }
            Node::Add { a, b, out } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                self.accumulate(*a, &d_out);
                self.accumulate(*b, &d_out);
            }
            Node::Scale { x, factor, out } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                let d_x: Vec<f64> = d_out.iter().map(|d| d * factor).collect();
                self.accumulate(*x, &d_x);
            }
            Node::LogSoftmax { z, out, m, n } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                // dz = dy - softmax(z) * rowsum(dy), with softmax = exp(out).
                let y = &self.slots[out.0].values;
                let mut d_z = vec![0.0; m * n];
                for i in 0..*m {
                    let row_sum: f64 = d_out[i * n..(i + 1) * n].iter().sum();
                    for j in 0..*n {
                        let idx = i * n + j;
                        d_z[idx] = d_out[idx] - y[idx].exp() * row_sum;
                    }
                }
                self.accumulate(*z, &d_z);
            }
            Node::Nll { logp, labels, out, m, n } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                let g = d_out[0] / *m as f64;
                let mut d_logp = vec![0.0; m * n];
                for (r, &y) in labels.iter().enumerate() {
                    d_logp[r * n + y] = -g;
                }
                self.accumulate(*logp, &d_logp);
            }
            Node::SoftCe { logq, target, out, m } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                let g = d_out[0] / *m as f64;
                let d_logq: Vec<f64> =
                    self.slots[target.0].values.iter().map(|&p| -p * g).collect();
                self.accumulate(*logq, &d_logq);
            }
            Node::Sum { x, out } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                let d_x = vec![d_out[0]; self.slots[x.0].values.len()];
                self.accumulate(*x, &d_x);
            }
            Node::WeightedSum { terms, out } => {
                let Some(d_out) = self.grads[out.0].clone() else { return };
                for &(w, id) in terms {
                    self.accumulate(id, &[w * d_out[0]]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, values).unwrap()
    }

    #[test]
    fn sum_of_leaf_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&tensor(vec![3], vec![1.0, -2.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_root_is_noop() {
        let mut tape = Tape::new();
        let c = tape.constant(&tensor(vec![2], vec![3.0, 4.0]));
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&tensor(vec![2], vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn double_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&tensor(vec![2], vec![1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        let err = tape.backward(s).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&tensor(vec![2, 3], vec![0.0; 6]));
        let b = tape.constant(&tensor(vec![2, 2], vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.param(&tensor(vec![4], vec![-1.0, 0.0, 0.5, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        // Subgradient at exactly 0 is 0.
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn nll_matches_hand_computation() {
        let mut tape = Tape::new();
        let z = tape.param(&tensor(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]));
        let lp = tape.log_softmax(z).unwrap();
        let loss = tape.nll(lp, &[0, 1]).unwrap();
        // Row 0: -ln(1/2); row 1: -ln(1/(e^2+1)); mean of the two.
        let expected = ((2.0f64).ln() + (2.0f64.exp() + 1.0).ln()) / 2.0;
        assert!((tape.values(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut tape = Tape::new();
        let a = tape.param(&tensor(vec![1], vec![2.0]));
        let b = tape.param(&tensor(vec![1], vec![10.0]));
        let w = tape.weighted_sum(&[(0.25, a), (0.5, b)]).unwrap();
        assert_eq!(tape.values(w), &[5.5]);
        tape.backward(w).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.25]);
        assert_eq!(tape.grad(b).unwrap(), &[0.5]);
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&tensor(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]));
            let w = tape.param(&tensor(vec![3, 2], vec![0.5, -0.25, 1.5, 0.75, -0.1, 0.2]));
            let b = tape.param(&tensor(vec![2], vec![0.01, -0.02]));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.add_bias(h, b).unwrap();
            let r = tape.relu(h);
            let lp = tape.log_softmax(r).unwrap();
            let loss = tape.nll(lp, &[0, 1]).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.values(loss).to_vec(),
                tape.grad(w).unwrap().to_vec(),
                tape.grad(b).unwrap().to_vec(),
            )
        };
        let (l1, gw1, gb1) = run();
        let (l2, gw2, gb2) = run();
        assert_eq!(l1, l2);
        assert_eq!(gw1, gw2);
        assert_eq!(gb1, gb2);
    }
}
