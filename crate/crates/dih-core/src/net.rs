//! Residual fully-connected networks with declared mounting positions.
//!
//! A `Network` is an ordered stack of affine blocks followed by a final
//! linear classifier. Block boundaries listed in `mount_positions` expose
//! their activations so classifier heads can be attached there later. The
//! same forward arithmetic is available directly (for inference and
//! oracles) and on a tape (for training); both call the shared kernels in
//! [`crate::tensor`], so their outputs are bit-identical.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, ValId};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine block: `activation(x W + b)`, plus `x` when residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    pub residual: bool,
}

impl Block {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation, residual: bool) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "block weight must be a matrix, got shape {:?}",
                weight.shape()
            )));
        }
        let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
        if bias.shape() != [d_out] {
            return Err(Error::Dimension {
                op: "block bias",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if residual && d_in != d_out {
            return Err(Error::Contract(format!(
                "residual block requires equal dims, got {d_in} -> {d_out}"
            )));
        }
        Ok(Block { weight, bias, activation, residual })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Parameter tally for a network, block by block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub per_block: Vec<usize>,
    pub classifier: usize,
    pub total: usize,
}

/// Backbone plus final classifier, with mounting positions at block
/// boundaries.
#[derive(Debug, Clone)]
pub struct Network {
    blocks: Vec<Block>,
    final_weight: Tensor,
    final_bias: Tensor,
    mount_positions: Vec<usize>,
    num_classes: usize,
}

impl Network {
    pub fn new(
        blocks: Vec<Block>,
        final_weight: Tensor,
        final_bias: Tensor,
        mount_positions: Vec<usize>,
    ) -> Result<Self> {
        for pair in blocks.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension {
                    op: "block chain",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        if final_weight.shape().len() != 2 {
            return Err(Error::Contract("final classifier weight must be a matrix".into()));
        }
        let num_classes = final_weight.shape()[1];
        if num_classes < 2 {
            return Err(Error::Contract(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        if final_bias.shape() != [num_classes] {
            return Err(Error::Dimension {
                op: "final classifier bias",
                lhs: final_weight.shape().to_vec(),
                rhs: final_bias.shape().to_vec(),
            });
        }
        if let Some(last) = blocks.last() {
            if last.output_dim() != final_weight.shape()[0] {
                return Err(Error::Dimension {
                    op: "final classifier",
                    lhs: last.weight.shape().to_vec(),
                    rhs: final_weight.shape().to_vec(),
                });
            }
        }
        for pair in mount_positions.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Contract(format!(
                    "mount positions must be strictly increasing, got {mount_positions:?}"
                )));
            }
        }
        if let Some(&last) = mount_positions.last() {
            if last >= blocks.len() {
                return Err(Error::Contract(format!(
                    "mount position {last} out of range for {} blocks",
                    blocks.len()
                )));
            }
        }
        Ok(Network { blocks, final_weight, final_bias, mount_positions, num_classes })
    }

    /// Builds a zero-initialized network from dimensions: `input_dim` through
    /// the listed hidden widths into `num_classes` outputs. Blocks whose input
    /// and output widths agree become residual when `residual` is set.
    pub fn from_dims(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
        residual: bool,
        mount_positions: Vec<usize>,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut d_in = input_dim;
        for &d_out in hidden {
            let use_res = residual && d_in == d_out;
            blocks.push(Block::new(
                Tensor::zeros(vec![d_in, d_out]),
                Tensor::zeros(vec![d_out]),
                activation,
                use_res,
            )?);
            d_in = d_out;
        }
        let mut net = Network::new(
            blocks,
            Tensor::zeros(vec![d_in, num_classes]),
            Tensor::zeros(vec![num_classes]),
            vec![],
        )?;
        net.set_mount_positions(mount_positions)?;
        Ok(net)
    }

    pub fn set_mount_positions(&mut self, mount_positions: Vec<usize>) -> Result<()> {
        for pair in mount_positions.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Contract(format!(
                    "mount positions must be strictly increasing, got {mount_positions:?}"
                )));
            }
        }
        if let Some(&last) = mount_positions.last() {
            if last >= self.blocks.len() {
                return Err(Error::Contract(format!(
                    "mount position {last} out of range for {} blocks",
                    self.blocks.len()
                )));
            }
        }
        self.mount_positions = mount_positions;
        Ok(())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn final_weight(&self) -> &Tensor {
        &self.final_weight
    }

    pub fn final_bias(&self) -> &Tensor {
        &self.final_bias
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mount_positions(&self) -> &[usize] {
        &self.mount_positions
    }

    /// Width of the activation exposed at each mount position, in order.
    pub fn mount_widths(&self) -> Vec<usize> {
        self.mount_positions.iter().map(|&i| self.blocks[i].output_dim()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks
            .first()
            .map_or(self.final_weight.shape()[0], Block::input_dim)
    }

    /// Draws every weight uniformly from `(-sqrt(6/d_in), +sqrt(6/d_in))`
    /// and zeroes every bias, deterministically for a fixed seed.
    pub fn init_params(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            let bound = (6.0 / block.input_dim() as f64).sqrt();
            for w in block.weight.values_mut() {
                *w = rng.random_range(-bound..bound);
            }
            for b in block.bias.values_mut() {
                *b = 0.0;
            }
        }
        let bound = (6.0 / self.final_weight.shape()[0] as f64).sqrt();
        for w in self.final_weight.values_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in self.final_bias.values_mut() {
            *b = 0.0;
        }
        self
    }

    /// Parameters in canonical order: each block's weight then bias, then
    /// the final classifier weight and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for block in &self.blocks {
            out.push(&block.weight);
            out.push(&block.bias);
        }
        out.push(&self.final_weight);
        out.push(&self.final_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for block in &mut self.blocks {
            out.push(&mut block.weight);
            out.push(&mut block.bias);
        }
        out.push(&mut self.final_weight);
        out.push(&mut self.final_bias);
        out
    }

    pub fn param_count(&self) -> ParamCount {
        let per_block: Vec<usize> = self.blocks.iter().map(Block::param_count).collect();
        let classifier = self.final_weight.numel() + self.final_bias.numel();
        let total = per_block.iter().sum::<usize>() + classifier;
        ParamCount { per_block, classifier, total }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "network input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Pre-softmax logits for a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_activations(x)?.0)
    }

    /// Logits plus the activation at every mount position, from one pass.
    pub fn forward_with_activations(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(x)?;
        let m = x.rows();
        let mut mounts = Vec::with_capacity(self.mount_positions.len());
        let mut current = x.values().to_vec();
        let mut width = x.cols();
        for (i, block) in self.blocks.iter().enumerate() {
            let d_out = block.output_dim();
            let mut h = vec![0.0; m * d_out];
            tensor::matmul(&current, block.weight.values(), &mut h, m, width, d_out);
            let mut hb = vec![0.0; m * d_out];
            tensor::add_bias(&h, block.bias.values(), &mut hb, m, d_out);
            let mut act = match block.activation {
                Activation::Relu => {
                    let mut a = vec![0.0; m * d_out];
                    tensor::relu(&hb, &mut a);
                    a
                }
                Activation::Identity => hb,
            };
            if block.residual {
                for (a, &c) in act.iter_mut().zip(current.iter()) {
                    *a += c;
                }
            }
            current = act;
            width = d_out;
            if self.mount_positions.contains(&i) {
                mounts.push(Tensor::from_vec(vec![m, width], current.clone())?);
            }
        }
        let c = self.num_classes;
        let mut logits = vec![0.0; m * c];
        tensor::matmul(&current, self.final_weight.values(), &mut logits, m, width, c);
        let mut out = vec![0.0; m * c];
        tensor::add_bias(&logits, self.final_bias.values(), &mut out, m, c);
        Ok((Tensor::from_vec(vec![m, c], out)?, mounts))
    }

    /// Records the forward pass on a tape. Parameters are registered as
    /// gradient-requiring leaves when `trainable` is set, as constants
    /// otherwise. Returns the logits, the mount activations, and the
    /// parameter leaf ids in canonical order.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: ValId,
        trainable: bool,
    ) -> Result<(ValId, Vec<ValId>, Vec<ValId>)> {
        let register = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let mut param_ids = Vec::with_capacity(2 * self.blocks.len() + 2);
        let mut mounts = Vec::with_capacity(self.mount_positions.len());
        let mut current = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let w = register(tape, &block.weight);
            let b = register(tape, &block.bias);
            param_ids.push(w);
            param_ids.push(b);
            let h = tape.matmul(current, w)?;
            let h = tape.add_bias(h, b)?;
            let act = match block.activation {
                Activation::Relu => tape.relu(h),
                Activation::Identity => h,
            };
            current = if block.residual { tape.add(act, current)? } else { act };
            if self.mount_positions.contains(&i) {
                mounts.push(current);
            }
        }
        let w = register(tape, &self.final_weight);
        let b = register(tape, &self.final_bias);
        param_ids.push(w);
        param_ids.push(b);
        let logits = tape.matmul(current, w)?;
        let logits = tape.add_bias(logits, b)?;
        Ok((logits, mounts, param_ids))
    }
}
