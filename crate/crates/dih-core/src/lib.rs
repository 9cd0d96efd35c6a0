//! Knowledge distillation via intermediate classifier heads.
//!
//! A small, self-contained training library: a reverse-mode autodiff tape
//! over dense `f64` tensors, residual fully-connected backbones that expose
//! mounting positions, lightweight classifier heads fitted on a frozen
//! teacher, the temperature-scaled distillation losses, an SGD/Nesterov
//! trainer with the four training modes (plain cross-entropy, canonical
//! distillation, cohort distillation, ensemble-averaged distillation), and
//! the diagnostic analyses that go with them.
//!
//! The `parallel` feature (on by default) fans data-parallel inner loops
//! out over a rayon pool; results are bit-identical with and without it.

pub mod analysis;
pub mod checkpoint;
pub mod cohort;
pub mod container;
pub mod data;
pub mod distill;
pub mod error;
pub mod net;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
