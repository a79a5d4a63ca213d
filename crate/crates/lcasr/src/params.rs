//! Named-parameter plumbing shared by the encoder, the optimizer, and the
//! checkpoint writer. Every trainable tensor is a `Param` (value + gradient
//! accumulator); components expose them through a visitor in a fixed,
//! construction-determined order so optimizer state and checkpoints line up
//! across runs.

use crate::tensor::Mat;

/// One trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub v: Mat,
    pub g: Mat,
}

impl Param {
    pub fn new(v: Mat) -> Self {
        let g = Mat::zeros(v.rows, v.cols);
        Param { v, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.data.fill(0.0);
    }
}

/// Visitor over named parameters. Implementors must call `f` in a stable
/// order with globally unique, slash-separated names.
pub trait HasParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    /// Non-trainable tensors that still belong in checkpoints (running
    /// statistics, counters). Default: none.
    fn visit_state(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Mat)) {}
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}
