//! Reverse-mode tape.
//!
//! Forward calls append value nodes and backward records; `backward` walks
//! the records in reverse, accumulating gradients. Each record caches
//! whatever context its pullback needs (operand ids, argmax/argmin picks,
//! normalized activations), so there is no separate graph structure.

use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a value node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// One recorded operation. `backward` may read any node value and must add
/// (never overwrite) into its operands' gradient buffers.
pub trait TapeOp: Send {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]);
}

/// Pending batch-norm running-statistic update produced by a train-mode
/// forward pass. Applied to the owning store after the step, in call order.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    /// Parameter-name prefix; the store holds `<prefix>.running_mean` and
    /// `<prefix>.running_var`.
    pub prefix: String,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Box<dyn TapeOp>>,
    /// Parameters bound from a store, in first-bind order.
    bound: Vec<(String, Var)>,
    bound_index: HashMap<String, Var>,
    stat_updates: Vec<StatUpdate>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a leaf node (input or constant). Gradients accumulate into
    /// it during backward; callers that do not need them simply never read.
    pub fn alloc(&mut self, value: Tensor) -> Var {
        debug_assert!(value.is_finite(), "non-finite tensor entering tape");
        let n = value.numel();
        self.values.push(value);
        self.grads.push(vec![0.0; n]);
        Var(self.values.len() - 1)
    }

    /// Appends a computed node along with its backward record. The closure
    /// receives the freshly allocated output handle so the record can route
    /// the output gradient during backward.
    pub fn push(&mut self, value: Tensor, make_op: impl FnOnce(Var) -> Box<dyn TapeOp>) -> Var {
        let v = self.alloc(value);
        let op = make_op(v);
        self.ops.push(op);
        v
    }

    /// Appends a backward record for nodes already allocated with `alloc`.
    pub fn push_op(&mut self, op: Box<dyn TapeOp>) {
        self.ops.push(op);
    }

    /// Binds a named parameter from `store` onto the tape, copying its
    /// current value. Repeated binds of one name return the same node.
    pub fn param(&mut self, store: &super::ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound_index.get(name) {
            return Ok(v);
        }
        let tensor = store.get(name)?.clone();
        let v = self.alloc(tensor);
        self.bound.push((name.to_string(), v));
        self.bound_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Runs reverse accumulation from a scalar `loss` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = &self.values[loss.0];
        if !t.is_scalar() {
            return Err(Error::invalid_argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        if !t.item().is_finite() {
            return Err(Error::invalid_state("loss is not finite"));
        }
        self.grads[loss.0][0] = 1.0;
        for op in self.ops.iter().rev() {
            op.backward(&self.values, &mut self.grads);
        }
        debug_assert!(
            self.grads.iter().flatten().all(|g| g.is_finite()),
            "non-finite gradient after backward"
        );
        Ok(())
    }

    /// Gradients of bound parameters, in first-bind order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.bound
            .iter()
            .map(|(name, v)| (name.as_str(), self.grads[v.0].as_slice()))
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.bound.iter().map(|(name, v)| (name.as_str(), *v))
    }
}

/// Moves a gradient buffer out for the duration of a pullback so operand
/// buffers can be mutated without aliasing. Always paired with `put_back`.
pub fn take_grad(grads: &mut [Vec<f64>], v: Var) -> Vec<f64> {
    std::mem::take(&mut grads[v.0])
}

pub fn put_back(grads: &mut [Vec<f64>], v: Var, g: Vec<f64>) {
    grads[v.0] = g;
}
