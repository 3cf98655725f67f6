//! Dynamically recorded computation graph (define-by-run tape).
//!
//! Forward ops push their output tensor as a node and append a record with
//! the backward rule's inputs; [`Tape::backward`] replays the records in
//! reverse, accumulating vector-Jacobian products. A tape is confined to one
//! logical thread; tensors themselves are immutable and freely shareable.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::matmul::MatDims;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
}

/// One recorded operation: its operand nodes plus whatever the backward rule
/// needs that is cheaper to save than recompute.
pub(crate) enum Record<T> {
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Affine { x: Var, mul: T, out: Var },
    SumAll { x: Var, out: Var },
    DivScalar { num: Var, den: Var, out: Var },
    MatMul { a: Var, b: Var, out: Var, dims: MatDims },
    Transpose2 { x: Var, out: Var },
    AddRowBias { x: Var, bias: Var, out: Var },
    Concat { parts: Vec<Var>, axis: usize, out: Var },
    NarrowC0 { x: Var, start: usize, out: Var },
    Conv3d { x: Var, w: Var, bias: Option<Var>, stride: usize, out: Var },
    PointwiseConv { x: Var, w: Var, bias: Option<Var>, out: Var },
    AvgPool { x: Var, out: Var },
    Upsample { x: Var, out: Var },
    SoftmaxGroups { x: Var, group_size: usize, out: Var },
    Norm(ops::norm::NormRecord<T>),
    Gelu { x: Var, out: Var },
    LeakyRelu { x: Var, slope: T, out: Var },
    Sigmoid { x: Var, out: Var },
    AttnPool { maps: Var, x: Var, out: Var },
    AttnUnpool { maps: Var, tokens: Var, out: Var },
    BceWithLogits { logits: Var, target: Var, out: Var },
}

/// Which model section an op's cost is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Phase {
    #[default]
    Other,
    Encoder,
    TokenLearner,
    Bottleneck,
    TokenFuser,
    Decoder,
}

/// Analytic cost counters, filled at op dispatch from shapes alone.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CostCounter {
    pub encoder_flops: u64,
    pub token_learner_flops: u64,
    pub bottleneck_flops: u64,
    pub token_fuser_flops: u64,
    pub decoder_flops: u64,
    pub other_flops: u64,
    /// Attention score entries computed (N^2 per self-attention head call).
    pub attn_score_entries: u64,
}

impl CostCounter {
    pub fn total_flops(&self) -> u64 {
        self.encoder_flops
            + self.token_learner_flops
            + self.bottleneck_flops
            + self.token_fuser_flops
            + self.decoder_flops
            + self.other_flops
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    records: Vec<Record<T>>,
    recording: bool,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    phase: Phase,
    cost: CostCounter,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward rules (training / gradient checks).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            records: Vec::new(),
            recording: true,
            grads: Vec::new(),
            consumed: false,
            phase: Phase::Other,
            cost: CostCounter::default(),
        }
    }

    /// Forward-only tape: values and cost counters, no backward rules.
    pub fn forward_only() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    /// Register a tensor as a leaf node (parameter or input).
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_node(t.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cost(&self) -> &CostCounter {
        &self.cost
    }

    pub(crate) fn add_flops(&mut self, flops: u64) {
        match self.phase {
            Phase::Other => self.cost.other_flops += flops,
            Phase::Encoder => self.cost.encoder_flops += flops,
            Phase::TokenLearner => self.cost.token_learner_flops += flops,
            Phase::Bottleneck => self.cost.bottleneck_flops += flops,
            Phase::TokenFuser => self.cost.token_fuser_flops += flops,
            Phase::Decoder => self.cost.decoder_flops += flops,
        }
    }

    pub(crate) fn add_attn_scores(&mut self, entries: u64) {
        self.cost.attn_score_entries += entries;
    }

    pub(crate) fn push_node(&mut self, value: Tensor<T>) -> Var {
        debug_assert!(
            !value.has_non_finite(),
            "non-finite values entered the tape (node {})",
            self.nodes.len()
        );
        let id = self.nodes.len();
        self.nodes.push(Node { value });
        Var(id)
    }

    pub(crate) fn push_record(&mut self, record: Record<T>) {
        if self.recording {
            self.records.push(record);
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// the loss depends on; a second call without a fresh tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward() already ran on this tape".into()));
        }
        if !self.recording {
            return Err(Error::Tape("backward() on a forward-only tape".into()));
        }
        let loss_t = self.value(loss);
        if !loss_t.shape().is_scalar() {
            return Err(Error::Tape(format!(
                "backward() needs a scalar loss, got shape {}",
                loss_t.shape()
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..self.records.len()).rev() {
            // Records never touch grads of later nodes, so split borrows.
            let (records, nodes, grads) = (&self.records, &self.nodes, &mut self.grads);
            ops::backward_record(&records[i], nodes, grads);
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. a node, if the loss depends on it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| {
            Tensor::from_vec(self.value(v).shape().clone(), g.to_vec()).expect("same shape")
        })
    }
}

/// Accumulate `delta` into the gradient slot for `v`.
pub(crate) fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
    match &mut grads[v.0] {
        Some(g) => {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi = *gi + *di;
            }
        }
        None => grads[v.0] = Some(delta.to_vec()),
    }
}

/// Zero-initialized gradient buffer for `v`, for rules that scatter in place.
pub(crate) fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
    numel: usize,
) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); numel])
}
