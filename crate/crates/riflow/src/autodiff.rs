//! Minimal reverse-mode differentiation on a define-by-run tape.
//!
//! A [`Tape`] records one forward computation as a flat, topologically
//! ordered list of nodes; [`Var`] is a copyable handle into that list.
//! Calling [`Tape::backward`] from a scalar root walks the list once in
//! reverse, accumulating adjoints into every tracked node. Tapes are rebuilt
//! per forward pass, never reused across passes, and are confined to a
//! single thread (`RefCell` interior mutability makes this structural).
//!
//! The op set is exactly what the integer flow needs — dense and
//! convolutional linear maps, a few pointwise nonlinearities, the shape
//! rearrangements of the multi-scale architecture, straight-through
//! rounding, and the discretized-logistic log-mass — plus a rank-one
//! contraction used by the spectral penalty. Forward values are computed by
//! the kernels in [`crate::array`], so the adjoint rules here are the only
//! derivative-specific code in the crate.
//!
//! Straight-through rounding ([`Var::round_ste`]) rounds half away from
//! zero in the forward direction and passes gradients through unchanged,
//! which is what lets gradient-based attacks and training see through the
//! integer quantization of the coupling layers.

use std::cell::RefCell;
use std::sync::Arc;

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::logistic;

/// Node index within a tape.
type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        pad: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SpaceToDepth(NodeId),
    DepthToSpace(NodeId),
    SliceChannels {
        input: NodeId,
        from: usize,
        to: usize,
    },
    ConcatChannels(NodeId, NodeId),
    RoundSte(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    DiscLogisticLogPmf {
        z: NodeId,
        mu: NodeId,
        log_s: NodeId,
    },
    UvContract {
        w: NodeId,
        u: Arc<Array>,
        v: Arc<Array>,
    },
}

struct Node {
    value: Arc<Array>,
    op: Op,
    /// True when this node or any ancestor is a tracked leaf; untracked
    /// subgraphs are skipped entirely during the backward sweep.
    tracked: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// One slot per node: `Some(adjoint)` for tracked nodes after a backward
    /// pass, pre-filled with zeros so gradients are never partially written.
    grads: Vec<Option<Array>>,
}

/// Define-by-run recording of one forward computation.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Lightweight handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Empty tape.
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// True when nothing has been recorded.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, tracked: bool) -> Var<'_> {
        self.push_shared(Arc::new(value), op, tracked)
    }

    fn push_shared(&self, value: Arc<Array>, op: Op, tracked: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, tracked });
        inner.grads.push(None);
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Registers a tracked leaf: gradients will be accumulated for it.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tracked leaf sharing an existing allocation.
    pub fn leaf_shared(&self, value: Arc<Array>) -> Var<'_> {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Registers an untracked constant; no gradient is ever computed for it
    /// or propagated through it into other constants.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Untracked constant sharing an existing allocation (used to bind
    /// frozen model parameters without copying them).
    pub fn constant_shared(&self, value: Arc<Array>) -> Var<'_> {
        self.push_shared(value, Op::Leaf, false)
    }

    fn value_of(&self, id: NodeId) -> Arc<Array> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].tracked
    }

    /// Reverse sweep from a scalar root. Adjoints of all tracked nodes are
    /// (re)computed; earlier gradients on this tape are discarded.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        debug_assert!(std::ptr::eq(root.tape, self), "root var from another tape");
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(shape_err("backward", "tape is empty"));
        }
        let root_shape = inner.nodes[root.id].value.shape().to_vec();
        if inner.nodes[root.id].value.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got shape {root_shape:?}"),
            ));
        }
        // Pre-fill zeros for every tracked node so that after the sweep all
        // tracked gradients exist, including leaves the root never touched.
        let inner = &mut *inner;
        for (node, slot) in inner.nodes.iter().zip(inner.grads.iter_mut()) {
            *slot = if node.tracked {
                Some(Array::zeros(node.value.shape()))
            } else {
                None
            };
        }
        if !inner.nodes[root.id].tracked {
            // Constant root: all gradients are identically zero.
            return Ok(());
        }
        if let Some(g) = inner.grads[root.id].as_mut() {
            g.data_mut()[0] = 1.0;
        }

        for id in (0..=root.id).rev() {
            if !inner.nodes[id].tracked {
                continue;
            }
            let g = match inner.grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            // `add_to` accumulates into a tracked input's slot; contributions
            // into constants are dropped.
            macro_rules! add_to {
                ($target:expr, $contrib:expr) => {
                    if let Some(slot) = inner.grads[$target].as_mut() {
                        slot.accumulate(&$contrib)?;
                    }
                };
            }
            match &inner.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    add_to!(a, g);
                    add_to!(b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    add_to!(a, g);
                    add_to!(b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = Arc::clone(&inner.nodes[a].value);
                    let vb = Arc::clone(&inner.nodes[b].value);
                    add_to!(a, g.mul(&vb)?);
                    add_to!(b, g.mul(&va)?);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    add_to!(a, g.scale(c));
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    add_to!(a, g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = Arc::clone(&inner.nodes[a].value);
                    let vb = Arc::clone(&inner.nodes[b].value);
                    add_to!(a, g.matmul(&vb.transpose()?)?);
                    add_to!(b, va.transpose()?.matmul(&g)?);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    pad,
                } => {
                    let (input, kernel, bias, pad) = (*input, *kernel, *bias, *pad);
                    let vi = Arc::clone(&inner.nodes[input].value);
                    let vk = Arc::clone(&inner.nodes[kernel].value);
                    if inner.grads[input].is_some() {
                        let gi = Array::conv2d_grad_input(&g, &vk, vi.shape(), pad)?;
                        add_to!(input, gi);
                    }
                    if inner.grads[kernel].is_some() {
                        let gk = Array::conv2d_grad_kernel(&g, &vi, vk.shape(), pad)?;
                        add_to!(kernel, gk);
                    }
                    if let Some(b) = bias {
                        if inner.grads[b].is_some() {
                            let gb = Array::conv2d_grad_bias(&g)?;
                            add_to!(b, gb);
                        }
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let va = Arc::clone(&inner.nodes[a].value);
                    let masked = Array::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect(),
                    )?;
                    add_to!(a, masked);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = Arc::clone(&inner.nodes[id].value);
                    let contrib = Array::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                            .collect(),
                    )?;
                    add_to!(a, contrib);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let va = Arc::clone(&inner.nodes[a].value);
                    let contrib = Array::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&gv, &xv)| gv / xv)
                            .collect(),
                    )?;
                    add_to!(a, contrib);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let y = Arc::clone(&inner.nodes[id].value);
                    add_to!(a, g.mul(&y)?);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g0 = g.as_scalar()?;
                    let shape = inner.nodes[a].value.shape().to_vec();
                    add_to!(a, Array::full(&shape, g0));
                }
                Op::Mean(a) => {
                    let a = *a;
                    let g0 = g.as_scalar()?;
                    let shape = inner.nodes[a].value.shape().to_vec();
                    let n = inner.nodes[a].value.numel() as f64;
                    add_to!(a, Array::full(&shape, g0 / n));
                }
                Op::SpaceToDepth(a) => {
                    let a = *a;
                    add_to!(a, g.depth_to_space()?);
                }
                Op::DepthToSpace(a) => {
                    let a = *a;
                    add_to!(a, g.space_to_depth()?);
                }
                Op::SliceChannels { input, from, to } => {
                    let (input, from, to) = (*input, *from, *to);
                    if let Some(slot) = inner.grads[input].as_mut() {
                        let (_, h, w) = slot.dims3()?;
                        let plane = h * w;
                        let dst = &mut slot.data_mut()[from * plane..to * plane];
                        for (d, s) in dst.iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = inner.nodes[a].value.shape()[0];
                    let (ga, gb) = g.split_channels(ca)?;
                    add_to!(a, ga);
                    add_to!(b, gb);
                }
                Op::RoundSte(a) => {
                    // Straight-through: the quantizer is treated as identity.
                    let a = *a;
                    add_to!(a, g);
                }
                Op::Clamp { input, lo, hi } => {
                    let (input, lo, hi) = (*input, *lo, *hi);
                    let vi = Arc::clone(&inner.nodes[input].value);
                    let masked = Array::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(vi.data())
                            .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { 0.0 })
                            .collect(),
                    )?;
                    add_to!(input, masked);
                }
                Op::DiscLogisticLogPmf { z, mu, log_s } => {
                    let (z, mu, log_s) = (*z, *mu, *log_s);
                    let vz = Arc::clone(&inner.nodes[z].value);
                    let vmu = Arc::clone(&inner.nodes[mu].value);
                    let vls = Arc::clone(&inner.nodes[log_s].value);
                    let n = vz.numel();
                    let mut gz = vec![0.0; n];
                    let mut gmu = vec![0.0; n];
                    let mut gls = vec![0.0; n];
                    for i in 0..n {
                        let (zi, mui, lsi) = (vz.data()[i], vmu.data()[i], vls.data()[i]);
                        let s = lsi.exp();
                        let (_, d_a, d_b) = logistic::logpmf_parts(zi, mui, s);
                        let a = (zi - mui + 0.5) / s;
                        let b = (zi - mui - 0.5) / s;
                        let gi = g.data()[i];
                        gz[i] = gi * (d_a + d_b) / s;
                        gmu[i] = -gz[i];
                        gls[i] = gi * (-a * d_a - b * d_b);
                    }
                    let shape = vz.shape().to_vec();
                    add_to!(z, Array::new(shape.clone(), gz)?);
                    add_to!(mu, Array::new(shape.clone(), gmu)?);
                    add_to!(log_s, Array::new(shape, gls)?);
                }
                Op::UvContract { w, u, v } => {
                    let w = *w;
                    let (u, v) = (Arc::clone(u), Arc::clone(v));
                    if let Some(slot) = inner.grads[w].as_mut() {
                        let g0 = g.as_scalar()?;
                        let (m, n) = slot.dims2()?;
                        let data = slot.data_mut();
                        for i in 0..m {
                            let gu = g0 * u.data()[i];
                            for j in 0..n {
                                data[i * n + j] += gu * v.data()[j];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass for `v`; `None` for constants.
    /// Tracked nodes untouched by the root report all-zero gradients.
    pub fn grad(&self, v: Var<'_>) -> Option<Array> {
        self.inner.borrow().grads[v.id].clone()
    }
}

impl<'t> Var<'t> {
    /// Forward value (shared, zero-copy).
    pub fn value(&self) -> Arc<Array> {
        self.tape.value_of(self.id)
    }

    /// Forward value of a scalar node.
    pub fn scalar_value(&self) -> Result<f64> {
        self.value().as_scalar()
    }

    /// True when gradients flow through this node.
    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn binary(self, other: Var<'t>, value: Array, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let tracked = self.is_tracked() || other.is_tracked();
        self.tape.push(value, op, tracked)
    }

    fn unary(self, value: Array, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.is_tracked())
    }

    /// Elementwise sum.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    /// Elementwise difference.
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Addition of a constant scalar.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().add_scalar(c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Matrix product of rank-2 operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// 2-D convolution; see [`Array::conv2d`] for the shape contract.
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, pad: usize) -> Result<Var<'t>> {
        let bias_val = bias.map(|b| b.value());
        let v = self.value().conv2d(&kernel.value(), bias_val.as_deref(), pad)?;
        let tracked = self.is_tracked()
            || kernel.is_tracked()
            || bias.map(|b| b.is_tracked()).unwrap_or(false);
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                pad,
            },
            tracked,
        ))
    }

    /// Rectified linear unit.
    pub fn relu(self) -> Var<'t> {
        let v = self.value().relu();
        self.unary(v, Op::Relu(self.id))
    }

    /// Logistic sigmoid.
    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().sigmoid();
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Natural logarithm.
    pub fn ln(self) -> Var<'t> {
        let v = self.value().ln();
        self.unary(v, Op::Ln(self.id))
    }

    /// Natural exponential.
    pub fn exp(self) -> Var<'t> {
        let v = self.value().exp();
        self.unary(v, Op::Exp(self.id))
    }

    /// Sum of all elements (scalar result).
    pub fn sum(self) -> Var<'t> {
        let v = Array::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Mean of all elements (scalar result).
    pub fn mean(self) -> Var<'t> {
        let v = Array::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// `(C, H, W) -> (4C, H/2, W/2)` block rearrangement.
    pub fn space_to_depth(self) -> Result<Var<'t>> {
        let v = self.value().space_to_depth()?;
        Ok(self.unary(v, Op::SpaceToDepth(self.id)))
    }

    /// `(4C, H, W) -> (C, 2H, 2W)` block rearrangement.
    pub fn depth_to_space(self) -> Result<Var<'t>> {
        let v = self.value().depth_to_space()?;
        Ok(self.unary(v, Op::DepthToSpace(self.id)))
    }

    /// Splits along the channel axis at `at`.
    pub fn split_channels(self, at: usize) -> Result<(Var<'t>, Var<'t>)> {
        let (first, second) = self.value().split_channels(at)?;
        let c = self.value().shape()[0];
        let tracked = self.is_tracked();
        let f = self.tape.push(
            first,
            Op::SliceChannels {
                input: self.id,
                from: 0,
                to: at,
            },
            tracked,
        );
        let s = self.tape.push(
            second,
            Op::SliceChannels {
                input: self.id,
                from: at,
                to: c,
            },
            tracked,
        );
        Ok((f, s))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().concat_channels(&other.value())?;
        Ok(self.binary(other, v, Op::ConcatChannels(self.id, other.id)))
    }

    /// Rounds half away from zero forward; identity in the backward pass.
    pub fn round_ste(self) -> Var<'t> {
        let v = self.value().round_half_away();
        self.unary(v, Op::RoundSte(self.id))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input lies
    /// inside the closed interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().clamp(lo, hi);
        self.unary(v, Op::Clamp { input: self.id, lo, hi })
    }

    /// Upper clamp only (used to cap component losses).
    pub fn clamp_max(self, hi: f64) -> Var<'t> {
        self.clamp(f64::NEG_INFINITY, hi)
    }

    /// Elementwise discretized-logistic log-mass `log P(z; mu, exp(log_s))`.
    /// All three operands must share one shape; `self` is the integer latent.
    pub fn disc_logistic_logpmf(self, mu: Var<'t>, log_s: Var<'t>) -> Result<Var<'t>> {
        let vz = self.value();
        let vmu = mu.value();
        let vls = log_s.value();
        if vz.shape() != vmu.shape() || vz.shape() != vls.shape() {
            return Err(shape_err(
                "disc_logistic_logpmf",
                format!(
                    "operand shapes differ: z {:?}, mu {:?}, log_s {:?}",
                    vz.shape(),
                    vmu.shape(),
                    vls.shape()
                ),
            ));
        }
        let data = (0..vz.numel())
            .map(|i| logistic::logpmf_unchecked(vz.data()[i], vmu.data()[i], vls.data()[i].exp()))
            .collect();
        let v = Array::new(vz.shape().to_vec(), data)?;
        let tracked = self.is_tracked() || mu.is_tracked() || log_s.is_tracked();
        Ok(self.tape.push(
            v,
            Op::DiscLogisticLogPmf {
                z: self.id,
                mu: mu.id,
                log_s: log_s.id,
            },
            tracked,
        ))
    }

    /// Rank-one contraction `u^T W v` of a rank-2 `self` with constant
    /// vectors; the adjoint is `g * u v^T`. Used for the spectral penalty,
    /// where `u`, `v` are detached singular-vector estimates.
    pub fn uv_contract(self, u: &Array, v: &Array) -> Result<Var<'t>> {
        let w = self.value();
        let (m, n) = w.dims2()?;
        if u.shape() != [m] || v.shape() != [n] {
            return Err(shape_err(
                "uv_contract",
                format!(
                    "vector shapes {:?}/{:?} do not match matrix {:?}",
                    u.shape(),
                    v.shape(),
                    w.shape()
                ),
            ));
        }
        let mut acc = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..n {
                row += w.data()[i * n + j] * v.data()[j];
            }
            acc += u.data()[i] * row;
        }
        Ok(self.tape.push(
            Array::scalar(acc),
            Op::UvContract {
                w: self.id,
                u: Arc::new(u.clone()),
                v: Arc::new(v.clone()),
            },
            self.is_tracked(),
        ))
    }
}
