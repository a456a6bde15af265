//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] records primitive operations during the forward pass
//! (define-by-run; the tape is rebuilt for every episode) and replays them
//! in reverse to accumulate gradients into a [`ParameterStore`]. The
//! primitive set is exactly what the memory-augmented models need: affine
//! maps, pointwise nonlinearities, softmax, cosine similarity against the
//! rows of a matrix, circular convolution, elementwise power with a
//! differentiable exponent, and a fused sigmoid cross-entropy loss.

mod gradcheck;
mod store;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use store::ParameterStore;

use crate::error::{NtmError, Result};

/// Handle to a node on a [`Tape`]. Valid only for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

/// Primitive operation tags. Every tag has a matching backward rule in
/// [`Tape::backward`].
#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    /// (W \[r,c\], x \[c\]) -> \[r\]
    MatVec,
    /// (x \[r\], W \[r,c\]) -> \[c\]
    VecMat,
    Add,
    Sub,
    /// Elementwise; either operand may be a scalar (broadcast).
    Mul,
    /// Elementwise; divisor may be a scalar (broadcast).
    Div,
    AddConst,
    ScaleConst(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Softmax,
    /// (base >= 0 elementwise, exponent scalar) -> base^exponent.
    Power,
    Concat,
    Slice {
        start: usize,
    },
    /// (memory \[n,m\], key \[m\]) -> \[n\] of eps-guarded cosine similarities.
    CosineSim,
    /// (w \[n\], kernel \[k\]) -> \[n\]; kernel index j means offset j - radius,
    /// all location arithmetic modulo n.
    CircularConv {
        radius: usize,
    },
    Sum,
    /// (u \[n\], v \[m\]) -> \[n,m\]
    Outer,
    /// Fused stable sigmoid + binary cross-entropy over logits, summed over
    /// masked components. Output is in nats.
    SigmoidCrossEntropy {
        targets: Vec<f64>,
        mask: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "parameter",
            Op::MatVec => "matvec",
            Op::VecMat => "vecmat",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddConst => "add-const",
            Op::ScaleConst(_) => "scale-const",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Softmax => "softmax",
            Op::Power => "power",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::CosineSim => "cosine-sim",
            Op::CircularConv { .. } => "circular-conv",
            Op::Sum => "sum",
            Op::Outer => "outer",
            Op::SigmoidCrossEntropy { .. } => "cross-entropy",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Vec<f64>,
    shape: Vec<usize>,
}

/// Denominator guard for cosine similarity (D3).
pub const COSINE_EPS: f64 = 1e-8;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Append-only operation tape. Confined to one thread for the duration of a
/// forward/backward pass; independent tapes may run concurrently.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Checkpoint mark for episode reset.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node recorded after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(NtmError::Numeric {
                op: op.name().to_string(),
                context: String::new(),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, parents, value, shape });
        Ok(id)
    }

    fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    fn is_scalar(&self, id: NodeId) -> bool {
        self.numel(id) == 1
    }

    // ---- leaf nodes -----------------------------------------------------

    pub fn input(&mut self, data: &[f64], shape: &[usize]) -> Result<NodeId> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(NtmError::Shape {
                op: "input",
                detail: format!("data length {} vs shape {:?}", data.len(), shape),
            });
        }
        self.push(Op::Input, vec![], data.to_vec(), shape.to_vec())
    }

    pub fn scalar_input(&mut self, x: f64) -> Result<NodeId> {
        self.input(&[x], &[1])
    }

    /// Snapshot a named parameter from the store onto the tape. Gradients
    /// flow back into the store's accumulator for that name.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let entry = store
            .entry(name)
            .ok_or_else(|| NtmError::Config(format!("unknown parameter '{name}'")))?;
        self.push(
            Op::Param(name.to_string()),
            vec![],
            entry.value.clone(),
            entry.shape.clone(),
        )
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs != [ws[1]] {
            return Err(NtmError::Shape {
                op: "matvec",
                detail: format!("W {ws:?} vs x {xs:?}"),
            });
        }
        let (r, c) = (ws[0], ws[1]);
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &wv[i * c..(i + 1) * c];
            out[i] = row.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec, vec![w, x], out, vec![r])
    }

    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs != [ws[0]] {
            return Err(NtmError::Shape {
                op: "vecmat",
                detail: format!("x {xs:?} vs W {ws:?}"),
            });
        }
        let (r, c) = (ws[0], ws[1]);
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; c];
        for i in 0..r {
            let xi = xv[i];
            for j in 0..c {
                out[j] += xi * wv[i * c + j];
            }
        }
        self.push(Op::VecMat, vec![x, w], out, vec![c])
    }

    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let us = self.shape(u).to_vec();
        let vs = self.shape(v).to_vec();
        if us.len() != 1 || vs.len() != 1 {
            return Err(NtmError::Shape {
                op: "outer",
                detail: format!("u {us:?} vs v {vs:?}"),
            });
        }
        let uv = &self.nodes[u.0].value;
        let vv = &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(uv.len() * vv.len());
        for &a in uv {
            for &b in vv {
                out.push(a * b);
            }
        }
        self.push(Op::Outer, vec![u, v], out, vec![us[0], vs[0]])
    }

    // ---- elementwise arithmetic ------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NtmError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add, vec![a, b], out, shape)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub, vec![a, b], out, shape)
    }

    /// Elementwise product. If one operand is a scalar it broadcasts.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, shape) = if self.is_scalar(a) && !self.is_scalar(b) {
            let s = self.nodes[a.0].value[0];
            (
                self.nodes[b.0].value.iter().map(|x| s * x).collect(),
                self.shape(b).to_vec(),
            )
        } else if self.is_scalar(b) && !self.is_scalar(a) {
            let s = self.nodes[b.0].value[0];
            (
                self.nodes[a.0].value.iter().map(|x| s * x).collect(),
                self.shape(a).to_vec(),
            )
        } else {
            self.same_shape("mul", a, b)?;
            (
                self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(x, y)| x * y)
                    .collect(),
                self.shape(a).to_vec(),
            )
        };
        self.push(Op::Mul, vec![a, b], out, shape)
    }

    /// Elementwise quotient. The divisor may be a scalar (broadcast).
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, shape) = if self.is_scalar(b) && !self.is_scalar(a) {
            let s = self.nodes[b.0].value[0];
            (
                self.nodes[a.0].value.iter().map(|x| x / s).collect(),
                self.shape(a).to_vec(),
            )
        } else {
            self.same_shape("div", a, b)?;
            (
                self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(x, y)| x / y)
                    .collect(),
                self.shape(a).to_vec(),
            )
        };
        self.push(Op::Div, vec![a, b], out, shape)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::AddConst, vec![a], out, shape)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::ScaleConst(c), vec![a], out, shape)
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid, vec![a], out, shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh, vec![a], out, shape)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| softplus_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Softplus, vec![a], out, shape)
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 1 {
            return Err(NtmError::Shape {
                op: "softmax",
                detail: format!("expected vector, got {:?}", self.shape(a)),
            });
        }
        let v = &self.nodes[a.0].value;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax, vec![a], out, shape)
    }

    /// Elementwise `base^gamma` for nonnegative base and a scalar exponent
    /// node. At base 0 with gamma > 1 the base-gradient is taken as 0.
    pub fn power(&mut self, base: NodeId, gamma: NodeId) -> Result<NodeId> {
        if !self.is_scalar(gamma) {
            return Err(NtmError::Shape {
                op: "power",
                detail: "exponent must be scalar".to_string(),
            });
        }
        if self.nodes[base.0].value.iter().any(|&x| x < 0.0) {
            return Err(NtmError::Config("power base must be nonnegative".to_string()));
        }
        let g = self.nodes[gamma.0].value[0];
        let out: Vec<f64> = self.nodes[base.0].value.iter().map(|x| x.powf(g)).collect();
        let shape = self.shape(base).to_vec();
        self.push(Op::Power, vec![base, gamma], out, shape)
    }

    // ---- structural ------------------------------------------------------

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NtmError::Config("concat of zero nodes".to_string()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(NtmError::Shape {
                    op: "concat",
                    detail: format!("expected vectors, got {:?}", self.shape(p)),
                });
            }
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = out.len();
        self.push(Op::Concat, parts.to_vec(), out, vec![n])
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.numel(a);
        if self.shape(a).len() != 1 || start + len > n {
            return Err(NtmError::Shape {
                op: "slice",
                detail: format!("[{start}, {start}+{len}) of length-{n} vector"),
            });
        }
        let out = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(Op::Slice { start }, vec![a], out, vec![len])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum, vec![a], vec![s], vec![1])
    }

    // ---- model-specific primitives ----------------------------------------

    /// Cosine similarity of a key against every row of a matrix, with the
    /// denominator guarded by [`COSINE_EPS`].
    pub fn cosine_sim(&mut self, memory: NodeId, key: NodeId) -> Result<NodeId> {
        let ms = self.shape(memory).to_vec();
        let ks = self.shape(key).to_vec();
        if ms.len() != 2 || ks != [ms[1]] {
            return Err(NtmError::Shape {
                op: "cosine-sim",
                detail: format!("memory {ms:?} vs key {ks:?}"),
            });
        }
        let (n, m) = (ms[0], ms[1]);
        let mv = &self.nodes[memory.0].value;
        let kv = &self.nodes[key.0].value;
        let knorm = kv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &mv[i * m..(i + 1) * m];
            let dot: f64 = row.iter().zip(kv.iter()).map(|(a, b)| a * b).sum();
            let rnorm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            out[i] = dot / (rnorm * knorm + COSINE_EPS);
        }
        self.push(Op::CosineSim, vec![memory, key], out, vec![n])
    }

    /// Circular convolution of a length-n weighting with a shift kernel.
    /// Kernel index j corresponds to offset `j - radius`; index arithmetic
    /// is modulo n. A full-length kernel with radius 0 covers offsets 0..n-1.
    pub fn circular_conv(&mut self, w: NodeId, kernel: NodeId, radius: usize) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        let ks = self.shape(kernel).to_vec();
        if ws.len() != 1 || ks.len() != 1 || ks[0] > ws[0] {
            return Err(NtmError::Shape {
                op: "circular-conv",
                detail: format!("w {ws:?} vs kernel {ks:?}"),
            });
        }
        let n = ws[0] as isize;
        let wv = &self.nodes[w.0].value;
        let kv = &self.nodes[kernel.0].value;
        let mut out = vec![0.0; ws[0]];
        for (j, &s) in kv.iter().enumerate() {
            let offset = j as isize - radius as isize;
            for i in 0..ws[0] {
                let src = (i as isize - offset).rem_euclid(n) as usize;
                out[i] += wv[src] * s;
            }
        }
        self.push(Op::CircularConv { radius }, vec![w, kernel], out, ws)
    }

    /// Stable fused sigmoid + binary cross-entropy, summed over the masked
    /// logit components. Result is in nats; divide by ln 2 for bits.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        mask: &[f64],
    ) -> Result<NodeId> {
        let n = self.numel(logits);
        if targets.len() != n || mask.len() != n {
            return Err(NtmError::Shape {
                op: "cross-entropy",
                detail: format!("logits {n} vs targets {} / mask {}", targets.len(), mask.len()),
            });
        }
        let zv = &self.nodes[logits.0].value;
        let mut loss = 0.0;
        for i in 0..n {
            let z = zv[i];
            let t = targets[i];
            // max(z,0) - z*t + ln(1 + exp(-|z|))
            loss += mask[i] * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
        }
        self.push(
            Op::SigmoidCrossEntropy {
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            vec![logits],
            vec![loss],
            vec![1],
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// `store`; intermediate gradients are released as soon as the node that
    /// owns them has been processed.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParameterStore) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(NtmError::Config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => store.accumulate(name, &g)?,
                Op::MatVec => {
                    let (w, x) = (node.parents[0], node.parents[1]);
                    let c = self.nodes[w.0].shape[1];
                    let r = self.nodes[w.0].shape[0];
                    {
                        let xv = &self.nodes[x.0].value;
                        let gw = acc(&mut grads, w.0, r * c);
                        for ii in 0..r {
                            let gi = g[ii];
                            for jj in 0..c {
                                gw[ii * c + jj] += gi * xv[jj];
                            }
                        }
                    }
                    {
                        let wv = &self.nodes[w.0].value;
                        let gx = acc(&mut grads, x.0, c);
                        for ii in 0..r {
                            let gi = g[ii];
                            for jj in 0..c {
                                gx[jj] += gi * wv[ii * c + jj];
                            }
                        }
                    }
                }
                Op::VecMat => {
                    let (x, w) = (node.parents[0], node.parents[1]);
                    let r = self.nodes[w.0].shape[0];
                    let c = self.nodes[w.0].shape[1];
                    {
                        let wv = &self.nodes[w.0].value;
                        let gx = acc(&mut grads, x.0, r);
                        for ii in 0..r {
                            let mut s = 0.0;
                            for jj in 0..c {
                                s += wv[ii * c + jj] * g[jj];
                            }
                            gx[ii] += s;
                        }
                    }
                    {
                        let xv = &self.nodes[x.0].value;
                        let gw = acc(&mut grads, w.0, r * c);
                        for ii in 0..r {
                            let xi = xv[ii];
                            for jj in 0..c {
                                gw[ii * c + jj] += xi * g[jj];
                            }
                        }
                    }
                }
                Op::Add => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    add_into(acc(&mut grads, a.0, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, b.0, g.len()), &g, 1.0);
                }
                Op::Sub => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    add_into(acc(&mut grads, a.0, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, b.0, g.len()), &g, -1.0);
                }
                Op::Mul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let an = self.nodes[a.0].value.len();
                    let bn = self.nodes[b.0].value.len();
                    if an == 1 && bn != 1 {
                        let s = self.nodes[a.0].value[0];
                        let bvals = self.nodes[b.0].value.clone();
                        let ga = acc(&mut grads, a.0, 1);
                        ga[0] += g.iter().zip(&bvals).map(|(gi, bi)| gi * bi).sum::<f64>();
                        let gb = acc(&mut grads, b.0, bn);
                        for (o, gi) in gb.iter_mut().zip(&g) {
                            *o += gi * s;
                        }
                    } else if bn == 1 && an != 1 {
                        let s = self.nodes[b.0].value[0];
                        let avals = self.nodes[a.0].value.clone();
                        let gb = acc(&mut grads, b.0, 1);
                        gb[0] += g.iter().zip(&avals).map(|(gi, ai)| gi * ai).sum::<f64>();
                        let ga = acc(&mut grads, a.0, an);
                        for (o, gi) in ga.iter_mut().zip(&g) {
                            *o += gi * s;
                        }
                    } else {
                        let avals = self.nodes[a.0].value.clone();
                        let bvals = self.nodes[b.0].value.clone();
                        let ga = acc(&mut grads, a.0, an);
                        for k in 0..an {
                            ga[k] += g[k] * bvals[k];
                        }
                        let gb = acc(&mut grads, b.0, bn);
                        for k in 0..bn {
                            gb[k] += g[k] * avals[k];
                        }
                    }
                }
                Op::Div => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let an = self.nodes[a.0].value.len();
                    let bn = self.nodes[b.0].value.len();
                    let avals = self.nodes[a.0].value.clone();
                    let bvals = self.nodes[b.0].value.clone();
                    if bn == 1 && an != 1 {
                        let d = bvals[0];
                        let ga = acc(&mut grads, a.0, an);
                        for k in 0..an {
                            ga[k] += g[k] / d;
                        }
                        let gb = acc(&mut grads, b.0, 1);
                        gb[0] += g
                            .iter()
                            .zip(&avals)
                            .map(|(gi, ai)| -gi * ai / (d * d))
                            .sum::<f64>();
                    } else {
                        let ga = acc(&mut grads, a.0, an);
                        for k in 0..an {
                            ga[k] += g[k] / bvals[k];
                        }
                        let gb = acc(&mut grads, b.0, bn);
                        for k in 0..bn {
                            gb[k] += -g[k] * avals[k] / (bvals[k] * bvals[k]);
                        }
                    }
                }
                Op::AddConst => {
                    let a = node.parents[0];
                    add_into(acc(&mut grads, a.0, g.len()), &g, 1.0);
                }
                Op::ScaleConst(c) => {
                    let (a, c) = (node.parents[0], *c);
                    add_into(acc(&mut grads, a.0, g.len()), &g, c);
                }
                Op::Sigmoid => {
                    let a = node.parents[0];
                    let y = node.value.clone();
                    let ga = acc(&mut grads, a.0, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Tanh => {
                    let a = node.parents[0];
                    let y = node.value.clone();
                    let ga = acc(&mut grads, a.0, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Softplus => {
                    let a = node.parents[0];
                    let xv = self.nodes[a.0].value.clone();
                    let ga = acc(&mut grads, a.0, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * sigmoid_scalar(xv[k]);
                    }
                }
                Op::Softmax => {
                    let a = node.parents[0];
                    let y = node.value.clone();
                    let dot: f64 = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                    let ga = acc(&mut grads, a.0, g.len());
                    for k in 0..g.len() {
                        ga[k] += y[k] * (g[k] - dot);
                    }
                }
                Op::Power => {
                    let (base, gamma) = (node.parents[0], node.parents[1]);
                    let bvals = self.nodes[base.0].value.clone();
                    let gam = self.nodes[gamma.0].value[0];
                    let yvals = node.value.clone();
                    {
                        let gb = acc(&mut grads, base.0, bvals.len());
                        for k in 0..bvals.len() {
                            let d = if bvals[k] == 0.0 {
                                if (gam - 1.0).abs() < 1e-15 {
                                    1.0
                                } else {
                                    0.0
                                }
                            } else {
                                gam * bvals[k].powf(gam - 1.0)
                            };
                            gb[k] += g[k] * d;
                        }
                    }
                    {
                        let gg = acc(&mut grads, gamma.0, 1);
                        let mut s = 0.0;
                        for k in 0..bvals.len() {
                            if bvals[k] > 0.0 {
                                s += g[k] * yvals[k] * bvals[k].ln();
                            }
                        }
                        gg[0] += s;
                    }
                }
                Op::Concat => {
                    let parents = node.parents.clone();
                    let mut off = 0;
                    for p in parents {
                        let len = self.nodes[p.0].value.len();
                        add_into(acc(&mut grads, p.0, len), &g[off..off + len], 1.0);
                        off += len;
                    }
                }
                Op::Slice { start } => {
                    let (a, start) = (node.parents[0], *start);
                    let len = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, a.0, len);
                    for k in 0..g.len() {
                        ga[start + k] += g[k];
                    }
                }
                Op::CosineSim => {
                    let (mem, key) = (node.parents[0], node.parents[1]);
                    let m = self.nodes[mem.0].shape[1];
                    let n = self.nodes[mem.0].shape[0];
                    let mv = self.nodes[mem.0].value.clone();
                    let kv = self.nodes[key.0].value.clone();
                    let knorm = kv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let sims = node.value.clone();
                    let kdir: Vec<f64> = kv.iter().map(|x| x / knorm.max(1e-12)).collect();
                    {
                        let gm = acc(&mut grads, mem.0, n * m);
                        for i in 0..n {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let row = &mv[i * m..(i + 1) * m];
                            let rnorm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let denom = rnorm * knorm + COSINE_EPS;
                            for j in 0..m {
                                let rdir = row[j] / rnorm.max(1e-12);
                                gm[i * m + j] +=
                                    gi * (kv[j] / denom - sims[i] * knorm * rdir / denom);
                            }
                        }
                    }
                    {
                        let gk = acc(&mut grads, key.0, m);
                        for i in 0..n {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let row = &mv[i * m..(i + 1) * m];
                            let rnorm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let denom = rnorm * knorm + COSINE_EPS;
                            for j in 0..m {
                                gk[j] += gi * (row[j] / denom - sims[i] * rnorm * kdir[j] / denom);
                            }
                        }
                    }
                }
                Op::CircularConv { radius } => {
                    let (w, kernel) = (node.parents[0], node.parents[1]);
                    let radius = *radius as isize;
                    let n = self.nodes[w.0].value.len() as isize;
                    let kn = self.nodes[kernel.0].value.len();
                    let wv = self.nodes[w.0].value.clone();
                    let kv = self.nodes[kernel.0].value.clone();
                    {
                        let gw = acc(&mut grads, w.0, n as usize);
                        for (j, &s) in kv.iter().enumerate() {
                            let offset = j as isize - radius;
                            for i in 0..n as usize {
                                let src = (i as isize - offset).rem_euclid(n) as usize;
                                gw[src] += g[i] * s;
                            }
                        }
                    }
                    {
                        let gk = acc(&mut grads, kernel.0, kn);
                        for (j, gkj) in gk.iter_mut().enumerate() {
                            let offset = j as isize - radius;
                            let mut s = 0.0;
                            for i in 0..n as usize {
                                let src = (i as isize - offset).rem_euclid(n) as usize;
                                s += g[i] * wv[src];
                            }
                            *gkj += s;
                        }
                    }
                }
                Op::Sum => {
                    let a = node.parents[0];
                    let len = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, a.0, len);
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Outer => {
                    let (u, v) = (node.parents[0], node.parents[1]);
                    let un = self.nodes[u.0].value.len();
                    let vn = self.nodes[v.0].value.len();
                    let uv = self.nodes[u.0].value.clone();
                    let vv = self.nodes[v.0].value.clone();
                    {
                        let gu = acc(&mut grads, u.0, un);
                        for i in 0..un {
                            let mut s = 0.0;
                            for j in 0..vn {
                                s += g[i * vn + j] * vv[j];
                            }
                            gu[i] += s;
                        }
                    }
                    {
                        let gv = acc(&mut grads, v.0, vn);
                        for j in 0..vn {
                            let mut s = 0.0;
                            for i in 0..un {
                                s += g[i * vn + j] * uv[i];
                            }
                            gv[j] += s;
                        }
                    }
                }
                Op::SigmoidCrossEntropy { targets, mask } => {
                    let a = node.parents[0];
                    let targets = targets.clone();
                    let mask = mask.clone();
                    let zv = self.nodes[a.0].value.clone();
                    let ga = acc(&mut grads, a.0, zv.len());
                    for k in 0..zv.len() {
                        ga[k] += g[0] * mask[k] * (sigmoid_scalar(zv[k]) - targets[k]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(out: &mut [f64], g: &[f64], scale: f64) {
    for (o, gi) in out.iter_mut().zip(g) {
        *o += gi * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, data: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.register(name, &[data.len()], data.to_vec()).unwrap();
        s
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.scalar_input(0.0).unwrap();
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.scalar(y), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.input(&[0.0, 0.0, 0.0], &[3]).unwrap();
        let y = t.softmax(x).unwrap();
        for &v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn circular_conv_rotates_one_hot() {
        let mut t = Tape::new();
        let w = t.input(&[0.0, 0.0, 1.0, 0.0, 0.0], &[5]).unwrap();
        // kernel over offsets -1..1, one-hot at +1
        let s = t.input(&[0.0, 0.0, 1.0], &[3]).unwrap();
        let y = t.circular_conv(w, s, 1).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut store = store_with("x", &[3.0]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let y = t.mul(x, x).unwrap();
        store.zero_grads();
        t.backward(y, &mut store).unwrap();
        assert!((store.entry("x").unwrap().grad[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut store = store_with("z", &[0.3, -1.2, 2.5, 0.0]);
        let mut t = Tape::new();
        let z = t.param(&store, "z").unwrap();
        let y = t.softmax(z).unwrap();
        let s = t.sum(y).unwrap();
        store.zero_grads();
        t.backward(s, &mut store).unwrap();
        for &g in &store.entry("z").unwrap().grad {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear() {
        // backward(a*f + b*g) accumulates a*grad(f) + b*grad(g)
        let build = |t: &mut Tape, store: &ParameterStore, ca: f64, cb: f64| -> NodeId {
            let x = t.param(store, "x").unwrap();
            let f = t.mul(x, x).unwrap();
            let f = t.sum(f).unwrap();
            let g = t.tanh(x).unwrap();
            let g = t.sum(g).unwrap();
            let af = t.scale(f, ca).unwrap();
            let bg = t.scale(g, cb).unwrap();
            t.add(af, bg).unwrap()
        };
        let mut store = store_with("x", &[0.7, -0.4]);
        let grad_for = |store: &mut ParameterStore, ca: f64, cb: f64| -> Vec<f64> {
            let mut t = Tape::new();
            let loss = build(&mut t, store, ca, cb);
            store.zero_grads();
            t.backward(loss, store).unwrap();
            store.entry("x").unwrap().grad.clone()
        };
        let gf = grad_for(&mut store, 1.0, 0.0);
        let gg = grad_for(&mut store, 0.0, 1.0);
        let gc = grad_for(&mut store, 2.0, -3.0);
        for i in 0..2 {
            assert!((gc[i] - (2.0 * gf[i] - 3.0 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_value_is_rejected() {
        let mut t = Tape::new();
        let err = t.input(&[f64::NAN], &[1]);
        assert!(err.is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = store_with("x", &[1.0, 2.0]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let y = t.tanh(x).unwrap();
        assert!(t.backward(y, &mut store).is_err());
    }

    #[test]
    fn deterministic_replay() {
        let build = |store: &mut ParameterStore| -> (Vec<f64>, Vec<f64>) {
            let mut t = Tape::new();
            let x = t.param(store, "x").unwrap();
            let h = t.tanh(x).unwrap();
            let s = t.sum(h).unwrap();
            let loss = t.mul(s, s).unwrap();
            let v = t.value(loss).to_vec();
            store.zero_grads();
            t.backward(loss, store).unwrap();
            (v, store.entry("x").unwrap().grad.clone())
        };
        let mut store = store_with("x", &[0.1, 0.2, -0.3]);
        let (v1, g1) = build(&mut store);
        let (v2, g2) = build(&mut store);
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
