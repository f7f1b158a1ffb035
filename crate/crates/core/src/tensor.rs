//! Dense f64 tensor with reverse-mode automatic differentiation.
//!
//! Every formula downstream (attention, blocks, heads, losses) is expressed
//! in these operations, so gradients for training and saliency exist by
//! construction. The graph is a dynamic tape: each op records its parents and
//! a backward closure on the output tensor. Tensors are immutable once
//! created except for their gradient buffer, so parameters can be shared
//! read-only across threads; the default execution is single-threaded and
//! deterministic.
//!
//! Broadcasting is deliberately limited: a binary op accepts equal shapes, or
//! one operand whose shape is a trailing suffix of the other's (the smaller
//! operand repeats over the leading dims). That covers bias addition and
//! residuals without a general broadcast engine.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
    static MAC_COUNTER: Cell<Option<u128>> = const { Cell::new(None) };
}

/// Run `f` without recording any backward graph (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Run `f` with a multiply-accumulate counter attached to `matmul`; returns
/// the closure result and the number of MACs executed by forward matmuls.
/// Softmax, scaling, masking and residuals are not counted.
pub fn with_mac_counter<R>(f: impl FnOnce() -> R) -> (R, u128) {
    let prev = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let count = MAC_COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    (out, count)
}

fn count_macs(n: u128) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradScratch) + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Per-backward-pass gradient accumulator keyed by tensor id. Gradients are
/// flushed into each tensor's own buffer once the pass completes, so repeated
/// `backward()` calls accumulate and never double-count intermediates.
pub struct GradScratch {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradScratch {
    fn add(&mut self, t: &Tensor, contribution: impl FnOnce(&mut [f64])) {
        if !t.tracks_grad() {
            return;
        }
        let entry = self
            .grads
            .entry(t.id())
            .or_insert_with(|| vec![0.0; t.numel()]);
        contribution(entry);
    }
}

/// N-dimensional array of f64 in row-major order, cheap to clone (shared
/// storage), carrying an optional gradient buffer and backward-graph record.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidTensor(format!(
            "dims must be positive, got {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} implies {numel} elements, data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: Mutex::new(None),
                requires_grad,
                node,
            }),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::build(Arc::new(data), shape.to_vec(), false, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::build(Arc::new(data), shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::build(Arc::new(vec![value; numel]), shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(Arc::new(vec![value]), vec![1], false, None)
    }

    /// Leaf parameter filled from a truncated normal (two-sigma cutoff).
    pub fn trunc_normal(shape: &[usize], sigma: f64, rng: &mut SplitMix64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_trunc_normal(sigma)).collect();
        Self::build(Arc::new(data), shape.to_vec(), true, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    fn tracks_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    fn flush_grad(&self, delta: &[f64]) {
        let mut guard = self.inner.grad.lock().unwrap();
        match guard.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.data)
    }

    fn make_op(
        parents: Vec<Tensor>,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        backward: impl Fn(&[f64], &mut GradScratch) + Send + Sync + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.tracks_grad());
        let node = track.then(|| Node {
            parents,
            backward: Box::new(backward),
        });
        Self::build(data, shape, false, node)
    }

    // ---- reverse mode ----------------------------------------------------

    /// Populate gradients of everything reachable from this scalar loss.
    /// Repeated calls accumulate until `zero_grad` is used.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let order = topo_order(self);
        let mut scratch = GradScratch {
            grads: HashMap::new(),
        };
        scratch.grads.insert(self.id(), vec![1.0]);
        if self.inner.node.is_none() {
            // loss is itself a leaf; nothing to propagate
            if self.inner.requires_grad {
                self.flush_grad(&[1.0]);
            }
            return Ok(());
        }
        for t in order.iter().rev() {
            let Some(node) = t.inner.node.as_ref() else {
                continue;
            };
            let grad = match scratch.grads.remove(&t.id()) {
                Some(g) => g,
                // reachable but received no contribution: zero gradient
                None => vec![0.0; t.numel()],
            };
            (node.backward)(&grad, &mut scratch);
            // intermediate grads become observable on the tensor itself
            t.flush_grad(&grad);
        }
        // everything left in the scratch belongs to leaves
        for t in order.iter().rev() {
            let Some(node) = t.inner.node.as_ref() else {
                continue;
            };
            for p in &node.parents {
                if let Some(g) = scratch.grads.remove(&p.id()) {
                    p.flush_grad(&g);
                }
            }
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    /// Shared core for elementwise binary ops with suffix broadcasting.
    fn binary_op(
        &self,
        other: &Tensor,
        name: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Tensor> {
        let (out_shape, a_small, b_small) = broadcast_layout(self.shape(), other.shape())
            .ok_or_else(|| Error::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })?;
        let (a, b) = (self.data(), other.data());
        let (an, bn) = (a.len(), b.len());
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        for (i, d) in data.iter_mut().enumerate() {
            *d = fwd(a[if a_small { i % an } else { i }], b[if b_small { i % bn } else { i }]);
        }
        let (pa, pb) = (self.clone(), other.clone());
        let (da, db) = (self.data_arc(), other.data_arc());
        Ok(Tensor::make_op(
            vec![self.clone(), other.clone()],
            Arc::new(data),
            out_shape,
            move |g, scratch| {
                scratch.add(&pa, |acc| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (ga, _) = bwd(da[if a_small { i % an } else { i }], db[if b_small { i % bn } else { i }], gi);
                        acc[if a_small { i % an } else { i }] += ga;
                    }
                });
                scratch.add(&pb, |acc| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (_, gb) = bwd(da[if a_small { i % an } else { i }], db[if b_small { i % bn } else { i }], gi);
                        acc[if b_small { i % bn } else { i }] += gb;
                    }
                });
            },
        ))
    }

    pub fn neg(&self) -> Tensor {
        self.unary_op(|x| -x, |_x, _y, g| -g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary_op(move |x| x + c, |_x, _y, g| g)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary_op(move |x| x * c, move |_x, _y, g| g * c)
    }

    pub fn relu(&self) -> Tensor {
        self.unary_op(|x| x.max(0.0), |x, _y, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_op(
            |x| 1.0 / (1.0 + (-x).exp()),
            |_x, y, g| g * y * (1.0 - y),
        )
    }

    /// Tanh-form gaussian error linear unit. The derivative below is the
    /// exact derivative of this approximation, which is what keeps the
    /// finite-difference check tight.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary_op(
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _y, g| {
                let t = (C * (x + A * x * x * x)).tanh();
                let d_inner = C * (1.0 + 3.0 * A * x * x);
                g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)
            },
        )
    }

    pub fn ln(&self) -> Tensor {
        self.unary_op(|x| x.ln(), |x, _y, g| g / x)
    }

    /// Clamp values to [lo, hi]; gradient passes through inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary_op(
            move |x| x.clamp(lo, hi),
            move |x, _y, g| if x < lo || x > hi { 0.0 } else { g },
        )
    }

    fn unary_op(
        &self,
        fwd: impl Fn(f64) -> f64,
        bwd: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let out = Arc::new(self.data().iter().map(|&x| fwd(x)).collect::<Vec<f64>>());
        let parent = self.clone();
        let x_data = self.data_arc();
        let y_data = Arc::clone(&out);
        Tensor::make_op(
            vec![self.clone()],
            out,
            self.shape().to_vec(),
            move |g, scratch| {
                scratch.add(&parent, |acc| {
                    for i in 0..g.len() {
                        acc[i] += bwd(x_data[i], y_data[i], g[i]);
                    }
                });
            },
        )
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product with optional shared leading batch dims:
    /// `[.., m, k] x [.., k, n] -> [.., m, n]`, or a 2-D right operand shared
    /// across every batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (self.shape(), other.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ashape.to_vec(),
            rhs: bshape.to_vec(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = bshape.len() == 2 && ashape.len() > 2;
        if !shared_b && ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2] {
            return Err(mismatch());
        }
        let batches: usize = ashape[..ashape.len() - 2].iter().product();
        let mut out = vec![0.0; batches * m * n];
        let (a, b) = (self.data(), other.data());
        for t in 0..batches {
            let bo = if shared_b { 0 } else { t * k * n };
            mm_nn(
                &a[t * m * k..(t + 1) * m * k],
                &b[bo..bo + k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        count_macs(batches as u128 * m as u128 * k as u128 * n as u128);
        let mut out_shape: Vec<usize> = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let (pa, pb) = (self.clone(), other.clone());
        let (ad, bd) = (self.data_arc(), other.data_arc());
        Ok(Tensor::make_op(
            vec![self.clone(), other.clone()],
            Arc::new(out),
            out_shape,
            move |g, scratch| {
                scratch.add(&pa, |acc| {
                    for t in 0..batches {
                        let bo = if shared_b { 0 } else { t * k * n };
                        mm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[bo..bo + k * n],
                            m,
                            n,
                            k,
                            &mut acc[t * m * k..(t + 1) * m * k],
                        );
                    }
                });
                scratch.add(&pb, |acc| {
                    for t in 0..batches {
                        let bo = if shared_b { 0 } else { t * k * n };
                        mm_tn(
                            &ad[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut acc[bo..bo + k * n],
                        );
                    }
                });
            },
        ))
    }

    /// Numerically stable softmax along `axis`; entries of negative infinity
    /// receive exactly zero weight.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidTensor(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let max = (0..axis_len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..axis_len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= z;
                }
            }
        }
        let parent = self.clone();
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        Ok(Tensor::make_op(
            vec![self.clone()],
            out,
            shape,
            move |g, scratch| {
                scratch.add(&parent, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * axis_len * inner + j * inner + i;
                            let dot: f64 = (0..axis_len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..axis_len {
                                acc[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Standardize over the last dim, then scale and shift: gamma and beta
    /// have the last dim's length.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let s = &x[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (s[j] - mean) * inv * gm[j] + bt[j];
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        let (xd, gd) = (self.data_arc(), gamma.data_arc());
        Ok(Tensor::make_op(
            vec![self.clone(), gamma.clone(), beta.clone()],
            Arc::new(out),
            self.shape().to_vec(),
            move |g, scratch| {
                let df = d as f64;
                // per-row normalized values and reductions shared by all three grads
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                let mut dx_all = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let s = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = s.iter().sum::<f64>() / df;
                    let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[j] = (s[j] - mean) * inv;
                        dxhat[j] = gr[j] * gd[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx_all[r * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                scratch.add(&px, |acc| {
                    for (a, b) in acc.iter_mut().zip(&dx_all) {
                        *a += b;
                    }
                });
                scratch.add(&pg, |acc| {
                    for (a, b) in acc.iter_mut().zip(&dgamma) {
                        *a += b;
                    }
                });
                scratch.add(&pb, |acc| {
                    for (a, b) in acc.iter_mut().zip(&dbeta) {
                        *a += b;
                    }
                });
            },
        ))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel()).map_err(|_| {
            Error::InvalidTensor(format!(
                "reshape: element count mismatch, {:?} ({}) -> {:?}",
                self.shape(),
                self.numel(),
                shape
            ))
        })?;
        let parent = self.clone();
        // reshape shares storage; only the shape changes
        Ok(Tensor::make_op(
            vec![self.clone()],
            self.data_arc(),
            shape.to_vec(),
            move |g, scratch| {
                scratch.add(&parent, |acc| {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                });
            },
        ))
    }

    /// Reorder dims: output dim `d` is input dim `axes[d]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidTensor(format!(
                "permute axes {axes:?} invalid for shape {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(in_shape);
        let mut index = vec![0usize; self.numel()];
        let mut coords = vec![0usize; rank];
        for (o, slot) in index.iter_mut().enumerate() {
            // decode o into out coords, map to input flat index
            let mut rem = o;
            for d in (0..rank).rev() {
                coords[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let mut src = 0;
            for d in 0..rank {
                src += coords[d] * in_strides[axes[d]];
            }
            *slot = src;
        }
        Ok(self.gather(index, out_shape))
    }

    /// Swap the last two dims (batched matrix transpose).
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidTensor(
                "transpose needs at least 2 dims".into(),
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    /// Data-movement primitive: `out[i] = self[index[i]]`. Backward
    /// scatter-adds, so it is exact for any index map, including the
    /// permutations used by windowing and cyclic shifts.
    pub(crate) fn gather(&self, index: Vec<usize>, out_shape: Vec<usize>) -> Tensor {
        let src = self.data();
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let parent = self.clone();
        let index = Arc::new(index);
        Tensor::make_op(
            vec![self.clone()],
            Arc::new(data),
            out_shape,
            move |g, scratch| {
                scratch.add(&parent, |acc| {
                    for (o, &src_i) in index.iter().enumerate() {
                        acc[src_i] += g[o];
                    }
                });
            },
        )
    }

    /// Non-overlapping average pooling over the two spatial dims of a
    /// `[batch, h, w, channels]` tensor.
    pub fn avg_pool2d(&self, window: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidTensor(format!(
                "avg_pool2d expects [batch, h, w, channels], got {s:?}"
            )));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % window != 0 {
            return Err(Error::Divisibility { what: "pool height", value: h, divisor: window });
        }
        if w % window != 0 {
            return Err(Error::Divisibility { what: "pool width", value: w, divisor: window });
        }
        let (oh, ow) = (h / window, w / window);
        let x = self.data();
        let mut out = vec![0.0; b * oh * ow * c];
        let norm = 1.0 / (window * window) as f64;
        let src_at = move |bi: usize, y: usize, xw: usize, ch: usize| ((bi * h + y) * w + xw) * c + ch;
        let dst_at = move |bi: usize, y: usize, xw: usize, ch: usize| ((bi * oh + y) * ow + xw) * c + ch;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for dy in 0..window {
                            for dx in 0..window {
                                acc += x[src_at(bi, oy * window + dy, ox * window + dx, ch)];
                            }
                        }
                        out[dst_at(bi, oy, ox, ch)] = acc * norm;
                    }
                }
            }
        }
        let parent = self.clone();
        Ok(Tensor::make_op(
            vec![self.clone()],
            Arc::new(out),
            vec![b, oh, ow, c],
            move |g, scratch| {
                scratch.add(&parent, |acc| {
                    for bi in 0..b {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for ch in 0..c {
                                    let gv = g[dst_at(bi, oy, ox, ch)] * norm;
                                    for dy in 0..window {
                                        for dx in 0..window {
                                            acc[src_at(bi, oy * window + dy, ox * window + dx, ch)] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            },
        ))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let parent = self.clone();
        Tensor::make_op(
            vec![self.clone()],
            Arc::new(vec![s]),
            vec![1],
            move |g, scratch| {
                scratch.add(&parent, |acc| {
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                });
            },
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum();
        let parent = self.clone();
        Tensor::make_op(
            vec![self.clone()],
            Arc::new(vec![s / n]),
            vec![1],
            move |g, scratch| {
                scratch.add(&parent, |acc| {
                    let gv = g[0] / n;
                    for a in acc.iter_mut() {
                        *a += gv;
                    }
                });
            },
        )
    }
}

/// Concatenate tensors along the last axis; all other dims must agree.
pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.shape().len() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if &p.shape()[..p.shape().len() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(*p.shape().last().unwrap());
    }
    let rows: usize = lead.iter().product();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; rows * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let src = p.data();
        for r in 0..rows {
            data[r * total + offset..r * total + offset + w]
                .copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let mut out_shape = lead.to_vec();
    out_shape.push(total);
    let parents: Vec<Tensor> = parts.to_vec();
    let widths_b = widths.clone();
    let parents_b = parents.clone();
    Ok(Tensor::make_op(
        parents,
        Arc::new(data),
        out_shape,
        move |g, scratch| {
            let mut offset = 0;
            for (p, &w) in parents_b.iter().zip(&widths_b) {
                scratch.add(p, |acc| {
                    for r in 0..rows {
                        for j in 0..w {
                            acc[r * w + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        },
    ))
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Returns (out_shape, lhs_is_small, rhs_is_small) when the shapes are equal
/// or one is a trailing suffix of the other.
fn broadcast_layout(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, bool, bool)> {
    if a == b {
        return Some((a.to_vec(), false, false));
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Some((a.to_vec(), false, true));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some((b.to_vec(), true, false));
    }
    None
}

// ---- matmul kernels (ikj order keeps the inner loops streaming) ----

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out[m,k] += x[m,n] * y[k,n]^T
fn mm_nt(x: &[f64], y: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let xrow = &x[i * n..(i + 1) * n];
        for p in 0..k {
            let yrow = &y[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += xrow[j] * yrow[j];
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k,n] += x[m,k]^T * y[m,n]
fn mm_tn(x: &[f64], y: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let yrow = &y[i * n..(i + 1) * n];
        for p in 0..k {
            let xip = x[i * k + p];
            if xip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += xip * yrow[j];
            }
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(root.id());
    stack.push((root.clone(), 0));
    while let Some((t, i)) = stack.pop() {
        let parents = t.inner.node.as_ref().map(|n| &n.parents);
        match parents {
            Some(ps) if i < ps.len() => {
                let p = ps[i].clone();
                stack.push((t, i + 1));
                if visited.insert(p.id()) && p.inner.node.is_some() {
                    stack.push((p, 0));
                }
            }
            _ => order.push(t),
        }
    }
    order
}

// ---- gradient checking ----------------------------------------------------

/// Compare reverse-mode gradients of `f` at `x` to central finite differences
/// over every coordinate; returns the maximum relative error, where the error
/// is normalized by `max(|analytic|, |numeric|, 1)`.
pub fn grad_check(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// `grad_check` restricted to the listed coordinates, for functions too
/// expensive to probe exhaustively.
pub fn grad_check_at(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<f64> {
    let leaf = Tensor::parameter(x.data().to_vec(), x.shape())?;
    let loss = f(&leaf)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic = leaf.grad_or_zeros();

    let mut worst: f64 = 0.0;
    for &i in coords {
        let numeric = no_grad(|| -> Result<f64> {
            let mut plus = x.data().to_vec();
            plus[i] += eps;
            let fp = f(&Tensor::from_vec(plus, x.shape())?)?.item();
            let mut minus = x.data().to_vec();
            minus[i] -= eps;
            let fm = f(&Tensor::from_vec(minus, x.shape())?)?.item();
            Ok((fp - fm) / (2.0 * eps))
        })?;
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

// ---- named parameter collection ---------------------------------------------

/// Map from dot-separated parameter path to tensor; iteration is sorted by
/// path so serialization and optimizer sweeps are deterministic.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::InvalidTensor(format!(
                "duplicate parameter path {path:?}"
            )));
        }
        self.params.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<T: IntoIterator<Item = (String, Tensor)>>(iter: T) -> Self {
        ParamSet {
            params: iter.into_iter().collect(),
        }
    }
}
