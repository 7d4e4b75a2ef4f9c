//! Reverse-mode autodiff on dynamically shaped f64 arrays.
//!
//! A `Tape` records the forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Nodes whose ancestors contain no gradient-tracked leaf are skipped during
//! the backward pass, so frozen sub-networks cost nothing beyond the forward
//! evaluation. All values are `f64`: gradient checks against central finite
//! differences are part of the test suite and need the headroom.

use ndarray::{ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Sparse linear map `out[o] += w * in[i]`, used for patch gather/scatter.
/// The adjoint is the same triplet list read in the opposite direction.
#[derive(Debug, Clone)]
pub struct ScatterPlan {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// (output flat index, input flat index, weight)
    pub entries: Vec<(usize, usize, f64)>,
}

impl ScatterPlan {
    pub fn apply(&self, input: &ArrayD<f64>) -> ArrayD<f64> {
        assert_eq!(input.shape(), &self.in_shape[..], "scatter plan input shape");
        let x = input.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.out_shape.iter().product()];
        for &(o, i, w) in &self.entries {
            out[o] += w * x[i];
        }
        ArrayD::from_shape_vec(IxDyn(&self.out_shape), out).unwrap()
    }

    pub fn apply_adjoint(&self, grad_out: &ArrayD<f64>) -> ArrayD<f64> {
        assert_eq!(grad_out.shape(), &self.out_shape[..], "scatter plan adjoint shape");
        let g = grad_out.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.in_shape.iter().product()];
        for &(o, i, w) in &self.entries {
            out[i] += w * g[o];
        }
        ArrayD::from_shape_vec(IxDyn(&self.in_shape), out).unwrap()
    }
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Matmul(usize, usize),
    BatchMatmul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    SliceAxis {
        input: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        input: usize,
        axis: usize,
        indices: Rc<Vec<usize>>,
    },
    IndexScatter {
        input: usize,
        axis: usize,
        indices: Rc<Vec<usize>>,
    },
    BroadcastTo(usize),
    Softmax(usize),
    LayerNorm {
        input: usize,
        eps: f64,
    },
    Gelu(usize),
    SumAll(usize),
    MeanAll(usize),
    SparseLinear {
        input: usize,
        plan: Rc<ScatterPlan>,
    },
    /// Real input -> full complex spectrum, unnormalized forward transform
    /// along `axes`; output gains a trailing (re, im) axis of length 2.
    Dft {
        input: usize,
        axes: Vec<usize>,
    },
    /// Complex pairs -> real part of the normalized inverse transform along
    /// `axes`; the trailing pair axis is consumed.
    IdftReal {
        input: usize,
        axes: Vec<usize>,
    },
}

struct Node {
    value: Rc<ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    /// Gradient-tracked input sharing storage with the caller.
    pub fn leaf(&mut self, value: Rc<ArrayD<f64>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if needs_grad { Op::Leaf } else { Op::Constant },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let value = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let value = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let value = &*self.nodes[a.0].value * &*self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let needs = self.needs(a.0);
        self.push(value, Op::Scale(a.0, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        let needs = self.needs(a.0);
        self.push(value, Op::AddScalar(a.0, c), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let va = as2(&self.nodes[a.0].value);
        let vb = as2(&self.nodes[b.0].value);
        let value = va.dot(&vb).into_dyn();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Matmul(a.0, b.0), needs)
    }

    /// [B, m, k] x [B, k, n] -> [B, m, n]
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "batch_matmul {sa:?} x {sb:?}"
        );
        let mut value = ArrayD::zeros(IxDyn(&[sa[0], sa[1], sb[2]]));
        for bi in 0..sa[0] {
            let va = self.nodes[a.0].value.index_axis(Axis(0), bi);
            let vb = self.nodes[b.0].value.index_axis(Axis(0), bi);
            let prod = as2v(&va).dot(&as2v(&vb));
            value.index_axis_mut(Axis(0), bi).assign(&prod);
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::BatchMatmul(a.0, b.0), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.nodes[a.0].value.len(), n, "reshape {:?} -> {shape:?}", self.shape(a));
        let value = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .to_owned();
        let needs = self.needs(a.0);
        self.push(value, Op::Reshape(a.0), needs)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let needs = self.needs(a.0);
        self.push(value, Op::Permute(a.0, axes.to_vec()), needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let needs = parts.iter().any(|v| self.needs(v.0));
        self.push(value, Op::Concat(parts.iter().map(|v| v.0).collect(), axis), needs)
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let needs = self.needs(a.0);
        self.push(value, Op::SliceAxis { input: a.0, axis, start }, needs)
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: Rc<Vec<usize>>) -> Var {
        let value = self.nodes[a.0].value.select(Axis(axis), &indices);
        let needs = self.needs(a.0);
        self.push(value, Op::IndexSelect { input: a.0, axis, indices }, needs)
    }

    /// Inverse of `index_select`: place rows of `a` at `indices` along `axis`
    /// of a zero array with `out_len` entries on that axis.
    pub fn index_scatter(
        &mut self,
        a: Var,
        axis: usize,
        indices: Rc<Vec<usize>>,
        out_len: usize,
    ) -> Var {
        assert_eq!(self.shape(a)[axis], indices.len(), "index_scatter count");
        let mut shape = self.shape(a).to_vec();
        shape[axis] = out_len;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        for (row, &target) in indices.iter().enumerate() {
            let src = self.nodes[a.0].value.index_axis(Axis(axis), row);
            value.index_axis_mut(Axis(axis), target).assign(&src);
        }
        let needs = self.needs(a.0);
        self.push(value, Op::IndexScatter { input: a.0, axis, indices }, needs)
    }

    /// Numpy-style broadcast of `a` up to `shape` (ranks aligned from the
    /// right; each input axis must match or be 1).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", self.shape(a)))
            .to_owned();
        let needs = self.needs(a.0);
        self.push(value, Op::BroadcastTo(a.0), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let last = x.ndim() - 1;
        let mut value = x.as_ref().clone();
        for mut row in value.lanes_mut(Axis(last)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(a.0);
        self.push(value, Op::Softmax(a.0), needs)
    }

    /// Normalize over the last axis to zero mean / unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let last = x.ndim() - 1;
        let mut value = x.as_ref().clone();
        for mut row in value.lanes_mut(Axis(last)) {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let needs = self.needs(a.0);
        self.push(value, Op::LayerNorm { input: a.0, eps }, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu);
        let needs = self.needs(a.0);
        self.push(value, Op::Gelu(a.0), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[1]), self.nodes[a.0].value.sum());
        let needs = self.needs(a.0);
        self.push(value, Op::SumAll(a.0), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[1]), self.nodes[a.0].value.sum() / n);
        let needs = self.needs(a.0);
        self.push(value, Op::MeanAll(a.0), needs)
    }

    pub fn sparse_linear(&mut self, a: Var, plan: Rc<ScatterPlan>) -> Var {
        let value = plan.apply(&self.nodes[a.0].value);
        let needs = self.needs(a.0);
        self.push(value, Op::SparseLinear { input: a.0, plan }, needs)
    }

    pub fn dft(&mut self, a: Var, axes: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut data: Vec<Complex64> = standard(x).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let shape = x.shape().to_vec();
        for &ax in axes {
            fft_axis(&mut data, &shape, ax, true);
        }
        let value = complex_to_pairs(&data, &shape);
        let needs = self.needs(a.0);
        self.push(value, Op::Dft { input: a.0, axes: axes.to_vec() }, needs)
    }

    pub fn idft_real(&mut self, a: Var, axes: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let shape = x.shape().to_vec();
        assert_eq!(*shape.last().unwrap(), 2, "idft_real expects trailing pair axis");
        let inner: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let mut data = pairs_to_complex(x);
        for &ax in axes {
            fft_axis(&mut data, &inner, ax, false);
        }
        let norm: f64 = axes.iter().map(|&ax| inner[ax] as f64).product();
        let value = ArrayD::from_shape_vec(
            IxDyn(&inner),
            data.iter().map(|c| c.re / norm).collect(),
        )
        .unwrap();
        let needs = self.needs(a.0);
        self.push(value, Op::IdftReal { input: a.0, axes: axes.to_vec() }, needs)
    }

    /// Accumulate gradients of `loss` (a single-element node) with respect to
    /// every gradient-tracked node. Returns a per-node table; callers index
    /// it with leaf `Var`s.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        grads
    }

    fn propagate(&self, id: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {
                // Terminal: re-store the gradient for the caller.
                accum(grads, id, g.clone());
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g * &*self.nodes[*b].value);
                }
                if self.needs(*b) {
                    accum(grads, *b, g * &*self.nodes[*a].value);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accum(grads, *a, g.mapv(|v| v * c));
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
            }
            Op::Matmul(a, b) => {
                let va = as2(&self.nodes[*a].value);
                let vb = as2(&self.nodes[*b].value);
                let g2 = as2(g);
                if self.needs(*a) {
                    accum(grads, *a, g2.dot(&vb.t()).into_dyn());
                }
                if self.needs(*b) {
                    accum(grads, *b, va.t().dot(&g2).into_dyn());
                }
            }
            Op::BatchMatmul(a, b) => {
                let batch = self.nodes[*a].value.shape()[0];
                if self.needs(*a) {
                    let mut da = ArrayD::zeros(self.nodes[*a].value.raw_dim());
                    for bi in 0..batch {
                        let gb = g.index_axis(Axis(0), bi);
                        let vb = self.nodes[*b].value.index_axis(Axis(0), bi);
                        let prod = as2v(&gb).dot(&as2v(&vb).t());
                        da.index_axis_mut(Axis(0), bi).assign(&prod);
                    }
                    accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = ArrayD::zeros(self.nodes[*b].value.raw_dim());
                    for bi in 0..batch {
                        let gb = g.index_axis(Axis(0), bi);
                        let va = self.nodes[*a].value.index_axis(Axis(0), bi);
                        let prod = as2v(&va).t().dot(&as2v(&gb));
                        db.index_axis_mut(Axis(0), bi).assign(&prod);
                    }
                    accum(grads, *b, db);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    let back = g.to_shape(IxDyn(&shape)).expect("reshape grad").to_owned();
                    accum(grads, *a, back);
                }
            }
            Op::Permute(a, axes) => {
                if self.needs(*a) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let back = g
                        .view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    accum(grads, *a, back);
                }
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis];
                    if self.needs(p) {
                        let piece = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .as_standard_layout()
                            .to_owned();
                        accum(grads, p, piece);
                    }
                    offset += len;
                }
            }
            Op::SliceAxis { input, axis, start } => {
                if self.needs(*input) {
                    let mut back = ArrayD::zeros(self.nodes[*input].value.raw_dim());
                    back.slice_axis_mut(
                        Axis(*axis),
                        ndarray::Slice::from(*start..*start + g.shape()[*axis]),
                    )
                    .assign(g);
                    accum(grads, *input, back);
                }
            }
            Op::IndexSelect { input, axis, indices } => {
                if self.needs(*input) {
                    let mut back = ArrayD::zeros(self.nodes[*input].value.raw_dim());
                    for (row, &src) in indices.iter().enumerate() {
                        let gi = g.index_axis(Axis(*axis), row);
                        let mut target = back.index_axis_mut(Axis(*axis), src);
                        target += &gi;
                    }
                    accum(grads, *input, back);
                }
            }
            Op::IndexScatter { input, axis, indices } => {
                if self.needs(*input) {
                    let back = g.select(Axis(*axis), indices);
                    accum(grads, *input, back);
                }
            }
            Op::BroadcastTo(a) => {
                if self.needs(*a) {
                    let in_shape = self.nodes[*a].value.shape().to_vec();
                    let mut reduced = g.clone();
                    // Align ranks, then sum every broadcast axis.
                    while reduced.ndim() > in_shape.len() {
                        reduced = reduced.sum_axis(Axis(0));
                    }
                    for ax in 0..in_shape.len() {
                        if in_shape[ax] == 1 && reduced.shape()[ax] > 1 {
                            let summed = reduced.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                            reduced = summed;
                        }
                    }
                    accum(grads, *a, reduced);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let last = y.ndim() - 1;
                    let mut back = g * &**y;
                    for (mut brow, yrow) in back.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                        let dot: f64 = brow.sum();
                        for (b, yv) in brow.iter_mut().zip(yrow.iter()) {
                            *b -= dot * yv;
                        }
                    }
                    accum(grads, *a, back);
                }
            }
            Op::LayerNorm { input, eps } => {
                if self.needs(*input) {
                    let x = &self.nodes[*input].value;
                    let y = &self.nodes[id].value;
                    let last = x.ndim() - 1;
                    let mut back = g.clone();
                    for ((mut brow, yrow), xrow) in back
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(y.lanes(Axis(last)))
                        .zip(x.lanes(Axis(last)))
                    {
                        let n = xrow.len() as f64;
                        let mean = xrow.sum() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let g_mean: f64 = brow.sum() / n;
                        let gy_mean: f64 =
                            brow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (b, yv) in brow.iter_mut().zip(yrow.iter()) {
                            *b = rstd * (*b - g_mean - yv * gy_mean);
                        }
                    }
                    accum(grads, *input, back);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let back = ndarray::Zip::from(g).and(&**x).map_collect(|&gv, &xv| gv * gelu_grad(xv));
                    accum(grads, *a, back);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let gv = g[[0]];
                    accum(grads, *a, ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gv));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.nodes[*a].value.len() as f64;
                    let gv = g[[0]] / n;
                    accum(grads, *a, ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gv));
                }
            }
            Op::SparseLinear { input, plan } => {
                if self.needs(*input) {
                    accum(grads, *input, plan.apply_adjoint(g));
                }
            }
            Op::Dft { input, axes } => {
                if self.needs(*input) {
                    // d/dx Re/Im pairs of an unnormalized forward DFT: apply
                    // the unnormalized inverse to the complex gradient and
                    // keep the real part.
                    let inner: Vec<usize> = g.shape()[..g.ndim() - 1].to_vec();
                    let mut data = pairs_to_complex(g);
                    for &ax in axes {
                        fft_axis(&mut data, &inner, ax, false);
                    }
                    let back =
                        ArrayD::from_shape_vec(IxDyn(&inner), data.iter().map(|c| c.re).collect())
                            .unwrap();
                    accum(grads, *input, back);
                }
            }
            Op::IdftReal { input, axes } => {
                if self.needs(*input) {
                    // Adjoint of Re(inverse DFT / N): forward DFT of the real
                    // gradient, scaled by 1/N, emitted as pairs.
                    let inner = g.shape().to_vec();
                    let mut data: Vec<Complex64> =
                        standard(g).iter().map(|&v| Complex64::new(v, 0.0)).collect();
                    for &ax in axes {
                        fft_axis(&mut data, &inner, ax, true);
                    }
                    let norm: f64 = axes.iter().map(|&ax| inner[ax] as f64).product();
                    for c in data.iter_mut() {
                        *c /= norm;
                    }
                    accum(grads, *input, complex_to_pairs(&data, &inner));
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<ArrayD<f64>>], id: usize, delta: ArrayD<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("2d view")
}

fn as2v<'a>(a: &'a ndarray::ArrayViewD<'a, f64>) -> ndarray::ArrayView2<'a, f64> {
    a.view().into_dimensionality().expect("2d view")
}

fn standard(a: &ArrayD<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().cloned().collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797884560802865; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797884560802865;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn complex_to_pairs(data: &[Complex64], shape: &[usize]) -> ArrayD<f64> {
    let mut out_shape = shape.to_vec();
    out_shape.push(2);
    let mut out = Vec::with_capacity(data.len() * 2);
    for c in data {
        out.push(c.re);
        out.push(c.im);
    }
    ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap()
}

fn pairs_to_complex(a: &ArrayD<f64>) -> Vec<Complex64> {
    let flat = standard(a);
    flat.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

thread_local! {
    static FFT_CACHE: RefCell<HashMap<(usize, bool), Arc<dyn rustfft::Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan_fft(n: usize, forward: bool) -> Arc<dyn rustfft::Fft<f64>> {
    FFT_CACHE.with(|cache| {
        cache
            .borrow_mut()
            .entry((n, forward))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if forward {
                    planner.plan_fft_forward(n)
                } else {
                    planner.plan_fft_inverse(n)
                }
            })
            .clone()
    })
}

/// In-place unnormalized FFT along `axis` of a C-order buffer with `shape`.
fn fft_axis(data: &mut [Complex64], shape: &[usize], axis: usize, forward: bool) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let fft = plan_fft(n, forward);
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut line = vec![Complex64::default(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for j in 0..n {
                line[j] = data[base + j * inner];
            }
            fft.process(&mut line);
            for j in 0..n {
                data[base + j * inner] = line[j];
            }
        }
    }
}
