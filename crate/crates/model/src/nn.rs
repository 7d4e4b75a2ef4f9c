//! Parameter storage and the small set of network building blocks shared by
//! the deterministic hierarchy and the flow corrector: linear maps, affine
//! layer norm, multi-head self-attention and pre-norm transformer layers.

use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::rc::Rc;

use stft_core::RngStream;

use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Weight matrices get decoupled weight decay; gains, biases and embeddings
/// do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    Weight,
    BiasOrGain,
}

pub struct Param {
    pub name: String,
    pub value: Rc<ArrayD<f64>>,
    pub kind: ParamKind,
}

/// Flat, ordered parameter registry. Order is creation order and defines the
/// checkpoint blob layout.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

pub enum Init {
    Zero,
    /// Xavier/Glorot normal for a [fan_in, fan_out] matrix.
    Xavier,
    Normal(f64),
    Identity,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut RngStream, kind: ParamKind) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zero => ArrayD::zeros(IxDyn(shape)),
            Init::Normal(std) => ArrayD::from_shape_fn(IxDyn(shape), |_| rng.normal() * std),
            Init::Xavier => {
                assert_eq!(shape.len(), 2, "xavier init needs a matrix");
                let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.normal() * std)
            }
            Init::Identity => {
                assert!(shape.len() == 2 && shape[0] == shape[1], "identity init needs square");
                let mut a = ArrayD::zeros(IxDyn(shape));
                for i in 0..shape[0] {
                    a[[i, i]] = 1.0;
                }
                a
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            value: Rc::new(value),
            kind,
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "parameter {} shape", self.params[id.0].name
        );
        self.params[id.0].value = Rc::new(value);
    }

    /// Mutable access for optimizers; clones only if a tape still holds the value.
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One forward/backward session: a tape plus the binding of parameters to
/// tape leaves, deduplicated so reuse of a parameter (across batch items or
/// hierarchy levels) accumulates gradients on a single leaf.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'s> Session<'s> {
    pub fn train(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train: true,
        }
    }

    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train: false,
        }
    }

    /// Tape leaf for a parameter.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let var = self
            .tape
            .leaf(Rc::clone(&self.store.get(id).value), self.train);
        self.bound[id.0] = Some(var);
        var
    }

    /// Per-parameter gradients of a scalar loss, indexed like the store.
    pub fn grads(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        let node_grads = self.tape.backward(loss);
        let mut out: Vec<Option<ArrayD<f64>>> = vec![None; self.store.len()];
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(var) = bound {
                out[i] = node_grads[var.0].clone();
            }
        }
        out
    }
}

/// Linear map `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[in_dim, out_dim], init, rng, ParamKind::Weight);
        let b = Some(store.add(&format!("{name}.b"), &[out_dim], Init::Zero, rng, ParamKind::BiasOrGain));
        Self { w, b, in_dim, out_dim }
    }

    /// x: [N, in] -> [N, out]
    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let w = sess.p(self.w);
        let mut y = sess.tape.matmul(x, w);
        if let Some(b) = self.b {
            let bv = sess.p(b);
            let shape = sess.tape.shape(y).to_vec();
            let bb = sess.tape.broadcast_to(bv, &shape);
            y = sess.tape.add(y, bb);
        }
        y
    }
}

/// Layer norm with learned gain and bias over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        let gain = store.add(
            &format!("{name}.gain"),
            &[dim],
            Init::Normal(0.0),
            rng,
            ParamKind::BiasOrGain,
        );
        // Gain starts at one.
        let ones = ArrayD::from_elem(IxDyn(&[dim]), 1.0);
        store.set(gain, ones);
        let bias = store.add(&format!("{name}.bias"), &[dim], Init::Zero, rng, ParamKind::BiasOrGain);
        Self { gain, bias }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let normed = sess.tape.layer_norm(x, 1e-5);
        let shape = sess.tape.shape(normed).to_vec();
        let g = sess.p(self.gain);
        let b = sess.p(self.bias);
        let gb = sess.tape.broadcast_to(g, &shape);
        let bb = sess.tape.broadcast_to(b, &shape);
        let scaled = sess.tape.mul(normed, gb);
        sess.tape.add(scaled, bb)
    }
}

/// Bidirectional multi-head self-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, rng: &mut RngStream) -> Self {
        assert_eq!(dim % n_heads, 0, "dim {dim} not divisible by heads {n_heads}");
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, Init::Xavier, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, Init::Xavier, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, Init::Xavier, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, Init::Xavier, rng),
            n_heads,
            dim,
        }
    }

    /// x: [N, D] -> [N, D]
    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let n = sess.tape.shape(x)[0];
        let (h, dh) = (self.n_heads, self.dim / self.n_heads);
        let q = self.wq.forward(sess, x);
        let k = self.wk.forward(sess, x);
        let v = self.wv.forward(sess, x);
        let split = |sess: &mut Session, t: Var| {
            let r = sess.tape.reshape(t, &[n, h, dh]);
            sess.tape.permute(r, &[1, 0, 2]) // [h, N, dh]
        };
        let qh = split(sess, q);
        let kh = split(sess, k);
        let vh = split(sess, v);
        let kt = sess.tape.permute(kh, &[0, 2, 1]); // [h, dh, N]
        let scores = sess.tape.batch_matmul(qh, kt);
        let scaled = sess.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = sess.tape.softmax(scaled);
        let mixed = sess.tape.batch_matmul(attn, vh); // [h, N, dh]
        let merged = sess.tape.permute(mixed, &[1, 0, 2]);
        let flat = sess.tape.reshape(merged, &[n, self.dim]);
        self.wo.forward(sess, flat)
    }
}

/// Pre-norm residual transformer layer: attention then a 4x GELU MLP.
/// Zeroing `attn.wo` and `mlp_out` weights makes the layer an exact identity,
/// which the spectral-path contract tests rely on.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, rng: &mut RngStream) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, n_heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), dim, dim * 4, Init::Xavier, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), dim * 4, dim, Init::Xavier, rng),
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let normed = self.ln1.forward(sess, x);
        let attn = self.attn.forward(sess, normed);
        let x = sess.tape.add(x, attn);
        let normed = self.ln2.forward(sess, x);
        let hidden = self.mlp_in.forward(sess, normed);
        let act = sess.tape.gelu(hidden);
        let out = self.mlp_out.forward(sess, act);
        sess.tape.add(x, out)
    }

    /// Zero the residual-branch output weights so the layer becomes identity.
    pub fn gate_to_identity(&self, store: &mut ParamStore) {
        let wo_shape = store.value(self.attn.wo.w).shape().to_vec();
        store.set(self.attn.wo.w, ArrayD::zeros(IxDyn(&wo_shape)));
        if let Some(b) = self.attn.wo.b {
            let s = store.value(b).shape().to_vec();
            store.set(b, ArrayD::zeros(IxDyn(&s)));
        }
        let mo_shape = store.value(self.mlp_out.w).shape().to_vec();
        store.set(self.mlp_out.w, ArrayD::zeros(IxDyn(&mo_shape)));
        if let Some(b) = self.mlp_out.b {
            let s = store.value(b).shape().to_vec();
            store.set(b, ArrayD::zeros(IxDyn(&s)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn rng() -> RngStream {
        RngStream::new(11, 0)
    }

    #[test]
    fn linear_zero_input_zero_bias_gives_zero() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, "l", 3, 4, Init::Xavier, &mut r);
        let mut sess = Session::inference(&store);
        let x = sess.tape.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let y = lin.forward(&mut sess, x);
        assert!(sess.tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gated_transformer_layer_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = TransformerLayer::new(&mut store, "t", 8, 2, &mut r);
        layer.gate_to_identity(&mut store);
        let mut sess = Session::inference(&store);
        let x_val = ArrayD::from_shape_fn(IxDyn(&[5, 8]), |ix| (ix[0] * 8 + ix[1]) as f64 * 0.1 - 1.7);
        let x = sess.tape.constant(x_val.clone());
        let y = layer.forward(&mut sess, x);
        for (a, b) in x_val.iter().zip(sess.tape.value(y).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = TransformerLayer::new(&mut store, "t", 6, 2, &mut r);
        let x_val = ArrayD::from_shape_fn(IxDyn(&[4, 6]), |ix| ((ix[0] + 2 * ix[1]) as f64).sin());

        let loss_of = |store: &ParamStore| -> f64 {
            let mut sess = Session::train(store);
            let x = sess.tape.constant(x_val.clone());
            let y = layer.forward(&mut sess, x);
            let sq = sess.tape.mul(y, y);
            let l = sess.tape.sum_all(sq);
            sess.tape.value(l)[[0]]
        };

        let mut sess = Session::train(&store);
        let x = sess.tape.constant(x_val.clone());
        let y = layer.forward(&mut sess, x);
        let sq = sess.tape.mul(y, y);
        let l = sess.tape.sum_all(sq);
        let grads = sess.grads(l);
        drop(sess);

        let h = 1e-5;
        // Check a spread of parameters: q weight, mlp weight, ln gain.
        for name in ["t.attn.wq.w", "t.mlp_in.w", "t.ln1.gain", "t.attn.wo.b"] {
            let id = store.lookup(name).unwrap();
            let g = grads[id.0].as_ref().expect("gradient present");
            let n = store.value(id).len().min(6);
            for i in 0..n {
                let orig = store.value(id).clone();
                let mut plus = orig.clone();
                plus.as_slice_mut().unwrap()[i] += h;
                let mut minus = orig.clone();
                minus.as_slice_mut().unwrap()[i] -= h;
                let mut s2 = ParamStoreProbe { store: &mut store };
                s2.store.set(id, plus);
                let lp = loss_of(s2.store);
                s2.store.set(id, minus);
                let lm = loss_of(s2.store);
                s2.store.set(id, orig);
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = g.as_slice().unwrap()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "{name}[{i}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    struct ParamStoreProbe<'a> {
        store: &'a mut ParamStore,
    }
}
