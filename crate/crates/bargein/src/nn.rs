//! Trainable-parameter plumbing shared by the fusion classifier, the
//! infusion network, and the LSTM baseline: a named parameter store, a
//! tape session binding parameters to autodiff leaves, optimizers with
//! global-norm clipping, and transformer / LSTM building blocks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::tensor::Mat;
use crate::{Error, Result};

pub type ParamId = usize;

/// Insertion-ordered collection of named parameter matrices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Mat>,
    /// Parameters with `trainable == false` are skipped by optimizers.
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            mats: Vec::new(),
            trainable: Vec::new(),
        }
    }

    /// Uniform fan-in scaled init: U(-1/sqrt(rows), 1/sqrt(rows)).
    pub fn init(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.push(name, Mat::from_vec(rows, cols, data))
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.push(name, Mat::zeros(rows, cols))
    }

    pub fn push(&mut self, name: &str, m: Mat) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.mats.push(m);
        self.trainable.push(true);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.mats[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.mats[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.trainable[id] = flag;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// SHA-256 over names and raw parameter bytes, for determinism checks.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, m) in self.names.iter().zip(self.mats.iter()) {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// A single forward/backward pass: a tape plus lazy bindings from
/// parameters to leaf nodes.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<ParamId, VarId>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> VarId {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, m: Mat) -> VarId {
        self.tape.leaf(m)
    }

    /// Backward pass; returns gradients aligned with the store
    /// (zero matrices for parameters unused in this pass).
    pub fn grads(&self, loss: VarId) -> Vec<Mat> {
        let g = self.tape.backward(loss);
        (0..self.store.len())
            .map(|id| match self.bound.get(&id).and_then(|&v| g.get(v)) {
                Some(m) => m.clone(),
                None => {
                    let p = self.store.get(id);
                    Mat::zeros(p.rows, p.cols)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Mat>,
        v: Vec<Mat>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = (0..store.len())
            .map(|i| {
                let p = store.get(i);
                Mat::zeros(p.rows, p.cols)
            })
            .collect();
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr, store),
        }
    }

    /// Applies one update. `clip_norm` rescales the whole gradient so its
    /// global L2 norm is at most the given value. Frozen parameters are
    /// left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &mut [Mat],
        clip_norm: Option<f64>,
    ) -> Result<()> {
        let mut sq = 0.0;
        for (i, gmat) in grads.iter().enumerate() {
            if !store.is_trainable(i) {
                continue;
            }
            for v in &gmat.data {
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient in parameter '{}'",
                        store.name(i)
                    )));
                }
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        if let Some(max) = clip_norm {
            if norm > max {
                let s = max / norm;
                for g in grads.iter_mut() {
                    for v in g.data.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }

        match self {
            Optimizer::Sgd { lr } => {
                for i in 0..store.len() {
                    if !store.is_trainable(i) {
                        continue;
                    }
                    store.get_mut(i).add_scaled(&grads[i], -*lr);
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let t = *step as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for i in 0..store.len() {
                    if !store.is_trainable(i) {
                        continue;
                    }
                    let g = &grads[i];
                    let (mi, vi) = (&mut m[i], &mut v[i]);
                    let p = store.get_mut(i);
                    for j in 0..g.data.len() {
                        mi.data[j] = *beta1 * mi.data[j] + (1.0 - *beta1) * g.data[j];
                        vi.data[j] = *beta2 * vi.data[j] + (1.0 - *beta2) * g.data[j] * g.data[j];
                        let mhat = mi.data[j] / bc1;
                        let vhat = vi.data[j] / bc2;
                        p.data[j] -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// x (R x in) -> x W + b (R x out).
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub out: usize,
}

impl LinearParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let w = store.init(&format!("{name}.w"), input, output, rng);
        let b = if bias {
            Some(store.init_zeros(&format!("{name}.b"), 1, output))
        } else {
            None
        };
        LinearParams { w, b, out: output }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> VarId {
        let w = sess.param(self.w);
        let y = sess.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = sess.param(b);
                sess.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Pre-norm transformer encoder layer with bidirectional single-matrix
/// multi-head self-attention and a GELU feed-forward block.
pub struct TransformerLayerParams {
    wq: LinearParams,
    wk: LinearParams,
    wv: LinearParams,
    wo: LinearParams,
    ff1: LinearParams,
    ff2: LinearParams,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    heads: usize,
    width: usize,
}

impl TransformerLayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
    ) -> Self {
        assert!(width % heads == 0, "width must divide into heads");
        let mut ones = Mat::zeros(1, width);
        ones.data.iter_mut().for_each(|v| *v = 1.0);
        TransformerLayerParams {
            wq: LinearParams::new(store, rng, &format!("{name}.attn.q"), width, width, false),
            wk: LinearParams::new(store, rng, &format!("{name}.attn.k"), width, width, false),
            wv: LinearParams::new(store, rng, &format!("{name}.attn.v"), width, width, false),
            wo: LinearParams::new(store, rng, &format!("{name}.attn.o"), width, width, false),
            ff1: LinearParams::new(store, rng, &format!("{name}.ff.1"), width, ff_width, true),
            ff2: LinearParams::new(store, rng, &format!("{name}.ff.2"), ff_width, width, true),
            ln1_g: store.push(&format!("{name}.ln1.g"), ones.clone()),
            ln1_b: store.init_zeros(&format!("{name}.ln1.b"), 1, width),
            ln2_g: store.push(&format!("{name}.ln2.g"), ones),
            ln2_b: store.init_zeros(&format!("{name}.ln2.b"), 1, width),
            heads,
            width,
        }
    }

    fn layer_norm(sess: &mut Session, x: VarId, g: ParamId, b: ParamId) -> VarId {
        let n = sess.tape.layer_norm_rows(x, 1e-5);
        let g = sess.param(g);
        let b = sess.param(b);
        let scaled = sess.tape.mul_row(n, g);
        sess.tape.add_row(scaled, b)
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> VarId {
        let head_w = self.width / self.heads;
        let normed = Self::layer_norm(sess, x, self.ln1_g, self.ln1_b);
        let q = self.wq.forward(sess, normed);
        let k = self.wk.forward(sess, normed);
        let v = self.wv.forward(sess, normed);
        let mut head_outs = Vec::with_capacity(self.heads);
        let scale = 1.0 / (head_w as f64).sqrt();
        for h in 0..self.heads {
            let qh = sess.tape.slice_cols(q, h * head_w, head_w);
            let kh = sess.tape.slice_cols(k, h * head_w, head_w);
            let vh = sess.tape.slice_cols(v, h * head_w, head_w);
            let kt = sess.tape.transpose(kh);
            let scores = sess.tape.matmul(qh, kt);
            let scores = sess.tape.scale(scores, scale);
            let attn = sess.tape.softmax_rows(scores);
            head_outs.push(sess.tape.matmul(attn, vh));
        }
        let merged = sess.tape.concat_cols(&head_outs);
        let attn_out = self.wo.forward(sess, merged);
        let x = sess.tape.add(x, attn_out);

        let normed = Self::layer_norm(sess, x, self.ln2_g, self.ln2_b);
        let hmid = self.ff1.forward(sess, normed);
        let hmid = sess.tape.gelu(hmid);
        let ff_out = self.ff2.forward(sess, hmid);
        sess.tape.add(x, ff_out)
    }
}

/// Standard LSTM cell parameters; gates packed as [i f g o] along columns.
pub struct LstmLayerParams {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    pub hidden: usize,
}

impl LstmLayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        LstmLayerParams {
            wx: store.init(&format!("{name}.wx"), input, 4 * hidden, rng),
            wh: store.init(&format!("{name}.wh"), hidden, 4 * hidden, rng),
            b: store.init_zeros(&format!("{name}.b"), 1, 4 * hidden),
            hidden,
        }
    }

    /// Runs the sequence and returns all hidden states (frames x hidden).
    pub fn forward_seq(&self, sess: &mut Session, x: VarId) -> VarId {
        let states = self.run(sess, x);
        sess.tape.concat_rows(&states)
    }

    /// Runs the sequence (frames x input) and returns the final hidden state (1 x hidden).
    pub fn forward_last(&self, sess: &mut Session, x: VarId) -> VarId {
        *self.run(sess, x).last().unwrap()
    }

    fn run(&self, sess: &mut Session, x: VarId) -> Vec<VarId> {
        let frames = sess.tape.value(x).rows;
        let hdim = self.hidden;
        let wx = sess.param(self.wx);
        let wh = sess.param(self.wh);
        let b = sess.param(self.b);
        let xproj = sess.tape.matmul(x, wx);
        let xproj = sess.tape.add_row(xproj, b);
        let mut h = sess.constant(Mat::zeros(1, hdim));
        let mut c = sess.constant(Mat::zeros(1, hdim));
        let mut states = Vec::with_capacity(frames);
        for t in 0..frames {
            let xt = sess.tape.select_rows(xproj, &[t]);
            let hproj = sess.tape.matmul(h, wh);
            let gates = sess.tape.add(xt, hproj);
            let i = sess.tape.slice_cols(gates, 0, hdim);
            let f = sess.tape.slice_cols(gates, hdim, hdim);
            let g = sess.tape.slice_cols(gates, 2 * hdim, hdim);
            let o = sess.tape.slice_cols(gates, 3 * hdim, hdim);
            let i = sess.tape.sigmoid(i);
            let f = sess.tape.sigmoid(f);
            let g = sess.tape.tanh(g);
            let o = sess.tape.sigmoid(o);
            let fc = sess.tape.mul(f, c);
            let ig = sess.tape.mul(i, g);
            c = sess.tape.add(fc, ig);
            let ct = sess.tape.tanh(c);
            h = sess.tape.mul(o, ct);
            states.push(h);
        }
        states
    }
}
