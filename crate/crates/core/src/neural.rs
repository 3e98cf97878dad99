//! Dense feed-forward networks with reverse-mode gradients and Adam.
//!
//! Weights are stored `out × in`; a batch of row vectors `X` maps to
//! `act(X·Wᵀ + b)`. A forward pass with a tape remembers each layer's input
//! and output, which is all backpropagation through these activations
//! needs.
//!
//! # Checkpoint layout
//!
//! Every integer is a little-endian `u32`, every real a little-endian `f64`.
//!
//! ```text
//! network   := "IRSN" version:u32 layers:u32 layer*
//! layer     := rows:u32 cols:u32 tag:u32 param:u32 weights[rows*cols] biases[rows]
//! adam      := "ADAM" version:u32 lr beta1 beta2 eps t:u64 (m_w m_b v_w v_b)*
//! ```
//!
//! Weights are row-major. Activation tags: 0 relu, 1 tanh, 2 linear,
//! 3 softmax, 4 split softmax/tanh whose `param` is the softmax width.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const FORMAT_VERSION: u32 = 1;
const NET_MAGIC: &[u8; 4] = b"IRSN";
const ADAM_MAGIC: &[u8; 4] = b"ADAM";

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
    Softmax,
    /// Softmax over the first `k` outputs, tanh over the rest.
    SoftmaxTanh(usize),
}

impl Activation {
    fn tag(self) -> (u32, u32) {
        match self {
            Activation::Relu => (0, 0),
            Activation::Tanh => (1, 0),
            Activation::Linear => (2, 0),
            Activation::Softmax => (3, 0),
            Activation::SoftmaxTanh(k) => (4, k as u32),
        }
    }

    fn from_tag(tag: u32, param: u32) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Linear,
            3 => Activation::Softmax,
            4 => Activation::SoftmaxTanh(param as usize),
            t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        })
    }

    /// Applies the activation to a single vector in place.
    pub fn apply_slice(self, v: &mut [f64]) {
        let mut a = Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector");
        self.apply(&mut a);
        v.copy_from_slice(a.as_slice().expect("contiguous"));
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Linear => {}
            Activation::Softmax => {
                let n = z.ncols();
                softmax_rows(z, 0..n)
            }
            Activation::SoftmaxTanh(k) => {
                softmax_rows(z, 0..k);
                z.slice_mut(ndarray::s![.., k..]).mapv_inplace(f64::tanh);
            }
        }
    }

    /// Maps the gradient w.r.t. the activation output `y` to the gradient
    /// w.r.t. the pre-activation.
    fn backward(self, y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                d
            }
            Activation::Tanh => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                d
            }
            Activation::Linear => g.clone(),
            Activation::Softmax => {
                let mut d = g.clone();
                softmax_backward_rows(&mut d, y, 0..y.ncols());
                d
            }
            Activation::SoftmaxTanh(k) => {
                let mut d = g.clone();
                softmax_backward_rows(&mut d, y, 0..k);
                let n = y.ncols();
                for r in 0..y.nrows() {
                    for c in k..n {
                        d[(r, c)] *= 1.0 - y[(r, c)] * y[(r, c)];
                    }
                }
                d
            }
        }
    }
}

fn softmax_rows(z: &mut Array2<f64>, cols: std::ops::Range<usize>) {
    for mut row in z.rows_mut() {
        let max = cols.clone().map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in cols.clone() {
            row[c] = (row[c] - max).exp();
            sum += row[c];
        }
        for c in cols.clone() {
            row[c] /= sum;
        }
    }
}

fn softmax_backward_rows(g: &mut Array2<f64>, y: &Array2<f64>, cols: std::ops::Range<usize>) {
    for r in 0..y.nrows() {
        let dot: f64 = cols.clone().map(|c| g[(r, c)] * y[(r, c)]).sum();
        for c in cols.clone() {
            g[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Cached activations of one batched forward pass.
#[derive(Debug)]
pub struct Tape {
    version: u64,
    /// Input of each layer, followed by the network output.
    values: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("tape holds the output")
    }
}

/// Parameter gradients, one `(dW, db)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().map(|x| x * x).sum::<f64>() + b.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|x| x * c);
            b.mapv_inplace(|x| x * c);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if max_norm > 0.0 && n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

impl Mlp {
    /// Network with layer widths `sizes`, `hidden` activations between
    /// layers and `output` on the last. Weights are uniform in
    /// `±1/√fan_in`, biases zero.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Architecture(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            let act = if i + 1 == n { output } else { hidden };
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
                act,
            });
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.outputs() {
                return Err(Error::Architecture(format!("layer {i}: bias length {} for {} outputs", l.b.len(), l.outputs())));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.inputs() != l.outputs() {
                    return Err(Error::Architecture(format!(
                        "layer {} expects {} inputs, layer {i} gives {}",
                        i + 1,
                        next.inputs(),
                        l.outputs()
                    )));
                }
            }
            if let Activation::SoftmaxTanh(k) = l.act {
                if k == 0 || k > l.outputs() {
                    return Err(Error::Architecture(format!("split head width {k} for {} outputs", l.outputs())));
                }
            }
            if l.w.iter().chain(l.b.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        Ok(Self {
            layers,
            version: fresh_version(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().expect("non-empty").act
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version = fresh_version();
        &mut self.layers
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w.dim() == b.w.dim() && a.act == b.act)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Batched forward pass without recording.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.w.t());
            z += &l.b;
            l.act.apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict(v)?.into_raw_vec_and_offset().0)
    }

    /// Single forward pass stopping before the output activation.
    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut a = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.w.t());
            z += &l.b;
            if i < last {
                l.act.apply(&mut z);
            }
            a = z;
        }
        Ok(a.into_raw_vec_and_offset().0)
    }

    /// Batched forward pass recording what backpropagation needs.
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(x.ncols())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_owned());
        for l in &self.layers {
            let mut z = values.last().expect("input").dot(&l.w.t());
            z += &l.b;
            l.act.apply(&mut z);
            values.push(z);
        }
        Ok(Tape {
            version: self.version,
            values,
        })
    }

    /// Backpropagates `upstream` (gradient w.r.t. the batch output), summing
    /// parameter gradients over the batch. Returns the gradient w.r.t. the
    /// input as well.
    pub fn backward(&self, tape: Tape, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        self.backward_impl(tape, upstream, true)
            .map(|(g, dx)| (g.expect("parameter gradients requested"), dx))
    }

    /// Gradient w.r.t. the input only.
    pub fn input_gradient(&self, tape: Tape, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.backward_impl(tape, upstream, false).map(|(_, dx)| dx)
    }

    fn backward_impl(&self, tape: Tape, upstream: ArrayView2<f64>, params: bool) -> Result<(Option<Gradients>, Array2<f64>)> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        let out = tape.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let mut grads = params.then(|| Vec::with_capacity(self.layers.len()));
        let mut g = upstream.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dz = l.act.backward(&tape.values[i + 1], &g);
            if let Some(gs) = grads.as_mut() {
                let dw = dz.t().dot(&tape.values[i]);
                let db = dz.sum_axis(Axis(0));
                gs.push((dw, db));
            }
            g = dz.dot(&l.w);
        }
        let grads = grads.map(|mut gs| {
            gs.reverse();
            Gradients { layers: gs }
        });
        Ok((grads, g))
    }

    /// Parameters in layer order, weights row-major then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.flat_params() {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(NET_MAGIC);
        put_u32(out, FORMAT_VERSION);
        put_u32(out, self.layers.len() as u32);
        for l in &self.layers {
            let (tag, param) = l.act.tag();
            put_u32(out, l.outputs() as u32);
            put_u32(out, l.inputs() as u32);
            put_u32(out, tag);
            put_u32(out, param);
            for &x in l.w.iter() {
                put_f64(out, x);
            }
            for &x in l.b.iter() {
                put_f64(out, x);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.encode(&mut v);
        v
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(NET_MAGIC, "network")?;
        let n = r.u32()? as usize;
        if n == 0 || n > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let act = Activation::from_tag(r.u32()?, r.u32()?)?;
            let w = r.f64s(rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("layer too large".into()))?)?;
            let b = r.f64s(rows)?;
            layers.push(Layer {
                w: Array2::from_shape_vec((rows, cols), w).map_err(|e| Error::Checkpoint(e.to_string()))?,
                b: Array1::from(b),
                act,
            });
        }
        Mlp::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let net = Self::decode(&mut r)?;
        r.finish()?;
        Ok(net)
    }
}

/// Adam optimiser state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// One bias-corrected Adam step on `net`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|((w, b), l)| w.dim() != l.w.dim() || b.len() != l.b.len())
            || self.m.layers.len() != net.layers.len()
            || self.m.layers.iter().zip(&net.layers).any(|((w, _), l)| w.dim() != l.w.dim())
        {
            return Err(Error::Architecture("gradient shapes do not match the network".into()));
        }
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[i];
            let (mw, mb) = &mut self.m.layers[i];
            let (vw, vb) = &mut self.v.layers[i];
            Zip::from(&mut layer.w).and(gw).and(mw).and(vw).for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut layer.b).and(gb).and(mb).and(vb).for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(ADAM_MAGIC);
        put_u32(out, FORMAT_VERSION);
        for x in [self.lr, self.beta1, self.beta2, self.eps] {
            put_f64(out, x);
        }
        out.extend_from_slice(&self.t.to_le_bytes());
        for ((mw, mb), (vw, vb)) in self.m.layers.iter().zip(&self.v.layers) {
            for &x in mw.iter().chain(mb.iter()).chain(vw.iter()).chain(vb.iter()) {
                put_f64(out, x);
            }
        }
    }

    /// Reads a state saved for a network shaped like `net`.
    pub fn decode(r: &mut Reader<'_>, net: &Mlp) -> Result<Self> {
        r.magic(ADAM_MAGIC, "optimizer")?;
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let t = r.u64()?;
        let mut m = Gradients::zeros_like(net);
        let mut v = Gradients::zeros_like(net);
        for ((mw, mb), (vw, vb)) in m.layers.iter_mut().zip(v.layers.iter_mut()) {
            for x in mw.iter_mut().chain(mb.iter_mut()).chain(vw.iter_mut()).chain(vb.iter_mut()) {
                *x = r.f64()?;
            }
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        })
    }
}

/// `target ← τ·source + (1 − τ)·target`, elementwise, computed as
/// `target + τ·(source − target)` so equal networks stay bit-identical.
pub fn soft_update(target: &mut Mlp, source: &Mlp, tau: f64) -> Result<()> {
    if !target.same_shape(source) {
        return Err(Error::Architecture("soft update between different networks".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain { what: "soft update rate", value: tau });
    }
    for (t, s) in target.layers_mut().iter_mut().zip(&source.layers) {
        if tau == 1.0 {
            t.w.assign(&s.w);
            t.b.assign(&s.b);
        } else {
            Zip::from(&mut t.w).and(&s.w).for_each(|t, &s| *t += tau * (s - *t));
            Zip::from(&mut t.b).and(&s.b).for_each(|t, &s| *t += tau * (s - *t));
        }
    }
    Ok(())
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Cursor over checkpoint bytes; running past the end is a corruption error.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated stream: need {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    /// Checks a block tag and the format version that follows it.
    pub fn magic(&mut self, tag: &[u8; 4], what: &str) -> Result<()> {
        let got = self.take(4)?;
        if got != tag {
            return Err(Error::Checkpoint(format!(
                "not a {what}: tag {:?} where {:?} format version {FORMAT_VERSION} was expected",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(tag)
            )));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{what} format version {v} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
