//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The engine is deliberately small: a [`Tape`] records every intermediate
//! value as a dense row-major matrix node, builders perform the forward
//! computation eagerly, and [`Tape::backward`] walks the recorded nodes in
//! reverse, accumulating adjoints. Node indices are topologically ordered by
//! construction (an op's inputs always precede it), so the reverse walk is a
//! single descending loop — no sorting, no graph search.
//!
//! Design points that matter for this workload:
//!
//! * **Exactly one op set.** Every differentiable operation the front end,
//!   controller, and classifier need is a variant here ([`OP_NAMES`] lists
//!   them), and each has a finite-difference check wired up in
//!   [`crate::grad::check`]. There is no fallback numeric path.
//! * **Signal-level ops are first-class.** Per-channel Gabor filtering
//!   ([`Tape::gabor_conv`]), magnitude spectra ([`Tape::spectrum_mag`]), and
//!   the spectral-centroid deviation ([`Tape::centroid_dev`]) run their
//!   forward and adjoint passes on the same FFT workspace as the inference
//!   code in [`crate::gabor`], so trained and deployed behavior match bit for
//!   bit.
//! * **Buffers are pooled.** Value, gradient, and spectrum buffers are
//!   recycled through [`Tape::reset`] so per-clip training steps do not churn
//!   the allocator.
//! * **Gradients through the filter parameters use the analytic tap
//!   derivative.** `d taps / d q` has a closed form (see
//!   [`crate::gabor::ChannelSynth`]), and the chain rule contribution reduces
//!   to a lag correlation between the upstream gradient and the frame, done
//!   with two FFTs per channel.
//!
//! Normalization statistics fed to [`Tape::batch_norm`] are treated as
//! constants: the adaptation loop updates them as running estimates outside
//! the tape, and gradients flow only through the scale/shift parameters and
//! the input.

pub mod adam;
pub mod check;
pub mod params;

use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;

use crate::fft::{half_bins, FftCache};
use crate::gabor::{ChannelSynth, FrameConvolver, GaborError, GaborFilterSpec};
use crate::real::{r, Real};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it
/// and only until that tape is [`reset`](Tape::reset).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of every differentiable operation, in the order they are declared.
/// The gradient-check suite asserts it covers each of these exactly once.
pub const OP_NAMES: [&str; 21] = [
    "add",
    "sub",
    "mul",
    "affine",
    "matmul",
    "relu",
    "tanh",
    "batch_norm",
    "softmax_cross_entropy",
    "clamp_st",
    "mean_all",
    "row_mean",
    "square",
    "log_floor",
    "concat_rows",
    "reshape",
    "row_diff",
    "gabor_conv",
    "spectrum_mag",
    "smooth3",
    "centroid_dev",
];

/// Q-dependent per-channel filtering context shared across frames and clips:
/// synthesis tables for each channel plus the geometry of the correlation.
#[derive(Debug)]
pub struct GaborConvContext<T: Real> {
    synths: Vec<ChannelSynth<T>>,
    frame_len: usize,
    taps_len: usize,
}

impl<T: Real> GaborConvContext<T> {
    pub fn new(
        centers_hz: &[f64],
        fs_hz: f64,
        taps: usize,
        frame_len: usize,
    ) -> Result<Self, GaborError> {
        if frame_len == 0 {
            return Err(GaborError::InvalidSpec("frame length must be positive".into()));
        }
        let mut synths = Vec::with_capacity(centers_hz.len());
        for &fc in centers_hz {
            // Validate each center against the synthesizable regime (the Q
            // bound is enforced dynamically by the clamp that produces Q).
            GaborFilterSpec::new(fc, 0.5, taps, fs_hz)?;
            synths.push(ChannelSynth::new(fc, fs_hz, taps));
        }
        Ok(Self { synths, frame_len, taps_len: taps })
    }

    pub fn channels(&self) -> usize {
        self.synths.len()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn taps_len(&self) -> usize {
        self.taps_len
    }
}

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: T },
    MatMul { a: NodeId, b: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T> },
    SoftmaxCrossEntropy { logits: NodeId, label: usize, softmax: Vec<T> },
    ClampSt { x: NodeId, lo: T, hi: T },
    MeanAll(NodeId),
    RowMean(NodeId),
    Square(NodeId),
    LogFloor { x: NodeId, floor: T },
    ConcatRows(NodeId, NodeId),
    Reshape(NodeId),
    RowDiff(NodeId),
    GaborConv { q: NodeId, x: NodeId, ctx: Arc<GaborConvContext<T>>, taps: Vec<T>, x_spec: Vec<Complex<T>> },
    SpectrumMag { x: NodeId, nfft: usize, spec: Vec<Complex<T>> },
    Smooth3(NodeId),
    CentroidDev { x: NodeId, bin_hz: T, half_span: T, num: Vec<T>, den: Vec<T> },
}

struct Node<T: Real> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode tape. Create once, build+backward per step, [`reset`]
/// between steps to recycle buffers.
///
/// [`reset`]: Tape::reset
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    pool: HashMap<usize, Vec<Vec<T>>>,
    pool_c: HashMap<usize, Vec<Vec<Complex<T>>>>,
    fft: FftCache<T>,
    convs: HashMap<(usize, usize), FrameConvolver<T>>,
    corrupt_tanh_backward: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            pool: HashMap::new(),
            pool_c: HashMap::new(),
            fft: FftCache::new(),
            convs: HashMap::new(),
            corrupt_tanh_backward: false,
        }
    }

    /// Fault-injection hook for validating the gradient checker itself:
    /// when set, the backward rule for `tanh` is scaled by 1.01, which any
    /// sound finite-difference comparison must flag.
    pub fn set_corrupt_tanh_backward(&mut self, on: bool) {
        self.corrupt_tanh_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ------------------------------------------------------------------
    // Buffer pool
    // ------------------------------------------------------------------

    fn acquire(pool: &mut HashMap<usize, Vec<Vec<T>>>, len: usize) -> Vec<T> {
        if let Some(bucket) = pool.get_mut(&len) {
            if let Some(mut buf) = bucket.pop() {
                buf.iter_mut().for_each(|v| *v = T::zero());
                return buf;
            }
        }
        vec![T::zero(); len]
    }

    fn acquire_c(pool: &mut HashMap<usize, Vec<Vec<Complex<T>>>>, len: usize) -> Vec<Complex<T>> {
        if let Some(bucket) = pool.get_mut(&len) {
            if let Some(mut buf) = bucket.pop() {
                buf.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
                return buf;
            }
        }
        vec![Complex::new(T::zero(), T::zero()); len]
    }

    fn release(pool: &mut HashMap<usize, Vec<Vec<T>>>, buf: Vec<T>) {
        if buf.capacity() > 0 {
            pool.entry(buf.len()).or_default().push(buf);
        }
    }

    fn release_c(pool: &mut HashMap<usize, Vec<Vec<Complex<T>>>>, buf: Vec<Complex<T>>) {
        if buf.capacity() > 0 {
            pool.entry(buf.len()).or_default().push(buf);
        }
    }

    /// Clears all nodes and gradients, returning their buffers to the pool.
    /// FFT plans and convolver workspaces persist.
    pub fn reset(&mut self) {
        for node in self.nodes.drain(..) {
            if !node.values.is_empty() {
                Self::release(&mut self.pool, node.values);
            }
            match node.op {
                Op::BatchNorm { xhat, inv_std, .. } => {
                    Self::release(&mut self.pool, xhat);
                    Self::release(&mut self.pool, inv_std);
                }
                Op::SoftmaxCrossEntropy { softmax, .. } => Self::release(&mut self.pool, softmax),
                Op::GaborConv { taps, x_spec, .. } => {
                    Self::release(&mut self.pool, taps);
                    Self::release_c(&mut self.pool_c, x_spec);
                }
                Op::SpectrumMag { spec, .. } => Self::release_c(&mut self.pool_c, spec),
                Op::CentroidDev { num, den, .. } => {
                    Self::release(&mut self.pool, num);
                    Self::release(&mut self.pool, den);
                }
                _ => {}
            }
        }
        for g in self.grads.drain(..).flatten() {
            Self::release(&mut self.pool, g);
        }
    }

    // ------------------------------------------------------------------
    // Node access
    // ------------------------------------------------------------------

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last [`backward`](Tape::backward) head with respect
    /// to `id`, or `None` if no differentiable path reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Accumulates `acc += grad(id)`. Returns `false` (leaving `acc`
    /// untouched, i.e. contributing zeros) when the node was not reached by
    /// the backward pass — the caller can surface that as a diagnostic
    /// without treating it as an error.
    pub fn accumulate_grad(&self, id: NodeId, acc: &mut [T]) -> bool {
        match self.grad(id) {
            Some(g) => {
                assert_eq!(g.len(), acc.len(), "gradient length mismatch");
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv;
                }
                true
            }
            None => false,
        }
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node { rows, cols, values, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    pub fn leaf(&mut self, values: &[T], rows: usize, cols: usize, requires_grad: bool) -> NodeId {
        assert_eq!(values.len(), rows * cols, "leaf shape mismatch");
        let mut buf = Self::acquire(&mut self.pool, values.len());
        buf.copy_from_slice(values);
        self.push(rows, cols, buf, requires_grad, Op::Leaf)
    }

    pub fn leaf_owned(&mut self, values: Vec<T>, rows: usize, cols: usize, requires_grad: bool) -> NodeId {
        assert_eq!(values.len(), rows * cols, "leaf shape mismatch");
        self.push(rows, cols, values, requires_grad, Op::Leaf)
    }

    /// Constant 1x1 node.
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        let mut buf = Self::acquire(&mut self.pool, 1);
        buf[0] = r(v);
        self.push(1, 1, buf, false, Op::Leaf)
    }

    /// Re-enters `id`'s current values as a fresh constant leaf: gradients
    /// do not flow past it. This is the truncation point for windowed
    /// backpropagation through the adaptation recurrence.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let (rows, cols) = self.shape(id);
        let mut buf = Self::acquire(&mut self.pool, rows * cols);
        buf.copy_from_slice(&self.nodes[id.0].values);
        self.push(rows, cols, buf, false, Op::Leaf)
    }

    // ------------------------------------------------------------------
    // Elementwise and linear ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        assert_eq!((ra, ca), self.shape(b), "add shape mismatch");
        let mut out = Self::acquire(&mut self.pool, ra * ca);
        for ((o, &x), &y) in out.iter_mut().zip(self.value(a)).zip(self.value(b)) {
            *o = x + y;
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(ra, ca, out, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        assert_eq!((ra, ca), self.shape(b), "sub shape mismatch");
        let mut out = Self::acquire(&mut self.pool, ra * ca);
        for ((o, &x), &y) in out.iter_mut().zip(self.value(a)).zip(self.value(b)) {
            *o = x - y;
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(ra, ca, out, rg, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        assert_eq!((ra, ca), self.shape(b), "mul shape mismatch");
        let mut out = Self::acquire(&mut self.pool, ra * ca);
        for ((o, &x), &y) in out.iter_mut().zip(self.value(a)).zip(self.value(b)) {
            *o = x * y;
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(ra, ca, out, rg, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let (rows, cols) = self.shape(x);
        let (s, h): (T, T) = (r(scale), r(shift));
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        for (o, &v) in out.iter_mut().zip(self.value(x)) {
            *o = s * v + h;
        }
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::Affine { x, scale: s })
    }

    /// Dense matrix product `(m x k) * (k x n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dimension mismatch");
        let mut out = Self::acquire(&mut self.pool, m * n);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for l in 0..ka {
                    let x = av[i * ka + l];
                    if x == T::zero() {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(m, n, out, rg, Op::MatMul { a, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        for (o, &v) in out.iter_mut().zip(self.value(x)) {
            *o = if v > T::zero() { v } else { T::zero() };
        }
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        for (o, &v) in out.iter_mut().zip(self.value(x)) {
            *o = v.tanh();
        }
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::Tanh(x))
    }

    /// Normalizes `x` with the provided (constant) statistics, then applies
    /// the learned elementwise scale and shift:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    ///
    /// The statistics are running estimates maintained outside the tape;
    /// gradients flow to `x`, `gamma`, and `beta` only.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> NodeId {
        let (rows, cols) = self.shape(x);
        let len = rows * cols;
        assert_eq!(self.shape(gamma), (rows, cols), "batch_norm gamma shape");
        assert_eq!(self.shape(beta), (rows, cols), "batch_norm beta shape");
        assert_eq!(mean.len(), len, "batch_norm mean length");
        assert_eq!(var.len(), len, "batch_norm var length");
        let epsv: T = r(eps);
        let mut xhat = Self::acquire(&mut self.pool, len);
        let mut inv_std = Self::acquire(&mut self.pool, len);
        let mut out = Self::acquire(&mut self.pool, len);
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for i in 0..len {
                let is = T::one() / (var[i] + epsv).sqrt();
                let xh = (xv[i] - mean[i]) * is;
                inv_std[i] = is;
                xhat[i] = xh;
                out[i] = gv[i] * xh + bv[i];
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(rows, cols, out, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Numerically stable fused softmax + cross-entropy against a hard
    /// label. `logits` must be a column vector; the result is scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        let (rows, cols) = self.shape(logits);
        assert_eq!(cols, 1, "logits must be a column vector");
        assert!(label < rows, "label {label} out of range for {rows} classes");
        let mut softmax = Self::acquire(&mut self.pool, rows);
        let loss;
        {
            let lv = self.value(logits);
            let mut mx = lv[0];
            for &v in lv.iter().skip(1) {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for (s, &v) in softmax.iter_mut().zip(lv) {
                let e = (v - mx).exp();
                *s = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for s in softmax.iter_mut() {
                *s *= inv;
            }
            loss = sum.ln() + mx - lv[label];
        }
        let mut out = Self::acquire(&mut self.pool, 1);
        out[0] = loss;
        let rg = self.needs(logits);
        self.push(1, 1, out, rg, Op::SoftmaxCrossEntropy { logits, label, softmax })
    }

    /// Clamp with straight-through gradient: values pass through the range
    /// `[lo, hi]` untouched; outside, the output saturates and (unlike a
    /// plain clamp) the gradient is zero only where saturation is active,
    /// passing through everywhere in `[lo, hi]` inclusive.
    pub fn clamp_st(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clamp bounds inverted");
        let (rows, cols) = self.shape(x);
        let (lov, hiv): (T, T) = (r(lo), r(hi));
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        for (o, &v) in out.iter_mut().zip(self.value(x)) {
            *o = if v < lov {
                lov
            } else if v > hiv {
                hiv
            } else {
                v
            };
        }
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::ClampSt { x, lo: lov, hi: hiv })
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let len = rows * cols;
        assert!(len > 0, "mean of empty node");
        let mut acc = T::zero();
        for &v in self.value(x) {
            acc += v;
        }
        let mut out = Self::acquire(&mut self.pool, 1);
        out[0] = acc / r(len as f64);
        let rg = self.needs(x);
        self.push(1, 1, out, rg, Op::MeanAll(x))
    }

    /// Per-row mean: `(rows x cols) -> (rows x 1)`.
    pub fn row_mean(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert!(cols > 0, "row_mean of empty rows");
        let inv: T = r(1.0 / cols as f64);
        let mut out = Self::acquire(&mut self.pool, rows);
        {
            let xv = self.value(x);
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = T::zero();
                for &v in &xv[i * cols..(i + 1) * cols] {
                    acc += v;
                }
                *o = acc * inv;
            }
        }
        let rg = self.needs(x);
        self.push(rows, 1, out, rg, Op::RowMean(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        for (o, &v) in out.iter_mut().zip(self.value(x)) {
            *o = v * v;
        }
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::Square(x))
    }

    /// `ln(x + floor)` elementwise; `floor > 0` keeps the op defined (and
    /// its gradient bounded) at silence.
    pub fn log_floor(&mut self, x: NodeId, floor: f64) -> NodeId {
        assert!(floor > 0.0, "log floor must be positive");
        let (rows, cols) = self.shape(x);
        let fl: T = r(floor);
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        for (o, &v) in out.iter_mut().zip(self.value(x)) {
            *o = (v + fl).ln();
        }
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::LogFloor { x, floor: fl })
    }

    /// Stacks `b`'s rows under `a`'s (both with the same column count).
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "concat_rows column mismatch");
        let mut out = Self::acquire(&mut self.pool, (ra + rb) * ca);
        out[..ra * ca].copy_from_slice(self.value(a));
        out[ra * ca..].copy_from_slice(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(ra + rb, ca, out, rg, Op::ConcatRows(a, b))
    }

    /// Reinterprets the row-major values under a new shape with the same
    /// element count.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let (r0, c0) = self.shape(x);
        assert_eq!(r0 * c0, rows * cols, "reshape element count mismatch");
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        out.copy_from_slice(self.value(x));
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::Reshape(x))
    }

    /// First difference across rows: `y[i, :] = x[i+1, :] - x[i, :]`,
    /// `(rows x cols) -> (rows-1 x cols)`.
    pub fn row_diff(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert!(rows >= 2, "row_diff needs at least two rows");
        let mut out = Self::acquire(&mut self.pool, (rows - 1) * cols);
        {
            let xv = self.value(x);
            for i in 0..rows - 1 {
                for j in 0..cols {
                    out[i * cols + j] = xv[(i + 1) * cols + j] - xv[i * cols + j];
                }
            }
        }
        let rg = self.needs(x);
        self.push(rows - 1, cols, out, rg, Op::RowDiff(x))
    }

    // ------------------------------------------------------------------
    // Signal ops
    // ------------------------------------------------------------------

    /// Per-channel Gabor filtering of a frame block: row `i` of `x`
    /// (`channels x frame_len`) is correlated with the taps synthesized at
    /// `q[i]` for channel `i` of `ctx`. Centered same-length correlation,
    /// identical to the inference path in [`crate::gabor`].
    ///
    /// Gradients flow to `q` (via the analytic tap derivative and a lag
    /// correlation) and, when required, to `x` (via the adjoint
    /// correlation).
    pub fn gabor_conv(&mut self, q: NodeId, x: NodeId, ctx: &Arc<GaborConvContext<T>>) -> NodeId {
        let channels = ctx.channels();
        let (qr, qc) = self.shape(q);
        assert_eq!((qr, qc), (channels, 1), "q must be (channels x 1)");
        let (xr, xc) = self.shape(x);
        assert_eq!(xr, channels, "x row count must match channels");
        assert_eq!(xc, ctx.frame_len(), "x column count must match frame length");

        let key = (ctx.frame_len(), ctx.taps_len());
        let conv = self
            .convs
            .entry(key)
            .or_insert_with(|| FrameConvolver::new(key.0, key.1));
        let hb = half_bins(conv.nfft());
        let p = ctx.taps_len();

        let mut taps = Self::acquire(&mut self.pool, channels * p);
        let mut x_spec = Self::acquire_c(&mut self.pool_c, channels * hb);
        let mut out = Self::acquire(&mut self.pool, channels * xc);
        let mut t_spec: Vec<Complex<T>> = Self::acquire_c(&mut self.pool_c, hb);
        let mut xs: Vec<Complex<T>> = Self::acquire_c(&mut self.pool_c, hb);
        {
            let qv = &self.nodes[q.0].values;
            let xv = &self.nodes[x.0].values;
            for ch in 0..channels {
                let trow = &mut taps[ch * p..(ch + 1) * p];
                ctx.synths[ch].taps_into(qv[ch], trow);
                self.fft.rfft_padded(trow, conv.nfft(), &mut t_spec);
                self.fft.rfft_padded(&xv[ch * xc..(ch + 1) * xc], conv.nfft(), &mut xs);
                x_spec[ch * hb..(ch + 1) * hb].copy_from_slice(&xs);
                conv.correlate(&t_spec, &xs, &mut self.fft, &mut out[ch * xc..(ch + 1) * xc]);
            }
        }
        Self::release_c(&mut self.pool_c, t_spec);
        Self::release_c(&mut self.pool_c, xs);
        let rg = self.needs(q) || self.needs(x);
        self.push(channels, xc, out, rg, Op::GaborConv { q, x, ctx: Arc::clone(ctx), taps, x_spec })
    }

    /// Row-wise magnitude spectrum: each row (length <= `nfft`) is
    /// zero-padded to `nfft` and transformed; the output holds the
    /// `nfft/2 + 1` non-negative-frequency magnitudes per row.
    pub fn spectrum_mag(&mut self, x: NodeId, nfft: usize) -> NodeId {
        assert!(nfft.is_power_of_two(), "nfft must be a power of two");
        let (rows, cols) = self.shape(x);
        assert!(cols <= nfft, "row length exceeds transform size");
        let hb = half_bins(nfft);
        let mut spec = Self::acquire_c(&mut self.pool_c, rows * hb);
        let mut out = Self::acquire(&mut self.pool, rows * hb);
        let mut row_spec: Vec<Complex<T>> = Self::acquire_c(&mut self.pool_c, hb);
        {
            let xv = &self.nodes[x.0].values;
            for i in 0..rows {
                self.fft.rfft_padded(&xv[i * cols..(i + 1) * cols], nfft, &mut row_spec);
                spec[i * hb..(i + 1) * hb].copy_from_slice(&row_spec);
                for (o, c) in out[i * hb..(i + 1) * hb].iter_mut().zip(&row_spec) {
                    *o = c.norm();
                }
            }
        }
        Self::release_c(&mut self.pool_c, row_spec);
        let rg = self.needs(x);
        self.push(rows, hb, out, rg, Op::SpectrumMag { x, nfft, spec })
    }

    /// Three-point moving average along each row with shrinking windows at
    /// the edges (edge outputs average the two available neighbors).
    pub fn smooth3(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut out = Self::acquire(&mut self.pool, rows * cols);
        {
            let xv = self.value(x);
            for i in 0..rows {
                let row = &xv[i * cols..(i + 1) * cols];
                let orow = &mut out[i * cols..(i + 1) * cols];
                for j in 0..cols {
                    let lo = j.saturating_sub(1);
                    let hi = (j + 1).min(cols - 1);
                    let mut acc = T::zero();
                    for &v in &row[lo..=hi] {
                        acc += v;
                    }
                    orow[j] = acc / r((hi - lo + 1) as f64);
                }
            }
        }
        let rg = self.needs(x);
        self.push(rows, cols, out, rg, Op::Smooth3(x))
    }

    /// Per-row spectral-centroid deviation, normalized to half the sample
    /// rate: row `i` of `x` holds non-negative magnitudes over the
    /// `nfft/2 + 1` DFT bins, and the output is
    /// `((sum_k f_k * x[i,k] / sum_k x[i,k]) - centers_hz[i]) / (fs/2)`.
    /// An all-zero row yields 0 with zero gradient (no spectral mass means
    /// no deviation evidence).
    pub fn centroid_dev(&mut self, x: NodeId, centers_hz: &[f64], fs_hz: f64, nfft: usize) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert_eq!(rows, centers_hz.len(), "one center per row");
        assert_eq!(cols, half_bins(nfft), "input must span the half spectrum");
        let bin_hz: T = r(fs_hz / nfft as f64);
        let half_span: T = r(fs_hz / 2.0);
        let mut num = Self::acquire(&mut self.pool, rows);
        let mut den = Self::acquire(&mut self.pool, rows);
        let mut out = Self::acquire(&mut self.pool, rows);
        {
            let xv = self.value(x);
            for i in 0..rows {
                let row = &xv[i * cols..(i + 1) * cols];
                let mut n = T::zero();
                let mut d = T::zero();
                for (k, &v) in row.iter().enumerate() {
                    n += r::<T>(k as f64) * bin_hz * v;
                    d += v;
                }
                num[i] = n;
                den[i] = d;
                let fc: T = r(centers_hz[i]);
                out[i] = if d > T::zero() { (n / d - fc) / half_span } else { T::zero() };
            }
        }
        let rg = self.needs(x);
        self.push(rows, 1, out, rg, Op::CentroidDev { x, bin_hz, half_span, num, den })
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar `head`, accumulating gradients for every
    /// node on a differentiable path from it. Gradients are then readable
    /// via [`grad`](Tape::grad) / [`accumulate_grad`](Tape::accumulate_grad)
    /// until the next [`reset`](Tape::reset).
    pub fn backward(&mut self, head: NodeId) {
        assert_eq!(self.shape(head), (1, 1), "backward head must be scalar");
        for g in self.grads.drain(..).flatten() {
            Self::release(&mut self.pool, g);
        }
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[head.0].requires_grad {
            return; // No differentiable path anywhere; all leaves stay disconnected.
        }
        let mut seed = Self::acquire(&mut self.pool, 1);
        seed[0] = T::one();
        self.grads[head.0] = Some(seed);

        // `nodes` is only read below; `grads`, the pools, the FFT cache, and
        // the convolvers are mutated. The destructure makes those borrows
        // disjoint so adjoint rules can read input values while writing
        // input gradients.
        let Tape { nodes, grads, pool, pool_c, fft, convs, corrupt_tanh_backward } = self;
        let nodes: &[Node<T>] = nodes;
        let corrupt = *corrupt_tanh_backward;

        for i in (0..=head.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let cols = nodes[i].cols;
            // Ensures a gradient buffer exists for node `t` and returns it
            // (zero-initialized on first touch). Callers gate on
            // `requires_grad` so constants never get buffers.
            macro_rules! gbuf {
                ($t:expr) => {{
                    let t: NodeId = $t;
                    debug_assert!(t.0 < i, "inputs precede outputs on the tape");
                    if grads[t.0].is_none() {
                        let len = nodes[t.0].rows * nodes[t.0].cols;
                        grads[t.0] = Some(Self::acquire(pool, len));
                    }
                    grads[t.0].as_mut().unwrap()
                }};
            }
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if nodes[a.0].requires_grad {
                        let da = gbuf!(*a);
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let db = gbuf!(*b);
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[a.0].requires_grad {
                        let da = gbuf!(*a);
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let db = gbuf!(*b);
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let bv = &nodes[b.0].values;
                        let da = gbuf!(*a);
                        for ((d, &gv), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let av = &nodes[a.0].values;
                        let db = gbuf!(*b);
                        for ((d, &gv), &x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    if nodes[x.0].requires_grad {
                        let s = *scale;
                        let dx = gbuf!(*x);
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv * s;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                    let n = nodes[b.0].cols;
                    if nodes[a.0].requires_grad {
                        let bv = &nodes[b.0].values;
                        let da = gbuf!(*a);
                        // dA[i,l] += sum_j G[i,j] * B[l,j]
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for l in 0..k {
                                let mut acc = T::zero();
                                let brow = &bv[l * n..(l + 1) * n];
                                for (gv, &y) in grow.iter().zip(brow) {
                                    acc += *gv * y;
                                }
                                da[i2 * k + l] += acc;
                            }
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let av = &nodes[a.0].values;
                        let db = gbuf!(*b);
                        // dB[l,j] += sum_i A[i,l] * G[i,j]
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for l in 0..k {
                                let x = av[i2 * k + l];
                                if x == T::zero() {
                                    continue;
                                }
                                let drow = &mut db[l * n..(l + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    if nodes[x.0].requires_grad {
                        let xv = &nodes[x.0].values;
                        let dx = gbuf!(*x);
                        for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            if v > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    if nodes[x.0].requires_grad {
                        let yv = &nodes[i].values;
                        let factor: T = if corrupt { r(1.01) } else { T::one() };
                        let dx = gbuf!(*x);
                        for ((d, &gv), &y) in dx.iter_mut().zip(&g).zip(yv) {
                            *d += gv * (T::one() - y * y) * factor;
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    if nodes[x.0].requires_grad {
                        let gv2 = &nodes[gamma.0].values;
                        let dx = gbuf!(*x);
                        for (((d, &gv), &gm), &is) in
                            dx.iter_mut().zip(&g).zip(gv2).zip(inv_std)
                        {
                            *d += gv * gm * is;
                        }
                    }
                    if nodes[gamma.0].requires_grad {
                        let dg = gbuf!(*gamma);
                        for ((d, &gv), &xhv) in dg.iter_mut().zip(&g).zip(xhat) {
                            *d += gv * xhv;
                        }
                    }
                    if nodes[beta.0].requires_grad {
                        let db = gbuf!(*beta);
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, label, softmax } => {
                    if nodes[logits.0].requires_grad {
                        let lbl = *label;
                        let gv = g[0];
                        let dl = gbuf!(*logits);
                        for (j, (d, &pj)) in dl.iter_mut().zip(softmax).enumerate() {
                            let delta = if j == lbl { T::one() } else { T::zero() };
                            *d += gv * (pj - delta);
                        }
                    }
                }
                Op::ClampSt { x, lo, hi } => {
                    if nodes[x.0].requires_grad {
                        let (lov, hiv) = (*lo, *hi);
                        let xv = &nodes[x.0].values;
                        let dx = gbuf!(*x);
                        for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            if v >= lov && v <= hiv {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::MeanAll(x) => {
                    if nodes[x.0].requires_grad {
                        let len = nodes[x.0].rows * nodes[x.0].cols;
                        let gv = g[0] / r(len as f64);
                        let dx = gbuf!(*x);
                        for d in dx.iter_mut() {
                            *d += gv;
                        }
                    }
                }
                Op::RowMean(x) => {
                    if nodes[x.0].requires_grad {
                        let c = nodes[x.0].cols;
                        let inv: T = r(1.0 / c as f64);
                        let dx = gbuf!(*x);
                        for (i2, &gv) in g.iter().enumerate() {
                            let contrib = gv * inv;
                            for d in &mut dx[i2 * c..(i2 + 1) * c] {
                                *d += contrib;
                            }
                        }
                    }
                }
                Op::Square(x) => {
                    if nodes[x.0].requires_grad {
                        let xv = &nodes[x.0].values;
                        let two: T = r(2.0);
                        let dx = gbuf!(*x);
                        for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += gv * two * v;
                        }
                    }
                }
                Op::LogFloor { x, floor } => {
                    if nodes[x.0].requires_grad {
                        let fl = *floor;
                        let xv = &nodes[x.0].values;
                        let dx = gbuf!(*x);
                        for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += gv / (v + fl);
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let la = nodes[a.0].rows * nodes[a.0].cols;
                    if nodes[a.0].requires_grad {
                        let da = gbuf!(*a);
                        for (d, &gv) in da.iter_mut().zip(&g[..la]) {
                            *d += gv;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let db = gbuf!(*b);
                        for (d, &gv) in db.iter_mut().zip(&g[la..]) {
                            *d += gv;
                        }
                    }
                }
                Op::Reshape(x) => {
                    if nodes[x.0].requires_grad {
                        let dx = gbuf!(*x);
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::RowDiff(x) => {
                    if nodes[x.0].requires_grad {
                        let c = cols;
                        let out_rows = nodes[i].rows;
                        let dx = gbuf!(*x);
                        for i2 in 0..out_rows {
                            for j in 0..c {
                                let gv = g[i2 * c + j];
                                dx[(i2 + 1) * c + j] += gv;
                                dx[i2 * c + j] -= gv;
                            }
                        }
                    }
                }
                Op::GaborConv { q, x, ctx, taps, x_spec } => {
                    let channels = ctx.channels();
                    let f_len = ctx.frame_len();
                    let p = ctx.taps_len();
                    let conv = convs
                        .entry((f_len, p))
                        .or_insert_with(|| FrameConvolver::new(f_len, p));
                    let hb = half_bins(conv.nfft());
                    let qv = &nodes[q.0].values;
                    let mut g_spec: Vec<Complex<T>> = Self::acquire_c(pool_c, hb);
                    if nodes[q.0].requires_grad {
                        let mut corr = Self::acquire(pool, p);
                        let mut dtaps = Self::acquire(pool, p);
                        let dq = gbuf!(*q);
                        for ch in 0..channels {
                            fft.rfft_padded(&g[ch * f_len..(ch + 1) * f_len], conv.nfft(), &mut g_spec);
                            conv.lag_correlation(
                                &g_spec,
                                &x_spec[ch * hb..(ch + 1) * hb],
                                fft,
                                &mut corr,
                            );
                            ctx.synths[ch].dq_from_taps(qv[ch], &taps[ch * p..(ch + 1) * p], &mut dtaps);
                            let mut acc = T::zero();
                            for (&dt, &cv) in dtaps.iter().zip(&corr) {
                                acc += dt * cv;
                            }
                            dq[ch] += acc;
                        }
                        Self::release(pool, corr);
                        Self::release(pool, dtaps);
                    }
                    if nodes[x.0].requires_grad {
                        let mut t_spec: Vec<Complex<T>> = Self::acquire_c(pool_c, hb);
                        let dx = gbuf!(*x);
                        for ch in 0..channels {
                            fft.rfft_padded(&g[ch * f_len..(ch + 1) * f_len], conv.nfft(), &mut g_spec);
                            fft.rfft_padded(&taps[ch * p..(ch + 1) * p], conv.nfft(), &mut t_spec);
                            conv.adjoint_frame_grad(
                                &t_spec,
                                &g_spec,
                                fft,
                                &mut dx[ch * f_len..(ch + 1) * f_len],
                            );
                        }
                        Self::release_c(pool_c, t_spec);
                    }
                    Self::release_c(pool_c, g_spec);
                }
                Op::SpectrumMag { x, nfft, spec } => {
                    if nodes[x.0].requires_grad {
                        let n = *nfft;
                        let hb = half_bins(n);
                        let rows = nodes[i].rows;
                        let xc = nodes[x.0].cols;
                        let yv = &nodes[i].values;
                        let mut cgrad = Self::acquire_c(pool_c, n);
                        let dx = gbuf!(*x);
                        for i2 in 0..rows {
                            for c in cgrad.iter_mut() {
                                *c = Complex::new(T::zero(), T::zero());
                            }
                            for k in 0..hb {
                                let mag = yv[i2 * hb + k];
                                if mag > T::zero() {
                                    let scale = g[i2 * hb + k] / mag;
                                    let xs = spec[i2 * hb + k];
                                    cgrad[k] = Complex::new(xs.re * scale, xs.im * scale);
                                }
                            }
                            fft.complex_inverse_inplace(&mut cgrad);
                            for (d, c) in dx[i2 * xc..(i2 + 1) * xc].iter_mut().zip(cgrad.iter()) {
                                *d += c.re;
                            }
                        }
                        Self::release_c(pool_c, cgrad);
                    }
                }
                Op::Smooth3(x) => {
                    if nodes[x.0].requires_grad {
                        let c = cols;
                        let rows = nodes[i].rows;
                        let dx = gbuf!(*x);
                        for i2 in 0..rows {
                            for j in 0..c {
                                let lo = j.saturating_sub(1);
                                let hi = (j + 1).min(c - 1);
                                let w = g[i2 * c + j] / r((hi - lo + 1) as f64);
                                for j2 in lo..=hi {
                                    dx[i2 * c + j2] += w;
                                }
                            }
                        }
                    }
                }
                Op::CentroidDev { x, bin_hz, half_span, num, den } => {
                    if nodes[x.0].requires_grad {
                        let c = nodes[x.0].cols;
                        let rows = nodes[i].rows;
                        let (bh, hs) = (*bin_hz, *half_span);
                        let dx = gbuf!(*x);
                        for i2 in 0..rows {
                            let d = den[i2];
                            if d <= T::zero() {
                                continue;
                            }
                            let centroid = num[i2] / d;
                            let scale = g[i2] / (d * hs);
                            for (k, dv) in dx[i2 * c..(i2 + 1) * c].iter_mut().enumerate() {
                                *dv += scale * (r::<T>(k as f64) * bh - centroid);
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gabor::naive_correlate_same;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(tape: &mut Tape<f64>, vals: &[f64], rg: bool) -> NodeId {
        tape.leaf(vals, vals.len(), 1, rg)
    }

    #[test]
    fn forward_values_match_closed_forms() {
        let mut t = Tape::<f64>::new();
        let a = col(&mut t, &[1.0, -2.0, 3.0], false);
        let b = col(&mut t, &[0.5, 4.0, -1.0], false);
        let s = t.add(a, b);
        assert_eq!(t.value(s), &[1.5, 2.0, 2.0]);
        let d = t.sub(a, b);
        assert_eq!(t.value(d), &[0.5, -6.0, 4.0]);
        let m = t.mul(a, b);
        assert_eq!(t.value(m), &[0.5, -8.0, -3.0]);
        let af = t.affine(a, 2.0, 1.0);
        assert_eq!(t.value(af), &[3.0, -3.0, 7.0]);
        let rl = t.relu(a);
        assert_eq!(t.value(rl), &[1.0, 0.0, 3.0]);
        let sq = t.square(a);
        assert_eq!(t.value(sq), &[1.0, 4.0, 9.0]);
        let mn = t.mean_all(a);
        assert_abs_diff_eq!(t.value(mn)[0], 2.0 / 3.0, epsilon = 1e-15);

        let w = t.leaf(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3, false);
        let v = t.leaf(&[1.0, 0.0, -1.0], 3, 1, false);
        let mv = t.matmul(w, v);
        assert_eq!(t.shape(mv), (2, 1));
        assert_eq!(t.value(mv), &[1.0 - 3.0, 4.0 - 6.0]);

        let rm = t.row_mean(w);
        assert_eq!(t.value(rm), &[2.0, 5.0]);

        let rd = t.row_diff(w);
        assert_eq!(t.shape(rd), (1, 3));
        assert_eq!(t.value(rd), &[3.0, 3.0, 3.0]);

        let cl = t.clamp_st(a, -1.5, 1.5);
        assert_eq!(t.value(cl), &[1.0, -1.5, 1.5]);
    }

    #[test]
    fn softmax_cross_entropy_matches_reference() {
        let mut t = Tape::<f64>::new();
        let logits = col(&mut t, &[0.2, -1.0, 2.5, 0.0], true);
        let loss = t.softmax_cross_entropy(logits, 2);
        let z: Vec<f64> = [0.2f64, -1.0, 2.5, 0.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = z.iter().sum();
        let expect = -(z[2] / sum).ln();
        assert_abs_diff_eq!(t.value(loss)[0], expect, epsilon = 1e-12);

        t.backward(loss);
        let g = t.grad(logits).unwrap();
        for (j, &gv) in g.iter().enumerate() {
            let p = z[j] / sum;
            let target = if j == 2 { p - 1.0 } else { p };
            assert_abs_diff_eq!(gv, target, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_of_square_gradient_is_two_x_over_n() {
        let mut t = Tape::<f64>::new();
        let x = col(&mut t, &[0.5, -1.5, 2.0, 0.25], true);
        let sq = t.square(x);
        let loss = t.mean_all(sq);
        t.backward(loss);
        let g = t.grad(x).unwrap();
        for (gv, xv) in g.iter().zip([0.5, -1.5, 2.0, 0.25]) {
            assert_abs_diff_eq!(*gv, 2.0 * xv / 4.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // loss = mean(x*x + x) => dloss/dx = (2x + 1)/n
        let mut t = Tape::<f64>::new();
        let x = col(&mut t, &[1.0, -0.5, 0.75], true);
        let xx = t.mul(x, x);
        let s = t.add(xx, x);
        let loss = t.mean_all(s);
        t.backward(loss);
        let g = t.grad(x).unwrap();
        for (gv, xv) in g.iter().zip([1.0, -0.5, 0.75]) {
            assert_abs_diff_eq!(*gv, (2.0 * xv + 1.0) / 3.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut t = Tape::<f64>::new();
        let x = col(&mut t, &[2.0], true);
        let y = t.square(x);
        let yd = t.detach(y);
        assert_eq!(t.value(yd), t.value(y));
        assert!(!t.requires_grad(yd));
        let z = t.mul(yd, x);
        let loss = t.mean_all(z);
        t.backward(loss);
        // z = const(4) * x, so dz/dx = 4 (no 2xy term through the detached node).
        assert_abs_diff_eq!(t.grad(x).unwrap()[0], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn disconnected_parameter_reports_no_gradient() {
        let mut t = Tape::<f64>::new();
        let used = col(&mut t, &[1.0, 2.0], true);
        let unused = col(&mut t, &[5.0], true);
        let loss = t.mean_all(used);
        t.backward(loss);
        assert!(t.grad(used).is_some());
        assert!(t.grad(unused).is_none());
        let mut acc = vec![0.0];
        assert!(!t.accumulate_grad(unused, &mut acc));
        assert_eq!(acc, vec![0.0]);
        let mut acc2 = vec![0.0, 0.0];
        assert!(t.accumulate_grad(used, &mut acc2));
        assert_eq!(acc2, vec![0.5, 0.5]);
    }

    #[test]
    fn backward_on_constant_graph_leaves_everything_disconnected() {
        let mut t = Tape::<f64>::new();
        let a = col(&mut t, &[1.0, 2.0], false);
        let loss = t.mean_all(a);
        t.backward(loss);
        assert!(t.grad(a).is_none());
        assert!(t.grad(loss).is_none());
    }

    #[test]
    fn reset_recycles_buffers_and_results_are_identical() {
        let mut t = Tape::<f64>::new();
        let mut outputs = Vec::new();
        for _ in 0..3 {
            let x = col(&mut t, &[0.3, -0.7, 1.1], true);
            let h = t.tanh(x);
            let loss = t.mean_all(h);
            t.backward(loss);
            outputs.push((t.value(loss)[0], t.grad(x).unwrap().to_vec()));
            t.reset();
            assert!(t.is_empty());
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[1], outputs[2]);
    }

    #[test]
    fn corrupt_tanh_hook_scales_only_tanh_backward() {
        let run = |corrupt: bool| -> (f64, f64) {
            let mut t = Tape::<f64>::new();
            t.set_corrupt_tanh_backward(corrupt);
            let x = col(&mut t, &[0.4], true);
            let y = t.tanh(x);
            let loss = t.mean_all(y);
            t.backward(loss);
            (t.value(loss)[0], t.grad(x).unwrap()[0])
        };
        let (clean_val, clean_grad) = run(false);
        let (bad_val, bad_grad) = run(true);
        assert_eq!(clean_val, bad_val, "forward must be untouched");
        assert_abs_diff_eq!(bad_grad, clean_grad * 1.01, epsilon = 1e-15);
    }

    #[test]
    fn gabor_conv_forward_matches_inference_filter_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let centers = [900.0, 2100.0, 3600.0];
        let (p, f_len) = (31usize, 64usize);
        let ctx = Arc::new(GaborConvContext::<f64>::new(&centers, 16_000.0, p, f_len).unwrap());
        let q_vals = [1.4, 2.0, 3.1];
        let x_vals: Vec<f64> = (0..3 * f_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut t = Tape::<f64>::new();
        let q = t.leaf(&q_vals, 3, 1, true);
        let x = t.leaf(&x_vals, 3, f_len, false);
        let y = t.gabor_conv(q, x, &ctx);
        assert_eq!(t.shape(y), (3, f_len));

        for ch in 0..3 {
            let spec = GaborFilterSpec::new(centers[ch], q_vals[ch], p, 16_000.0).unwrap();
            let taps: Vec<f64> = crate::gabor::synth_gabor(&spec).unwrap();
            let mut direct = vec![0.0; f_len];
            naive_correlate_same(&x_vals[ch * f_len..(ch + 1) * f_len], &taps, &mut direct);
            for (a, b) in t.value(y)[ch * f_len..(ch + 1) * f_len].iter().zip(&direct) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn spectrum_mag_forward_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_vals: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&x_vals, 1, 24, false);
        let y = t.spectrum_mag(x, 32);
        assert_eq!(t.shape(y), (1, 17));
        for k in 0..17 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &v) in x_vals.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 32.0;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            assert_abs_diff_eq!(t.value(y)[k], re.hypot(im), epsilon = 1e-10);
        }
    }

    #[test]
    fn centroid_dev_forward_matches_weighted_average() {
        let mut t = Tape::<f64>::new();
        // nfft = 32 at 16 kHz -> bins every 500 Hz, 17 bins.
        let mut vals = vec![0.0; 17];
        vals[4] = 2.0; // 2000 Hz
        vals[8] = 2.0; // 4000 Hz
        let x = t.leaf(&vals, 1, 17, false);
        let y = t.centroid_dev(x, &[2500.0], 16_000.0, 32);
        // centroid = 3000 Hz, deviation = (3000 - 2500) / 8000
        assert_abs_diff_eq!(t.value(y)[0], 500.0 / 8000.0, epsilon = 1e-12);

        let zeros = vec![0.0; 17];
        let xz = t.leaf(&zeros, 1, 17, true);
        let yz = t.centroid_dev(xz, &[2500.0], 16_000.0, 32);
        assert_eq!(t.value(yz)[0], 0.0);
        let loss = t.mean_all(yz);
        t.backward(loss);
        // All-zero row: no gradient path into the magnitudes.
        let g = t.grad(xz).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth3_forward_averages_with_edge_shrink() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&[1.0, 2.0, 3.0, 4.0], 1, 4, false);
        let y = t.smooth3(x);
        assert_eq!(t.value(y), &[1.5, 2.0, 3.0, 3.5]);
    }

    #[test]
    fn concat_and_reshape_round_trip_values() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(&[1.0, 2.0], 2, 1, true);
        let b = t.leaf(&[3.0, 4.0, 5.0], 3, 1, false);
        let c = t.concat_rows(a, b);
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let m = t.leaf(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3, true);
        let rs = t.reshape(m, 6, 1);
        assert_eq!(t.value(rs), t.value(m));
        assert_eq!(t.shape(rs), (6, 1));
    }

    #[test]
    fn batch_norm_uses_supplied_statistics() {
        let mut t = Tape::<f64>::new();
        let x = col(&mut t, &[1.0, 2.0], true);
        let gamma = col(&mut t, &[2.0, 0.5], true);
        let beta = col(&mut t, &[0.1, -0.1], true);
        let y = t.batch_norm(x, gamma, beta, &[0.5, 1.0], &[4.0, 0.25], 0.0);
        // (1-0.5)/2 * 2 + 0.1 = 0.6 ; (2-1)/0.5 * 0.5 - 0.1 = 0.9
        assert_abs_diff_eq!(t.value(y)[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(y)[1], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn op_name_registry_has_no_duplicates() {
        let mut seen = std::collections::HashSet::new();
        for name in OP_NAMES {
            assert!(seen.insert(name), "duplicate op name {name}");
        }
    }
}
