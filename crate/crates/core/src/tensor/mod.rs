//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The [`Tape`] is an append-only arena of operation nodes; construction
//! order is the topological order, and one [`Tape::backward`] pass
//! accumulates gradients into every `requires_grad` leaf exactly once.
//! Everything is row-major and single-threaded per tape; independent tapes
//! can run on separate threads.

pub mod gradcheck;
pub mod kernels;

use crate::scalar::Scalar;
use kernels::{matmul_nn, matmul_nt, matmul_tn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of range for vocabulary of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("{op} requires {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
}

/// A plain dense value: row-major data plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} wants {expect} elements, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::ZERO; n], requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v], requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    /// c[m,n] = a[m,k] · b[k,n]
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    /// c[i] = a[i] · b[i] per batch item, `nt` reads b transposed ([n,k]).
    BatchedMatmul { a: TensorId, b: TensorId, batch: usize, m: usize, k: usize, n: usize, nt: bool },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: T },
    /// Per-row normalization of width `dim`; `scale` has `dim` entries.
    LayerNorm {
        x: TensorId,
        scale: TensorId,
        dim: usize,
        subtract_mean: bool,
        saved_mean: Vec<T>,
        saved_inv: Vec<T>,
    },
    Gelu { x: TensorId, saved_tanh: Vec<T> },
    SquaredRelu { x: TensorId },
    /// Row softmax over the last axis; `causal: Some(t)` masks j > i for rows
    /// interpreted as [(batch·heads)·t, t].
    Softmax { x: TensorId, cols: usize, causal: Option<usize> },
    /// Pointwise attention: y = scale · relu(x)² on the causal triangle.
    CausalSquaredRelu { x: TensorId, t: usize, scale: T },
    Embed { weights: TensorId, ids: Vec<usize>, dim: usize },
    PickTarget { x: TensorId, targets: Vec<usize>, cols: usize },
    /// Row log-sum-exp (the log-partition of a row softmax).
    Lse { x: TensorId, cols: usize },
    Mean { x: TensorId },
    Sum { x: TensorId },
    /// Rotary position rotation on [batch, t, dh] with half-split pairing.
    Rotary { x: TensorId, t: usize, dh: usize, table: Vec<(T, T)> },
    /// y = target_rms · x / sqrt(mean(x²) + guard) per row of width `dim`.
    RmsRescale { x: TensorId, dim: usize, target_rms: T, saved_inv: Vec<T> },
    /// [b·t, h·dh] -> [b·h, t, dh]
    SplitHeads { x: TensorId, b: usize, t: usize, h: usize, dh: usize },
    /// [b·h, t, dh] -> [b·t, h·dh]
    MergeHeads { x: TensorId, b: usize, t: usize, h: usize, dh: usize },
}

/// Recorded computation graph. Operations append nodes; `backward` walks the
/// record in reverse.
///
/// Value and gradient buffers are recycled through a size-keyed pool across
/// `clear` calls; per-step shapes repeat, so steady-state training reuses
/// every buffer instead of bouncing large allocations off the OS.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    pool: std::collections::HashMap<usize, Vec<Vec<T>>>,
    non_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            pool: std::collections::HashMap::new(),
            non_finite: false,
        }
    }

    /// Retires all nodes, returning their buffers to the pool.
    pub fn clear(&mut self) {
        for node in self.nodes.drain(..) {
            let buf = node.value;
            self.pool.entry(buf.len()).or_default().push(buf);
        }
        self.non_finite = false;
    }

    /// A buffer of `len` holding arbitrary stale values; the caller must
    /// overwrite every element.
    fn alloc_full(&mut self, len: usize) -> Vec<T> {
        match self.pool.get_mut(&len).and_then(Vec::pop) {
            Some(buf) => buf,
            None => vec![T::ZERO; len],
        }
    }

    fn alloc_zeroed(&mut self, len: usize) -> Vec<T> {
        match self.pool.get_mut(&len).and_then(Vec::pop) {
            Some(mut buf) => {
                buf.fill(T::ZERO);
                buf
            }
            None => vec![T::ZERO; len],
        }
    }

    fn alloc_copy(&mut self, src: &[T]) -> Vec<T> {
        let mut buf = self.alloc_full(src.len());
        buf.copy_from_slice(src);
        buf
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any softmax/log-partition input went non-finite. Divergence
    /// is an observation, not an error, so ops keep running.
    pub fn saw_non_finite(&self) -> bool {
        self.non_finite
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> TensorId {
        let data = self.alloc_copy(&t.data);
        self.push(t.shape.clone(), data, t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> TensorId {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: "two 2-d operands", got: sa.to_vec() });
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions disagree: {sa:?} vs {sb:?}"),
            });
        }
        let mut out = self.alloc_zeroed(m * n);
        matmul_nn(&mut out, self.value(a), self.value(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b, m, k, n }))
    }

    /// Batched matmul on [batch, m, k] · [batch, k, n] (or [batch, n, k] when
    /// `nt`, computing a · bᵀ per item).
    pub fn batched_matmul(&mut self, a: TensorId, b: TensorId, nt: bool) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "batched_matmul",
                detail: format!("want matching 3-d operands, got {sa:?} vs {sb:?}"),
            });
        }
        let batch = sa[0];
        let (m, k) = (sa[1], sa[2]);
        let (n, kb) = if nt { (sb[1], sb[2]) } else { (sb[2], sb[1]) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "batched_matmul",
                detail: format!("inner dimensions disagree: {sa:?} vs {sb:?} (nt={nt})"),
            });
        }
        let mut out = self.alloc_zeroed(batch * m * n);
        for i in 0..batch {
            let av = &self.nodes[a.0].value[i * m * k..(i + 1) * m * k];
            let bv = &self.nodes[b.0].value[i * n * k..(i + 1) * n * k];
            let cv = &mut out[i * m * n..(i + 1) * m * n];
            if nt {
                matmul_nt(cv, av, bv, m, k, n);
            } else {
                matmul_nn(cv, av, bv, m, k, n);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![batch, m, n], out, rg, Op::BatchedMatmul { a, b, batch, m, k, n, nt }))
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut value = self.alloc_full(self.nodes[a.0].value.len());
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..av.len() {
                value[i] = f(av[i], bv[i]);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> TensorId {
        let mut value = self.alloc_full(self.nodes[a.0].value.len());
        let av = &self.nodes[a.0].value;
        for i in 0..av.len() {
            value[i] = av[i] * c;
        }
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(shape, value, rg, Op::Scale { a, c })
    }

    /// Layernorm without bias over the trailing axis.
    ///
    /// With `subtract_mean` the input is centered first (standard layernorm);
    /// without, it normalizes by the raw root mean square.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        scale: TensorId,
        eps: T,
        subtract_mean: bool,
    ) -> Result<TensorId, TensorError> {
        let dim = *self.shape(x).last().unwrap_or(&0);
        self.layernorm_grouped(x, scale, dim, eps, subtract_mean)
    }

    /// Layernorm over groups of `dim` consecutive elements; per-head
    /// qk-layernorm normalizes each head chunk with one shared `dim`-wide
    /// learnable scale.
    pub fn layernorm_grouped(
        &mut self,
        x: TensorId,
        scale: TensorId,
        dim: usize,
        eps: T,
        subtract_mean: bool,
    ) -> Result<TensorId, TensorError> {
        let numel = self.nodes[x.0].value.len();
        if dim == 0 || numel % dim != 0 || self.shape(scale) != [dim] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                detail: format!(
                    "width {dim} incompatible with {numel} elements or scale {:?}",
                    self.shape(scale)
                ),
            });
        }
        let rows = numel / dim;
        let inv_n = T::ONE / T::from_usize(dim);
        let mut value = self.alloc_full(numel);
        let mut saved_mean = self.alloc_full(rows);
        let mut saved_inv = self.alloc_full(rows);
        {
            let xv = &self.nodes[x.0].value;
            let sv = &self.nodes[scale.0].value;
            for r in 0..rows {
                let row = &xv[r * dim..(r + 1) * dim];
                let mu = if subtract_mean {
                    let mut s = T::ZERO;
                    for &v in row {
                        s += v;
                    }
                    s * inv_n
                } else {
                    T::ZERO
                };
                let mut m = T::ZERO;
                for &v in row {
                    let c = v - mu;
                    m = c.mul_add(c, m);
                }
                let inv = T::ONE / (m * inv_n + eps).sqrt();
                saved_mean[r] = mu;
                saved_inv[r] = inv;
                let out = &mut value[r * dim..(r + 1) * dim];
                for j in 0..dim {
                    out[j] = (row[j] - mu) * inv * sv[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x) || self.requires(scale);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::LayerNorm { x, scale, dim, subtract_mean, saved_mean, saved_inv },
        ))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let a = T::from_f64(0.7978845608028654); // sqrt(2/pi)
        let b = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let mut saved_tanh = self.alloc_full(self.nodes[x.0].value.len());
        let mut value = self.alloc_full(self.nodes[x.0].value.len());
        let xv = &self.nodes[x.0].value;
        for (i, &v) in xv.iter().enumerate() {
            let u = a * (v + b * v * v * v);
            let t = fast_tanh(u);
            saved_tanh[i] = t;
            value[i] = half * v * (T::ONE + t);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, value, rg, Op::Gelu { x, saved_tanh })
    }

    pub fn squared_relu(&mut self, x: TensorId) -> TensorId {
        let mut value = self.alloc_full(self.nodes[x.0].value.len());
        let xv = &self.nodes[x.0].value;
        for i in 0..xv.len() {
            let r = xv[i].max(T::ZERO);
            value[i] = r * r;
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, value, rg, Op::SquaredRelu { x })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        self.softmax_inner(x, None)
    }

    /// Softmax over the last axis of [batch, t, t] with entries j > i masked
    /// out of the distribution.
    pub fn causal_softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(TensorError::BadRank { op: "causal_softmax", expected: "[batch, t, t]", got: s });
        }
        Ok(self.softmax_inner(x, Some(s[1])))
    }

    fn softmax_inner(&mut self, x: TensorId, causal: Option<usize>) -> TensorId {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let mut value = self.alloc_zeroed(self.nodes[x.0].value.len());
        let xv = &self.nodes[x.0].value;
        let rows = xv.len() / cols.max(1);
        let mut non_finite = false;
        for r in 0..rows {
            // For causal rows only the first i+1 entries participate.
            let limit = causal.map_or(cols, |t| (r % t) + 1);
            let row = &xv[r * cols..r * cols + limit];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let out = &mut value[r * cols..r * cols + limit];
            let mut z = T::ZERO;
            for j in 0..limit {
                let e = (row[j] - mx).exp();
                out[j] = e;
                z += e;
            }
            // NaN/inf anywhere in the row ends up in z.
            if !(mx.is_finite() && z.is_finite()) {
                non_finite = true;
            }
            let inv = T::ONE / z;
            for v in out {
                *v *= inv;
            }
        }
        if non_finite {
            self.non_finite = true;
        }
        let rg = self.requires(x);
        self.push(shape, value, rg, Op::Softmax { x, cols, causal })
    }

    /// Pointwise attention weights: scale · relu(x)² on the causal triangle,
    /// zero elsewhere. No normalization across keys.
    pub fn causal_squared_relu(&mut self, x: TensorId, scale: T) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(TensorError::BadRank { op: "causal_squared_relu", expected: "[batch, t, t]", got: s });
        }
        let t = s[1];
        let mut value = self.alloc_zeroed(self.nodes[x.0].value.len());
        let xv = &self.nodes[x.0].value;
        let rows = xv.len() / t;
        for r in 0..rows {
            let limit = (r % t) + 1;
            for j in 0..limit {
                let v = xv[r * t + j].max(T::ZERO);
                value[r * t + j] = scale * v * v;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(s, value, rg, Op::CausalSquaredRelu { x, t, scale }))
    }

    /// Embedding lookup: rows of `weights` ([vocab, dim]) gathered by id.
    pub fn embed(&mut self, weights: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let s = self.shape(weights).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadRank { op: "embed", expected: "[vocab, dim] weights", got: s });
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::IndexOutOfRange { index: bad, size: vocab });
        }
        let mut value = self.alloc_full(ids.len() * dim);
        let wv = &self.nodes[weights.0].value;
        for (r, &id) in ids.iter().enumerate() {
            value[r * dim..(r + 1) * dim].copy_from_slice(&wv[id * dim..(id + 1) * dim]);
        }
        let rg = self.requires(weights);
        Ok(self.push(
            vec![ids.len(), dim],
            value,
            rg,
            Op::Embed { weights, ids: ids.to_vec(), dim },
        ))
    }

    /// Picks `x[r, targets[r]]` per row; the gather side of cross-entropy.
    pub fn pick_target(&mut self, x: TensorId, targets: &[usize]) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick_target",
                detail: format!("logits {s:?} vs {} targets", targets.len()),
            });
        }
        let cols = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::IndexOutOfRange { index: bad, size: cols });
        }
        let xv = &self.nodes[x.0].value;
        let value: Vec<T> = targets.iter().enumerate().map(|(r, &t)| xv[r * cols + t]).collect();
        let rg = self.requires(x);
        Ok(self.push(
            vec![targets.len()],
            value,
            rg,
            Op::PickTarget { x, targets: targets.to_vec(), cols },
        ))
    }

    /// Row log-sum-exp: the true log-partition (max re-added after the
    /// stabilized sum).
    pub fn lse(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadRank { op: "lse", expected: "[rows, cols]", got: s });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut value = self.alloc_full(rows);
        let xv = &self.nodes[x.0].value;
        let mut non_finite = false;
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut z = T::ZERO;
            for &v in row {
                z += (v - mx).exp();
            }
            if !(mx.is_finite() && z.is_finite()) {
                non_finite = true;
            }
            value[r] = mx + z.ln();
        }
        if non_finite {
            self.non_finite = true;
        }
        let rg = self.requires(x);
        Ok(self.push(vec![rows], value, rg, Op::Lse { x, cols }))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let inv = T::ONE / T::from_usize(xv.len().max(1));
        let mut s = T::ZERO;
        for &v in xv {
            s += v;
        }
        let rg = self.requires(x);
        self.push(vec![], vec![s * inv], rg, Op::Mean { x })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let mut s = T::ZERO;
        for &v in xv {
            s += v;
        }
        let rg = self.requires(x);
        self.push(vec![], vec![s], rg, Op::Sum { x })
    }

    /// Rotary embedding on [batch, t, dh], pairing lane `l` with `l + dh/2`.
    /// Position 0 is the identity rotation.
    pub fn rotary(&mut self, x: TensorId, base: f64) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::BadRank { op: "rotary", expected: "[batch, t, dh]", got: s });
        }
        let (batch, t, dh) = (s[0], s[1], s[2]);
        if dh % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "rotary",
                detail: format!("head dimension {dh} must be even"),
            });
        }
        let half = dh / 2;
        let freqs: Vec<f64> = (0..half).map(|l| base.powf(-2.0 * l as f64 / dh as f64)).collect();
        let mut table = vec![(T::ZERO, T::ZERO); t * half];
        for pos in 0..t {
            for l in 0..half {
                let theta = pos as f64 * freqs[l];
                table[pos * half + l] = (T::from_f64(theta.cos()), T::from_f64(theta.sin()));
            }
        }
        let mut value = self.alloc_full(self.nodes[x.0].value.len());
        let xv = &self.nodes[x.0].value;
        for bi in 0..batch {
            for pos in 0..t {
                let o = (bi * t + pos) * dh;
                for l in 0..half {
                    let (c, sn) = table[pos * half + l];
                    let x0 = xv[o + l];
                    let x1 = xv[o + half + l];
                    value[o + l] = x0 * c - x1 * sn;
                    value[o + half + l] = x0 * sn + x1 * c;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(s, value, rg, Op::Rotary { x, t, dh, table }))
    }

    /// Rescales each row of width `dim` to root mean square `target_rms`,
    /// guarded against zero rows by 1e-12 inside the root.
    pub fn rms_rescale(&mut self, x: TensorId, dim: usize, target_rms: T) -> Result<TensorId, TensorError> {
        let numel = self.nodes[x.0].value.len();
        if dim == 0 || numel % dim != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "rms_rescale",
                detail: format!("width {dim} incompatible with {numel} elements"),
            });
        }
        let guard = T::from_f64(1e-12);
        let rows = numel / dim;
        let inv_n = T::ONE / T::from_usize(dim);
        let mut value = self.alloc_full(numel);
        let mut saved_inv = self.alloc_full(rows);
        let xv = &self.nodes[x.0].value;
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mut m = T::ZERO;
            for &v in row {
                m = v.mul_add(v, m);
            }
            let inv = T::ONE / (m * inv_n + guard).sqrt();
            saved_inv[r] = inv;
            let out = &mut value[r * dim..(r + 1) * dim];
            for j in 0..dim {
                out[j] = row[j] * inv * target_rms;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, value, rg, Op::RmsRescale { x, dim, target_rms, saved_inv }))
    }

    /// [b·t, h·dh] -> [b·h, t, dh]
    pub fn split_heads(&mut self, x: TensorId, b: usize, t: usize, h: usize, dh: usize) -> Result<TensorId, TensorError> {
        if self.nodes[x.0].value.len() != b * t * h * dh {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                detail: format!("{} elements vs b={b} t={t} h={h} dh={dh}", self.nodes[x.0].value.len()),
            });
        }
        let mut value = self.alloc_full(self.nodes[x.0].value.len());
        let xv = &self.nodes[x.0].value;
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let src = (bi * t + ti) * h * dh + hi * dh;
                    let dst = ((bi * h + hi) * t + ti) * dh;
                    value[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![b * h, t, dh], value, rg, Op::SplitHeads { x, b, t, h, dh }))
    }

    /// [b·h, t, dh] -> [b·t, h·dh]
    pub fn merge_heads(&mut self, x: TensorId, b: usize, t: usize, h: usize, dh: usize) -> Result<TensorId, TensorError> {
        if self.nodes[x.0].value.len() != b * t * h * dh {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                detail: format!("{} elements vs b={b} t={t} h={h} dh={dh}", self.nodes[x.0].value.len()),
            });
        }
        let mut value = self.alloc_full(self.nodes[x.0].value.len());
        let xv = &self.nodes[x.0].value;
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let src = ((bi * h + hi) * t + ti) * dh;
                    let dst = (bi * t + ti) * h * dh + hi * dh;
                    value[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![b * t, h * dh], value, rg, Op::MergeHeads { x, b, t, h, dh }))
    }

    /// Mean cross-entropy of row logits against integer targets, built from
    /// `lse` and `pick_target` so the log-partition stays on the tape.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId, TensorError> {
        let z = self.lse(logits)?;
        let picked = self.pick_target(logits, targets)?;
        let per_token = self.sub(z, picked)?;
        Ok(self.mean(per_token))
    }

    /// Runs one reverse pass from a scalar output, returning per-node
    /// gradient buffers for every `requires_grad` node. Hand the result back
    /// through [`Tape::recycle_gradients`] to reuse its buffers.
    pub fn backward(&mut self, output: TensorId) -> Gradients<T> {
        assert!(
            self.nodes[output.0].value.len() == 1,
            "backward expects a scalar output, got shape {:?}",
            self.shape(output)
        );
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(vec![T::ONE]);
        let ctx = BackpropCtx { nodes: &self.nodes, pool: &mut self.pool };
        let mut ctx = ctx;
        for idx in (0..=output.0).rev() {
            if grads[idx].is_none() || !ctx.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            ctx.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Returns gradient buffers to the pool once the caller is done reading.
    pub fn recycle_gradients(&mut self, grads: Gradients<T>) {
        for g in grads.grads.into_iter().flatten() {
            self.pool.entry(g.len()).or_default().push(g);
        }
    }

    /// Returns arbitrary buffers (for example extracted parameter gradients)
    /// to the pool.
    pub fn recycle_buffers(&mut self, bufs: impl IntoIterator<Item = Vec<T>>) {
        for b in bufs {
            self.pool.entry(b.len()).or_default().push(b);
        }
    }
}

struct BackpropCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    pool: &'a mut std::collections::HashMap<usize, Vec<Vec<T>>>,
}

impl<'a, T: Scalar> BackpropCtx<'a, T> {
    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn grad_buf<'b>(&mut self, grads: &'b mut [Option<Vec<T>>], id: TensorId) -> Option<&'b mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| match self.pool.get_mut(&len).and_then(Vec::pop) {
            Some(mut buf) => {
                buf.fill(T::ZERO);
                buf
            }
            None => vec![T::ZERO; len],
        }))
    }

    fn backprop_node(&mut self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                if self.requires(*a) {
                    let bv = &self.nodes[b.0].value;
                    let da = self.grad_buf(grads, *a).unwrap();
                    matmul_nt(da, g, bv, *m, *n, *k);
                }
                if self.requires(*b) {
                    let av = &self.nodes[a.0].value;
                    let db = self.grad_buf(grads, *b).unwrap();
                    matmul_tn(db, av, g, *m, *k, *n);
                }
            }
            Op::BatchedMatmul { a, b, batch, m, k, n, nt } => {
                if self.requires(*a) {
                    let bv = &self.nodes[b.0].value;
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..*batch {
                        let gv = &g[i * m * n..(i + 1) * m * n];
                        let bvi = &bv[i * n * k..(i + 1) * n * k];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if *nt {
                            // c = a·bᵀ with b [n,k]: da = g·b
                            matmul_nn(dai, gv, bvi, *m, *n, *k);
                        } else {
                            matmul_nt(dai, gv, bvi, *m, *n, *k);
                        }
                    }
                }
                if self.requires(*b) {
                    let av = &self.nodes[a.0].value;
                    let db = self.grad_buf(grads, *b).unwrap();
                    for i in 0..*batch {
                        let gv = &g[i * m * n..(i + 1) * m * n];
                        let avi = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * n * k..(i + 1) * n * k];
                        if *nt {
                            // db[j,·] = Σ_i g[i,j]·a[i,·]
                            matmul_tn(dbi, gv, avi, *m, *n, *k);
                        } else {
                            matmul_tn(dbi, avi, gv, *m, *k, *n);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bv = &self.nodes[b.0].value;
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..g.len() {
                        da[i] = g[i].mul_add(bv[i], da[i]);
                    }
                }
                if self.requires(*b) {
                    let av = &self.nodes[a.0].value;
                    let db = self.grad_buf(grads, *b).unwrap();
                    for i in 0..g.len() {
                        db[i] = g[i].mul_add(av[i], db[i]);
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        da[i] = g[i].mul_add(*c, da[i]);
                    }
                }
            }
            Op::LayerNorm { x, scale, dim, subtract_mean, saved_mean, saved_inv } => {
                let dim = *dim;
                let rows = saved_inv.len();
                let inv_n = T::ONE / T::from_usize(dim);
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[scale.0].value;
                let s_rg = self.requires(*scale);
                let mut dscale = if s_rg { Some(vec![T::ZERO; dim]) } else { None };
                if self.requires(*x) {
                    let dx = self.grad_buf(grads, *x).unwrap();
                    for r in 0..rows {
                        let (mu, inv) = (saved_mean[r], saved_inv[r]);
                        let row = &xv[r * dim..(r + 1) * dim];
                        let grow = &g[r * dim..(r + 1) * dim];
                        let mut dot = T::ZERO;
                        let mut gsum = T::ZERO;
                        for j in 0..dim {
                            let gh = grow[j] * sv[j];
                            dot = gh.mul_add(row[j] - mu, dot);
                            gsum += gh;
                        }
                        let proj = dot * inv * inv * inv_n;
                        let gmean = if *subtract_mean { gsum * inv_n } else { T::ZERO };
                        let out = &mut dx[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            let gh = grow[j] * sv[j];
                            out[j] += inv * (gh - gmean - (row[j] - mu) * proj);
                        }
                        if let Some(ds) = dscale.as_mut() {
                            for j in 0..dim {
                                ds[j] = grow[j].mul_add((row[j] - mu) * inv, ds[j]);
                            }
                        }
                    }
                } else if let Some(ds) = dscale.as_mut() {
                    for r in 0..rows {
                        let (mu, inv) = (saved_mean[r], saved_inv[r]);
                        let row = &xv[r * dim..(r + 1) * dim];
                        let grow = &g[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            ds[j] = grow[j].mul_add((row[j] - mu) * inv, ds[j]);
                        }
                    }
                }
                if let Some(ds) = dscale {
                    let buf = self.grad_buf(grads, *scale).unwrap();
                    for (d, s) in buf.iter_mut().zip(ds) {
                        *d += s;
                    }
                }
            }
            Op::Gelu { x, saved_tanh } => {
                if self.requires(*x) {
                    let a = T::from_f64(0.7978845608028654);
                    let b3 = T::from_f64(3.0 * 0.044715);
                    let half = T::from_f64(0.5);
                    let xv = &self.nodes[x.0].value;
                    let dx = self.grad_buf(grads, *x).unwrap();
                    for i in 0..g.len() {
                        let v = xv[i];
                        let t = saved_tanh[i];
                        let du = a * (T::ONE + b3 * v * v);
                        let d = half * (T::ONE + t) + half * v * (T::ONE - t * t) * du;
                        dx[i] = g[i].mul_add(d, dx[i]);
                    }
                }
            }
            Op::SquaredRelu { x } => {
                if self.requires(*x) {
                    let two = T::from_f64(2.0);
                    let xv = &self.nodes[x.0].value;
                    let dx = self.grad_buf(grads, *x).unwrap();
                    for i in 0..g.len() {
                        let r = xv[i].max(T::ZERO);
                        dx[i] = g[i].mul_add(two * r, dx[i]);
                    }
                }
            }
            Op::Softmax { x, cols, causal } => {
                if self.requires(*x) {
                    let y = &node.value;
                    let rows = y.len() / (*cols).max(1);
                    let dx = self.grad_buf(grads, *x).unwrap();
                    for r in 0..rows {
                        let limit = causal.map_or(*cols, |t| (r % t) + 1);
                        let yr = &y[r * cols..r * cols + limit];
                        let gr = &g[r * cols..r * cols + limit];
                        let mut dot = T::ZERO;
                        for j in 0..limit {
                            dot = gr[j].mul_add(yr[j], dot);
                        }
                        let out = &mut dx[r * cols..r * cols + limit];
                        for j in 0..limit {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CausalSquaredRelu { x, t, scale } => {
                if self.requires(*x) {
                    let two_s = T::from_f64(2.0) * *scale;
                    let xv = &self.nodes[x.0].value;
                    let dx = self.grad_buf(grads, *x).unwrap();
                    let rows = xv.len() / t;
                    for r in 0..rows {
                        let limit = (r % t) + 1;
                        for j in 0..limit {
                            let i = r * t + j;
                            let rv = xv[i].max(T::ZERO);
                            dx[i] = g[i].mul_add(two_s * rv, dx[i]);
                        }
                    }
                }
            }
            Op::Embed { weights, ids, dim } => {
                if let Some(dw) = self.grad_buf(grads, *weights) {
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = &g[r * dim..(r + 1) * dim];
                        let drow = &mut dw[id * dim..(id + 1) * dim];
                        for j in 0..*dim {
                            drow[j] += grow[j];
                        }
                    }
                }
            }
            Op::PickTarget { x, targets, cols } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, &t) in targets.iter().enumerate() {
                        dx[r * cols + t] += g[r];
                    }
                }
            }
            Op::Lse { x, cols } => {
                if self.requires(*x) {
                    let xv = &self.nodes[x.0].value;
                    let lse = &node.value;
                    let dx = self.grad_buf(grads, *x).unwrap();
                    for r in 0..lse.len() {
                        let base = r * cols;
                        for j in 0..*cols {
                            dx[base + j] = g[r].mul_add((xv[base + j] - lse[r]).exp(), dx[base + j]);
                        }
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let gv = g[0] / T::from_usize(dx.len().max(1));
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Rotary { x, t, dh, table } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let half = dh / 2;
                    let batch = dx.len() / (t * dh);
                    for bi in 0..batch {
                        for pos in 0..*t {
                            let o = (bi * t + pos) * dh;
                            for l in 0..half {
                                let (c, sn) = table[pos * half + l];
                                let g0 = g[o + l];
                                let g1 = g[o + half + l];
                                dx[o + l] += g0 * c + g1 * sn;
                                dx[o + half + l] += g1 * c - g0 * sn;
                            }
                        }
                    }
                }
            }
            Op::RmsRescale { x, dim, target_rms, saved_inv } => {
                if self.requires(*x) {
                    let xv = &self.nodes[x.0].value;
                    let inv_n = T::ONE / T::from_usize(*dim);
                    let dx = self.grad_buf(grads, *x).unwrap();
                    for r in 0..saved_inv.len() {
                        let inv = saved_inv[r];
                        let row = &xv[r * dim..(r + 1) * dim];
                        let grow = &g[r * dim..(r + 1) * dim];
                        let mut dot = T::ZERO;
                        for j in 0..*dim {
                            dot = grow[j].mul_add(row[j], dot);
                        }
                        let proj = dot * inv * inv * inv_n;
                        let s_inv = *target_rms * inv;
                        let out = &mut dx[r * dim..(r + 1) * dim];
                        for j in 0..*dim {
                            out[j] += s_inv * (grow[j] - row[j] * proj);
                        }
                    }
                }
            }
            Op::SplitHeads { x, b, t, h, dh } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for bi in 0..*b {
                        for ti in 0..*t {
                            for hi in 0..*h {
                                let src = (bi * t + ti) * h * dh + hi * dh;
                                let dst = ((bi * h + hi) * t + ti) * dh;
                                for e in 0..*dh {
                                    dx[src + e] += g[dst + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, b, t, h, dh } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for bi in 0..*b {
                        for hi in 0..*h {
                            for ti in 0..*t {
                                let src = ((bi * h + hi) * t + ti) * dh;
                                let dst = (bi * t + ti) * h * dh + hi * dh;
                                for e in 0..*dh {
                                    dx[src + e] += g[dst + e];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffers produced by one backward pass, indexed by tensor id.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, taking ownership of the buffer.
    pub fn take(&mut self, id: TensorId) -> Option<Vec<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// tanh via exp; one exponential instead of a libm tanh call. Saturates
/// beyond |x| = 20 where the true value is 1 to machine precision.
#[inline(always)]
pub fn fast_tanh<T: Scalar>(x: T) -> T {
    let bound = T::from_f64(20.0);
    if x > bound {
        return T::ONE;
    }
    if x < -bound {
        return -T::ONE;
    }
    let two = T::from_f64(2.0);
    let e = (two * x).exp();
    (e - T::ONE) / (e + T::ONE)
}

/// Analytic layernorm input gradient for the no-bias, mean-zero form
/// `z = scale ⊙ x / sqrt(mean(x²) + eps)`:
///
/// `∇x = (1/√m) (scale ⊙ ∇z − x ⊙ ⟨∇z, scale ⊙ x⟩ / (n·m))` with
/// `m = mean(x²) + eps`.
pub fn layernorm_grad_analytic<T: Scalar>(x: &[T], scale: &[T], upstream: &[T], eps: T) -> Vec<T> {
    let n = x.len();
    assert_eq!(scale.len(), n);
    assert_eq!(upstream.len(), n);
    let inv_n = T::ONE / T::from_usize(n);
    let mut m = T::ZERO;
    for &v in x {
        m = v.mul_add(v, m);
    }
    m = m * inv_n + eps;
    let r = T::ONE / m.sqrt();
    let mut dot = T::ZERO;
    for i in 0..n {
        dot = (upstream[i] * scale[i]).mul_add(x[i], dot);
    }
    let proj = dot / (T::from_usize(n) * m);
    (0..n).map(|i| r * (scale[i] * upstream[i] - x[i] * proj)).collect()
}
