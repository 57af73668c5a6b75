//! Minimal reverse-mode differentiation over row-major 2-D tensors.
//!
//! Images are stored NHWC-flattened: a batch of `N` frames of `H×W` pixels with
//! `C` channels is a `[N·H·W, C]` tensor, so a 3×3 convolution is an
//! `im2col` gather followed by one matrix product, and flattening a frame to
//! `[N, H·W·C]` is a free reshape.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! exact reverse, so every node's adjoint is complete before it is consumed.

use num_traits::Float;
use std::fmt::Debug;

/// Scalar types the tape can run on.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `c = alpha · op(a) · op(b) + beta · c` on row-major buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                // op(a) is m×k: stored m×k (row stride k) or k×m (row stride m).
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: extents and strides describe in-bounds views checked above;
                // `c` is a distinct mutable borrow.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor buffer length");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| U::from(*v).unwrap()).collect() }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a · op(b)`; `b` is `[k, m]`, or `[m, k]` when transposed.
    MatMul { a: Var, b: Var, tb: bool },
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    /// 3×3, stride 1, zero padding 1 on `h×w` frames.
    Im2col { x: Var, h: usize, w: usize },
    Reshape { x: Var },
    /// Repeats each row `times` times consecutively.
    BroadcastRows { x: Var, times: usize },
    ConcatCols { a: Var, b: Var },
    /// Forward value supplied by the caller; the adjoint passes to `x` unchanged.
    StraightThrough { x: Var },
    /// Mean of squared differences over all entries; `target` gets no gradient.
    Mse { pred: Var, target: Var },
    /// `mean ‖sg(z) − e‖² + β mean ‖z − sg(e)‖²` with `e` the selected codes.
    VqLoss { z: Var, codebook: Var, codes: Vec<usize>, beta: f64 },
    /// Scalar `Σ wᵢ xᵢ` over scalar nodes.
    WeightedSum { terms: Vec<(Var, f64)> },
}

pub struct Tape<T> {
    ops: Vec<Op>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn t<T: Real>(v: f64) -> T {
    T::from(v).unwrap()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { ops: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0].data[0]
    }

    /// Adjoint of `v` after [`Tape::backward`]; zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let val = &self.values[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(val.rows, val.cols, g.clone()),
            None => Tensor::zeros(val.rows, val.cols),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (k, m) = if tb { (bv.cols, bv.rows) } else { (bv.rows, bv.cols) };
        assert_eq!(av.cols, k, "matmul inner dimension");
        let mut out = Tensor::zeros(av.rows, m);
        T::gemm(av.rows, k, m, T::one(), &av.data, false, &bv.data, tb, T::zero(), &mut out.data);
        self.push(Op::MatMul { a, b, tb }, out)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.values[x.0], &self.values[b.0]);
        assert_eq!(bv.data.len(), xv.cols, "bias width");
        let mut out = xv.clone();
        for row in out.data.chunks_exact_mut(xv.cols) {
            row.iter_mut().zip(&bv.data).for_each(|(v, b)| *v = *v + *b);
        }
        self.push(Op::AddBias { x, b }, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        out.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.push(Op::Relu { x }, out)
    }

    pub fn im2col(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.values[x.0];
        let (c, hw) = (xv.cols, h * w);
        assert_eq!(xv.rows % hw, 0, "im2col rows must be whole frames");
        let n = xv.rows / hw;
        let mut out = Tensor::zeros(xv.rows, 9 * c);
        for f in 0..n {
            for r in 0..h {
                for q in 0..w {
                    let dst = (f * hw + r * w + q) * 9 * c;
                    for (k, (dr, dq)) in KERNEL_OFFSETS.iter().enumerate() {
                        let (rr, qq) = (r as isize + dr, q as isize + dq);
                        if rr < 0 || qq < 0 || rr >= h as isize || qq >= w as isize {
                            continue;
                        }
                        let src = (f * hw + rr as usize * w + qq as usize) * c;
                        out.data[dst + k * c..dst + (k + 1) * c].copy_from_slice(&xv.data[src..src + c]);
                    }
                }
            }
        }
        self.push(Op::Im2col { x, h, w }, out)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(xv.rows * xv.cols, rows * cols, "reshape size");
        let out = Tensor::new(rows, cols, xv.data.clone());
        self.push(Op::Reshape { x }, out)
    }

    pub fn broadcast_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = &self.values[x.0];
        let mut data = Vec::with_capacity(xv.data.len() * times);
        for i in 0..xv.rows {
            for _ in 0..times {
                data.extend_from_slice(xv.row(i));
            }
        }
        let out = Tensor::new(xv.rows * times, xv.cols, data);
        self.push(Op::BroadcastRows { x, times }, out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.rows, bv.rows, "concat rows");
        let mut data = Vec::with_capacity(av.data.len() + bv.data.len());
        for i in 0..av.rows {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::new(av.rows, av.cols + bv.cols, data);
        self.push(Op::ConcatCols { a, b }, out)
    }

    /// Nearest-code quantization of each row of `z` (Euclidean, first index on
    /// ties). The result's adjoint is passed to `z` unchanged.
    pub fn quantize(&mut self, z: Var, codebook: Var) -> (Var, Vec<usize>) {
        let (zv, cb) = (&self.values[z.0], &self.values[codebook.0]);
        assert_eq!(zv.cols, cb.cols, "code width");
        let codes: Vec<usize> = (0..zv.rows).map(|i| nearest_code(zv.row(i), cb)).collect();
        let mut out = Tensor::zeros(zv.rows, zv.cols);
        for (i, &k) in codes.iter().enumerate() {
            out.data[i * zv.cols..(i + 1) * zv.cols].copy_from_slice(cb.row(k));
        }
        (self.push(Op::StraightThrough { x: z }, out), codes)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (p, q) = (&self.values[pred.0], &self.values[target.0]);
        assert_eq!((p.rows, p.cols), (q.rows, q.cols), "mse shapes");
        let s: f64 = p.data.iter().zip(&q.data).map(|(a, b)| (*a - *b).to_f64().unwrap().powi(2)).sum();
        let out = Tensor::new(1, 1, vec![t(s / p.data.len().max(1) as f64)]);
        self.push(Op::Mse { pred, target }, out)
    }

    pub fn vq_loss(&mut self, z: Var, codebook: Var, codes: &[usize], beta: f64) -> Var {
        let (zv, cb) = (&self.values[z.0], &self.values[codebook.0]);
        let mut s = 0.0;
        for (i, &k) in codes.iter().enumerate() {
            s += zv.row(i).iter().zip(cb.row(k)).map(|(a, b)| (*a - *b).to_f64().unwrap().powi(2)).sum::<f64>();
        }
        let mean = s / zv.data.len().max(1) as f64;
        let out = Tensor::new(1, 1, vec![t((1.0 + beta) * mean)]);
        self.push(Op::VqLoss { z, codebook, codes: codes.to_vec(), beta }, out)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms.iter().map(|(v, w)| w * self.scalar(*v).to_f64().unwrap()).sum();
        self.push(Op::WeightedSum { terms: terms.to_vec() }, Tensor::new(1, 1, vec![t(s)]))
    }

    fn acc<'g>(grads: &'g mut [Option<Vec<T>>], values: &[Tensor<T>], v: Var) -> &'g mut Vec<T> {
        grads[v.0].get_or_insert_with(|| vec![T::zero(); values[v.0].data.len()])
    }

    /// Reverse pass from the scalar node `root` (seeded with adjoint 1).
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.values[root.0].data.len(), 1, "backward needs a scalar root");
        self.grads = vec![None; self.ops.len()];
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let values = &self.values;
            let grads = &mut self.grads;
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul { a, b, tb } => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    let (n, m) = (av.rows, values[i].cols);
                    let k = av.cols;
                    // da += g · op(b)ᵀ
                    let da = Self::acc(grads, values, *a);
                    T::gemm(n, m, k, T::one(), &g, false, &bv.data, !tb, T::one(), da);
                    let db = Self::acc(grads, values, *b);
                    if *tb {
                        // b is [m, k]: db += gᵀ · a
                        T::gemm(m, n, k, T::one(), &g, true, &av.data, false, T::one(), db);
                    } else {
                        // b is [k, m]: db += aᵀ · g
                        T::gemm(k, n, m, T::one(), &av.data, true, &g, false, T::one(), db);
                    }
                }
                Op::AddBias { x, b } => {
                    let cols = values[i].cols;
                    let dx = Self::acc(grads, values, *x);
                    dx.iter_mut().zip(&g).for_each(|(d, v)| *d = *d + *v);
                    let db = Self::acc(grads, values, *b);
                    for row in g.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d = *d + *v);
                    }
                }
                Op::Relu { x } => {
                    let xv = &values[x.0].data;
                    let dx = Self::acc(grads, values, *x);
                    for ((d, v), gi) in dx.iter_mut().zip(xv).zip(&g) {
                        if *v > T::zero() {
                            *d = *d + *gi;
                        }
                    }
                }
                Op::Im2col { x, h, w } => {
                    let (h, w) = (*h, *w);
                    let c = values[x.0].cols;
                    let hw = h * w;
                    let n = values[x.0].rows / hw;
                    let dx = Self::acc(grads, values, *x);
                    for f in 0..n {
                        for r in 0..h {
                            for q in 0..w {
                                let src = (f * hw + r * w + q) * 9 * c;
                                for (k, (dr, dq)) in KERNEL_OFFSETS.iter().enumerate() {
                                    let (rr, qq) = (r as isize + dr, q as isize + dq);
                                    if rr < 0 || qq < 0 || rr >= h as isize || qq >= w as isize {
                                        continue;
                                    }
                                    let dst = (f * hw + rr as usize * w + qq as usize) * c;
                                    for j in 0..c {
                                        dx[dst + j] = dx[dst + j] + g[src + k * c + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } | Op::StraightThrough { x } => {
                    let dx = Self::acc(grads, values, *x);
                    dx.iter_mut().zip(&g).for_each(|(d, v)| *d = *d + *v);
                }
                Op::BroadcastRows { x, times } => {
                    let cols = values[x.0].cols;
                    let dx = Self::acc(grads, values, *x);
                    for (r, row) in g.chunks_exact(cols).enumerate() {
                        let dst = &mut dx[(r / times) * cols..(r / times + 1) * cols];
                        dst.iter_mut().zip(row).for_each(|(d, v)| *d = *d + *v);
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (ca, cb) = (values[a.0].cols, values[b.0].cols);
                    let rows = values[i].rows;
                    {
                        let da = Self::acc(grads, values, *a);
                        for r in 0..rows {
                            for j in 0..ca {
                                da[r * ca + j] = da[r * ca + j] + g[r * (ca + cb) + j];
                            }
                        }
                    }
                    let db = Self::acc(grads, values, *b);
                    for r in 0..rows {
                        for j in 0..cb {
                            db[r * cb + j] = db[r * cb + j] + g[r * (ca + cb) + ca + j];
                        }
                    }
                }
                Op::Mse { pred, .. } => {
                    let (p, q) = (&values[pred.0].data, &values[match &self.ops[i] {
                        Op::Mse { target, .. } => target.0,
                        _ => unreachable!(),
                    }]
                    .data);
                    let scale = g[0] * t::<T>(2.0 / p.len().max(1) as f64);
                    let dp = Self::acc(grads, values, *pred);
                    for ((d, a), b) in dp.iter_mut().zip(p).zip(q) {
                        *d = *d + scale * (*a - *b);
                    }
                }
                Op::VqLoss { z, codebook, codes, beta } => {
                    let zv = &values[z.0];
                    let cb = &values[codebook.0];
                    let cols = zv.cols;
                    let scale = g[0] * t::<T>(2.0 / zv.data.len().max(1) as f64);
                    let b = t::<T>(*beta);
                    {
                        let dz = Self::acc(grads, values, *z);
                        for (r, &k) in codes.iter().enumerate() {
                            for j in 0..cols {
                                let diff = zv.data[r * cols + j] - cb.data[k * cols + j];
                                dz[r * cols + j] = dz[r * cols + j] + scale * b * diff;
                            }
                        }
                    }
                    let dc = Self::acc(grads, values, *codebook);
                    for (r, &k) in codes.iter().enumerate() {
                        for j in 0..cols {
                            let diff = cb.data[k * cols + j] - zv.data[r * cols + j];
                            dc[k * cols + j] = dc[k * cols + j] + scale * diff;
                        }
                    }
                }
                Op::WeightedSum { terms } => {
                    for (v, w) in terms {
                        let d = Self::acc(grads, values, *v);
                        d[0] = d[0] + g[0] * t::<T>(*w);
                    }
                }
            }
            self.grads[i] = Some(g);
        }
    }
}

/// Row-major 3×3 neighbourhood offsets `(dr, dc)`, matching the weight layout
/// `[(kr·3 + kc)·C_in + c, C_out]`.
pub const KERNEL_OFFSETS: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

pub fn nearest_code<T: Real>(z: &[T], codebook: &Tensor<T>) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..codebook.rows {
        let d: f64 = z.iter().zip(codebook.row(k)).map(|(a, b)| (*a - *b).to_f64().unwrap().powi(2)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}
