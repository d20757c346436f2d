//! Reverse-mode differentiation over 2D `f64` tensors.
//!
//! Only the operations the renderer needs are provided. Second-order terms
//! (the SDF's spatial gradient appearing inside a loss) are handled by
//! building the input gradient explicitly out of first-order ops, so the
//! tape itself only ever runs one backward pass.

use std::sync::Arc;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = op(a) · op(b) + beta·c` with optional transposes, through
/// `matrixmultiply`.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, c: &mut Tensor, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n));
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides describe the row-major buffers of `a`, `b` and `c`
    // whose sizes were checked against (m, k, n) above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Plain matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm(a, false, b, false, &mut c, 0.0);
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(beta x)) / beta`, stable for large |x|.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Ray layout for the compositing op: samples of ray `r` occupy rows
/// `offsets[r]..offsets[r + 1]`.
#[derive(Debug, Clone)]
pub struct RayOffsets(pub Arc<Vec<usize>>);

/// Guard below which `Φ_s(s_i)` is treated as zero.
pub const CDF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Softplus(Var, f64),
    SigmoidScaled(Var, f64),
    Exp(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowJacobian(Var, Arc<Vec<f64>>, usize),
    RowNorm(Var),
    Sum(Var),
    Composite {
        sdf: Var,
        log_steepness: Var,
        colors: Var,
        offsets: RayOffsets,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. Build forward with the op methods, then call
/// [`backward`](Tape::backward) on a scalar output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut c = Tensor::zeros(av.rows, bv.cols);
        gemm(av, false, bv, false, &mut c, 0.0);
        self.push(c, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut c = Tensor::zeros(av.rows, bv.rows);
        gemm(av, false, bv, true, &mut c, 0.0);
        self.push(c, Op::MatMulT(a, b), &[a, b])
    }

    /// Adds the `1 × cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!((1, av.cols), bv.shape(), "bias shape");
        let mut out = av.clone();
        for row in out.data.chunks_exact_mut(av.cols) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes differ");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, op, &[a, b])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| f(*x)).collect());
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Multiplies every entry of `a` by the `1 × 1` variable `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let k = self.value(s).data[0];
        self.map(a, |x| x * k, Op::MulScalarVar(a, s))
    }

    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        self.map(a, |x| softplus(x, beta), Op::Softplus(a, beta))
    }

    /// `σ(beta·x)`, the derivative of [`softplus`](Self::softplus).
    pub fn sigmoid_scaled(&mut self, a: Var, beta: f64) -> Var {
        self.map(a, |x| sigmoid(beta * x), Op::SigmoidScaled(a, beta))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.sigmoid_scaled(a, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut start = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat row counts differ");
            for r in 0..rows {
                out.data[r * cols + start..r * cols + start + pv.cols].copy_from_slice(pv.row(r));
            }
            start += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols);
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    /// Row-wise product with a constant per-row Jacobian: `jac` holds, for
    /// each row, a `cols(a) × out_cols` row-major block; row `i` of the
    /// result is `a_i · J_i`.
    pub fn row_jacobian(&mut self, a: Var, jac: Arc<Vec<f64>>, out_cols: usize) -> Var {
        let av = self.value(a);
        let d = av.cols;
        assert_eq!(jac.len(), av.rows * d * out_cols, "jacobian size");
        let mut out = Tensor::zeros(av.rows, out_cols);
        for r in 0..av.rows {
            let block = &jac[r * d * out_cols..(r + 1) * d * out_cols];
            let o = &mut out.data[r * out_cols..(r + 1) * out_cols];
            for (i, x) in av.row(r).iter().enumerate() {
                for (j, oj) in o.iter_mut().enumerate() {
                    *oj += x * block[i * out_cols + j];
                }
            }
        }
        self.push(out, Op::RowJacobian(a, jac, out_cols), &[a])
    }

    /// Euclidean norm of each row, as a column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows)
            .map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_vec(av.rows, 1, data);
        self.push(out, Op::RowNorm(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Logistic-CDF alpha compositing over a black background.
    ///
    /// `sdf` is `N × 1`, `colors` is `N × 3`, `log_steepness` is `1 × 1`.
    /// Returns the `rays × 3` pixel colours and the per-sample weights
    /// `T_i α_i` (zero for each ray's last sample).
    pub fn composite(&mut self, sdf: Var, log_steepness: Var, colors: Var, offsets: RayOffsets) -> (Var, Vec<f64>) {
        let s = &self.value(sdf).data;
        let c = self.value(colors);
        let beta = self.value(log_steepness).data[0].exp();
        let rays = offsets.0.len() - 1;
        let mut out = Tensor::zeros(rays, 3);
        let mut weights = vec![0.0; s.len()];
        for r in 0..rays {
            let (lo, hi) = (offsets.0[r], offsets.0[r + 1]);
            let (px, w) = composite_ray(&s[lo..hi], &c.data[lo * 3..hi * 3], beta);
            out.data[r * 3..r * 3 + 3].copy_from_slice(&px);
            weights[lo..hi].copy_from_slice(&w);
        }
        let v = self.push(
            out,
            Op::Composite {
                sdf,
                log_steepness,
                colors,
                offsets,
            },
            &[sdf, log_steepness, colors],
        );
        (v, weights)
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut accumulate = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        let elementwise = |a: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            Tensor::from_vec(a.rows, a.cols, (0..a.data.len()).map(|i| f(i, a.data[i])).collect())
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    gemm(g, false, bv, true, &mut da, 0.0);
                    accumulate(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    gemm(av, true, g, false, &mut db, 0.0);
                    accumulate(*b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    gemm(g, false, bv, false, &mut da, 0.0);
                    accumulate(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    gemm(g, true, av, false, &mut db, 0.0);
                    accumulate(*b, db);
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*bias) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks_exact(g.cols) {
                        for (d, x) in db.data.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(*bias, db);
                }
                if self.wants(*a) {
                    accumulate(*a, g.clone());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(*a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(*a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(*b, elementwise(g, &|_, x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(*a, elementwise(g, &|i, x| x * bv.data[i]));
                }
                if self.wants(*b) {
                    accumulate(*b, elementwise(g, &|i, x| x * av.data[i]));
                }
            }
            Op::Scale(a, c) => accumulate(*a, elementwise(g, &|_, x| x * c)),
            Op::AddScalar(a) => accumulate(*a, g.clone()),
            Op::MulScalarVar(a, s) => {
                let av = self.value(*a);
                let k = self.value(*s).data[0];
                if self.wants(*s) {
                    let d: f64 = g.data.iter().zip(&av.data).map(|(x, y)| x * y).sum();
                    accumulate(*s, Tensor::scalar(d));
                }
                if self.wants(*a) {
                    accumulate(*a, elementwise(g, &|_, x| x * k));
                }
            }
            Op::Softplus(a, beta) => {
                let av = self.value(*a);
                accumulate(*a, elementwise(g, &|i, x| x * sigmoid(beta * av.data[i])));
            }
            Op::SigmoidScaled(a, beta) => {
                accumulate(
                    *a,
                    elementwise(g, &|i, x| {
                        let s = out.data[i];
                        x * beta * s * (1.0 - s)
                    }),
                );
            }
            Op::Exp(a) => accumulate(*a, elementwise(g, &|i, x| x * out.data[i])),
            Op::Square(a) => {
                let av = self.value(*a);
                accumulate(*a, elementwise(g, &|i, x| 2.0 * x * av.data[i]));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.wants(*p) {
                        let mut d = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.data[r * cols..(r + 1) * cols].copy_from_slice(&g.row(r)[start..start + cols]);
                        }
                        accumulate(*p, d);
                    }
                    start += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    d.data[r * av.cols + start..r * av.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(*a, d);
            }
            Op::RowJacobian(a, jac, out_cols) => {
                let av = self.value(*a);
                let d = av.cols;
                let mut da = Tensor::zeros(av.rows, d);
                for r in 0..av.rows {
                    let block = &jac[r * d * out_cols..(r + 1) * d * out_cols];
                    let gr = g.row(r);
                    for i in 0..d {
                        da.data[r * d + i] = (0..*out_cols).map(|j| block[i * out_cols + j] * gr[j]).sum();
                    }
                }
                accumulate(*a, da);
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let n = out.data[r];
                    if n > 0.0 {
                        for c in 0..av.cols {
                            da.data[r * av.cols + c] = g.data[r] * av.data[r * av.cols + c] / n;
                        }
                    }
                }
                accumulate(*a, da);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                accumulate(*a, Tensor::filled(rows, cols, g.data[0]));
            }
            Op::Composite {
                sdf,
                log_steepness,
                colors,
                offsets,
            } => {
                let s = &self.value(*sdf).data;
                let c = &self.value(*colors).data;
                let beta = self.value(*log_steepness).data[0].exp();
                let mut ds = vec![0.0; s.len()];
                let mut dc = vec![0.0; c.len()];
                let mut dbeta = 0.0;
                for r in 0..offsets.0.len() - 1 {
                    let (lo, hi) = (offsets.0[r], offsets.0[r + 1]);
                    dbeta += composite_ray_backward(
                        &s[lo..hi],
                        &c[lo * 3..hi * 3],
                        beta,
                        &g.data[r * 3..r * 3 + 3],
                        &mut ds[lo..hi],
                        &mut dc[lo * 3..hi * 3],
                    );
                }
                if self.wants(*sdf) {
                    accumulate(*sdf, Tensor::from_vec(s.len(), 1, ds));
                }
                if self.wants(*colors) {
                    accumulate(*colors, Tensor::from_vec(s.len(), 3, dc));
                }
                if self.wants(*log_steepness) {
                    accumulate(*log_steepness, Tensor::scalar(dbeta * beta));
                }
            }
        }
    }
}

/// Logistic CDF `Φ_s(x) = 1 / (1 + exp(-steepness·x))`.
pub fn logistic_cdf(x: f64, steepness: f64) -> f64 {
    sigmoid(steepness * x)
}

/// Interval opacity `max((Φ_i − Φ_{i+1}) / Φ_i, 0)`, zero when `Φ_i` is
/// below [`CDF_FLOOR`].
pub fn interval_alpha(phi_i: f64, phi_next: f64) -> f64 {
    if phi_i < CDF_FLOOR {
        0.0
    } else {
        ((phi_i - phi_next) / phi_i).max(0.0)
    }
}

/// Composites one ray: returns pixel colour and per-sample weights.
pub fn composite_ray(sdf: &[f64], colors: &[f64], steepness: f64) -> ([f64; 3], Vec<f64>) {
    let n = sdf.len();
    let mut px = [0.0; 3];
    let mut weights = vec![0.0; n];
    let mut transmittance = 1.0;
    for i in 0..n.saturating_sub(1) {
        let a = interval_alpha(logistic_cdf(sdf[i], steepness), logistic_cdf(sdf[i + 1], steepness));
        let w = transmittance * a;
        weights[i] = w;
        for k in 0..3 {
            px[k] += w * colors[i * 3 + k];
        }
        transmittance *= 1.0 - a;
    }
    (px, weights)
}

/// Accumulates gradients of one ray's pixel into `ds` / `dc` and returns the
/// gradient with respect to the steepness itself.
fn composite_ray_backward(sdf: &[f64], colors: &[f64], beta: f64, gpx: &[f64], ds: &mut [f64], dc: &mut [f64]) -> f64 {
    let n = sdf.len();
    if n < 2 {
        return 0.0;
    }
    let phi: Vec<f64> = sdf.iter().map(|&s| logistic_cdf(s, beta)).collect();
    let alpha: Vec<f64> = (0..n - 1).map(|i| interval_alpha(phi[i], phi[i + 1])).collect();
    // Suffix colours A_i = α_i c_i + (1 − α_i) A_{i+1}, A_{n-1} = background.
    let mut suffix = vec![[0.0f64; 3]; n];
    for i in (0..n - 1).rev() {
        for k in 0..3 {
            suffix[i][k] = alpha[i] * colors[i * 3 + k] + (1.0 - alpha[i]) * suffix[i + 1][k];
        }
    }
    let mut dphi = vec![0.0; n];
    let mut transmittance = 1.0;
    for i in 0..n - 1 {
        for k in 0..3 {
            dc[i * 3 + k] += gpx[k] * transmittance * alpha[i];
        }
        let dalpha: f64 = (0..3)
            .map(|k| gpx[k] * transmittance * (colors[i * 3 + k] - suffix[i + 1][k]))
            .sum();
        let raw = if phi[i] < CDF_FLOOR {
            0.0
        } else {
            1.0 - phi[i + 1] / phi[i]
        };
        if raw > 0.0 {
            dphi[i] += dalpha * phi[i + 1] / (phi[i] * phi[i]);
            dphi[i + 1] -= dalpha / phi[i];
        }
        transmittance *= 1.0 - alpha[i];
    }
    let mut dbeta = 0.0;
    for i in 0..n {
        let dsig = phi[i] * (1.0 - phi[i]);
        ds[i] += dphi[i] * beta * dsig;
        dbeta += dphi[i] * sdf[i] * dsig;
    }
    dbeta
}
