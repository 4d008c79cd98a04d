//! Core differentiable operations recorded on the tape.
//!
//! Shapes are validated up front and violations surface as
//! `Error::InvalidArgument`. Loss-specific operations (nearest-neighbor
//! terms, cross-entropy) live with their owning modules and plug in through
//! the public `TapeOp` trait.

use crate::autodiff::tape::{put_back, take_grad, StatUpdate, Tape, TapeOp, Var};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Whether batch normalization consumes batch statistics (train) or the
/// stored running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::invalid_argument(format!(
            "{what} must be rank 2, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn rank1(t: &Tensor, what: &str) -> Result<usize> {
    if t.shape().len() != 1 {
        return Err(Error::invalid_argument(format!(
            "{what} must be rank 1, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.shape()[0])
}

fn nonempty(t: &Tensor, what: &str) -> Result<()> {
    if t.numel() == 0 {
        return Err(Error::invalid_argument(format!("{what} must be nonempty")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// linear / matmul family

struct LinearOp {
    x: Var,
    w: Var,
    b: Var,
    out: Var,
}

impl TapeOp for LinearOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let x = &values[self.x.0];
        let w = &values[self.w.0];
        let (n, k) = (x.rows(), x.cols());
        let m = w.cols();
        {
            let gx = &mut grads[self.x.0];
            for i in 0..n {
                let gy_row = &gy[i * m..(i + 1) * m];
                for kk in 0..k {
                    let w_row = &w.data()[kk * m..(kk + 1) * m];
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += gy_row[j] * w_row[j];
                    }
                    gx[i * k + kk] += acc;
                }
            }
        }
        {
            let gw = &mut grads[self.w.0];
            for i in 0..n {
                let gy_row = &gy[i * m..(i + 1) * m];
                let x_row = &x.data()[i * k..(i + 1) * k];
                for kk in 0..k {
                    let x_ik = x_row[kk];
                    let gw_row = &mut gw[kk * m..(kk + 1) * m];
                    for j in 0..m {
                        gw_row[j] += x_ik * gy_row[j];
                    }
                }
            }
        }
        {
            let gb = &mut grads[self.b.0];
            for i in 0..n {
                let gy_row = &gy[i * m..(i + 1) * m];
                for j in 0..m {
                    gb[j] += gy_row[j];
                }
            }
        }
        put_back(grads, self.out, gy);
    }
}

struct MatmulOp {
    a: Var,
    b: Var,
    out: Var,
}

impl TapeOp for MatmulOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let a = &values[self.a.0];
        let b = &values[self.b.0];
        let (n, k) = (a.rows(), a.cols());
        let m = b.cols();
        {
            let ga = &mut grads[self.a.0];
            for i in 0..n {
                let gy_row = &gy[i * m..(i + 1) * m];
                for kk in 0..k {
                    let b_row = &b.data()[kk * m..(kk + 1) * m];
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += gy_row[j] * b_row[j];
                    }
                    ga[i * k + kk] += acc;
                }
            }
        }
        {
            let gb = &mut grads[self.b.0];
            for i in 0..n {
                let gy_row = &gy[i * m..(i + 1) * m];
                let a_row = &a.data()[i * k..(i + 1) * k];
                for kk in 0..k {
                    let a_ik = a_row[kk];
                    let gb_row = &mut gb[kk * m..(kk + 1) * m];
                    for j in 0..m {
                        gb_row[j] += a_ik * gy_row[j];
                    }
                }
            }
        }
        put_back(grads, self.out, gy);
    }
}

struct MatVecOp {
    a: Var,
    v: Var,
    out: Var,
}

impl TapeOp for MatVecOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let a = &values[self.a.0];
        let v = &values[self.v.0];
        let (n, k) = (a.rows(), a.cols());
        {
            let ga = &mut grads[self.a.0];
            for i in 0..n {
                let g = gy[i];
                let ga_row = &mut ga[i * k..(i + 1) * k];
                for j in 0..k {
                    ga_row[j] += g * v.data()[j];
                }
            }
        }
        {
            let gv = &mut grads[self.v.0];
            for i in 0..n {
                let g = gy[i];
                let a_row = &a.data()[i * k..(i + 1) * k];
                for j in 0..k {
                    gv[j] += g * a_row[j];
                }
            }
        }
        put_back(grads, self.out, gy);
    }
}

struct VecMatOp {
    v: Var,
    b: Var,
    out: Var,
}

impl TapeOp for VecMatOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let v = &values[self.v.0];
        let b = &values[self.b.0];
        let (n, m) = (b.rows(), b.cols());
        {
            let gv = &mut grads[self.v.0];
            for i in 0..n {
                let b_row = &b.data()[i * m..(i + 1) * m];
                let mut acc = 0.0;
                for j in 0..m {
                    acc += gy[j] * b_row[j];
                }
                gv[i] += acc;
            }
        }
        {
            let gb = &mut grads[self.b.0];
            for i in 0..n {
                let vi = v.data()[i];
                let gb_row = &mut gb[i * m..(i + 1) * m];
                for j in 0..m {
                    gb_row[j] += vi * gy[j];
                }
            }
        }
        put_back(grads, self.out, gy);
    }
}

// ---------------------------------------------------------------------------
// elementwise

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
}

struct UnaryOp {
    x: Var,
    out: Var,
    kind: UnaryKind,
}

impl TapeOp for UnaryOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let gx = &mut grads[self.x.0];
        match self.kind {
            UnaryKind::Relu => {
                let x = values[self.x.0].data();
                for i in 0..gy.len() {
                    if x[i] > 0.0 {
                        gx[i] += gy[i];
                    }
                }
            }
            UnaryKind::Sigmoid => {
                let y = values[self.out.0].data();
                for i in 0..gy.len() {
                    gx[i] += gy[i] * y[i] * (1.0 - y[i]);
                }
            }
            UnaryKind::Tanh => {
                let y = values[self.out.0].data();
                for i in 0..gy.len() {
                    gx[i] += gy[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        put_back(grads, self.out, gy);
    }
}

struct AddOp {
    a: Var,
    b: Var,
    out: Var,
}

impl TapeOp for AddOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        for (g, v) in grads[self.a.0].iter_mut().zip(&gy) {
            *g += v;
        }
        for (g, v) in grads[self.b.0].iter_mut().zip(&gy) {
            *g += v;
        }
        put_back(grads, self.out, gy);
    }
}

struct MulOp {
    a: Var,
    b: Var,
    out: Var,
}

impl TapeOp for MulOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let a = values[self.a.0].data().to_vec();
        let b = values[self.b.0].data();
        for i in 0..gy.len() {
            grads[self.a.0][i] += gy[i] * b[i];
        }
        for i in 0..gy.len() {
            grads[self.b.0][i] += gy[i] * a[i];
        }
        put_back(grads, self.out, gy);
    }
}

struct ScaleOp {
    x: Var,
    c: f64,
    out: Var,
}

impl TapeOp for ScaleOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        for (g, v) in grads[self.x.0].iter_mut().zip(&gy) {
            *g += self.c * v;
        }
        put_back(grads, self.out, gy);
    }
}

// ---------------------------------------------------------------------------
// softmax / pooling / batchnorm

struct SoftmaxRowsOp {
    x: Var,
    out: Var,
    cols: usize,
}

impl TapeOp for SoftmaxRowsOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let y = values[self.out.0].data();
        let gx = &mut grads[self.x.0];
        for (row_y, (row_gy, row_gx)) in y
            .chunks_exact(self.cols)
            .zip(gy.chunks_exact(self.cols).zip(gx.chunks_exact_mut(self.cols)))
        {
            let dot: f64 = row_gy.iter().zip(row_y).map(|(g, v)| g * v).sum();
            for j in 0..self.cols {
                row_gx[j] += row_y[j] * (row_gy[j] - dot);
            }
        }
        put_back(grads, self.out, gy);
    }
}

struct MaxPoolRowsOp {
    x: Var,
    out: Var,
    argmax_rows: Vec<usize>,
}

impl TapeOp for MaxPoolRowsOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let cols = gy.len();
        let gx = &mut grads[self.x.0];
        for (j, &row) in self.argmax_rows.iter().enumerate() {
            gx[row * cols + j] += gy[j];
        }
        put_back(grads, self.out, gy);
    }
}

struct BatchNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    out: Var,
    /// Normalized activations, cached at forward time.
    xhat: Vec<f64>,
    /// Per-feature 1/sqrt(var + eps).
    invstd: Vec<f64>,
    train: bool,
}

impl TapeOp for BatchNormOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let gamma = values[self.gamma.0].data();
        let d = gamma.len();
        let n = gy.len() / d;
        {
            let gg = &mut grads[self.gamma.0];
            for i in 0..n {
                for j in 0..d {
                    gg[j] += gy[i * d + j] * self.xhat[i * d + j];
                }
            }
        }
        {
            let gb = &mut grads[self.beta.0];
            for i in 0..n {
                for j in 0..d {
                    gb[j] += gy[i * d + j];
                }
            }
        }
        let gx = &mut grads[self.x.0];
        if self.train {
            // Full pullback through batch mean and (biased) variance.
            let mut mean_gy = vec![0.0; d];
            let mut mean_gy_xhat = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    mean_gy[j] += gy[i * d + j];
                    mean_gy_xhat[j] += gy[i * d + j] * self.xhat[i * d + j];
                }
            }
            let inv_n = 1.0 / n as f64;
            for j in 0..d {
                mean_gy[j] *= inv_n;
                mean_gy_xhat[j] *= inv_n;
            }
            for i in 0..n {
                for j in 0..d {
                    let idx = i * d + j;
                    gx[idx] += gamma[j]
                        * self.invstd[j]
                        * (gy[idx] - mean_gy[j] - self.xhat[idx] * mean_gy_xhat[j]);
                }
            }
        } else {
            for i in 0..n {
                for j in 0..d {
                    let idx = i * d + j;
                    gx[idx] += gy[idx] * gamma[j] * self.invstd[j];
                }
            }
        }
        put_back(grads, self.out, gy);
    }
}

// ---------------------------------------------------------------------------
// shape plumbing

struct Slice1dOp {
    x: Var,
    start: usize,
    out: Var,
}

impl TapeOp for Slice1dOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let gx = &mut grads[self.x.0];
        for (j, g) in gy.iter().enumerate() {
            gx[self.start + j] += g;
        }
        put_back(grads, self.out, gy);
    }
}

struct ConcatRowsOp {
    parts: Vec<Var>,
    cols: usize,
    out: Var,
}

impl TapeOp for ConcatRowsOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        for (i, part) in self.parts.iter().enumerate() {
            let src = &gy[i * self.cols..(i + 1) * self.cols];
            for (g, v) in grads[part.0].iter_mut().zip(src) {
                *g += v;
            }
        }
        put_back(grads, self.out, gy);
    }
}

struct ReshapeOp {
    x: Var,
    out: Var,
}

impl TapeOp for ReshapeOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        for (g, v) in grads[self.x.0].iter_mut().zip(&gy) {
            *g += v;
        }
        put_back(grads, self.out, gy);
    }
}

// ---------------------------------------------------------------------------
// scalar reductions

struct SumAllOp {
    x: Var,
    out: Var,
}

impl TapeOp for SumAllOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        for g in grads[self.x.0].iter_mut() {
            *g += gy[0];
        }
        put_back(grads, self.out, gy);
    }
}

struct AffineScalarsOp {
    terms: Vec<(f64, Var)>,
    out: Var,
}

impl TapeOp for AffineScalarsOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        for &(c, v) in &self.terms {
            grads[v.0][0] += c * gy[0];
        }
        put_back(grads, self.out, gy);
    }
}

// ---------------------------------------------------------------------------
// forward entry points

impl Tape {
    /// y = x W + b with x: n x in, W: in x out, b: out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, k) = rank2(self.value(x), "linear input")?;
        let (wk, m) = rank2(self.value(w), "linear weight")?;
        let bm = rank1(self.value(b), "linear bias")?;
        if wk != k || bm != m {
            return Err(Error::invalid_argument(format!(
                "linear shapes disagree: x {:?}, w {:?}, b {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                row.copy_from_slice(bv);
                let x_row = &xv[i * k..(i + 1) * k];
                for kk in 0..k {
                    let x_ik = x_row[kk];
                    let w_row = &wv[kk * m..(kk + 1) * m];
                    for j in 0..m {
                        row[j] += x_ik * w_row[j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let v = self.alloc(t);
        self.push_op(Box::new(LinearOp { x, w, b, out: v }));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = rank2(self.value(a), "matmul lhs")?;
        let (bk, m) = rank2(self.value(b), "matmul rhs")?;
        if bk != k {
            return Err(Error::invalid_argument(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                let a_row = &av[i * k..(i + 1) * k];
                for kk in 0..k {
                    let a_ik = a_row[kk];
                    let b_row = &bv[kk * m..(kk + 1) * m];
                    for j in 0..m {
                        row[j] += a_ik * b_row[j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let v = self.alloc(t);
        self.push_op(Box::new(MatmulOp { a, b, out: v }));
        Ok(v)
    }

    /// out[i] = dot(A[i,:], v)
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (n, k) = rank2(self.value(a), "matvec lhs")?;
        let vk = rank1(self.value(v), "matvec rhs")?;
        if vk != k {
            return Err(Error::invalid_argument(format!(
                "matvec dims disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(v).shape()
            )));
        }
        let mut out = vec![0.0; n];
        {
            let av = self.value(a).data();
            let vv = self.value(v).data();
            for i in 0..n {
                let a_row = &av[i * k..(i + 1) * k];
                let mut acc = 0.0;
                for j in 0..k {
                    acc += a_row[j] * vv[j];
                }
                out[i] = acc;
            }
        }
        let var = self.alloc(Tensor::vector(out));
        self.push_op(Box::new(MatVecOp { a, v, out: var }));
        Ok(var)
    }

    /// out[j] = sum_i v[i] * B[i,j]
    pub fn vecmat(&mut self, v: Var, b: Var) -> Result<Var> {
        let vn = rank1(self.value(v), "vecmat lhs")?;
        let (n, m) = rank2(self.value(b), "vecmat rhs")?;
        if vn != n {
            return Err(Error::invalid_argument(format!(
                "vecmat dims disagree: {:?} x {:?}",
                self.value(v).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m];
        {
            let vv = self.value(v).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let vi = vv[i];
                let b_row = &bv[i * m..(i + 1) * m];
                for j in 0..m {
                    out[j] += vi * b_row[j];
                }
            }
        }
        let var = self.alloc(Tensor::vector(out));
        self.push_op(Box::new(VecMatOp { v, b, out: var }));
        Ok(var)
    }

    /// Vector affine map: x[k] W[k x j] + b[j].
    pub fn affine_vec(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.vecmat(x, w)?;
        self.add(xw, b)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        nonempty(self.value(x), "unary input")?;
        let src = self.value(x);
        let data = match kind {
            UnaryKind::Relu => src.data().iter().map(|&v| v.max(0.0)).collect(),
            UnaryKind::Sigmoid => src.data().iter().map(|&v| stable_sigmoid(v)).collect(),
            UnaryKind::Tanh => src.data().iter().map(|&v| v.tanh()).collect(),
        };
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let v = self.alloc(t);
        self.push_op(Box::new(UnaryOp { x, out: v, kind }));
        Ok(v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid_argument(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let v = self.alloc(t);
        self.push_op(Box::new(AddOp { a, b, out: v }));
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid_argument(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let v = self.alloc(t);
        self.push_op(Box::new(MulOp { a, b, out: v }));
        Ok(v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| c * v).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let v = self.alloc(t);
        self.push_op(Box::new(ScaleOp { x, c, out: v }));
        Ok(v)
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    /// A rank-1 input is treated as a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        nonempty(self.value(x), "softmax input")?;
        let src = self.value(x);
        let cols = match src.shape().len() {
            1 => src.shape()[0],
            2 => src.shape()[1],
            _ => {
                return Err(Error::invalid_argument(format!(
                    "softmax expects rank 1 or 2, got {:?}",
                    src.shape()
                )))
            }
        };
        let mut data = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / sum));
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let v = self.alloc(t);
        self.push_op(Box::new(SoftmaxRowsOp { x, out: v, cols }));
        Ok(v)
    }

    /// Per-feature max over rows; gradient routes to the argmax row
    /// (ties resolved to the lowest row index).
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        nonempty(self.value(x), "max pool input")?;
        let (n, d) = rank2(self.value(x), "max pool input")?;
        let src = self.value(x).data();
        let mut out = src[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            let row = &src[i * d..(i + 1) * d];
            for j in 0..d {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let v = self.alloc(Tensor::vector(out));
        self.push_op(Box::new(MaxPoolRowsOp {
            x,
            out: v,
            argmax_rows: argmax,
        }));
        Ok(v)
    }

    /// Batch normalization over the row dimension of `x` (n x d).
    ///
    /// Train mode normalizes by batch statistics (biased variance) and
    /// records a pending running-stat update under `stat_prefix`; eval mode
    /// consumes the provided running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        stat_prefix: &str,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (n, d) = rank2(self.value(x), "batchnorm input")?;
        if rank1(self.value(gamma), "batchnorm gamma")? != d
            || rank1(self.value(beta), "batchnorm beta")? != d
            || running_mean.len() != d
            || running_var.len() != d
        {
            return Err(Error::invalid_argument(
                "batchnorm parameter widths disagree with input".to_string(),
            ));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::invalid_argument(
                "batchnorm train mode needs at least 2 rows".to_string(),
            ));
        }
        let src = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        mean[j] += src[i * d + j];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        let c = src[i * d + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                for v in var.iter_mut() {
                    *v /= n as f64;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_v = self.value(gamma).data().to_vec();
        let beta_v = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let idx = i * d + j;
                let h = (src[idx] - mean[j]) * invstd[j];
                xhat[idx] = h;
                out[idx] = gamma_v[j] * h + beta_v[j];
            }
        }
        if mode == Mode::Train {
            self.record_stat_update(StatUpdate {
                prefix: stat_prefix.to_string(),
                batch_mean: mean,
                batch_var: var,
                momentum,
            });
        }
        let t = Tensor::new(vec![n, d], out)?;
        let v = self.alloc(t);
        self.push_op(Box::new(BatchNormOp {
            x,
            gamma,
            beta,
            out: v,
            xhat,
            invstd,
            train: mode == Mode::Train,
        }));
        Ok(v)
    }

    pub fn slice1d(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let k = rank1(self.value(x), "slice input")?;
        if start + len > k {
            return Err(Error::invalid_argument(format!(
                "slice [{start}, {}) out of bounds for length {k}",
                start + len
            )));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let v = self.alloc(Tensor::vector(data));
        self.push_op(Box::new(Slice1dOp { x, start, out: v }));
        Ok(v)
    }

    /// Stacks rank-1 vectors of equal width into a matrix, one per row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid_argument("concat of zero rows".to_string()));
        }
        let cols = rank1(self.value(parts[0]), "concat part")?;
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            if rank1(self.value(p), "concat part")? != cols {
                return Err(Error::invalid_argument(
                    "concat parts have differing widths".to_string(),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![parts.len(), cols], data)?;
        let v = self.alloc(t);
        self.push_op(Box::new(ConcatRowsOp {
            parts: parts.to_vec(),
            cols,
            out: v,
        }));
        Ok(v)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::invalid_argument(format!(
                "cannot reshape {:?} to {:?}",
                self.value(x).shape(),
                shape
            )));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let v = self.alloc(t);
        self.push_op(Box::new(ReshapeOp { x, out: v }));
        Ok(v)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let v = self.alloc(Tensor::scalar(s));
        self.push_op(Box::new(SumAllOp { x, out: v }));
        Ok(v)
    }

    /// Weighted sum of scalar nodes: sum_i c_i * t_i.
    pub fn affine_scalars(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(c, v) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::invalid_argument(
                    "affine_scalars expects scalar terms".to_string(),
                ));
            }
            acc += c * self.value(v).item();
        }
        let v = self.alloc(Tensor::scalar(acc));
        self.push_op(Box::new(AffineScalarsOp {
            terms: terms.to_vec(),
            out: v,
        }));
        Ok(v)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdConfig, ParamStore};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_store(entries: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.insert(*name, Tensor::new(shape.clone(), data).unwrap());
        }
        s
    }

    /// Runs the finite-difference checker over every trainable tensor the
    /// closure binds and asserts agreement.
    fn assert_grads<F>(store: &ParamStore, f: F)
    where
        F: Fn(&mut Tape, &ParamStore) -> crate::error::Result<Var> + Sync,
    {
        let report = finite_diff_check(store, &[], &FdConfig::default(), f).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "gradient mismatch: {report:?}"
        );
    }

    #[test]
    fn linear_forward_matches_by_hand() {
        let mut tape = Tape::new();
        let x = tape.alloc(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
        let w = tape.alloc(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.alloc(Tensor::vector(vec![0.5, -0.5]));
        let y = tape.linear(x, w, b).unwrap();
        // [2,-1]*[[1,2],[3,4]] = [-1, 0]; plus bias -> [-0.5, -0.5]
        assert_eq!(tape.value(y).data(), &[-0.5, -0.5]);
    }

    #[test]
    fn linear_gradients() {
        let store = rand_store(&[("w", vec![3, 4]), ("b", vec![4]), ("x", vec![5, 3])], 1);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let w = tape.param(s, "w")?;
            let b = tape.param(s, "b")?;
            let y = tape.linear(x, w, b)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        });
    }

    #[test]
    fn matmul_matvec_vecmat_gradients() {
        let store = rand_store(
            &[("a", vec![4, 3]), ("b", vec![3, 5]), ("v", vec![3]), ("u", vec![4])],
            2,
        );
        assert_grads(&store, |tape, s| {
            let a = tape.param(s, "a")?;
            let b = tape.param(s, "b")?;
            let v = tape.param(s, "v")?;
            let u = tape.param(s, "u")?;
            let ab = tape.matmul(a, b)?; // 4x5
            let av = tape.matvec(a, v)?; // 4
            let ua = tape.vecmat(u, a)?; // 3
            let s1 = tape.sum_all(ab)?;
            let s2 = tape.sum_all(av)?;
            let sq = tape.mul(ua, ua)?;
            let s3 = tape.sum_all(sq)?;
            tape.affine_scalars(&[(1.0, s1), (-2.0, s2), (0.5, s3)])
        });
    }

    #[test]
    fn elementwise_gradients() {
        let store = rand_store(&[("x", vec![3, 3]), ("y", vec![3, 3])], 3);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let y = tape.param(s, "y")?;
            let a = tape.add(x, y)?;
            let m = tape.mul(a, x)?;
            let t = tape.tanh(m)?;
            let g = tape.sigmoid(t)?;
            let sc = tape.scale(g, 1.7)?;
            tape.sum_all(sc)
        });
    }

    #[test]
    fn relu_gradient_skips_negative_side() {
        // Away from the kink the subgradient matches finite differences.
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![1.5, -2.0, 0.3, -0.4]));
        assert_grads(&s, |tape, s| {
            let x = tape.param(s, "x")?;
            let r = tape.relu(x)?;
            let sq = tape.mul(r, r)?;
            tape.sum_all(sq)
        });
        let mut tape = Tape::new();
        let x = tape.param(&s, "x").unwrap();
        let r = tape.relu(x).unwrap();
        let l = tape.sum_all(r).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_ratio_oracle() {
        let mut tape = Tape::new();
        let x = tape.alloc(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        for row in d.chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // First row against direct ratios.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..3 {
            assert!((d[j] - e[j] / z).abs() < 1e-12);
        }
        // Large logits survive thanks to max subtraction.
        assert!((d[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradients() {
        let store = rand_store(&[("x", vec![2, 4]), ("w", vec![2, 4])], 4);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let w = tape.param(s, "w")?;
            let sm = tape.softmax_rows(x)?;
            let weighted = tape.mul(sm, w)?;
            tape.sum_all(weighted)
        });
    }

    #[test]
    fn max_pool_routes_gradient_to_lowest_tied_row() {
        let mut tape = Tape::new();
        let x = tape.alloc(Tensor::matrix(3, 2, vec![5.0, 1.0, 5.0, 2.0, 0.0, 2.0]).unwrap());
        let y = tape.max_pool_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 2.0]);
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        // Column 0 ties between rows 0 and 2 at 5.0 -> row 0 wins.
        // Column 1 ties between rows 1 and 2 at 2.0 -> row 1 wins.
        assert_eq!(tape.grad(x), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_gradients() {
        let store = rand_store(&[("x", vec![6, 3])], 5);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let y = tape.max_pool_rows(x)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        });
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut tape = Tape::new();
        let x = tape.alloc(Tensor::matrix(4, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap());
        let gamma = tape.alloc(Tensor::vector(vec![1.0, 1.0]));
        let beta = tape.alloc(Tensor::vector(vec![0.0, 0.0]));
        let y = tape
            .batchnorm(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], Mode::Train, "bn", 0.9, 1e-5)
            .unwrap();
        let d = tape.value(y).data();
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| d[i * 2 + j]).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| (d[i * 2 + j] - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps slightly shrinks it
        }
        let updates = tape.take_stat_updates();
        assert_eq!(updates.len(), 1);
        assert_eq!(updates[0].prefix, "bn");
        assert!((updates[0].batch_mean[0] - 2.5).abs() < 1e-12);
        // Biased variance of {1,2,3,4} is 1.25.
        assert!((updates[0].batch_var[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.alloc(Tensor::matrix(2, 1, vec![3.0, 7.0]).unwrap());
        let gamma = tape.alloc(Tensor::vector(vec![2.0]));
        let beta = tape.alloc(Tensor::vector(vec![1.0]));
        let y = tape
            .batchnorm(x, gamma, beta, &[5.0], &[4.0], Mode::Eval, "bn", 0.9, 1e-5)
            .unwrap();
        let d = tape.value(y).data();
        // (3-5)/sqrt(4+eps) * 2 + 1 and (7-5)/sqrt(4+eps) * 2 + 1
        assert!((d[0] - (1.0 - 2.0 * 2.0 / (4.0f64 + 1e-5).sqrt())).abs() < 1e-12);
        assert!((d[1] - (1.0 + 2.0 * 2.0 / (4.0f64 + 1e-5).sqrt())).abs() < 1e-12);
        assert!(tape.take_stat_updates().is_empty());
    }

    #[test]
    fn batchnorm_train_gradients() {
        let store = rand_store(&[("x", vec![5, 3]), ("g", vec![3]), ("b", vec![3])], 6);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let g = tape.param(s, "g")?;
            let b = tape.param(s, "b")?;
            let y = tape.batchnorm(x, g, b, &[0.0; 3], &[1.0; 3], Mode::Train, "bn", 0.9, 1e-5)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        });
    }

    #[test]
    fn batchnorm_eval_gradients() {
        let store = rand_store(&[("x", vec![4, 2]), ("g", vec![2]), ("b", vec![2])], 7);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let g = tape.param(s, "g")?;
            let b = tape.param(s, "b")?;
            let y = tape.batchnorm(x, g, b, &[0.3, -0.2], &[0.8, 1.3], Mode::Eval, "bn", 0.9, 1e-5)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        });
    }

    #[test]
    fn slice_concat_reshape_gradients() {
        let store = rand_store(&[("x", vec![6]), ("y", vec![3])], 8);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let y = tape.param(s, "y")?;
            let head = tape.slice1d(x, 0, 3)?;
            let tail = tape.slice1d(x, 3, 3)?;
            let stacked = tape.concat_rows(&[head, tail, y])?; // 3x3
            let flat = tape.reshape(stacked, vec![9])?;
            let sq = tape.mul(flat, flat)?;
            tape.sum_all(sq)
        });
    }

    #[test]
    fn affine_vec_composes_vecmat_and_add() {
        let store = rand_store(&[("x", vec![3]), ("w", vec![3, 2]), ("b", vec![2])], 9);
        assert_grads(&store, |tape, s| {
            let x = tape.param(s, "x")?;
            let w = tape.param(s, "w")?;
            let b = tape.param(s, "b")?;
            let y = tape.affine_vec(x, w, b)?;
            let t = tape.tanh(y)?;
            let sq = tape.mul(t, t)?;
            tape.sum_all(sq)
        });
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.alloc(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.alloc(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let v = tape.alloc(Tensor::vector(vec![0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.matvec(a, v).is_err());
        assert!(tape.vecmat(v, a).is_err());
        assert!(tape.slice1d(v, 2, 4).is_err());
        assert!(tape.reshape(a, vec![4, 2]).is_err());
        let g = tape.alloc(Tensor::vector(vec![1.0; 2]));
        assert!(tape
            .batchnorm(a, g, g, &[0.0; 3], &[1.0; 3], Mode::Train, "bn", 0.9, 1e-5)
            .is_err());
    }

    #[test]
    fn param_binding_dedups_and_accumulates() {
        // Binding the same name twice must reuse one node so both uses
        // contribute to a single gradient buffer.
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![2.0]));
        let mut tape = Tape::new();
        let w1 = tape.param(&s, "w").unwrap();
        let w2 = tape.param(&s, "w").unwrap();
        assert_eq!(w1, w2);
        let prod = tape.mul(w1, w2).unwrap(); // w^2
        let l = tape.sum_all(prod).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w1), &[4.0]); // d(w^2)/dw = 2w = 4
    }
}
