use crate::kernels;
use crate::store::{Gradients, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::{Result, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Expr {
    /// Owned constant input.
    Input,
    /// Full parameter tensor; value lives in the store, no copy is made.
    Param(ParamId),
    /// Row gather from a rank-2 parameter; rows are materialized.
    ParamRows(ParamId, Vec<u32>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus row vector, broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    /// a[m,k] · b[n,k]ᵀ — the natural layout for `x · Wᵀ` with W stored [out, in].
    MatMulNT(Var, Var),
    /// x[m] · a[m,k] -> [k]
    VecMat(Var, Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Rows(Var, Vec<u32>),
    Gather(Var, Vec<u32>),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    RowL2Norm(Var),
    RowDot(Var, Var),
    /// Fused bidirectional-LSTM cell step over a batch of rows.
    ///
    /// `(x, hc, w_ih, w_hh, bias)` with hc packed `[h | c]` per row and gate
    /// order `i, f, g, o` in the weight/bias layout. Output is the next
    /// packed `[h | c]`.
    LstmCell {
        x: Var,
        hc: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
    },
}

struct Node {
    expr: Expr,
    value: Tensor,
    /// Saved activations for fused ops (`[i|f|g|o|tanh(c_new)]` per row).
    aux: Option<Tensor>,
}

/// Records forward operations against a frozen parameter store and replays
/// them in reverse to accumulate gradients.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Value of a recorded variable. Parameter leaves resolve through the
    /// store without copying.
    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.idx()];
        match node.expr {
            Expr::Param(id) => self.store.value(id),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Scalar value of a length-1 variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, op: &'static str, expr: Expr, value: Tensor, aux: Option<Tensor>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let var = Var(self.nodes.len() as u32);
        self.nodes.push(Node { expr, value, aux });
        Ok(var)
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", Expr::Input, value, None)
    }

    /// Leaf for a full parameter tensor; memoized so each parameter owns one
    /// gradient slot per tape.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(var) = self.param_vars[id.index()] {
            return Ok(var);
        }
        if !self.store.value(id).all_finite() {
            return Err(TensorError::NonFinite { op: "param" });
        }
        let var = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            expr: Expr::Param(id),
            value: Tensor::zeros(Shape::scalar()),
            aux: None,
        });
        self.param_vars[id.index()] = Some(var);
        Ok(var)
    }

    /// Gathers rows of a rank-2 parameter into a new `[k, cols]` value.
    pub fn param_rows(&mut self, id: ParamId, rows: &[u32]) -> Result<Var> {
        let src = self.store.value(id);
        let out = gather_rows("param_rows", src, rows)?;
        self.push("param_rows", Expr::ParamRows(id, rows.to_vec()), out, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", Expr::Add(a, b), out, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", Expr::Sub(a, b), out, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", Expr::Mul(a, b), out, None)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().rank() != 2 || vb.shape().rank() != 1 || va.shape().cols() != vb.len() {
            return Err(shape_mismatch("add_row", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        let cols = out.shape().cols();
        for row in out.data_mut().chunks_mut(cols) {
            kernels::axpy(row, 1.0, vb.data());
        }
        self.push("add_row", Expr::AddRow(a, b), out, None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push("scale", Expr::Scale(a, c), out, None)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        self.push("add_const", Expr::AddConst(a), out, None)
    }

    /// `[m,k] · [k,n] -> [m,n]`, or `[m,k] · [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.rank() != 2 {
            return Err(shape_mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa.rows(), sa.cols());
        let out = if sb.rank() == 2 {
            if sb.rows() != k {
                return Err(shape_mismatch("matmul", sa, sb));
            }
            let n = sb.cols();
            let mut c = Tensor::zeros(Shape::matrix(m, n));
            kernels::matmul_nn(c.data_mut(), va.data(), vb.data(), m, k, n);
            c
        } else {
            if sb.len() != k {
                return Err(shape_mismatch("matmul", sa, sb));
            }
            let mut c = Tensor::zeros(Shape::vector(m));
            for (i, out) in c.data_mut().iter_mut().enumerate() {
                *out = kernels::dot(va.row(i), vb.data());
            }
            c
        };
        self.push("matmul", Expr::MatMul(a, b), out, None)
    }

    /// `a[m,k] · b[n,k]ᵀ -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.rank() != 2 || sb.rank() != 2 || sa.cols() != sb.cols() {
            return Err(shape_mismatch("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa.rows(), sa.cols(), sb.rows());
        let mut c = Tensor::zeros(Shape::matrix(m, n));
        kernels::matmul_nt(c.data_mut(), va.data(), vb.data(), m, k, n);
        self.push("matmul_nt", Expr::MatMulNT(a, b), c, None)
    }

    /// `x[m] · a[m,k] -> [k]`.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var> {
        let (vx, va) = (self.value(x), self.value(a));
        let (sx, sa) = (vx.shape(), va.shape());
        if sx.rank() != 1 || sa.rank() != 2 || sx.len() != sa.rows() {
            return Err(shape_mismatch("vecmat", sx, sa));
        }
        let mut out = Tensor::zeros(Shape::vector(sa.cols()));
        for (i, &xi) in vx.data().iter().enumerate() {
            kernels::axpy(out.data_mut(), xi, va.row(i));
        }
        self.push("vecmat", Expr::VecMat(x, a), out, None)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().rank() != 1 || va.len() != vb.len() {
            return Err(shape_mismatch("dot", va.shape(), vb.shape()));
        }
        let out = Tensor::scalar(kernels::dot(va.data(), vb.data()));
        self.push("dot", Expr::Dot(a, b), out, None)
    }

    /// Concatenates rank-1 values into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: "[]".into(),
                reason: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().rank() != 1 {
                return Err(shape_mismatch("concat", v.shape(), Shape::vector(0)));
            }
            data.extend_from_slice(v.data());
        }
        self.push("concat", Expr::Concat(parts.to_vec()), Tensor::from_vec(data), None)
    }

    /// Concatenates rank-2 values along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_cols",
                shape: "[]".into(),
                reason: "no inputs".into(),
            });
        }
        let rows = self.value(parts[0]).shape().rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.rank() != 2 || s.rows() != rows {
                return Err(shape_mismatch("concat_cols", self.value(parts[0]).shape(), s));
            }
            widths.push(s.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(Shape::matrix(rows, total));
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                let dst = r * total + offset;
                out.data_mut()[dst..dst + w].copy_from_slice(v.row(r));
            }
            offset += w;
        }
        self.push("concat_cols", Expr::ConcatCols(parts.to_vec()), out, None)
    }

    /// Sub-vector `[start, end)` of a rank-1 value.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape().rank() != 1 || end > v.len() || start > end {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                index: end,
                size: v.len(),
            });
        }
        let out = Tensor::from_vec(v.data()[start..end].to_vec());
        self.push("slice", Expr::Slice(a, start, end), out, None)
    }

    /// Column range `[start, end)` of a rank-2 value.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        if s.rank() != 2 || end > s.cols() || start > end {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: end,
                size: s.cols(),
            });
        }
        let w = end - start;
        let mut out = Tensor::zeros(Shape::matrix(s.rows(), w));
        for r in 0..s.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        self.push("slice_cols", Expr::SliceCols(a, start, end), out, None)
    }

    /// Gathers rows of a rank-2 value.
    pub fn rows(&mut self, a: Var, rows: &[u32]) -> Result<Var> {
        let out = gather_rows("rows", self.value(a), rows)?;
        self.push("rows", Expr::Rows(a, rows.to_vec()), out, None)
    }

    /// Gathers elements of a rank-1 value.
    pub fn gather(&mut self, a: Var, idx: &[u32]) -> Result<Var> {
        let v = self.value(a);
        if v.shape().rank() != 1 {
            return Err(shape_mismatch("gather", v.shape(), Shape::vector(idx.len())));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            let i = i as usize;
            if i >= v.len() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    size: v.len(),
                });
            }
            data.push(v.data()[i]);
        }
        self.push("gather", Expr::Gather(a, idx.to_vec()), Tensor::from_vec(data), None)
    }

    /// Reinterprets a value under a new shape of identical length.
    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", Expr::Reshape(a), out, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map("sigmoid", self.value(a), sigmoid);
        self.push("sigmoid", Expr::Sigmoid(a), out, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map("tanh", self.value(a), f64::tanh);
        self.push("tanh", Expr::Tanh(a), out, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = map("relu", self.value(a), |x| x.max(0.0));
        self.push("relu", Expr::Relu(a), out, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map("exp", self.value(a), f64::exp);
        self.push("exp", Expr::Exp(a), out, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = map("log", self.value(a), f64::ln);
        self.push("log", Expr::Log(a), out, None)
    }

    /// Softmax along `axis`. Rank-1 values use axis 0; rank-2 values
    /// normalize down columns (axis 0) or along rows (axis 1).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        let out = match (s.rank(), axis) {
            (1, 0) => {
                let mut out = v.clone();
                softmax_slice(out.data_mut());
                out
            }
            (2, 1) => {
                let mut out = v.clone();
                let cols = s.cols();
                for row in out.data_mut().chunks_mut(cols) {
                    softmax_slice(row);
                }
                out
            }
            (2, 0) => {
                let mut out = v.clone();
                let (rows, cols) = (s.rows(), s.cols());
                let mut col = vec![0.0; rows];
                for j in 0..cols {
                    for i in 0..rows {
                        col[i] = out.data()[i * cols + j];
                    }
                    softmax_slice(&mut col);
                    for i in 0..rows {
                        out.data_mut()[i * cols + j] = col[i];
                    }
                }
                out
            }
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "softmax",
                    shape: s.to_string(),
                    reason: format!("axis {axis} invalid"),
                })
            }
        };
        self.push("softmax", Expr::Softmax(a, axis), out, None)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push("sum", Expr::Sum(a), Tensor::scalar(total), None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: v.shape().to_string(),
                reason: "empty input".into(),
            });
        }
        let total: f64 = v.data().iter().sum();
        let n = v.len() as f64;
        self.push("mean", Expr::Mean(a), Tensor::scalar(total / n), None)
    }

    /// Euclidean norm of a rank-1 value.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().rank() != 1 {
            return Err(shape_mismatch("l2_norm", v.shape(), Shape::vector(0)));
        }
        let out = Tensor::scalar(kernels::dot(v.data(), v.data()).sqrt());
        self.push("l2_norm", Expr::L2Norm(a), out, None)
    }

    /// Per-row Euclidean norms of a rank-2 value.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        if s.rank() != 2 {
            return Err(shape_mismatch("row_l2_norm", s, Shape::vector(0)));
        }
        let mut out = Tensor::zeros(Shape::vector(s.rows()));
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = kernels::dot(v.row(i), v.row(i)).sqrt();
        }
        self.push("row_l2_norm", Expr::RowL2Norm(a), out, None)
    }

    /// Per-row dot products of two equal-shape rank-2 values.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.shape().rank() != 2 {
            return Err(shape_mismatch("row_dot", va.shape(), vb.shape()));
        }
        let rows = va.shape().rows();
        let mut out = Tensor::zeros(Shape::vector(rows));
        for i in 0..rows {
            out.data_mut()[i] = kernels::dot(va.row(i), vb.row(i));
        }
        self.push("row_dot", Expr::RowDot(a, b), out, None)
    }

    /// One step of an LSTM cell over a batch of rows; see [`Expr::LstmCell`].
    pub fn lstm_cell(&mut self, x: Var, hc: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let (vx, vhc) = (self.value(x), self.value(hc));
        let (vwi, vwh, vb) = (self.value(w_ih), self.value(w_hh), self.value(bias));
        let batch = vx.shape().rows();
        if vx.shape().rank() != 2 || vhc.shape().rank() != 2 || vhc.shape().rows() != batch {
            return Err(shape_mismatch("lstm_cell", vx.shape(), vhc.shape()));
        }
        let nh = vhc.shape().cols() / 2;
        let ni = vx.shape().cols();
        if vhc.shape().cols() != 2 * nh
            || vwi.shape() != Shape::matrix(4 * nh, ni)
            || vwh.shape() != Shape::matrix(4 * nh, nh)
            || vb.shape() != Shape::vector(4 * nh)
        {
            return Err(shape_mismatch("lstm_cell", vwi.shape(), vwh.shape()));
        }

        // h and c occupy contiguous halves of each hc row; split them out for
        // the matmuls.
        let mut h_prev = Tensor::zeros(Shape::matrix(batch, nh));
        for r in 0..batch {
            h_prev.row_mut(r).copy_from_slice(&vhc.row(r)[..nh]);
        }

        let mut pre = Tensor::zeros(Shape::matrix(batch, 4 * nh));
        kernels::matmul_nt(pre.data_mut(), vx.data(), vwi.data(), batch, ni, 4 * nh);
        kernels::matmul_nt(pre.data_mut(), h_prev.data(), vwh.data(), batch, nh, 4 * nh);

        let mut value = Tensor::zeros(Shape::matrix(batch, 2 * nh));
        let mut aux = Tensor::zeros(Shape::matrix(batch, 5 * nh));
        let bias_row = vb.data();
        kernels::zip_row_chunks(
            value.data_mut(),
            aux.data_mut(),
            pre.data(),
            vhc.data(),
            [2 * nh, 5 * nh, 4 * nh, 2 * nh],
            |out, aux_row, pre, hc_prev| {
                let c_prev = &hc_prev[nh..];
                for j in 0..nh {
                    let i_g = sigmoid(pre[j] + bias_row[j]);
                    let f_g = sigmoid(pre[nh + j] + bias_row[nh + j]);
                    let g_g = (pre[2 * nh + j] + bias_row[2 * nh + j]).tanh();
                    let o_g = sigmoid(pre[3 * nh + j] + bias_row[3 * nh + j]);
                    let c_new = f_g * c_prev[j] + i_g * g_g;
                    let tc = c_new.tanh();
                    out[j] = o_g * tc;
                    out[nh + j] = c_new;
                    aux_row[j] = i_g;
                    aux_row[nh + j] = f_g;
                    aux_row[2 * nh + j] = g_g;
                    aux_row[3 * nh + j] = o_g;
                    aux_row[4 * nh + j] = tc;
                }
            },
        );
        self.push(
            "lstm_cell",
            Expr::LstmCell { x, hc, w_ih, w_hh, bias },
            value,
            Some(aux),
        )
    }

    /// Reverse pass from a scalar loss; gradients are accumulated per
    /// parameter name and can then be applied to the store.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(TensorError::LossNotScalar {
                shape: v.shape().to_string(),
            });
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse pass seeded with explicit cotangents on one or more nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (var, seed) in seeds {
            let shape = self.value(*var).shape();
            if seed.shape() != shape {
                return Err(shape_mismatch("backward_seeded", seed.shape(), shape));
            }
            add_into(&mut grads[var.idx()], shape, seed.data());
        }

        let mut out = Gradients::new();
        for idx in (0..self.nodes.len()).rev() {
            let (before, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].take() else { continue };
            let node = &self.nodes[idx];
            match &node.expr {
                Expr::Input => {}
                Expr::Param(id) => {
                    out.accumulate(self.store.name(*id), self.store.value(*id).shape(), g.data());
                }
                Expr::ParamRows(id, rows) => {
                    let shape = self.store.value(*id).shape();
                    let buf = out.entry(self.store.name(*id), shape);
                    let cols = shape.cols();
                    for (k, &r) in rows.iter().enumerate() {
                        kernels::axpy(buf.row_mut(r as usize), 1.0, &g.data()[k * cols..(k + 1) * cols]);
                    }
                }
                Expr::Add(a, b) => {
                    self.accum_broadcast(before, *a, &g, 1.0, None);
                    self.accum_broadcast(before, *b, &g, 1.0, None);
                }
                Expr::Sub(a, b) => {
                    self.accum_broadcast(before, *a, &g, 1.0, None);
                    self.accum_broadcast(before, *b, &g, -1.0, None);
                }
                Expr::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    self.accum_broadcast(before, *a, &g, 1.0, Some(&vb));
                    self.accum_broadcast(before, *b, &g, 1.0, Some(&va));
                }
                Expr::AddRow(a, b) => {
                    let ga = slot(before, *a, self.value(*a).shape());
                    kernels::axpy(ga.data_mut(), 1.0, g.data());
                    let sb = self.value(*b).shape();
                    let gb = slot(before, *b, sb);
                    kernels::col_sum(gb.data_mut(), g.data(), g.shape().rows(), sb.len());
                }
                Expr::Scale(a, c) => {
                    let ga = slot(before, *a, self.value(*a).shape());
                    kernels::axpy(ga.data_mut(), *c, g.data());
                }
                Expr::AddConst(a) => {
                    let ga = slot(before, *a, self.value(*a).shape());
                    kernels::axpy(ga.data_mut(), 1.0, g.data());
                }
                Expr::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (sa, sb) = (va.shape(), vb.shape());
                    let (m, k) = (sa.rows(), sa.cols());
                    if sb.rank() == 2 {
                        let n = sb.cols();
                        let vb_data = vb.data().to_vec();
                        let va_data = va.data().to_vec();
                        let ga = slot(before, *a, sa);
                        kernels::matmul_nt(ga.data_mut(), g.data(), &vb_data, m, n, k);
                        let gb = slot(before, *b, sb);
                        kernels::matmul_tn(gb.data_mut(), &va_data, g.data(), k, m, n);
                    } else {
                        let vb_data = vb.data().to_vec();
                        let va_data = va.data().to_vec();
                        let ga = slot(before, *a, sa);
                        for (i, &gi) in g.data().iter().enumerate() {
                            kernels::axpy(ga.row_mut(i), gi, &vb_data);
                        }
                        let gb = slot(before, *b, sb);
                        for (i, &gi) in g.data().iter().enumerate() {
                            kernels::axpy(gb.data_mut(), gi, &va_data[i * k..(i + 1) * k]);
                        }
                    }
                }
                Expr::MatMulNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (sa, sb) = (va.shape(), vb.shape());
                    let (m, k, n) = (sa.rows(), sa.cols(), sb.rows());
                    let va_data = va.data().to_vec();
                    let vb_data = vb.data().to_vec();
                    let ga = slot(before, *a, sa);
                    kernels::matmul_nn(ga.data_mut(), g.data(), &vb_data, m, n, k);
                    let gb = slot(before, *b, sb);
                    kernels::matmul_tn(gb.data_mut(), g.data(), &va_data, n, m, k);
                }
                Expr::VecMat(x, a) => {
                    let (vx, va) = (self.value(*x), self.value(*a));
                    let vx_data = vx.data().to_vec();
                    let va_shape = va.shape();
                    let rows: Vec<Vec<f64>> = (0..va_shape.rows()).map(|i| va.row(i).to_vec()).collect();
                    let gx = slot(before, *x, vx.shape());
                    for (i, row) in rows.iter().enumerate() {
                        gx.data_mut()[i] += kernels::dot(g.data(), row);
                    }
                    let ga = slot(before, *a, va_shape);
                    for (i, &xi) in vx_data.iter().enumerate() {
                        kernels::axpy(ga.row_mut(i), xi, g.data());
                    }
                }
                Expr::Dot(a, b) => {
                    let gs = g.item();
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    let ga = slot(before, *a, va.shape());
                    kernels::axpy(ga.data_mut(), gs, vb.data());
                    let gb = slot(before, *b, vb.shape());
                    kernels::axpy(gb.data_mut(), gs, va.data());
                }
                Expr::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let sp = self.value(p).shape();
                        let gp = slot(before, p, sp);
                        kernels::axpy(gp.data_mut(), 1.0, &g.data()[offset..offset + sp.len()]);
                        offset += sp.len();
                    }
                }
                Expr::ConcatCols(parts) => {
                    let total = g.shape().cols();
                    let rows = g.shape().rows();
                    let mut offset = 0;
                    for &p in parts {
                        let sp = self.value(p).shape();
                        let w = sp.cols();
                        let gp = slot(before, p, sp);
                        for r in 0..rows {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            kernels::axpy(gp.row_mut(r), 1.0, src);
                        }
                        offset += w;
                    }
                }
                Expr::Slice(a, start, end) => {
                    let ga = slot(before, *a, self.value(*a).shape());
                    kernels::axpy(&mut ga.data_mut()[*start..*end], 1.0, g.data());
                }
                Expr::SliceCols(a, start, end) => {
                    let sa = self.value(*a).shape();
                    let ga = slot(before, *a, sa);
                    let w = end - start;
                    for r in 0..sa.rows() {
                        kernels::axpy(&mut ga.row_mut(r)[*start..*end], 1.0, &g.data()[r * w..(r + 1) * w]);
                    }
                }
                Expr::Rows(a, rows) => {
                    let sa = self.value(*a).shape();
                    let cols = sa.cols();
                    let ga = slot(before, *a, sa);
                    for (k, &r) in rows.iter().enumerate() {
                        kernels::axpy(ga.row_mut(r as usize), 1.0, &g.data()[k * cols..(k + 1) * cols]);
                    }
                }
                Expr::Gather(a, idx) => {
                    let ga = slot(before, *a, self.value(*a).shape());
                    for (k, &i) in idx.iter().enumerate() {
                        ga.data_mut()[i as usize] += g.data()[k];
                    }
                }
                Expr::Reshape(a) => {
                    let ga = slot(before, *a, self.value(*a).shape());
                    kernels::axpy(ga.data_mut(), 1.0, g.data());
                }
                Expr::Sigmoid(a) => {
                    let y = node.value.data().to_vec();
                    let ga = slot(before, *a, self.value(*a).shape());
                    for ((gi, yi), go) in ga.data_mut().iter_mut().zip(&y).zip(g.data()) {
                        *gi += go * yi * (1.0 - yi);
                    }
                }
                Expr::Tanh(a) => {
                    let y = node.value.data().to_vec();
                    let ga = slot(before, *a, self.value(*a).shape());
                    for ((gi, yi), go) in ga.data_mut().iter_mut().zip(&y).zip(g.data()) {
                        *gi += go * (1.0 - yi * yi);
                    }
                }
                Expr::Relu(a) => {
                    let y = node.value.data().to_vec();
                    let ga = slot(before, *a, self.value(*a).shape());
                    for ((gi, yi), go) in ga.data_mut().iter_mut().zip(&y).zip(g.data()) {
                        if *yi > 0.0 {
                            *gi += go;
                        }
                    }
                }
                Expr::Exp(a) => {
                    let y = node.value.data().to_vec();
                    let ga = slot(before, *a, self.value(*a).shape());
                    for ((gi, yi), go) in ga.data_mut().iter_mut().zip(&y).zip(g.data()) {
                        *gi += go * yi;
                    }
                }
                Expr::Log(a) => {
                    let x = self.value(*a).data().to_vec();
                    let ga = slot(before, *a, self.value(*a).shape());
                    for ((gi, xi), go) in ga.data_mut().iter_mut().zip(&x).zip(g.data()) {
                        *gi += go / xi;
                    }
                }
                Expr::Softmax(a, axis) => {
                    let y = &node.value;
                    let s = y.shape();
                    let ga = slot(before, *a, s);
                    match (s.rank(), *axis) {
                        (1, 0) => softmax_backward(ga.data_mut(), y.data(), g.data()),
                        (2, 1) => {
                            let cols = s.cols();
                            for r in 0..s.rows() {
                                let range = r * cols..(r + 1) * cols;
                                softmax_backward(
                                    &mut ga.data_mut()[range.clone()],
                                    &y.data()[range.clone()],
                                    &g.data()[range],
                                );
                            }
                        }
                        (2, 0) => {
                            let (rows, cols) = (s.rows(), s.cols());
                            let mut yc = vec![0.0; rows];
                            let mut gc = vec![0.0; rows];
                            let mut out = vec![0.0; rows];
                            for j in 0..cols {
                                for i in 0..rows {
                                    yc[i] = y.data()[i * cols + j];
                                    gc[i] = g.data()[i * cols + j];
                                    out[i] = 0.0;
                                }
                                softmax_backward(&mut out, &yc, &gc);
                                for i in 0..rows {
                                    ga.data_mut()[i * cols + j] += out[i];
                                }
                            }
                        }
                        _ => unreachable!("validated at forward time"),
                    }
                }
                Expr::Sum(a) => {
                    let ga = slot(before, *a, self.value(*a).shape());
                    let gs = g.item();
                    ga.data_mut().iter_mut().for_each(|v| *v += gs);
                }
                Expr::Mean(a) => {
                    let sa = self.value(*a).shape();
                    let gs = g.item() / sa.len() as f64;
                    let ga = slot(before, *a, sa);
                    ga.data_mut().iter_mut().for_each(|v| *v += gs);
                }
                Expr::L2Norm(a) => {
                    let norm = node.value.item();
                    let x = self.value(*a).data().to_vec();
                    let ga = slot(before, *a, self.value(*a).shape());
                    if norm > 0.0 {
                        kernels::axpy(ga.data_mut(), g.item() / norm, &x);
                    }
                }
                Expr::RowL2Norm(a) => {
                    let va = self.value(*a);
                    let sa = va.shape();
                    let rows_data: Vec<Vec<f64>> = (0..sa.rows()).map(|i| va.row(i).to_vec()).collect();
                    let norms = node.value.data().to_vec();
                    let ga = slot(before, *a, sa);
                    for (i, row) in rows_data.iter().enumerate() {
                        if norms[i] > 0.0 {
                            kernels::axpy(ga.row_mut(i), g.data()[i] / norms[i], row);
                        }
                    }
                }
                Expr::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    let sa = va.shape();
                    let ga = slot(before, *a, sa);
                    for i in 0..sa.rows() {
                        kernels::axpy(ga.row_mut(i), g.data()[i], vb.row(i));
                    }
                    let gb = slot(before, *b, sa);
                    for i in 0..sa.rows() {
                        kernels::axpy(gb.row_mut(i), g.data()[i], va.row(i));
                    }
                }
                Expr::LstmCell { x, hc, w_ih, w_hh, bias } => {
                    self.lstm_cell_backward(before, node, &g, *x, *hc, *w_ih, *w_hh, *bias);
                }
            }
        }
        Ok(out)
    }

    fn lstm_cell_backward(
        &self,
        before: &mut [Option<Tensor>],
        node: &Node,
        g: &Tensor,
        x: Var,
        hc: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
    ) {
        let aux = node.aux.as_ref().expect("lstm_cell saves activations");
        let vhc = self.value(hc);
        let batch = g.shape().rows();
        let nh = g.shape().cols() / 2;
        let ni = self.value(x).shape().cols();

        let mut dpre = Tensor::zeros(Shape::matrix(batch, 4 * nh));
        let mut dhc = Tensor::zeros(Shape::matrix(batch, 2 * nh));
        for r in 0..batch {
            let gr = g.row(r);
            let ar = aux.row(r);
            let c_prev = &vhc.row(r)[nh..];
            let dpre_r = dpre.row_mut(r);
            for j in 0..nh {
                let (i_g, f_g, g_g, o_g, tc) =
                    (ar[j], ar[nh + j], ar[2 * nh + j], ar[3 * nh + j], ar[4 * nh + j]);
                let dh = gr[j];
                let dc_out = gr[nh + j];
                let dc_total = dc_out + dh * o_g * (1.0 - tc * tc);
                dpre_r[j] = dc_total * g_g * i_g * (1.0 - i_g);
                dpre_r[nh + j] = dc_total * c_prev[j] * f_g * (1.0 - f_g);
                dpre_r[2 * nh + j] = dc_total * i_g * (1.0 - g_g * g_g);
                dpre_r[3 * nh + j] = dh * tc * o_g * (1.0 - o_g);
            }
        }
        // dhc: h half gets dpre · w_hh, c half gets dc_total ⊙ f.
        {
            let vwh = self.value(w_hh);
            let mut dh_prev = Tensor::zeros(Shape::matrix(batch, nh));
            kernels::matmul_nn(dh_prev.data_mut(), dpre.data(), vwh.data(), batch, 4 * nh, nh);
            for r in 0..batch {
                let gr = g.row(r);
                let ar = aux.row(r);
                let dst = dhc.row_mut(r);
                dst[..nh].copy_from_slice(dh_prev.row(r));
                for j in 0..nh {
                    let (f_g, o_g, tc) = (ar[nh + j], ar[3 * nh + j], ar[4 * nh + j]);
                    let dc_total = gr[nh + j] + gr[j] * o_g * (1.0 - tc * tc);
                    dst[nh + j] = dc_total * f_g;
                }
            }
        }

        let h_prev: Tensor = {
            let mut h = Tensor::zeros(Shape::matrix(batch, nh));
            for r in 0..batch {
                h.row_mut(r).copy_from_slice(&vhc.row(r)[..nh]);
            }
            h
        };
        let vwi_data = self.value(w_ih).data().to_vec();
        let vx_data = self.value(x).data().to_vec();

        let gx = slot(before, x, Shape::matrix(batch, ni));
        kernels::matmul_nn(gx.data_mut(), dpre.data(), &vwi_data, batch, 4 * nh, ni);

        let ghc = slot(before, hc, Shape::matrix(batch, 2 * nh));
        kernels::axpy(ghc.data_mut(), 1.0, dhc.data());

        let gwi = slot(before, w_ih, Shape::matrix(4 * nh, ni));
        kernels::matmul_tn(gwi.data_mut(), dpre.data(), &vx_data, 4 * nh, batch, ni);

        let gwh = slot(before, w_hh, Shape::matrix(4 * nh, nh));
        kernels::matmul_tn(gwh.data_mut(), dpre.data(), h_prev.data(), 4 * nh, batch, nh);

        let gb = slot(before, bias, Shape::vector(4 * nh));
        kernels::col_sum(gb.data_mut(), dpre.data(), batch, 4 * nh);
    }

    fn accum_broadcast(
        &self,
        before: &mut [Option<Tensor>],
        target: Var,
        g: &Tensor,
        sign: f64,
        times: Option<&Tensor>,
    ) {
        let shape = self.value(target).shape();
        let ga = slot(before, target, shape);
        if shape.len() == 1 && g.len() > 1 {
            // Broadcast scalar: gradient is the (weighted) sum over g.
            let total: f64 = match times {
                Some(t) if t.len() > 1 => g.data().iter().zip(t.data()).map(|(a, b)| a * b).sum(),
                Some(t) => g.data().iter().sum::<f64>() * t.data()[0],
                None => g.data().iter().sum(),
            };
            ga.data_mut()[0] += sign * total;
        } else {
            match times {
                Some(t) if t.len() == 1 => kernels::axpy(ga.data_mut(), sign * t.data()[0], g.data()),
                Some(t) => {
                    for ((gi, go), ti) in ga.data_mut().iter_mut().zip(g.data()).zip(t.data()) {
                        *gi += sign * go * ti;
                    }
                }
                None => kernels::axpy(ga.data_mut(), sign, g.data()),
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_slice(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(out: &mut [f64], y: &[f64], g: &[f64]) {
    let inner = kernels::dot(g, y);
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - inner);
    }
}

fn map(_op: &'static str, t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn gather_rows(op: &'static str, src: &Tensor, rows: &[u32]) -> Result<Tensor> {
    let s = src.shape();
    if s.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: s.to_string(),
            reason: "row gather needs a rank-2 source".into(),
        });
    }
    let cols = s.cols();
    let mut out = Tensor::zeros(Shape::matrix(rows.len(), cols));
    for (k, &r) in rows.iter().enumerate() {
        let r = r as usize;
        if r >= s.rows() {
            return Err(TensorError::IndexOutOfBounds {
                op,
                index: r,
                size: s.rows(),
            });
        }
        out.row_mut(k).copy_from_slice(src.row(r));
    }
    Ok(out)
}

fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        for (o, &bi) in out.data_mut().iter_mut().zip(b.data()) {
            *o = f(*o, bi);
        }
        Ok(out)
    } else if b.len() == 1 {
        let bv = b.data()[0];
        let mut out = a.clone();
        out.data_mut().iter_mut().for_each(|o| *o = f(*o, bv));
        Ok(out)
    } else if a.len() == 1 {
        let av = a.data()[0];
        let mut out = b.clone();
        out.data_mut().iter_mut().for_each(|o| *o = f(av, *o));
        Ok(out)
    } else {
        Err(shape_mismatch(op, a.shape(), b.shape()))
    }
}

fn shape_mismatch(op: &'static str, lhs: Shape, rhs: Shape) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_string(),
        rhs: rhs.to_string(),
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: Shape) -> &'g mut Tensor {
    grads[v.idx()].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(slot: &mut Option<Tensor>, shape: Shape, data: &[f64]) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    kernels::axpy(t.data_mut(), 1.0, data);
}
