//! Wengert tape: eager forward evaluation with recorded adjoint structure.
//!
//! Every primitive is recorded exactly once; recording *is* evaluation, so the
//! value of any node is available immediately. Backward replays the tape in
//! strict reverse recording order. A tape is single-owner; batch members that
//! need concurrency get private tapes and their gradients are merged in a
//! fixed order afterwards.

use crate::autodiff::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Value;
use ndarray::{Array1, Array2, Axis};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf { param: usize },
    Const,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddColVec { m: usize, v: usize },
    MatMul { a: usize, b: usize },
    MatMulScaled { a: usize, b: usize, c: T },
    MatVec { m: usize, v: usize },
    Scale { a: usize, c: T },
    ScaleByScalar { a: usize, s: usize },
    Tanh { a: usize },
    Softplus { a: usize },
    Sqrt { a: usize },
    Recip { a: usize },
    Max1 { a: usize },
    Transpose { a: usize },
    ScatterMat { src: usize, positions: Vec<(usize, usize)> },
    Sum { a: usize },
    SumSq { a: usize },
    ColSumSq { a: usize },
    Norm1 { a: usize },
    NormInf { a: usize },
    Concat { parts: Vec<usize> },
    Slice { a: usize, start: usize, len: usize },
    AddN { parts: Vec<usize> },
    Solve { a: usize, b: usize },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Value<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes, keeping the allocation.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Value<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).as_scalar()
    }

    fn push(&mut self, op: Op<T>, value: Value<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves and constants -------------------------------------------

    /// Bind a parameter as a differentiable leaf (copies the current value).
    pub fn leaf(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.index_of(name)?;
        let value = store.entry(id).value.clone();
        Ok(self.push(Op::Leaf { param: id }, value))
    }

    pub fn leaf_id(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        let value = store.entry(id).value.clone();
        self.push(Op::Leaf { param: id }, value)
    }

    pub fn constant(&mut self, value: Value<T>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn constant_scalar(&mut self, s: T) -> Var {
        self.constant(Value::Scalar(s))
    }

    pub fn constant_vector(&mut self, v: Array1<T>) -> Var {
        self.constant(Value::Vector(v))
    }

    pub fn constant_matrix(&mut self, m: Array2<T>) -> Var {
        self.constant(Value::Matrix(m))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if !va.same_shape(vb) {
                return Err(Error::shape("add", format!("{} vs {}", va.shape_desc(), vb.shape_desc())));
            }
            match (va, vb) {
                (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(*x + *y),
                (Value::Vector(x), Value::Vector(y)) => Value::Vector(x + y),
                (Value::Matrix(x), Value::Matrix(y)) => Value::Matrix(x + y),
                _ => unreachable!(),
            }
        };
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if !va.same_shape(vb) {
                return Err(Error::shape("sub", format!("{} vs {}", va.shape_desc(), vb.shape_desc())));
            }
            match (va, vb) {
                (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(*x - *y),
                (Value::Vector(x), Value::Vector(y)) => Value::Vector(x - y),
                (Value::Matrix(x), Value::Matrix(y)) => Value::Matrix(x - y),
                _ => unreachable!(),
            }
        };
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, out))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if !va.same_shape(vb) {
                return Err(Error::shape("mul", format!("{} vs {}", va.shape_desc(), vb.shape_desc())));
            }
            match (va, vb) {
                (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(*x * *y),
                (Value::Vector(x), Value::Vector(y)) => Value::Vector(x * y),
                (Value::Matrix(x), Value::Matrix(y)) => Value::Matrix(x * y),
                _ => unreachable!(),
            }
        };
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, out))
    }

    /// Matrix plus column vector, broadcast over columns.
    pub fn add_col(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = {
            let (vm, vv) = (self.value(m), self.value(v));
            match (vm, vv) {
                (Value::Matrix(x), Value::Vector(y)) if x.nrows() == y.len() => {
                    Value::Matrix(x + &y.view().insert_axis(Axis(1)))
                }
                _ => {
                    return Err(Error::shape(
                        "add_col",
                        format!("{} vs {}", vm.shape_desc(), vv.shape_desc()),
                    ))
                }
            }
        };
        Ok(self.push(Op::AddColVec { m: m.0, v: v.0 }, out))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            match (va, vb) {
                (Value::Matrix(x), Value::Matrix(y)) if x.ncols() == y.nrows() => {
                    Value::Matrix(x.dot(y))
                }
                _ => {
                    return Err(Error::shape(
                        "matmul",
                        format!("{} vs {}", va.shape_desc(), vb.shape_desc()),
                    ))
                }
            }
        };
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, out))
    }

    /// `c * (A @ B)` as a single node; the workhorse of the segmented Taylor
    /// recurrence, where every term carries a constant `t/(s k)` factor.
    pub fn matmul_scaled(&mut self, a: Var, b: Var, c: T) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            match (va, vb) {
                (Value::Matrix(x), Value::Matrix(y)) if x.ncols() == y.nrows() => {
                    let mut prod = x.dot(y);
                    prod.mapv_inplace(|e| e * c);
                    Value::Matrix(prod)
                }
                _ => {
                    return Err(Error::shape(
                        "matmul_scaled",
                        format!("{} vs {}", va.shape_desc(), vb.shape_desc()),
                    ))
                }
            }
        };
        Ok(self.push(Op::MatMulScaled { a: a.0, b: b.0, c }, out))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = {
            let (vm, vv) = (self.value(m), self.value(v));
            match (vm, vv) {
                (Value::Matrix(x), Value::Vector(y)) if x.ncols() == y.len() => {
                    Value::Vector(x.dot(y))
                }
                _ => {
                    return Err(Error::shape(
                        "matvec",
                        format!("{} vs {}", vm.shape_desc(), vv.shape_desc()),
                    ))
                }
            }
        };
        Ok(self.push(Op::MatVec { m: m.0, v: v.0 }, out))
    }

    /// Solve `A x = b` by LU with partial pivoting; `b` may be a vector or a
    /// matrix of right-hand sides. Differentiable in both operands.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let mat = va.as_matrix().map_err(|_| {
                Error::shape("solve", format!("lhs must be square matrix, got {}", va.shape_desc()))
            })?;
            if mat.nrows() != mat.ncols() {
                return Err(Error::shape(
                    "solve",
                    format!("lhs must be square, got {}", va.shape_desc()),
                ));
            }
            let lu = linalg::LuFactors::new(mat)?;
            match vb {
                Value::Vector(rhs) => {
                    if rhs.len() != mat.nrows() {
                        return Err(Error::shape(
                            "solve",
                            format!("{} vs {}", va.shape_desc(), vb.shape_desc()),
                        ));
                    }
                    Value::Vector(lu.solve_vec(rhs))
                }
                Value::Matrix(rhs) => {
                    if rhs.nrows() != mat.nrows() {
                        return Err(Error::shape(
                            "solve",
                            format!("{} vs {}", va.shape_desc(), vb.shape_desc()),
                        ));
                    }
                    Value::Matrix(lu.solve_mat(rhs))
                }
                Value::Scalar(_) => {
                    return Err(Error::shape("solve", "rhs must be vector or matrix".to_string()))
                }
            }
        };
        Ok(self.push(Op::Solve { a: a.0, b: b.0 }, out))
    }

    // ---- scaling -----------------------------------------------------------

    /// Multiply by a non-differentiable constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(*x * c),
            Value::Vector(x) => Value::Vector(x.mapv(|e| e * c)),
            Value::Matrix(x) => Value::Matrix(x.mapv(|e| e * c)),
        };
        self.push(Op::Scale { a: a.0, c }, out)
    }

    /// Multiply a tensor by a tracked scalar node (broadcast over elements).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let sv = self.scalar_value(s).map_err(|_| {
                Error::shape("scale_by", format!("scale must be scalar, got {}", self.value(s).shape_desc()))
            })?;
            match self.value(a) {
                Value::Scalar(x) => Value::Scalar(*x * sv),
                Value::Vector(x) => Value::Vector(x.mapv(|e| e * sv)),
                Value::Matrix(x) => Value::Matrix(x.mapv(|e| e * sv)),
            }
        };
        Ok(self.push(Op::ScaleByScalar { a: a.0, s: s.0 }, out))
    }

    // ---- nonlinearities ------------------------------------------------------

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(x.tanh()),
            Value::Vector(x) => Value::Vector(x.mapv(|e| e.tanh())),
            Value::Matrix(x) => Value::Matrix(x.mapv(|e| e.tanh())),
        };
        self.push(Op::Tanh { a: a.0 }, out)
    }

    /// Elementwise `ln(1 + e^x)`, computed overflow-safe.
    pub fn softplus(&mut self, a: Var) -> Var {
        fn sp<T: Scalar>(x: T) -> T {
            // max(x, 0) + ln(1 + e^{-|x|})
            let ax = x.abs();
            x.max(T::zero()) + (T::one() + (-ax).exp()).ln()
        }
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(sp(*x)),
            Value::Vector(x) => Value::Vector(x.mapv(sp)),
            Value::Matrix(x) => Value::Matrix(x.mapv(sp)),
        };
        self.push(Op::Softplus { a: a.0 }, out)
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = {
            let m = self.value(a).as_matrix().map_err(|_| {
                Error::shape("transpose", format!("expected matrix, got {}", self.value(a).shape_desc()))
            })?;
            Value::Matrix(m.t().to_owned())
        };
        Ok(self.push(Op::Transpose { a: a.0 }, out))
    }

    /// Place the elements of a vector at fixed matrix positions, zero
    /// elsewhere (used to assemble triangular factors from packed storage).
    pub fn scatter_mat(
        &mut self,
        src: Var,
        positions: &[(usize, usize)],
        nrows: usize,
        ncols: usize,
    ) -> Result<Var> {
        let out = {
            let v = self.value(src).as_vector().map_err(|_| {
                Error::shape("scatter_mat", format!("expected vector, got {}", self.value(src).shape_desc()))
            })?;
            if v.len() != positions.len() {
                return Err(Error::shape(
                    "scatter_mat",
                    format!("vector[{}] vs {} positions", v.len(), positions.len()),
                ));
            }
            let mut m = Array2::zeros((nrows, ncols));
            for (k, &(r, c)) in positions.iter().enumerate() {
                if r >= nrows || c >= ncols {
                    return Err(Error::shape(
                        "scatter_mat",
                        format!("position ({r},{c}) outside matrix[{nrows}x{ncols}]"),
                    ));
                }
                m[(r, c)] = v[k];
            }
            Value::Matrix(m)
        };
        Ok(self.push(Op::ScatterMat { src: src.0, positions: positions.to_vec() }, out))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(x.sqrt()),
            Value::Vector(x) => Value::Vector(x.mapv(|e| e.sqrt())),
            Value::Matrix(x) => Value::Matrix(x.mapv(|e| e.sqrt())),
        };
        self.push(Op::Sqrt { a: a.0 }, out)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: Var) -> Var {
        let one = T::one();
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(one / *x),
            Value::Vector(x) => Value::Vector(x.mapv(|e| one / e)),
            Value::Matrix(x) => Value::Matrix(x.mapv(|e| one / e)),
        };
        self.push(Op::Recip { a: a.0 }, out)
    }

    /// Elementwise `max(1, x)`. At the tie `x = 1` the adjoint takes the
    /// constant branch (zero), keeping the rule deterministic.
    pub fn max1(&mut self, a: Var) -> Var {
        let one = T::one();
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(x.max(one)),
            Value::Vector(x) => Value::Vector(x.mapv(|e| e.max(one))),
            Value::Matrix(x) => Value::Matrix(x.mapv(|e| e.max(one))),
        };
        self.push(Op::Max1 { a: a.0 }, out)
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(*x),
            Value::Vector(x) => Value::Scalar(x.iter().fold(T::zero(), |acc, e| acc + *e)),
            Value::Matrix(x) => Value::Scalar(x.iter().fold(T::zero(), |acc, e| acc + *e)),
        };
        self.push(Op::Sum { a: a.0 }, out)
    }

    /// Squared Frobenius norm (squared 2-norm for vectors).
    pub fn sumsq(&mut self, a: Var) -> Var {
        let out = match self.value(a) {
            Value::Scalar(x) => Value::Scalar(*x * *x),
            Value::Vector(x) => Value::Scalar(x.iter().fold(T::zero(), |acc, e| acc + *e * *e)),
            Value::Matrix(x) => Value::Scalar(x.iter().fold(T::zero(), |acc, e| acc + *e * *e)),
        };
        self.push(Op::SumSq { a: a.0 }, out)
    }

    /// Per-column squared 2-norm of a matrix: `out[j] = sum_i a[i,j]^2`.
    pub fn col_sumsq(&mut self, a: Var) -> Result<Var> {
        let out = {
            let m = self.value(a).as_matrix().map_err(|_| {
                Error::shape("col_sumsq", format!("expected matrix, got {}", self.value(a).shape_desc()))
            })?;
            let mut s = Array1::zeros(m.ncols());
            for (j, col) in m.columns().into_iter().enumerate() {
                s[j] = col.iter().fold(T::zero(), |acc, e| acc + *e * *e);
            }
            Value::Vector(s)
        };
        Ok(self.push(Op::ColSumSq { a: a.0 }, out))
    }

    /// Matrix 1-norm: maximum absolute column sum. Ties break to the lowest
    /// column index in the adjoint.
    pub fn norm1(&mut self, a: Var) -> Result<Var> {
        let out = {
            let m = self.value(a).as_matrix().map_err(|_| {
                Error::shape("norm1", format!("expected matrix, got {}", self.value(a).shape_desc()))
            })?;
            Value::Scalar(norm1_argmax(m).1)
        };
        Ok(self.push(Op::Norm1 { a: a.0 }, out))
    }

    /// Matrix infinity-norm: maximum absolute row sum. Ties break to the
    /// lowest row index in the adjoint.
    pub fn norminf(&mut self, a: Var) -> Result<Var> {
        let out = {
            let m = self.value(a).as_matrix().map_err(|_| {
                Error::shape("norminf", format!("expected matrix, got {}", self.value(a).shape_desc()))
            })?;
            Value::Scalar(norminf_argmax(m).1)
        };
        Ok(self.push(Op::NormInf { a: a.0 }, out))
    }

    // ---- structure ---------------------------------------------------------------

    /// Concatenate vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            match self.value(*p) {
                Value::Vector(v) => data.extend(v.iter().copied()),
                Value::Scalar(s) => data.push(*s),
                other => {
                    return Err(Error::shape(
                        "concat",
                        format!("expected vectors or scalars, got {}", other.shape_desc()),
                    ))
                }
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::Concat { parts: ids }, Value::Vector(Array1::from(data))))
    }

    /// Contiguous slice of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let v = self.value(a).as_vector().map_err(|_| {
                Error::shape("slice", format!("expected vector, got {}", self.value(a).shape_desc()))
            })?;
            if start + len > v.len() {
                return Err(Error::shape(
                    "slice",
                    format!("range {start}..{} out of vector[{}]", start + len, v.len()),
                ));
            }
            Value::Vector(v.slice(ndarray::s![start..start + len]).to_owned())
        };
        Ok(self.push(Op::Slice { a: a.0, start, len }, out))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("add_n of zero terms"));
        }
        let mut acc = self.value(parts[0]).clone();
        for p in &parts[1..] {
            let v = self.value(*p);
            if !acc.same_shape(v) {
                return Err(Error::shape(
                    "add_n",
                    format!("{} vs {}", acc.shape_desc(), v.shape_desc()),
                ));
            }
            acc.add_assign(v)?;
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::AddN { parts: ids }, acc))
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse sweep from a scalar output. Returns per-parameter gradients;
    /// parameters the tape never touched are absent (read as zero).
    pub fn backward(&self, out: Var, n_params: usize) -> Result<Gradients<T>> {
        if self.value(out).as_scalar().is_err() {
            return Err(Error::invalid(format!(
                "backward requires a scalar output, got {}",
                self.value(out).shape_desc()
            )));
        }
        let mut adj: Vec<Option<Value<T>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(Value::Scalar(T::one()));
        let mut grads = Gradients::new(n_params);

        for i in (0..self.nodes.len()).rev() {
            let Some(gbar) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { param } => grads.add(*param, &gbar)?,
                Op::Const => {}
                Op::Add { a, b } => {
                    acc(&mut adj, *a, gbar.clone())?;
                    acc(&mut adj, *b, gbar)?;
                }
                Op::Sub { a, b } => {
                    acc(&mut adj, *a, gbar.clone())?;
                    acc(&mut adj, *b, neg(&gbar))?;
                }
                Op::Mul { a, b } => {
                    let ga = elem_mul(&gbar, &self.nodes[*b].value)?;
                    let gb = elem_mul(&gbar, &self.nodes[*a].value)?;
                    acc(&mut adj, *a, ga)?;
                    acc(&mut adj, *b, gb)?;
                }
                Op::AddColVec { m, v } => {
                    let g = gbar.as_matrix()?;
                    let gv = Value::Vector(g.sum_axis(Axis(1)));
                    acc(&mut adj, *m, gbar.clone())?;
                    acc(&mut adj, *v, gv)?;
                }
                Op::MatMul { a, b } => {
                    let g = gbar.as_matrix()?;
                    let av = self.nodes[*a].value.as_matrix()?;
                    let bv = self.nodes[*b].value.as_matrix()?;
                    let ga = Value::Matrix(g.dot(&bv.t()));
                    let gb = Value::Matrix(av.t().dot(g));
                    acc(&mut adj, *a, ga)?;
                    acc(&mut adj, *b, gb)?;
                }
                Op::MatMulScaled { a, b, c } => {
                    let g = gbar.as_matrix()?;
                    let av = self.nodes[*a].value.as_matrix()?;
                    let bv = self.nodes[*b].value.as_matrix()?;
                    let mut ga = g.dot(&bv.t());
                    ga.mapv_inplace(|e| e * *c);
                    let mut gb = av.t().dot(g);
                    gb.mapv_inplace(|e| e * *c);
                    acc(&mut adj, *a, Value::Matrix(ga))?;
                    acc(&mut adj, *b, Value::Matrix(gb))?;
                }
                Op::MatVec { m, v } => {
                    let g = gbar.as_vector()?;
                    let mv = self.nodes[*m].value.as_matrix()?;
                    let vv = self.nodes[*v].value.as_vector()?;
                    let gm = Value::Matrix(outer(g, vv));
                    let gv = Value::Vector(mv.t().dot(g));
                    acc(&mut adj, *m, gm)?;
                    acc(&mut adj, *v, gv)?;
                }
                Op::Scale { a, c } => {
                    acc(&mut adj, *a, scale_val(&gbar, *c))?;
                }
                Op::ScaleByScalar { a, s } => {
                    let sv = self.nodes[*s].value.as_scalar()?;
                    let av = &self.nodes[*a].value;
                    let ga = scale_val(&gbar, sv);
                    let gs = Value::Scalar(dot_all(&gbar, av)?);
                    acc(&mut adj, *a, ga)?;
                    acc(&mut adj, *s, gs)?;
                }
                Op::Tanh { a } => {
                    // d tanh = 1 - y^2, using the stored output
                    let y = &self.nodes[i].value;
                    let one = T::one();
                    let ga = zip_map(&gbar, y, |g, y| g * (one - y * y))?;
                    acc(&mut adj, *a, ga)?;
                }
                Op::Softplus { a } => {
                    // d softplus = logistic sigmoid
                    let x = &self.nodes[*a].value;
                    let one = T::one();
                    let ga = zip_map(&gbar, x, |g, x| g * (one / (one + (-x).exp())))?;
                    acc(&mut adj, *a, ga)?;
                }
                Op::Transpose { a } => {
                    let g = gbar.as_matrix()?;
                    acc(&mut adj, *a, Value::Matrix(g.t().to_owned()))?;
                }
                Op::ScatterMat { src, positions, .. } => {
                    let g = gbar.as_matrix()?;
                    let mut gs = Array1::zeros(positions.len());
                    for (k, &(r, c)) in positions.iter().enumerate() {
                        gs[k] = g[(r, c)];
                    }
                    acc(&mut adj, *src, Value::Vector(gs))?;
                }
                Op::Sqrt { a } => {
                    let y = &self.nodes[i].value;
                    let half = T::from_f64_lossy(0.5);
                    let ga = zip_map(&gbar, y, |g, y| g * half / y)?;
                    acc(&mut adj, *a, ga)?;
                }
                Op::Recip { a } => {
                    let y = &self.nodes[i].value;
                    let ga = zip_map(&gbar, y, |g, y| -g * y * y)?;
                    acc(&mut adj, *a, ga)?;
                }
                Op::Max1 { a } => {
                    let x = &self.nodes[*a].value;
                    let one = T::one();
                    let ga = zip_map(&gbar, x, |g, x| if x > one { g } else { T::zero() })?;
                    acc(&mut adj, *a, ga)?;
                }
                Op::Sum { a } => {
                    let g = gbar.as_scalar()?;
                    let ga = match &self.nodes[*a].value {
                        Value::Scalar(_) => Value::Scalar(g),
                        Value::Vector(v) => Value::Vector(Array1::from_elem(v.len(), g)),
                        Value::Matrix(m) => Value::Matrix(Array2::from_elem(m.dim(), g)),
                    };
                    acc(&mut adj, *a, ga)?;
                }
                Op::SumSq { a } => {
                    let g = gbar.as_scalar()?;
                    let two = T::from_f64_lossy(2.0);
                    let x = &self.nodes[*a].value;
                    let ga = map_val(x, |e| two * g * e);
                    acc(&mut adj, *a, ga)?;
                }
                Op::ColSumSq { a } => {
                    let g = gbar.as_vector()?;
                    let x = self.nodes[*a].value.as_matrix()?;
                    let two = T::from_f64_lossy(2.0);
                    let mut ga = x.clone();
                    for (j, mut col) in ga.columns_mut().into_iter().enumerate() {
                        let c = two * g[j];
                        col.mapv_inplace(|e| e * c);
                    }
                    acc(&mut adj, *a, Value::Matrix(ga))?;
                }
                Op::Norm1 { a } => {
                    // subgradient: sign pattern on the argmax column
                    let g = gbar.as_scalar()?;
                    let x = self.nodes[*a].value.as_matrix()?;
                    let (jmax, _) = norm1_argmax(x);
                    let mut ga = Array2::zeros(x.dim());
                    for i_row in 0..x.nrows() {
                        ga[(i_row, jmax)] = g * sign(x[(i_row, jmax)]);
                    }
                    acc(&mut adj, *a, Value::Matrix(ga))?;
                }
                Op::NormInf { a } => {
                    let g = gbar.as_scalar()?;
                    let x = self.nodes[*a].value.as_matrix()?;
                    let (imax, _) = norminf_argmax(x);
                    let mut ga = Array2::zeros(x.dim());
                    for j in 0..x.ncols() {
                        ga[(imax, j)] = g * sign(x[(imax, j)]);
                    }
                    acc(&mut adj, *a, Value::Matrix(ga))?;
                }
                Op::Concat { parts } => {
                    let g = gbar.as_vector()?;
                    let mut offset = 0;
                    for p in parts {
                        let gp = match &self.nodes[*p].value {
                            Value::Vector(v) => {
                                let len = v.len();
                                let piece =
                                    Value::Vector(g.slice(ndarray::s![offset..offset + len]).to_owned());
                                offset += len;
                                piece
                            }
                            Value::Scalar(_) => {
                                let piece = Value::Scalar(g[offset]);
                                offset += 1;
                                piece
                            }
                            _ => unreachable!("concat inputs are vectors or scalars"),
                        };
                        acc(&mut adj, *p, gp)?;
                    }
                }
                Op::Slice { a, start, len } => {
                    let g = gbar.as_vector()?;
                    let full = self.nodes[*a].value.as_vector()?.len();
                    let mut ga = Array1::zeros(full);
                    ga.slice_mut(ndarray::s![*start..*start + *len]).assign(g);
                    acc(&mut adj, *a, Value::Vector(ga))?;
                }
                Op::AddN { parts } => {
                    for p in parts {
                        acc(&mut adj, *p, gbar.clone())?;
                    }
                }
                Op::Solve { a, b } => {
                    // x = A^{-1} b  =>  grad_b = A^{-T} gbar, grad_A = -grad_b x^T
                    let av = self.nodes[*a].value.as_matrix()?;
                    let at = av.t().to_owned();
                    let lu_t = linalg::LuFactors::new(&at)?;
                    match (&gbar, &self.nodes[i].value) {
                        (Value::Vector(g), Value::Vector(x)) => {
                            let gb = lu_t.solve_vec(g);
                            let ga = -outer(&gb, x);
                            acc(&mut adj, *a, Value::Matrix(ga))?;
                            acc(&mut adj, *b, Value::Vector(gb))?;
                        }
                        (Value::Matrix(g), Value::Matrix(x)) => {
                            let gb = lu_t.solve_mat(g);
                            let ga = -gb.dot(&x.t());
                            acc(&mut adj, *a, Value::Matrix(ga))?;
                            acc(&mut adj, *b, Value::Matrix(gb))?;
                        }
                        _ => unreachable!("solve output shape matches rhs"),
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Backward that zeroes and then populates the store's gradient slots.
    /// Parameters untouched by the tape end up with zero gradients.
    pub fn backward_into(&self, out: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(out, store.len())?;
        store.zero_grads();
        store.accumulate(&grads)
    }
}

fn acc<T: Scalar>(adj: &mut [Option<Value<T>>], id: usize, g: Value<T>) -> Result<()> {
    match &mut adj[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn neg<T: Scalar>(v: &Value<T>) -> Value<T> {
    map_val(v, |e| -e)
}

fn scale_val<T: Scalar>(v: &Value<T>, c: T) -> Value<T> {
    map_val(v, |e| e * c)
}

fn map_val<T: Scalar>(v: &Value<T>, f: impl Fn(T) -> T) -> Value<T> {
    match v {
        Value::Scalar(s) => Value::Scalar(f(*s)),
        Value::Vector(a) => Value::Vector(a.mapv(&f)),
        Value::Matrix(m) => Value::Matrix(m.mapv(&f)),
    }
}

fn zip_map<T: Scalar>(a: &Value<T>, b: &Value<T>, f: impl Fn(T, T) -> T) -> Result<Value<T>> {
    if !a.same_shape(b) {
        return Err(Error::shape("zip", format!("{} vs {}", a.shape_desc(), b.shape_desc())));
    }
    Ok(match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(f(*x, *y)),
        (Value::Vector(x), Value::Vector(y)) => {
            Value::Vector(ndarray::Zip::from(x).and(y).map_collect(|&x, &y| f(x, y)))
        }
        (Value::Matrix(x), Value::Matrix(y)) => {
            Value::Matrix(ndarray::Zip::from(x).and(y).map_collect(|&x, &y| f(x, y)))
        }
        _ => unreachable!(),
    })
}

fn elem_mul<T: Scalar>(a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
    zip_map(a, b, |x, y| x * y)
}

fn dot_all<T: Scalar>(a: &Value<T>, b: &Value<T>) -> Result<T> {
    if !a.same_shape(b) {
        return Err(Error::shape("dot", format!("{} vs {}", a.shape_desc(), b.shape_desc())));
    }
    Ok(match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => *x * *y,
        (Value::Vector(x), Value::Vector(y)) => x.iter().zip(y).fold(T::zero(), |s, (a, b)| s + *a * *b),
        (Value::Matrix(x), Value::Matrix(y)) => x.iter().zip(y).fold(T::zero(), |s, (a, b)| s + *a * *b),
        _ => unreachable!(),
    })
}

fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let mut m = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            m[(i, j)] = a[i] * b[j];
        }
    }
    m
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// (argmax column, value) of the maximum absolute column sum; ties keep the
/// lowest index.
fn norm1_argmax<T: Scalar>(m: &Array2<T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (j, col) in m.columns().into_iter().enumerate() {
        let s = col.iter().fold(T::zero(), |acc, e| acc + e.abs());
        if s > best.1 {
            best = (j, s);
        }
    }
    if m.ncols() == 0 {
        return (0, T::zero());
    }
    best
}

fn norminf_argmax<T: Scalar>(m: &Array2<T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, row) in m.rows().into_iter().enumerate() {
        let s = row.iter().fold(T::zero(), |acc, e| acc + e.abs());
        if s > best.1 {
            best = (i, s);
        }
    }
    if m.nrows() == 0 {
        return (0, T::zero());
    }
    best
}
