//! Dense `f64` matrices, named parameter stores and a small reverse-mode
//! tape covering the primitives the recommender losses are built from.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every operation as a node
//! holding its forward value, and [`Graph::backward`] walks the nodes in
//! reverse to produce a [`GradStore`] with one entry per parameter. Parameters
//! that never enter the graph get an all-zero gradient.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix. Vectors are `n×1` or `1×n`, scalars `1×1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = String;

    fn try_from(r: MatrixRepr) -> Result<Self, String> {
        let [rows, cols] = r.shape;
        if rows * cols != r.values.len() {
            return Err(format!(
                "shape {rows}x{cols} does not match {} values",
                r.values.len()
            ));
        }
        Ok(Matrix {
            rows,
            cols,
            data: r.values,
        })
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            shape: [m.rows, m.cols],
            values: m.data,
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::filled(1, 1, v)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// I.i.d. uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1×1` matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "zip_map shape");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += f · other`
    pub fn add_scaled(&mut self, other: &Matrix, f: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += f * b;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for a in &mut self.data {
            *a *= f;
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Named parameter tensors with shapes fixed at registration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    entries: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; re-registering a name is a contract error.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` already registered")));
        }
        if !value.is_finite() {
            return Err(Error::Numeric { param: name });
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    /// Overwrites an existing entry, keeping its shape.
    pub fn replace(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.values().flat_map(|m| m.as_slice().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.entries
            .values_mut()
            .flat_map(|m| m.as_mut_slice().iter_mut())
    }

    /// Same keys and shapes as `other`.
    pub fn congruent(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(Error::Contract("parameter sets differ in keys or shapes".into()))
        }
    }

    /// First parameter holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(k, _)| k.as_str())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(name) => Err(Error::Numeric { param: name.into() }),
            None => Ok(()),
        }
    }

    /// `self += f · other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamStore, f: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.add_scaled(b, f);
        }
        Ok(())
    }

    pub fn scale(&mut self, f: f64) {
        for m in self.entries.values_mut() {
            m.scale(f);
        }
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let store: ParamStore = serde_json::from_str(s)?;
        store.check_finite()?;
        Ok(store)
    }
}

/// `∂loss/∂param` for every entry of the store the graph was built over.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore(ParamStore);

impl GradStore {
    pub fn zeros_for(params: &ParamStore) -> Self {
        GradStore(params.zeros_like())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.0.iter()
    }

    pub fn as_store(&self) -> &ParamStore {
        &self.0
    }

    /// Accumulates another gradient of the same layout.
    pub fn accumulate(&mut self, other: &GradStore) -> Result<()> {
        self.0.add_scaled(&other.0, 1.0)
    }

    pub fn scale(&mut self, f: f64) {
        self.0.scale(f);
    }
}

/// `p' = p − lr·g` over every key.
pub fn sgd_step(p: &ParamStore, g: &GradStore, lr: f64) -> Result<ParamStore> {
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
    }
    let mut out = p.clone();
    out.add_scaled(&g.0, -lr)?;
    out.check_finite()?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// First/second moment estimates for Adam, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Update rule plus whatever state it carries between steps.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            }),
        }
    }

    pub fn step(&mut self, p: &ParamStore, g: &GradStore, lr: f64) -> Result<ParamStore> {
        let st = match self {
            Optimizer::Sgd => return sgd_step(p, g, lr),
            Optimizer::Adam(st) => st,
        };
        if !(lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
        }
        p.check_congruent(&g.0)?;
        p.check_congruent(&st.m)?;
        st.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(st.t);
        let c2 = 1.0 - ADAM_BETA2.powi(st.t);
        let mut out = p.clone();
        let moments = st.m.entries.values_mut().zip(st.v.entries.values_mut());
        for ((w, gr), (m, v)) in out.entries.values_mut().zip(g.0.entries.values()).zip(moments) {
            for i in 0..w.data.len() {
                let gi = gr.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                w.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        out.check_finite()?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1−rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(Matrix::filled(rows, cols, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

/// Dropout mask for `mode`; `None` in evaluation mode.
pub fn maybe_dropout<R: Rng + ?Sized>(
    mode: Mode,
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Option<Matrix>> {
    match mode {
        Mode::Eval => Ok(None),
        Mode::Train if rate == 0.0 => Ok(None),
        Mode::Train => dropout_mask(rows, cols, rate, rng).map(Some),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Gather(NodeId, Vec<usize>),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    RowDot(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Reshape(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a computation over a borrowed [`ParamStore`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<&'p str, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Leaf node for a named parameter; repeated calls share one node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let params = self.params;
        let (key, value) = params
            .entries
            .get_key_value(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if let Some(&id) = self.param_nodes.get(key.as_str()) {
            return Ok(id);
        }
        let id = self.push(value.clone(), Op::Param(key.clone()));
        self.param_nodes.insert(key.as_str(), id);
        Ok(id)
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::scalar(v))
    }

    /// Rows `idx` of `src`, in order (embedding lookup).
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let s = self.value(src);
        let mut data = Vec::with_capacity(idx.len() * s.cols());
        for &i in idx {
            data.extend_from_slice(s.row(i));
        }
        let v = Matrix::from_vec(idx.len(), s.cols(), data);
        self.push(v, Op::Gather(src, idx.to_vec()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `scale·a + shift`
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: NodeId, f: f64) -> NodeId {
        self.affine(a, f, 0.0)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 0.0)
    }

    /// `a · s` for a `1×1` node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let f = self.value(s).item();
        let v = self.value(a).map(|x| x * f);
        self.push(v, Op::ScaleBy(a, s))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Per-row sums, `rows×1`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum());
        self.push(v, Op::SumRows(a))
    }

    /// Per-row dot products of two same-shape matrices, `rows×1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "row_dot shape");
        let v = Matrix::from_fn(ma.rows(), 1, |r, _| dot(ma.row(r), mb.row(r)));
        self.push(v, Op::RowDot(a, b))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = Matrix::from_vec(rows, cols, self.value(a).as_slice().to_vec());
        self.push(v, Op::Reshape(a))
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: NodeId) -> Result<(f64, GradStore)> {
        let value = self.value(loss).item();
        let mut grads = GradStore::zeros_for(self.params);
        if !value.is_finite() {
            let param = self
                .params
                .first_non_finite()
                .unwrap_or("loss")
                .to_string();
            return Err(Error::Numeric { param });
        }

        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        fn acc(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut adj[id.0] {
                Some(m) => m.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    grads.0.entries.get_mut(name).expect("param present").add_assign(&g);
                }
                Op::Gather(src, idx) => {
                    let s = self.value(*src);
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut adj, *src, d);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Affine(a, scale) => acc(&mut adj, *a, g.map(|x| x * scale)),
                Op::ScaleBy(a, s) => {
                    let f = self.value(*s).item();
                    let ds = dot(g.as_slice(), self.value(*a).as_slice());
                    acc(&mut adj, *a, g.map(|x| x * f));
                    acc(&mut adj, *s, Matrix::scalar(ds));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, Matrix::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::RowDot(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let da = Matrix::from_fn(ma.rows(), ma.cols(), |r, c| g.get(r, 0) * mb.get(r, c));
                    let db = Matrix::from_fn(ma.rows(), ma.cols(), |r, c| g.get(r, 0) * ma.get(r, c));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    acc(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                    acc(&mut adj, *a, d);
                }
                Op::Ln(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| gv / x);
                    acc(&mut adj, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y);
                    acc(&mut adj, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x < *lo || x > *hi { 0.0 } else { gv });
                    acc(&mut adj, *a, d);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, Matrix::from_vec(r, c, g.into_vec()));
                }
            }
        }

        if let Some(name) = grads.0.first_non_finite() {
            return Err(Error::Numeric { param: name.to_string() });
        }
        Ok((value, grads))
    }
}

/// Loss value and exact gradient of `loss_fn` at `p`.
pub fn grad<F>(p: &ParamStore, loss_fn: F) -> Result<(f64, GradStore)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(p);
    let loss = loss_fn(&mut g)?;
    g.backward(loss)
}

/// Forward value only.
pub fn eval<F>(p: &ParamStore, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(p);
    let loss = loss_fn(&mut g)?;
    let v = g.value(loss).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric { param: "loss".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(entries: &[(&str, Matrix)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (k, v) in entries {
            p.register(*k, v.clone()).unwrap();
        }
        p
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let w = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let p = store(&[("w", w.clone())]);
        let (loss, g) = grad(&p, |g| {
            let w = g.param("w")?;
            let sq = g.mul(w, w);
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        assert!((loss - 0.5 * (0.25 + 1.0 + 4.0)).abs() < 1e-15);
        assert_eq!(g.get("w").unwrap(), &w);
    }

    #[test]
    fn sigmoid_slope_at_origin() {
        let p = store(&[("x", Matrix::scalar(0.0))]);
        let (loss, g) = grad(&p, |g| {
            let x = g.param("x")?;
            Ok(g.sigmoid(x))
        })
        .unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(g.get("x").unwrap().item(), 0.25);
    }

    #[test]
    fn unused_parameters_get_exact_zero() {
        let p = store(&[
            ("used", Matrix::scalar(2.0)),
            ("unused", Matrix::filled(2, 2, 3.0)),
        ]);
        let (_, g) = grad(&p, |g| {
            let x = g.param("used")?;
            Ok(g.mul(x, x))
        })
        .unwrap();
        assert!(g.get("unused").unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(g.get("used").unwrap().item(), 4.0);
    }

    #[test]
    fn non_finite_loss_names_a_parameter() {
        let p = store(&[("x", Matrix::scalar(0.0))]);
        let err = grad(&p, |g| {
            let x = g.param("x")?;
            Ok(g.ln(x))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn sgd_arithmetic_and_identity() {
        let p = store(&[("w", Matrix::scalar(1.0))]);
        let mut gs = GradStore::zeros_for(&p);
        gs.0.replace("w", Matrix::scalar(0.5)).unwrap();
        let stepped = sgd_step(&p, &gs, 0.002).unwrap();
        assert!((stepped.get("w").unwrap().item() - 0.999).abs() < 1e-15);
        assert_eq!(sgd_step(&p, &gs, 0.0).unwrap(), p);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = store(&[("a", Matrix::uniform(3, 2, 1.0, &mut rng))]);
        let mut g1 = GradStore::zeros_for(&p);
        g1.0.replace("a", Matrix::uniform(3, 2, 1.0, &mut rng)).unwrap();
        let mut g2 = GradStore::zeros_for(&p);
        g2.0.replace("a", Matrix::uniform(3, 2, 1.0, &mut rng)).unwrap();
        let two = sgd_step(&sgd_step(&p, &g1, 0.1).unwrap(), &g2, 0.1).unwrap();
        let mut sum = g1.clone();
        sum.accumulate(&g2).unwrap();
        let one = sgd_step(&p, &sum, 0.1).unwrap();
        for (x, y) in two.values().zip(one.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let p = store(&[("w", Matrix::scalar(1.0))]);
        let other = store(&[("w", Matrix::zeros(2, 1))]);
        let g = GradStore::zeros_for(&other);
        assert!(matches!(sgd_step(&p, &g, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ones = dropout_mask(4, 4, 0.0, &mut rng).unwrap();
        assert!(ones.as_slice().iter().all(|&v| v == 1.0));
        assert!(matches!(dropout_mask(1, 1, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(maybe_dropout(Mode::Eval, 3, 3, 0.5, &mut rng).unwrap().is_none());

        // Binomial(1e5, 0.8): sd of the fraction ≈ 0.00126, so ±0.01 is ~8 sd.
        let m = dropout_mask(1000, 100, 0.2, &mut rng).unwrap();
        let kept = m.as_slice().iter().filter(|&&v| v > 0.0).count() as f64 / 1e5;
        assert!((kept - 0.8).abs() < 0.01, "keep fraction {kept}");
        assert!(m.as_slice().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_normalise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::uniform(6, 9, 50.0, &mut rng).softmax_rows();
        for r in 0..6 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(m.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn param_store_json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = store(&[
            ("a", Matrix::uniform(4, 3, 1.0, &mut rng)),
            ("b", Matrix::uniform(1, 5, 1e-7, &mut rng)),
        ]);
        let back = ParamStore::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn param_store_rejects_bad_shapes() {
        let bad = r#"{"a":{"shape":[2,2],"values":[1.0,2.0,3.0]}}"#;
        assert!(ParamStore::from_json(bad).is_err());
    }

    /// Every primitive checked against central differences on a composite.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = store(&[
            ("a", Matrix::uniform(3, 4, 0.5, &mut rng)),
            ("b", Matrix::uniform(4, 4, 0.5, &mut rng)),
            ("c", Matrix::uniform(3, 4, 0.5, &mut rng)),
            ("s", Matrix::scalar(0.7)),
        ]);
        let f = |g: &mut Graph<'_>| -> Result<NodeId> {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let c = g.param("c")?;
            let s = g.param("s")?;
            let ab = g.matmul(a, b);
            let act = g.matmul_t(ab, c);
            let t = g.transpose(act);
            let sm = g.softmax_rows(t);
            let sg = g.sigmoid(a);
            let cs = g.scale_by(c, s);
            let prod = g.mul(sg, cs);
            let rd = g.row_dot(prod, a);
            let ex = g.exp(rd);
            let rs = g.reshape(ex, 1, 3);
            let gathered = g.gather_rows(b, &[2, 0, 2]);
            let dots = g.sum_rows(gathered);
            let dt = g.transpose(dots);
            let diff = g.sub(rs, dt);
            let sq = g.mul(diff, diff);
            let lsm = g.affine(sm, 0.9, 0.05);
            let lg = g.ln(lsm);
            let cl = g.clamp(lg, -100.0, 100.0);
            let s1 = g.sum(sq);
            let s2 = g.sum(cl);
            Ok(g.add(s1, s2))
        };
        let (_, analytic) = grad(&p, f).unwrap();
        let h = 1e-5;
        for (name, m) in p.iter() {
            for k in 0..m.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.entries.get_mut(name).unwrap().as_mut_slice()[k] += h;
                minus.entries.get_mut(name).unwrap().as_mut_slice()[k] -= h;
                let fd = (eval(&plus, f).unwrap() - eval(&minus, f).unwrap()) / (2.0 * h);
                let an = analytic.get(name).unwrap().as_slice()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "{name}[{k}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.register("w", Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0])).unwrap();
        let mut g = GradStore::zeros_for(&p);
        g.0.replace("w", Matrix::from_vec(1, 3, vec![4.0, -0.01, 0.0])).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        let next = opt.step(&p, &g, 0.1).unwrap();
        let w = next.get("w").unwrap().as_slice();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-5);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn sgd_optimizer_matches_sgd_step() {
        let mut p = ParamStore::new();
        p.register("w", Matrix::from_vec(1, 2, vec![0.5, -0.5])).unwrap();
        let mut g = GradStore::zeros_for(&p);
        g.0.replace("w", Matrix::from_vec(1, 2, vec![1.0, 2.0])).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &p);
        assert_eq!(opt.step(&p, &g, 0.01).unwrap(), sgd_step(&p, &g, 0.01).unwrap());
    }
}
