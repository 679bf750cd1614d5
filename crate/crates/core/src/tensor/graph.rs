//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Parameters are borrowed from a [`ParamStore`] rather than copied, so a graph
//! lives no longer than the stores it reads. [`Graph::backward`] walks the tape
//! once in reverse and hands back a [`Gradients`] map; the graph is consumed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{self, gemm};
use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    #[cfg(test)]
    pub(crate) fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }
}

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones get a fresh identity, so gradients recorded against the
    /// original never apply to a snapshot.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        let tensor = tensor.with_requires_grad(true);
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return i;
        }
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Adds gradients recorded against this store into each tensor's grad buffer.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (&(store, i), g) in &grads.params {
            if store != self.id {
                continue;
            }
            let buf = self.tensors[i].grad_mut();
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    /// Sets every trainable tensor's `requires_grad` flag.
    pub fn set_trainable(&mut self, flag: bool) {
        for t in &mut self.tensors {
            t.requires_grad = flag;
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<(u64, usize), Vec<f64>>,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, store: &ParamStore, index: usize) -> Option<&[f64]> {
        self.params.get(&(store.id, index)).map(Vec::as_slice)
    }

    pub fn leaf(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var.0).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }

    /// Whether any gradient was recorded for the given store.
    pub fn touches(&self, store: &ParamStore) -> bool {
        self.params.keys().any(|(s, _)| *s == store.id)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One row of a [`Graph::restricted_kl`] loss.
#[derive(Debug, Clone)]
pub struct SupportRow {
    pub row: usize,
    pub tokens: Vec<usize>,
    pub probs: Vec<f64>,
    pub weight: f64,
    /// Renormalize the student over `tokens` only; otherwise over the full row.
    pub restrict: bool,
}

#[derive(Debug)]
enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, index: usize },
    MatMul { a: usize, b: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, tb: bool, groups: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Gelu { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, stats: Vec<(f64, f64)> },
    Embedding { table: usize, ids: Vec<usize> },
    Dropout { a: usize, mask: Vec<f64> },
    SplitHeads { a: usize, batch: usize, len: usize, heads: usize },
    MergeHeads { a: usize, batch: usize, len: usize, heads: usize },
    SelectRows { a: usize, rows: Vec<usize> },
    Reshape { a: usize },
    Sum { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    KlConst { logits: usize, target: Vec<f64>, weights: Vec<f64>, probs: Vec<f64> },
    RestrictedKl { logits: usize, rows: Vec<SupportRow>, student: Vec<Vec<f64>> },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A graph that never records gradient requirements (inference / teacher).
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(&data, name)?;
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf tensor. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad, "leaf")
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("constant shape {shape:?} vs {} values", data.len())));
        }
        self.push(shape, data, Op::Leaf, false, "constant")
    }

    /// Records a parameter by reference.
    pub fn param(&mut self, store: &'p ParamStore, index: usize) -> Var {
        let t = &store.tensors[index];
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Value::Borrowed(&t.data),
            op: Op::Param { store: store.id, index },
            requires_grad: t.requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, store: &'p ParamStore, name: &str) -> Result<Var> {
        let i = store
            .index_of(name)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter `{name}`")))?;
        Ok(self.param(store, i))
    }

    /// 2-D matrix product `op(a) * op(b)`; `ta`/`tb` select transposed views.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul expects 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = kernels::matmul(m, k, n, self.value(a), ta, self.value(b), tb);
        let rg = self.rg(&[a.0, b.0]);
        self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, ta, tb, m, k, n }, rg, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]` (or `[g, n, k]` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm expects matching 3-D operands, got {sa:?} and {sb:?}")));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::Shape(format!("bmm inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * k * n..(g + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(vec![groups, m, n], out, Op::Bmm { a: a.0, b: b.0, tb, groups, m, k, n }, rg, "bmm")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a.0, b.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Add { a: a.0, b: b.0 }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a.0, b.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Sub { a: a.0, b: b.0 }, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a.0, b.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Mul { a: a.0, b: b.0 }, rg, "mul")
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = last_dim(&self.nodes[a.0].shape);
        if self.nodes[bias.0].shape != [d] {
            return Err(Error::Shape(format!("add_row bias {:?} vs width {d}", self.nodes[bias.0].shape)));
        }
        let mut out = self.value(a).to_vec();
        kernels::add_row_bias(&mut out, self.value(bias));
        let rg = self.rg(&[a.0, bias.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::AddRow { a: a.0, bias: bias.0 }, rg, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Scale { a: a.0, c }, rg, "scale")
    }

    /// Adds a constant buffer (e.g. an attention mask); gradients pass through.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape(format!("add_const: {} vs {}", c.len(), self.value(a).len())));
        }
        let out = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::AddConst { a: a.0 }, rg, "add_const")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Gelu { a: a.0 }, rg, "gelu")
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = last_dim(&self.nodes[a.0].shape);
        let mut out = self.value(a).to_vec();
        out.chunks_mut(d).for_each(kernels::softmax_row);
        let rg = self.rg(&[a.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Softmax { a: a.0 }, rg, "softmax")
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = last_dim(&self.nodes[a.0].shape);
        let mut out = self.value(a).to_vec();
        out.chunks_mut(d).for_each(kernels::log_softmax_row);
        let rg = self.rg(&[a.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::LogSoftmax { a: a.0 }, rg, "log_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = last_dim(&self.nodes[x.0].shape);
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let mut out = self.value(x).to_vec();
        let stats = kernels::layer_norm_rows(&mut out, d, self.value(gain), self.value(bias));
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, stats },
            rg,
            "layer_norm",
        )
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = &self.nodes[table.0].shape;
        if shape.len() != 2 {
            return Err(Error::Shape("embedding table must be 2-D".into()));
        }
        let (vocab, d) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table.0]);
        self.push(vec![ids.len(), d], out, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg, "embedding")
    }

    /// Inverted dropout: surviving entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit (already scaled) mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape("dropout mask size".into()));
        }
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Dropout { a: a.0, mask }, rg, "dropout")
    }

    /// `[batch * len, heads * dh]` to `[batch * heads, len, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 || shape[0] != batch * len || shape[1] % heads != 0 {
            return Err(Error::Shape(format!("split_heads {shape:?} with b={batch} t={len} h={heads}")));
        }
        let d = shape[1];
        let dh = d / heads;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..len {
                let row = &src[(b * len + t) * d..(b * len + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * len + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(vec![batch * heads, len, dh], out, Op::SplitHeads { a: a.0, batch, len, heads }, rg, "split_heads")
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 3 || shape[0] != batch * heads || shape[1] != len {
            return Err(Error::Shape(format!("merge_heads {shape:?} with b={batch} t={len} h={heads}")));
        }
        let dh = shape[2];
        let d = dh * heads;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..len {
                    let s = ((b * heads + h) * len + t) * dh;
                    let dst = (b * len + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(vec![batch * len, d], out, Op::MergeHeads { a: a.0, batch, len, heads }, rg, "merge_heads")
    }

    /// Selects rows (first dimension) of a 2-D tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 {
            return Err(Error::Shape("select_rows expects a 2-D tensor".into()));
        }
        let (n, d) = (shape[0], shape[1]);
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape(format!("row {r} out of {n}")));
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[a.0]);
        self.push(vec![rows.len(), d], out, Op::SelectRows { a: a.0, rows: rows.to_vec() }, rg, "select_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::Shape(format!("reshape to {shape:?} from {:?}", self.nodes[a.0].shape)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a.0]);
        self.push(shape, out, Op::Reshape { a: a.0 }, rg, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(vec![], vec![s], Op::Sum { a: a.0 }, rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` over rows of a `[N, V]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let shape = &self.nodes[logits.0].shape;
        if shape.len() != 2 || shape[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {shape:?}, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let v = shape[1];
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            let lse = kernels::logsumexp(row);
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[t]);
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let rg = self.rg(&[logits.0]);
        self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            rg,
            "cross_entropy",
        )
    }

    /// `sum_i weights[i] * KL(target_i || softmax(logits_i))` with a constant
    /// probability target `[N, V]`; `0 * ln 0` is taken as 0.
    pub fn kl_const_target(&mut self, logits: Var, target: Vec<f64>, weights: &[f64]) -> Result<Var> {
        let shape = &self.nodes[logits.0].shape;
        if shape.len() != 2 || target.len() != shape[0] * shape[1] || weights.len() != shape[0] {
            return Err(Error::Shape(format!(
                "kl_const_target logits {shape:?}, target {} values, {} weights",
                target.len(),
                weights.len()
            )));
        }
        let v = shape[1];
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let lse = kernels::logsumexp(row);
            let p = &target[i * v..(i + 1) * v];
            if weights[i] != 0.0 {
                let mut kl = 0.0;
                for (pj, zj) in p.iter().zip(row.iter()) {
                    if *pj > 0.0 {
                        kl += pj * (pj.ln() - (zj - lse));
                    }
                }
                loss += weights[i] * kl;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let rg = self.rg(&[logits.0]);
        self.push(
            vec![],
            vec![loss],
            Op::KlConst { logits: logits.0, target, weights: weights.to_vec(), probs },
            rg,
            "kl_const_target",
        )
    }

    /// KL of sparse target rows against the student distribution of the selected
    /// logits rows, renormalized over each row's support when `restrict` is set.
    pub fn restricted_kl(&mut self, logits: Var, rows: Vec<SupportRow>) -> Result<Var> {
        let shape = &self.nodes[logits.0].shape;
        if shape.len() != 2 {
            return Err(Error::Shape("restricted_kl expects 2-D logits".into()));
        }
        let (n, v) = (shape[0], shape[1]);
        let z = self.value(logits);
        let mut loss = 0.0;
        let mut student = Vec::with_capacity(rows.len());
        for r in &rows {
            if r.row >= n || r.tokens.len() != r.probs.len() || r.tokens.is_empty() {
                return Err(Error::Shape(format!("restricted_kl row {} malformed", r.row)));
            }
            if let Some(&t) = r.tokens.iter().find(|&&t| t >= v) {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            let zr = &z[r.row * v..(r.row + 1) * v];
            let lse = if r.restrict {
                let sub: Vec<f64> = r.tokens.iter().map(|&t| zr[t]).collect();
                kernels::logsumexp(&sub)
            } else {
                kernels::logsumexp(zr)
            };
            let mut kl = 0.0;
            for (&t, &p) in r.tokens.iter().zip(&r.probs) {
                if p > 0.0 {
                    kl += p * (p.ln() - (zr[t] - lse));
                }
            }
            loss += r.weight * kl;
            // Student probabilities over whichever support was normalized.
            let q: Vec<f64> = if r.restrict {
                r.tokens.iter().map(|&t| (zr[t] - lse).exp()).collect()
            } else {
                zr.iter().map(|&x| (x - lse).exp()).collect()
            };
            student.push(q);
        }
        let rg = self.rg(&[logits.0]);
        self.push(vec![], vec![loss], Op::RestrictedKl { logits: logits.0, rows, student }, rg, "restricted_kl")
    }

    /// Runs reverse-mode differentiation from a scalar root and consumes the graph.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let root_shape = &self.nodes[root.0].shape;
        if self.nodes[root.0].value.as_slice().len() != 1 {
            return Err(Error::NonScalarRoot(root_shape.clone()));
        }
        self.consumed = true;
        let mut out = Gradients::default();
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param { store, index } => {
                    match out.params.get_mut(&(*store, *index)) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            out.params.insert((*store, *index), g);
                        }
                    }
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n = self.nodes[id].value.as_slice().len();
        let buf = grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn propagate(&self, op: &Op, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.nodes[i].value.as_slice();
        match *op {
            Op::Leaf | Op::Param { .. } => unreachable!(),
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let av = self.nodes[a].value.as_slice();
                let bv = self.nodes[b].value.as_slice();
                self.accum(grads, a, |ga| {
                    if ta {
                        gemm(k, n, m, 1.0, bv, tb, g, true, 1.0, ga);
                    } else {
                        gemm(m, n, k, 1.0, g, false, bv, !tb, 1.0, ga);
                    }
                });
                self.accum(grads, b, |gb| {
                    if tb {
                        gemm(n, m, k, 1.0, g, true, av, ta, 1.0, gb);
                    } else {
                        gemm(k, m, n, 1.0, av, !ta, g, false, 1.0, gb);
                    }
                });
            }
            Op::Bmm { a, b, tb, groups, m, k, n } => {
                let av = self.nodes[a].value.as_slice();
                let bv = self.nodes[b].value.as_slice();
                self.accum(grads, a, |ga| {
                    for q in 0..groups {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let bq = &bv[q * k * n..(q + 1) * k * n];
                        gemm(m, n, k, 1.0, gq, false, bq, !tb, 1.0, &mut ga[q * m * k..(q + 1) * m * k]);
                    }
                });
                self.accum(grads, b, |gb| {
                    for q in 0..groups {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let aq = &av[q * m * k..(q + 1) * m * k];
                        let out = &mut gb[q * k * n..(q + 1) * k * n];
                        if tb {
                            gemm(n, m, k, 1.0, gq, true, aq, false, 1.0, out);
                        } else {
                            gemm(k, m, n, 1.0, aq, true, gq, false, 1.0, out);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                self.accum(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Sub { a, b } => {
                self.accum(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                self.accum(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a].value.as_slice();
                let bv = self.nodes[b].value.as_slice();
                self.accum(grads, a, |ga| {
                    for ((x, d), w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * w;
                    }
                });
                self.accum(grads, b, |gb| {
                    for ((x, d), w) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * w;
                    }
                });
            }
            Op::AddRow { a, bias } => {
                self.accum(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                let d = self.nodes[bias].value.as_slice().len();
                self.accum(grads, bias, |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, r)| *x += r);
                    }
                });
            }
            Op::Scale { a, c } => {
                self.accum(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d));
            }
            Op::AddConst { a } | Op::Reshape { a } => {
                self.accum(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Gelu { a } => {
                let av = self.nodes[a].value.as_slice();
                self.accum(grads, a, |ga| {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += d * kernels::gelu_grad(*v);
                    }
                });
            }
            Op::Softmax { a } => {
                let d = last_dim(&self.nodes[i].shape);
                self.accum(grads, a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let d = last_dim(&self.nodes[i].shape);
                self.accum(grads, a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let s: f64 = dr.iter().sum();
                        for j in 0..d {
                            gr[j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, ref stats } => {
                let d = last_dim(&self.nodes[i].shape);
                let xv = self.nodes[x].value.as_slice();
                let gv = self.nodes[gain].value.as_slice();
                self.accum(grads, x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let dr = &g[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = dr[j] * gv[j];
                            let xhat = (xr[j] - mean) * rstd;
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            out[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                });
                self.accum(grads, gain, |gg| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * (xv[r * d + j] - mean) * rstd;
                        }
                    }
                });
                self.accum(grads, bias, |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, r)| *x += r);
                    }
                });
            }
            Op::Embedding { table, ref ids } => {
                let d = self.nodes[table].shape[1];
                self.accum(grads, table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::Dropout { a, ref mask } => {
                self.accum(grads, a, |ga| {
                    for ((x, d), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += d * m;
                    }
                });
            }
            Op::SplitHeads { a, batch, len, heads } => {
                let d = self.nodes[a].shape[1];
                let dh = d / heads;
                self.accum(grads, a, |ga| {
                    for b in 0..batch {
                        for t in 0..len {
                            for h in 0..heads {
                                let s = ((b * heads + h) * len + t) * dh;
                                let dst = (b * len + t) * d + h * dh;
                                ga[dst..dst + dh].iter_mut().zip(&g[s..s + dh]).for_each(|(x, v)| *x += v);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { a, batch, len, heads } => {
                let dh = self.nodes[a].shape[2];
                let d = dh * heads;
                self.accum(grads, a, |ga| {
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..len {
                                let s = ((b * heads + h) * len + t) * dh;
                                let src = (b * len + t) * d + h * dh;
                                ga[s..s + dh].iter_mut().zip(&g[src..src + dh]).for_each(|(x, v)| *x += v);
                            }
                        }
                    }
                });
            }
            Op::SelectRows { a, ref rows } => {
                let d = self.nodes[a].shape[1];
                self.accum(grads, a, |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        ga[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::Sum { a } => {
                let s = g[0];
                self.accum(grads, a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::CrossEntropy { logits, ref targets, ref weights, ref probs } => {
                let v = self.nodes[logits].shape[1];
                let s = g[0];
                self.accum(grads, logits, |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] += s * w * probs[r * v + j];
                        }
                        row[t] -= s * w;
                    }
                });
            }
            Op::KlConst { logits, ref target, ref weights, ref probs } => {
                let v = self.nodes[logits].shape[1];
                let s = g[0];
                self.accum(grads, logits, |gl| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let p = &target[r * v..(r + 1) * v];
                        let mass: f64 = p.iter().sum();
                        let row = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] += s * w * (probs[r * v + j] * mass - p[j]);
                        }
                    }
                });
            }
            Op::RestrictedKl { logits, ref rows, ref student } => {
                let v = self.nodes[logits].shape[1];
                let s = g[0];
                self.accum(grads, logits, |gl| {
                    for (r, q) in rows.iter().zip(student) {
                        let mass: f64 = r.probs.iter().sum();
                        let row = &mut gl[r.row * v..(r.row + 1) * v];
                        if r.restrict {
                            for (k, &t) in r.tokens.iter().enumerate() {
                                row[t] += s * r.weight * q[k] * mass;
                            }
                        } else {
                            for j in 0..v {
                                row[j] += s * r.weight * q[j] * mass;
                            }
                        }
                        for (&t, &p) in r.tokens.iter().zip(&r.probs) {
                            row[t] -= s * r.weight * p;
                        }
                    }
                });
            }
        }
    }
}
