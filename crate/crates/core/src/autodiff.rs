//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every primitive applied to its nodes. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so building a graph per
//! training example is cheap. [`Graph::backward`] walks the tape in reverse
//! and returns gradients for every parameter that was touched.
//!
//! All reductions run left to right in a fixed order, so identical inputs
//! produce bit-identical values and gradients.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-parameter gradients, aligned with the [`ParamStore`] they came from.
/// Parameters that did not take part in the computation hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    /// Gradient for `id`, materialising zeros for untouched parameters.
    pub fn dense(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.slots[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `self += other`, in parameter order.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => {
                        for (a, &b) in d.data_mut().iter_mut().zip(src.data()) {
                            *a = *a + b;
                        }
                    }
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.slots.iter_mut().flatten() {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }

    /// Global L2 norm, summed in parameter order.
    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .fold(T::zero(), |acc, t| acc + t.sum_sq())
            .sqrt()
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        x: Var,
        target: Tensor<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ReplaceRows {
        base: Var,
        rows: Rc<[usize]>,
        src: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of tensor computations.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn dims2(t: &[usize]) -> (usize, usize) {
    let cols = *t.last().unwrap_or(&1);
    let n: usize = t.iter().product();
    (n / cols.max(1), cols)
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph without parameters; every input is a constant.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param graph").tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Parameter node looked up by name.
    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        let id = store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (br, bc) = dims2(self.shape(b));
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    av.as_ptr(),
                    k as isize,
                    1,
                    bv.as_ptr(),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a single row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if self.value(row).len() != c {
            return Err(self.mismatch("add_row", x, row));
        }
        let mut out = self.value(x).data().to_vec();
        let rv = self.value(row).data();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o = *o + b;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if self.value(gamma).len() != c {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.value(beta).len() != c {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax. Entries where `mask` is false get probability zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut mx = T::neg_infinity();
            for j in 0..c {
                if allowed(j) {
                    mx = mx.max(xv[i * c + j]);
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for j in 0..c {
                if allowed(j) {
                    let e = (xv[i * c + j] - mx).exp();
                    out[i * c + j] = e;
                    z = z + e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o = *o / z;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: rows });
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), c], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.shape(logits));
        if targets.len() != r || r == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: c });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                z = z + e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / z;
            }
            total = total + (mx + z.ln() - row[targets[i]]);
        }
        let loss = total / T::of(r as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        self.value(x).check_same(&target, "mse")?;
        let n = T::of(target.len() as f64);
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { x, target }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = dims2(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts.iter().map(|&p| dims2(self.shape(p)).1).collect();
        for &p in parts {
            if dims2(self.shape(p)).0 != r {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::ConcatCols { parts: parts.to_vec() },
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if start + len > r || len == 0 {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = dims2(self.shape(parts[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = dims2(self.shape(p));
            if pc != c {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows { parts: parts.to_vec() },
            parts,
        ))
    }

    /// Copy of `base` whose listed rows are replaced by the single row `src`.
    pub fn replace_rows(&mut self, base: Var, rows: &[usize], src: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(base));
        if self.value(src).len() != c {
            return Err(self.mismatch("replace_rows", base, src));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("replace_rows index {bad} out of {r} rows")));
        }
        let mut out = self.value(base).data().to_vec();
        let sv = self.value(src).data();
        for &i in rows {
            out[i * c..(i + 1) * c].copy_from_slice(sv);
        }
        let shape = self.shape(base).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ReplaceRows {
                base,
                rows: rows.into(),
                src,
            },
            &[base, src],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Reverse pass from the scalar `root`, seeded with `seed`.
    pub fn backward_seeded(&self, root: Var, seed: T) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![seed]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(_) = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let mut out = Grads {
            slots: vec![None; self.params.map_or(0, ParamStore::len)],
        };
        for (pid, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                    let shape = self.value(*v).shape().to_vec();
                    out.slots[pid] = Some(Tensor::from_parts(shape, g));
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        self.backward_seeded(root, T::one())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(slot) = self.grad_slot(grads, v) {
            f(slot);
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = self.nodes[i].value.as_ref().map(|t| t.shape().to_vec());
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(&out_shape.expect("matmul output")).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |da| unsafe {
                    // dA = dC · Bᵀ (or dC · B when B was transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.as_ptr(),
                        n as isize,
                        1,
                        bv.as_ptr(),
                        rsb,
                        csb,
                        T::one(),
                        da.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                });
                self.accumulate(grads, *b, |db| unsafe {
                    if *trans_b {
                        // dB = dCᵀ · A  (n×k)
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g.as_ptr(),
                            1,
                            n as isize,
                            av.as_ptr(),
                            k as isize,
                            1,
                            T::one(),
                            db.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    } else {
                        // dB = Aᵀ · dC  (k×n)
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            T::one(),
                            db.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_assign(d, g));
                self.accumulate(grads, *b, |d| add_assign(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_assign(d, g));
                self.accumulate(grads, *b, |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * bv[j];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * av[j];
                    }
                });
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, |d| add_assign(d, g));
                let c = self.value(*row).len();
                self.accumulate(grads, *row, |d| {
                    for chunk in g.chunks(c) {
                        add_assign(d, chunk);
                    }
                });
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x = *x + y * *s;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = dims2(self.shape(*x));
                let gv = self.value(*gamma).data();
                let n = T::of(c as f64);
                self.accumulate(grads, *x, |dx| {
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat[i * c + j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for (j, k) in row.enumerate() {
                            dx[k] = dx[k] + rstd[i] * (dxhat[j] - m1 - xhat[k] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |dg| {
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] = dg[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for chunk in g.chunks(c) {
                        add_assign(db, chunk);
                    }
                });
            }
            Op::Softmax { x } => {
                let p = self.nodes[i].value.as_ref().expect("softmax value").data();
                let (r, c) = dims2(self.shape(*x));
                self.accumulate(grads, *x, |dx| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot = row.clone().fold(T::zero(), |a, k| a + g[k] * p[k]);
                        for k in row {
                            dx[k] = dx[k] + p[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for j in 0..dx.len() {
                        dx[j] = dx[j] + g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = dims2(self.shape(*table)).1;
                self.accumulate(grads, *table, |dt| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_assign(&mut dt[id * c..(id + 1) * c], &g[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, c) = dims2(self.shape(*logits));
                let s = g[0] / T::of(r as f64);
                self.accumulate(grads, *logits, |dl| {
                    for i in 0..r {
                        for j in 0..c {
                            let mut v = probs[i * c + j];
                            if j == targets[i] {
                                v = v - T::one();
                            }
                            dl[i * c + j] = dl[i * c + j] + s * v;
                        }
                    }
                });
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let s = g[0] * T::of(2.0) / T::of(target.len() as f64);
                self.accumulate(grads, *x, |dx| {
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d = *d + s * (xv[j] - target.data()[j]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = dims2(self.shape(*x)).1;
                let w = dims2(&out_shape.expect("slice output")).1;
                self.accumulate(grads, *x, |dx| {
                    for (r, chunk) in g.chunks(w).enumerate() {
                        add_assign(&mut dx[r * c + start..r * c + start + w], chunk);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = dims2(&out_shape.expect("concat output")).1;
                let mut offset = 0;
                for &p in parts {
                    let w = dims2(self.shape(p)).1;
                    self.accumulate(grads, p, |dp| {
                        for (r, chunk) in dp.chunks_mut(w).enumerate() {
                            add_assign(chunk, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = dims2(self.shape(*x)).1;
                self.accumulate(grads, *x, |dx| {
                    add_assign(&mut dx[start * c..start * c + g.len()], g);
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |dp| add_assign(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ReplaceRows { base, rows, src } => {
                let c = self.value(*src).len();
                self.accumulate(grads, *base, |db| {
                    add_assign(db, g);
                    for &r in rows.iter() {
                        for k in r * c..(r + 1) * c {
                            db[k] = db[k] - g[k];
                        }
                    }
                });
                self.accumulate(grads, *src, |ds| {
                    for &r in rows.iter() {
                        add_assign(ds, &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::Mean { x } => {
                let s = g[0] / T::of(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d = *d + s;
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |dx| add_assign(dx, g));
            }
        }
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Evaluates `f` on `params` and returns its scalar value and parameter gradients.
pub fn forward_backward<T, F>(params: &ParamStore<T>, f: F) -> Result<(T, Grads<T>)>
where
    T: Real,
    F: for<'p> Fn(&mut Graph<'p, T>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let root = f(&mut g)?;
    let value = g.scalar(root);
    let grads = g.backward(root)?;
    Ok((value, grads))
}

/// Scalar value of `f` on `params`, forward only.
pub fn evaluate<T, F>(params: &ParamStore<T>, f: &F) -> Result<T>
where
    T: Real,
    F: for<'p> Fn(&mut Graph<'p, T>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let root = f(&mut g)?;
    if g.value(root).len() != 1 {
        return Err(Error::invalid("computation must return a scalar"));
    }
    Ok(g.scalar(root))
}

/// Central-difference gradient estimate `(f(x+eps) - f(x-eps)) / (2 eps)` per coordinate.
pub fn finite_diff<F>(params: &ParamStore<f64>, f: F, eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite_diff eps must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.tensor(id).len();
        let mut grad = vec![0.0; n];
        for (k, g) in grad.iter_mut().enumerate() {
            let orig = work.tensor(id).data()[k];
            work.tensor_mut(id).data_mut()[k] = orig + eps;
            let plus = evaluate(&work, &f)?;
            work.tensor_mut(id).data_mut()[k] = orig - eps;
            let minus = evaluate(&work, &f)?;
            work.tensor_mut(id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("finite_diff of `{}`", params.name(id)),
                    index: k,
                });
            }
            *g = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::from_parts(params.tensor(id).shape().to_vec(), grad));
    }
    Ok(out)
}

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Relative error per parameter tensor: `max|a - b| / max(max|a|, max|b|)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.per_param {
            writeln!(f, "{name:<32} {err:.3e}")?;
        }
        write!(
            f,
            "max_rel_err={:.3e} eps={:e} tolerance={:e} pass={}",
            self.max_rel_err, self.eps, self.tolerance, self.pass
        )
    }
}

/// Tensor-level relative error used by [`GradReport`].
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares [`forward_backward`] against [`finite_diff`] for every parameter.
pub fn grad_check<F>(params: &ParamStore<f64>, f: F, eps: f64, tolerance: f64) -> Result<GradReport>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    let (_, grads) = forward_backward(params, &f)?;
    let numeric = finite_diff(params, &f, eps)?;
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    for (id, fd) in params.ids().zip(&numeric) {
        let analytic = grads.dense(params, id);
        let err = relative_error(analytic.data(), fd.data());
        max_rel_err = max_rel_err.max(err);
        per_param.push((params.name(id).to_string(), err));
    }
    Ok(GradReport {
        per_param,
        max_rel_err,
        eps,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}
