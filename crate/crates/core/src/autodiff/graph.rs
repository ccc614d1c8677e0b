use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{broadcast_map, broadcast_shape, gelu, gelu_grad, gemm, permute_offsets, sigmoid, split_axis};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Abs => "abs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "hadamard",
            Binary::Div => "div",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Unary { kind: Unary, a: Var },
    Softmax { a: Var, axis: usize },
    Sum { a: Var },
    SumAxis { a: Var, axis: usize, mean: bool },
    StdAxis { a: Var, axis: usize },
    NormAxis { a: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    IndexSelect { a: Var, indices: Arc<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Binary { kind, .. } => kind.name(),
            Op::Scale { .. } => "mul_scalar",
            Op::AddScalar { .. } => "add_scalar",
            Op::Unary { kind, .. } => kind.name(),
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::SumAxis { mean: false, .. } => "sum_axis",
            Op::SumAxis { mean: true, .. } => "mean_axis",
            Op::StdAxis { .. } => "std_axis",
            Op::NormAxis { .. } => "norm_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::IndexSelect { .. } => "index_select",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. Parameters are bound lazily: the first call to
/// [`Graph::param`] for a given id creates its leaf and later calls reuse it,
/// which makes gradients from every use site accumulate on one node.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rank(&self, v: Var) -> usize {
        self.shape(v).len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.params.ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let value = store.get(id).clone();
        let v = self.push(value, Op::Param(id), true)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let layout = MatMulLayout::new(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (m, k, n) = (layout.m, layout.k, layout.n);
        let mut out = vec![0.0; layout.batch * m * n];
        for bi in 0..layout.batch {
            let ao = layout.a_map[bi] * m * k;
            let bo = layout.b_map[bi] * k * n;
            gemm(
                m,
                k,
                n,
                &av[ao..ao + m * k],
                false,
                &bv[bo..bo + k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let value = Tensor::from_parts(layout.out_shape, Arc::new(out));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul { a, b }, rg)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.rank(a);
        if r < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(kind.name(), format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = maybe_map(&out_shape, sa);
            let mb = maybe_map(&out_shape, sb);
            let n: usize = out_shape.iter().product();
            (0..n).map(|i| f(av[index(&ma, i)], bv[index(&mb, i)])).collect()
        };
        let value = Tensor::from_parts(out_shape, Arc::new(out));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Binary { kind, a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    /// Alias of [`Graph::add`]; broadcasting is always on.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn mul_scalar(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar { a }, rg)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Abs => f64::abs,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    // ---------------------------------------------------------------- reductions

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.rank(a) {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", self.shape(a))));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| (o * len + i) * inner + k;
                let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, Arc::new(out)), Op::Softmax { a, axis }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean_axis" } else { "sum_axis" }, a, axis)?;
        let mut shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        shape[axis] = 1;
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, Arc::new(out)), Op::SumAxis { a, axis, mean }, rg)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Biased (divide-by-n) standard deviation along `axis`, kept with extent 1.
    pub fn std_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("std_axis", a, axis)?;
        let mut shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| (o * len + i) * inner + k;
                let mu = (0..len).map(|i| x[at(i)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (x[at(i)] - mu).powi(2)).sum::<f64>() / len as f64;
                out[o * inner + k] = var.sqrt();
            }
        }
        shape[axis] = 1;
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, Arc::new(out)), Op::StdAxis { a, axis }, rg)
    }

    /// Euclidean norm along `axis`, kept with extent 1.
    pub fn norm_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("norm_axis", a, axis)?;
        let mut shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let sq: f64 = (0..len).map(|i| x[(o * len + i) * inner + k].powi(2)).sum();
                out[o * inner + k] = sq.sqrt();
            }
        }
        shape[axis] = 1;
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, Arc::new(out)), Op::NormAxis { a, axis }, rg)
    }

    // ---------------------------------------------------------------- structural

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(shape, Arc::new(out)),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let src_shape = self.shape(a).to_vec();
        if len == 0 || start + len > src_shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} out of {src_shape:?} axis {axis}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&src_shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, Arc::new(out)), Op::Slice { a, axis, start }, rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len() && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let offsets = permute_offsets(&shape, perm);
        let x = self.value(a).data();
        let out: Vec<f64> = offsets.iter().map(|&o| x[o]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::from_parts(out_shape, Arc::new(out)),
            Op::Permute { a, perm: perm.to_vec() },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape { a }, rg)
    }

    /// Rows of `a` (along axis 0) gathered by `indices`.
    pub fn index_select(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || indices.is_empty() {
            return Err(Error::shape("index_select", "needs rank >= 1 and indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::shape("index_select", format!("index {bad} out of range for {shape:?}")));
        }
        let row: usize = shape[1..].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices.iter() {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(out_shape, Arc::new(out)), Op::IndexSelect { a, indices }, rg)
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        let mut leaves = HashMap::new();
        let mut params = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let (is_leaf, pid) = match node.op {
                Op::Leaf => (true, None),
                Op::Param(id) => (true, Some(id)),
                _ => (false, None),
            };
            if !is_leaf {
                continue;
            }
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            let t = Tensor::from_parts(node.value.shape().to_vec(), Arc::new(g));
            match pid {
                Some(id) => {
                    params.insert(id, t);
                }
                None => {
                    leaves.insert(i, t);
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let op_name = node.op.name();
        let acc = |v: Var, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]| -> Result<()> {
            if contrib.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: op_name });
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let layout = MatMulLayout::new(self.shape(*a), self.shape(*b))?;
                let (m, k, n) = (layout.m, layout.k, layout.n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let need_a = self.requires_grad(*a);
                let need_b = self.requires_grad(*b);
                let mut ga = if need_a { vec![0.0; av.len()] } else { Vec::new() };
                let mut gb = if need_b { vec![0.0; bv.len()] } else { Vec::new() };
                for bi in 0..layout.batch {
                    let ao = layout.a_map[bi] * m * k;
                    let bo = layout.b_map[bi] * k * n;
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    if need_a {
                        gemm(m, n, k, gs, false, &bv[bo..bo + k * n], true, &mut ga[ao..ao + m * k], 1.0);
                    }
                    if need_b {
                        gemm(k, m, n, &av[ao..ao + m * k], true, gs, false, &mut gb[bo..bo + k * n], 1.0);
                    }
                }
                if need_a {
                    acc(*a, ga, grads)?;
                }
                if need_b {
                    acc(*b, gb, grads)?;
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let ma = maybe_map(out_shape, sa);
                let mb = maybe_map(out_shape, sb);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for (j, &gj) in g.iter().enumerate() {
                        let (ia, ib) = (index(&ma, j), index(&mb, j));
                        ga[ia] += match kind {
                            Binary::Add | Binary::Sub => gj,
                            Binary::Mul => gj * bv[ib],
                            Binary::Div => gj / bv[ib],
                        };
                    }
                    acc(*a, ga, grads)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for (j, &gj) in g.iter().enumerate() {
                        let (ia, ib) = (index(&ma, j), index(&mb, j));
                        gb[ib] += match kind {
                            Binary::Add => gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * av[ia],
                            Binary::Div => -gj * av[ia] / (bv[ib] * bv[ib]),
                        };
                    }
                    acc(*b, gb, grads)?;
                }
            }
            Op::Scale { a, factor } => acc(*a, g.iter().map(|x| x * factor).collect(), grads)?,
            Op::AddScalar { a } => acc(*a, g.to_vec(), grads)?,
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let contrib = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gj, (&xj, &yj))| {
                        gj * match kind {
                            Unary::Gelu => gelu_grad(xj),
                            Unary::Relu => f64::from(u8::from(xj > 0.0)),
                            Unary::Sigmoid => yj * (1.0 - yj),
                            Unary::Tanh => 1.0 - yj * yj,
                            Unary::Abs => {
                                if xj > 0.0 {
                                    1.0
                                } else if xj < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                acc(*a, contrib, grads)?;
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + k;
                        let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            ga[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                acc(*a, ga, grads)?;
            }
            Op::Sum { a } => acc(*a, vec![g[0]; self.value(*a).len()], grads)?,
            Op::SumAxis { a, axis, mean } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let scale = if *mean { 1.0 / len as f64 } else { 1.0 };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for k in 0..inner {
                            ga[(o * len + i) * inner + k] = g[o * inner + k] * scale;
                        }
                    }
                }
                acc(*a, ga, grads)?;
            }
            Op::StdAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let x = self.value(*a).data();
                let sd = node.value.data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let s = sd[o * inner + k];
                        if s == 0.0 {
                            continue;
                        }
                        let at = |i: usize| (o * len + i) * inner + k;
                        let mu = (0..len).map(|i| x[at(i)]).sum::<f64>() / len as f64;
                        let coef = g[o * inner + k] / (len as f64 * s);
                        for i in 0..len {
                            ga[at(i)] = coef * (x[at(i)] - mu);
                        }
                    }
                }
                acc(*a, ga, grads)?;
            }
            Op::NormAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let x = self.value(*a).data();
                let r = node.value.data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let rk = r[o * inner + k];
                        if rk == 0.0 {
                            continue;
                        }
                        let coef = g[o * inner + k] / rk;
                        for i in 0..len {
                            let at = (o * len + i) * inner + k;
                            ga[at] = coef * x[at];
                        }
                    }
                }
                acc(*a, ga, grads)?;
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[from..from + len * inner]);
                        }
                        acc(p, gp, grads)?;
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    ga[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                acc(*a, ga, grads)?;
            }
            Op::Permute { a, perm } => {
                let offsets = permute_offsets(self.shape(*a), perm);
                let mut ga = vec![0.0; g.len()];
                for (j, &o) in offsets.iter().enumerate() {
                    ga[o] = g[j];
                }
                acc(*a, ga, grads)?;
            }
            Op::Reshape { a } => acc(*a, g.to_vec(), grads)?,
            Op::IndexSelect { a, indices } => {
                let src = self.shape(*a);
                let row: usize = src[1..].iter().product();
                let mut ga = vec![0.0; src[0] * row];
                for (j, &i) in indices.iter().enumerate() {
                    for c in 0..row {
                        ga[i * row + c] += g[j * row + c];
                    }
                }
                acc(*a, ga, grads)?;
            }
        }
        Ok(())
    }
}

fn maybe_map(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<usize>> {
    (out_shape != in_shape).then(|| broadcast_map(out_shape, in_shape))
}

#[inline]
fn index(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

struct MatMulLayout {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatMulLayout {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch_shape = broadcast_shape(ba, bb)
            .ok_or_else(|| Error::shape("matmul", format!("batch extents of {sa:?} and {sb:?} do not broadcast")))?;
        let batch: usize = batch_shape.iter().product();
        let a_map = if ba == batch_shape.as_slice() {
            (0..batch).collect()
        } else {
            broadcast_map(&batch_shape, ba)
        };
        let b_map = if bb == batch_shape.as_slice() {
            (0..batch).collect()
        } else {
            broadcast_map(&batch_shape, bb)
        };
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        if bb.is_empty() && ba.len() == out_shape.len() - 2 {
            // a shared right operand: the batch folds into the rows
            return Ok(MatMulLayout {
                m: m * batch,
                k,
                n,
                batch: 1,
                a_map: vec![0],
                b_map: vec![0],
                out_shape,
            });
        }
        Ok(MatMulLayout {
            m,
            k,
            n,
            batch,
            a_map,
            b_map,
            out_shape,
        })
    }
}

/// Gradients of one backward sweep, keyed by leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of an [`Graph::input`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}
