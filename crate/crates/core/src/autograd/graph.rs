use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{split_axis, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::metrics::nearest_indices;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChamferKind {
    L1,
    L2,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    CosineRows {
        a: Var,
        b: Var,
        eps: T,
    },
    CrossEntropyRows {
        logits: Var,
        labels: Vec<usize>,
    },
    Chamfer {
        p: Var,
        g: Var,
        kind: ChamferKind,
        p_to_g: Vec<usize>,
        g_to_p: Vec<usize>,
    },
    StraightThrough(Var),
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode tape. Values are recorded in insertion order, which is a
/// topological order, and `backward` walks it once in reverse.
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaves that require them.
    pub(crate) leaf_grads: HashMap<usize, Vec<T>>,
    bound: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn non_scalar_shape(mut shape: Vec<usize>) -> Vec<usize> {
    if shape.is_empty() {
        shape.push(1);
    }
    shape
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf, once per graph. Frozen parameters
    /// become constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name:?}")))?;
        let value = Tensor::from_f32(p.shape.clone(), &p.data)?;
        let v = self.leaf(value, !p.frozen);
        self.bound.insert(name.to_string(), v);
        self.bound_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any was produced.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of every bound trainable parameter that received one, in
    /// binding order.
    pub fn param_grads(&self) -> Vec<(String, Vec<f32>)> {
        self.bound_order
            .iter()
            .filter_map(|(name, v)| {
                self.grad(*v)
                    .map(|g| (name.clone(), g.iter().map(|x| x.as_f32()).collect()))
            })
            .collect()
    }

    /// Names of bound parameters, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound_order.iter().map(|(n, v)| (n.as_str(), *v))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        // SAFETY: row-major strides of buffers with exactly these extents.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                self.value(a).data().as_ptr(),
                (k as isize, 1),
                self.value(b).data().as_ptr(),
                (n as isize, 1),
                T::zero(),
                out.as_mut_ptr(),
                (n as isize, 1),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a vector of the trailing extent to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let w = *self.shape(a).last().unwrap();
        if self.shape(row) != [w] {
            return Err(Error::Shape(format!(
                "add_row of {:?} and {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(w) {
            chunk.iter_mut().zip(r).for_each(|(x, &y)| *x = *x + y);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu_tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), T::ln)
    }

    // ---- normalization --------------------------------------------------

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let out = softmax_along(self.value(a), axis, false);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { x: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let out = softmax_along(self.value(a), axis, true);
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax { x: a, axis }, rg))
    }

    /// Layer normalization over the trailing axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let w = *self.shape(x).last().unwrap();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(Error::Shape(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        Ok(self.layer_norm_impl(x, Some((gain, bias)), eps))
    }

    /// Layer normalization without affine parameters.
    pub fn layer_norm_plain(&mut self, x: Var, eps: f64) -> Var {
        self.layer_norm_impl(x, None, eps)
    }

    fn layer_norm_impl(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Var {
        let eps = T::from_f64(eps);
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap();
        let n = T::from_f64(w as f64);
        let rows = xv.numel() / w;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(w) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let out = match affine {
            Some((g, b)) => {
                let (gd, bd) = (self.value(g).data(), self.value(b).data());
                let mut out = xhat.clone();
                for row in out.chunks_mut(w) {
                    for (h, (&gg, &bb)) in row.iter_mut().zip(gd.iter().zip(bd)) {
                        *h = *h * gg + bb;
                    }
                }
                out
            }
            None => xhat.clone(),
        };
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || affine.is_some_and(|(g, b)| self.rg(g) || self.rg(b));
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            },
            rg,
        )
    }

    // ---- structure ------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along {axis} of {base:?} and {s:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis];
                let chunk = d * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Selects rows (entries of the leading axis) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(Error::Argument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Shape(format!(
                "row index {bad} out of range for {shape:?}"
            )));
        }
        let xv = self.value(x);
        let w = xv.row_len();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), rg))
    }

    // ---- reductions -----------------------------------------------------

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s.remove(axis);
        non_scalar_shape(s)
    }

    /// Maximum along `axis` (removed from the shape). Gradient flows to the
    /// first maximizing element only.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        self.check_axis(x, axis)?;
        let (outer, d, inner) = split_axis(self.shape(x), axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = src[o * d * inner + i];
                for j in 1..d {
                    let v = src[(o * d + j) * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let shape = self.reduced_shape(x, axis);
        let rg = self.rg(x);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::MaxAxis {
                x,
                axis,
                argmax: argmax.clone(),
            },
            rg,
        );
        Ok((v, argmax))
    }

    fn reduce_sum(&self, x: Var, axis: usize) -> Vec<T> {
        let (outer, d, inner) = split_axis(self.shape(x), axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let row = &src[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        out
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = self.reduce_sum(x, axis);
        let shape = self.reduced_shape(x, axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let d = T::from_f64(self.shape(x)[axis] as f64);
        let out = self.reduce_sum(x, axis).into_iter().map(|v| v / d).collect();
        let shape = self.reduced_shape(x, axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    // ---- fused losses ---------------------------------------------------

    /// Row-wise cosine similarity of two `[m, n]` matrices, giving `[m]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("cosine_rows needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let eps = T::from_f64(1e-8);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| {
                let (x, y) = (&ad[i * n..(i + 1) * n], &bd[i * n..(i + 1) * n]);
                let dot = x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
                let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt();
                let ny = y.iter().map(|&q| q * q).sum::<T>().sqrt();
                dot / (nx * ny).max(eps)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::CosineRows { a, b, eps }, rg))
    }

    /// Per-row cross-entropy `-log softmax(logits)[label]`, giving `[m]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy of {s:?} with {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {} classes",
                s[1]
            )));
        }
        let ls = softmax_along(self.value(logits), 1, true);
        let out = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -ls.data()[i * s[1] + l])
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![s[0]], out),
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Symmetric Chamfer distance between `[n, 3]` and `[m, 3]` point sets.
    pub fn chamfer(&mut self, p: Var, g: Var, kind: ChamferKind) -> Result<Var> {
        let (sp, sg) = (self.shape(p).to_vec(), self.shape(g).to_vec());
        if sp.len() != 2 || sg.len() != 2 || sp[1] != 3 || sg[1] != 3 {
            return Err(Error::Shape(format!("chamfer of {sp:?} and {sg:?}")));
        }
        let pts = |v: &Tensor<T>| -> Vec<[T; 3]> {
            v.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
        };
        let (pp, gg) = (pts(self.value(p)), pts(self.value(g)));
        let (p_to_g, dp) = nearest_indices(&pp, &gg);
        let (g_to_p, dg) = nearest_indices(&gg, &pp);
        // Summing sorted terms makes the value independent of point order.
        let term = |d2: &[T]| -> T {
            let n = T::from_f64(d2.len() as f64);
            let mut v: Vec<T> = match kind {
                ChamferKind::L1 => d2.iter().map(|v| v.sqrt()).collect(),
                ChamferKind::L2 => d2.to_vec(),
            };
            v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            v.into_iter().sum::<T>() / n
        };
        let value = term(&dp) + term(&dg);
        let rg = self.rg(p) || self.rg(g);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Chamfer {
                p,
                g,
                kind,
                p_to_g,
                g_to_p,
            },
            rg,
        ))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::Shape(format!(
                "straight_through of {:?} with {:?}",
                self.shape(soft),
                hard.shape()
            )));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }
}

impl<T: Real> Graph<T> {
    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch·t, 3c]` with the query, key and value projections
    /// side by side; each of the `batch` sequences of `t` rows attends only
    /// within itself. Returns the concatenated head outputs, `[batch·t, c]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 2
            || batch == 0
            || heads == 0
            || shape[0] % batch != 0
            || shape[1] % (3 * heads) != 0
        {
            return Err(Error::Shape(format!(
                "attention over {shape:?} with batch {batch} and {heads} heads"
            )));
        }
        let (rows, c) = (shape[0], shape[1] / 3);
        let (t, dh) = (rows / batch, c / heads);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * c];
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let (c3, ci, ti) = (3 * c as isize, c as isize, t as isize);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * 3 * c + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                // SAFETY: every view stays inside its row-major buffer.
                unsafe {
                    T::gemm(t, dh, t, src[base..].as_ptr(), (c3, 1), src[base + c..].as_ptr(), (1, c3), T::zero(), p.as_mut_ptr(), (ti, 1));
                }
                for row in p.chunks_mut(t) {
                    let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = ((*v - m) * scale).exp();
                        z = z + *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / z;
                    }
                }
                // SAFETY: as above.
                unsafe {
                    T::gemm(t, t, dh, p.as_ptr(), (ti, 1), src[base + 2 * c..].as_ptr(), (c3, 1), T::zero(), out[b * t * c + h * dh..].as_mut_ptr(), (ci, 1));
                }
            }
        }
        let rg = self.rg(qkv);
        let op = Op::Attention {
            qkv,
            batch,
            heads,
            probs,
        };
        Ok(self.push(Tensor::from_parts(vec![rows, c], out), op, rg))
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

// 1 + tanh(u) = 2 / (1 + e^(-2u)), which is much cheaper than libm tanh.
fn one_plus_tanh<T: Real>(x: T) -> T {
    let (c, a, two) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(2.0));
    let u = c * (x + a * x * x * x);
    two / (T::one() + (-two * u).exp())
}

pub(crate) fn gelu_tanh<T: Real>(x: T) -> T {
    T::from_f64(0.5) * x * one_plus_tanh(x)
}

pub(crate) fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let t = one_plus_tanh(x) - T::one();
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, d, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * d + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..d {
                mx = mx.max(src[at(j)]);
            }
            let mut z = T::zero();
            for j in 0..d {
                let e = (src[at(j)] - mx).exp();
                out[at(j)] = e;
                z = z + e;
            }
            if log {
                let lz = z.ln();
                for j in 0..d {
                    out[at(j)] = src[at(j)] - mx - lz;
                }
            } else {
                for j in 0..d {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
