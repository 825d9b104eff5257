//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes only ever reference earlier nodes, so the recording is a DAG in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Trainable values live in a [`ParamStore`]; [`Graph::param`] snapshots a
//! parameter into the graph and backward writes gradients back into it.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    AddRowBias(Var, Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    CosineRows(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into `store.grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "exp" });
        }
        Ok(self.push(v, Op::Exp(a)))
    }

    /// Natural log; inputs must be strictly positive (shift with
    /// [`Graph::add_scalar`] first when an epsilon is wanted).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = tensor::gelu(self.value(a))?;
        Ok(self.push(v, Op::Gelu(a)))
    }

    /// Adds a length-`d` bias to every row of an `n x d` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != d {
            return Err(Error::shape("add_row_bias", self.value(x).shape(), b.shape()));
        }
        let mut out = self.value(x).clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += b.data()[j];
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::invalid(format!("column slice {start}..{} of width {d}", start + len)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let v = Tensor::new([n, len], out)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new([n, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), &[r, c]));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new([rows, d], out)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of an `n x m` matrix, as `1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let src = self.value(a);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let v = Tensor::new([1, m], out)?;
        Ok(self.push(v, Op::MeanRows(a)))
    }

    /// Row-wise cosine similarity of two `n x d` matrices, as `n x 1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (n, _) = self.value(a).dims2()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(tensor::cosine_sim(self.value(a).row(i), self.value(b).row(i))?);
        }
        let v = Tensor::new([n, 1], out)?;
        Ok(self.push(v, Op::CosineRows(a, b)))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, t: Tensor| {
                debug_assert!(v.0 < idx, "graph nodes must reference earlier nodes");
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, Var(idx))),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
                Op::AddScalar(a) => send(*a, g.clone()),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => send(*a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::MatMul(a, b) => {
                    let bt = tensor::transpose(self.value(*b))?;
                    send(*a, tensor::matmul(&g, &bt)?);
                    let at = tensor::transpose(self.value(*a))?;
                    send(*b, tensor::matmul(&at, &g)?);
                }
                Op::Transpose(a) => send(*a, tensor::transpose(&g)?),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (n, m) = y.dims2()?;
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dx[i * m + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*a, Tensor::new([n, m], dx)?);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma);
                    let (n, d) = xv.dims2()?;
                    let mut dx = vec![0.0; n * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let row = xv.row(i);
                        let (mean, inv_std) = tensor::row_moments(row, *eps);
                        let gr = g.row(i);
                        for j in 0..d {
                            xhat[j] = (row[j] - mean) * inv_std;
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            dxhat[j] = gr[j] * gam.data()[j];
                        }
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] =
                                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    send(*x, Tensor::new([n, d], dx)?);
                    send(*gamma, Tensor::new(gam.shape().to_vec(), dgamma)?);
                    send(*beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta)?);
                }
                Op::Gelu(a) => {
                    send(*a, g.zip_map(self.value(*a), |gx, x| gx * tensor::gelu_grad_scalar(x)))
                }
                Op::AddRowBias(x, bias) => {
                    let (n, d) = g.dims2()?;
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for (acc, v) in db.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    send(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?);
                    send(*x, g.clone());
                }
                Op::SliceCols { x, start } => {
                    let (n, d) = self.value(*x).dims2()?;
                    let len = g.dims2()?.1;
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        dx[i * d + start..i * d + start + len].copy_from_slice(g.row(i));
                    }
                    send(*x, Tensor::new([n, d], dx)?);
                }
                Op::ConcatCols(parts) => {
                    let n = g.dims2()?.0;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).dims2()?.1;
                        let mut dp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        send(p, Tensor::new([n, w], dp)?);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let len = self.value(p).len();
                        send(p, Tensor::new(shape, g.data()[offset..offset + len].to_vec())?);
                        offset += len;
                    }
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    send(*a, Tensor::full(self.value(*a).shape().to_vec(), s));
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.value(*a).dims2()?;
                    let mut dx = Vec::with_capacity(n * m);
                    for _ in 0..n {
                        dx.extend(g.data().iter().map(|v| v / n as f64));
                    }
                    send(*a, Tensor::new([n, m], dx)?);
                }
                Op::CosineRows(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, d) = av.dims2()?;
                    let mut da = vec![0.0; n * d];
                    let mut db = vec![0.0; n * d];
                    for i in 0..n {
                        let (ar, br) = (av.row(i), bv.row(i));
                        let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let c = node.value.data()[i];
                        let gi = g.data()[i];
                        for j in 0..d {
                            da[i * d + j] = gi * (br[j] / (na * nb) - c * ar[j] / (na * na));
                            db[i * d + j] = gi * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                        }
                    }
                    send(*a, Tensor::new([n, d], da)?);
                    send(*b, Tensor::new([n, d], db)?);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let loss = g.sum(v);
        g.backward_into(loss, &mut store).unwrap();
        assert!(store.get(p).grad.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let e = g.exp(v).unwrap();
        let s = g.sum(e);
        let loss = g.scale(s, 0.0);
        g.backward_into(loss, &mut store).unwrap();
        assert!(store.get(p).grad.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros([2]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn shared_node_accumulates() {
        // d/dx sum(x * x) = 2x
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::new([2], vec![3.0, -4.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[6.0, -8.0]);
    }
}
