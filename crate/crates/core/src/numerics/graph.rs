//! Reverse-mode computation record.
//!
//! Every primitive appends one node holding its output value and enough
//! saved state to apply its adjoint rule. Nodes are stored in creation order,
//! which is a topological order by construction, so backprop is a single
//! reverse sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Additive constant applied to disallowed attention positions.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Stored<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Stored<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Stored::Owned(t) => t,
            Stored::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    ScaleRows(Var, Var),
    RepeatRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        target: f64,
    },
}

struct Node<'a> {
    value: Stored<'a>,
    op: Op,
    needs_grad: bool,
}

/// Topologically ordered record of primitive applications.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        detail: format!("{shapes:?}"),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf owning its value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing an external tensor (parameters are bound this way).
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Stored::Borrowed(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", &[self.shape(a), self.shape(b)]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `[n,d] + [d]`, broadcasting over the leading dimension.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(row) != [d] {
            return Err(shape_err("add_row", &[self.shape(x), self.shape(row)]));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, b) in data[i * d..(i + 1) * d].iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, d], data)?,
            Op::AddRow(x, row),
            &[x, row],
        ))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", &[self.shape(a), self.shape(b)]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect()).unwrap();
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x + c` for a scalar constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a + c).collect()).unwrap();
        self.push(out, Op::Shift(x), &[x])
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("{} parts, axis {axis}", parts.len()),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| self.value(*p).dims2())
            .collect::<Result<_>>()?;
        let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(shape_err("concat", &shapes));
            }
            let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::vstack(&refs)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(shape_err("concat", &shapes));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(i));
                }
            }
            Tensor::new(vec![r, total], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Contiguous range `start..start + len` of a rank-2 tensor along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::Shape {
                op: "slice",
                detail: format!(
                    "{:?} axis {axis} range {start}..{}",
                    self.shape(x),
                    start + len
                ),
            });
        }
        let out = if axis == 0 {
            self.value(x).slice_rows(start, len)?
        } else {
            let v = self.value(x);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.row(i)[start..start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Split a rank-2 tensor into equal pieces along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, pieces: usize) -> Result<Vec<Var>> {
        let (r, c) = self.value(x).dims2()?;
        let extent = if axis == 0 { r } else { c };
        if pieces == 0 || extent % pieces != 0 {
            return Err(Error::Shape {
                op: "split",
                detail: format!("{extent} into {pieces}"),
            });
        }
        let w = extent / pieces;
        (0..pieces).map(|p| self.slice(x, axis, p * w, w)).collect()
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let v = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Row-wise softmax of `x + mask`; the mask is an additive constant.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(m) = mask {
            if m.shape() != [r, c] {
                return Err(shape_err("softmax", &[self.shape(x), m.shape()]));
            }
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                row[j] = v[i * c + j] + mask.map_or(0.0, |m| m.data()[i * c + j]);
            }
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Softmax(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| sigmoid(*a)).collect(),
        )
        .unwrap();
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a.max(0.0)).collect(),
        )
        .unwrap();
        self.push(out, Op::Relu(x), &[x])
    }

    /// Normalize each row of `[n,d]` to zero mean and unit variance, then apply `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                &[self.shape(x), self.shape(gamma), self.shape(beta)],
            ));
        }
        let v = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &v[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            out,
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

    /// Gather rows of `table` (`[V,d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("id {bad} out of range for {v} rows"),
            });
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over one axis of a rank-2 tensor (or axis 0 of a vector, giving a scalar).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let out = match (v.shape(), axis) {
            ([n], 0) if *n > 0 => Tensor::scalar(v.data().iter().sum::<f64>() / *n as f64),
            ([r, c], 0) if *r > 0 => {
                let mut acc = vec![0.0; *c];
                for i in 0..*r {
                    for (a, b) in acc.iter_mut().zip(v.row(i)) {
                        *a += b;
                    }
                }
                Tensor::vector(acc.into_iter().map(|a| a / *r as f64).collect())
            }
            ([r, c], 1) if *c > 0 => Tensor::vector(
                (0..*r)
                    .map(|i| v.row(i).iter().sum::<f64>() / *c as f64)
                    .collect(),
            ),
            (s, _) => {
                return Err(Error::Shape {
                    op: "mean_axis",
                    detail: format!("{s:?} axis {axis}"),
                })
            }
        };
        Ok(self.push(out, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Multiply row `i` of `[n,d]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(s) != [n] {
            return Err(shape_err("scale_rows", &[self.shape(x), self.shape(s)]));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for o in &mut data[i * d..(i + 1) * d] {
                *o *= sv[i];
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::ScaleRows(x, s), &[x, s]))
    }

    /// Tile a `[d]` vector into `[n,d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(shape_err("repeat_rows", &[v.shape()]));
        }
        let d = v.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::RepeatRows(x), &[x]))
    }

    /// Per-row negative log-likelihood of `targets` under softmax(`logits`); output `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n || targets.iter().any(|&t| t >= v) {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("logits {:?}, {} targets", self.shape(logits), targets.len()),
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut nll = Vec::with_capacity(n);
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|a| (a - max).exp()).sum::<f64>().ln() + max;
            nll.push(lse - row[t]);
            for a in row.iter_mut() {
                *a = (*a - lse).exp();
            }
        }
        let out = Tensor::vector(nll);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean Huber loss (transition at 1) between every element of `x` and `target`.
    pub fn smooth_l1(&mut self, x: Var, target: f64) -> Var {
        let v = self.value(x);
        let n = v.len().max(1) as f64;
        let s = v.data().iter().map(|a| smooth_l1(a - target)).sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::SmoothL1 { x, target }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Nodes not reachable get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_adjoint(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn apply_adjoint(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.get();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.needs_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        false,
                        self.value(*b).data(),
                        true,
                        &mut da,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        gd,
                        false,
                        &mut db,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs_grad(*row) {
                    let (n, d) = g.dims2()?;
                    let mut acc = vec![0.0; d];
                    for i in 0..n {
                        for (a, b) in acc.iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::vector(acc));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs_grad(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.needs_grad(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, s) => {
                let d = gd.iter().map(|a| a * s).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Shift(x) => self.accumulate(grads, *x, g.clone()),
            Op::Concat { parts, axis } => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.value(*p).dims2()?;
                    if self.needs_grad(*p) {
                        let piece = if *axis == 0 {
                            g.slice_rows(offset, pr)?
                        } else {
                            let mut data = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                data.extend_from_slice(
                                    &gd[i * total + offset..i * total + offset + pc],
                                );
                            }
                            Tensor::new(vec![r, pc], data)?
                        };
                        self.accumulate(grads, *p, piece);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                let (gr, gc) = g.dims2()?;
                if *axis == 0 {
                    dx[start * c..(start + gr) * c].copy_from_slice(gd);
                } else {
                    for i in 0..r {
                        dx[i * c + start..i * c + start + gc]
                            .copy_from_slice(&gd[i * gc..(i + 1) * gc]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::Transpose(x) => {
                let (r, c) = g.dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![c, r], dx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(shape)?);
            }
            Op::Softmax(x) => {
                let (r, c) = out.dims2()?;
                let y = out.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(a, y)| a * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(a, v)| if *v > 0.0 { *a } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = out.dims2()?;
                let gam = self.value(*gamma).data();
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let gr = &gd[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[i * d + j] = rstd[i] * (gr[j] * gam[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
                }
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gd[i * d + j] * xhat[i * d + j];
                            db[j] += gd[i * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::vector(dg));
                    self.accumulate(grads, *beta, Tensor::vector(db));
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2()?;
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[i * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(vec![v, d], dt)?);
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.value(*x).shape().to_vec();
                let dx = match (xs.as_slice(), axis) {
                    ([n], _) => vec![gd[0] / *n as f64; *n],
                    ([r, c], 0) => {
                        let mut dx = Vec::with_capacity(r * c);
                        for _ in 0..*r {
                            dx.extend(gd.iter().map(|a| a / *r as f64));
                        }
                        dx
                    }
                    ([r, c], _) => (0..r * c).map(|k| gd[k / c] / *c as f64).collect(),
                    _ => unreachable!("checked in forward"),
                };
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, gd[0]));
            }
            Op::ScaleRows(x, s) => {
                let (n, d) = g.dims2()?;
                let sv = self.value(*s).data();
                if self.needs_grad(*x) {
                    let mut dx = gd.to_vec();
                    for i in 0..n {
                        for a in &mut dx[i * d..(i + 1) * d] {
                            *a *= sv[i];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
                }
                if self.needs_grad(*s) {
                    let xv = self.value(*x);
                    let ds = (0..n)
                        .map(|i| g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::vector(ds));
                }
            }
            Op::RepeatRows(x) => {
                let (n, d) = g.dims2()?;
                let mut dx = vec![0.0; d];
                for i in 0..n {
                    for (a, b) in dx.iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, Tensor::vector(dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, v) = self.value(*logits).dims2()?;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * v + t] -= 1.0;
                    for a in &mut dl[i * v..(i + 1) * v] {
                        *a *= gd[i];
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, v], dl)?);
            }
            Op::SmoothL1 { x, target } => {
                let xv = self.value(*x);
                let n = xv.len().max(1) as f64;
                let d = xv
                    .data()
                    .iter()
                    .map(|a| gd[0] * smooth_l1_grad(a - target) / n)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for a in row.iter_mut() {
        *a = (*a - max).exp();
        s += *a;
    }
    for a in row.iter_mut() {
        *a /= s;
    }
}

pub fn smooth_l1(delta: f64) -> f64 {
    let a = delta.abs();
    if a < 1.0 {
        0.5 * delta * delta
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        delta
    } else {
        delta.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecvar(g: &mut Graph, v: &[f64]) -> Var {
        g.leaf(Tensor::vector(v.to_vec()), true)
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), true);
        let y = g.softmax(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![1.0, 5.0, 2.0]).unwrap(), true);
        let mask = Tensor::matrix(1, 3, vec![0.0, MASK_NEG, 0.0]).unwrap();
        let y = g.softmax(x, Some(&mask)).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-2.0), 1.5);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5), true);
        let l = g.smooth_l1(x, 1.5);
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[1.0, 2.0]);
        let unused = vecvar(&mut g, &[3.0]);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), true);
        let b = g.leaf(Tensor::zeros(&[2, 3]), true);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        assert!(err.contains("[2, 3]"));
    }
}
