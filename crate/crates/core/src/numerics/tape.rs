//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends a node whose inputs are earlier nodes, so node
//! index order is a topological order and a single reverse sweep visits each
//! node once. Values are immutable once recorded.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stand-in for −∞ in similarity matrices: the most negative finite value.
pub const MASKED: f64 = f64::MIN;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MaskFill {
        src: Var,
        keep: Vec<bool>,
    },
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    SumSquares(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    StackRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        src: Var,
        scale: f64,
    },
    NormalizeRows {
        src: Var,
        norms: Vec<f64>,
    },
    CamNormalize {
        src: Var,
        gamma: f64,
        row_mask: Vec<bool>,
        col_mask: Vec<bool>,
        relu_in_denominator: bool,
        // Per column: the active denominator, or a negative value when it
        // was clamped to eps (and is therefore constant).
        denoms: Vec<f64>,
    },
    LayerNorm {
        src: Var,
        inv_std: Vec<f64>,
    },
    MeanRows {
        src: Var,
        mask: Vec<bool>,
        count: usize,
    },
    MaxRows {
        src: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exact zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// The computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<ParamId, Var>,
    bound: Vec<(ParamId, Var)>,
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a leaf; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).value.clone());
        self.bindings.insert(id, v);
        self.bound.push((id, v));
        v
    }

    /// Nodes currently bound to parameters, in bind order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("zip_map shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("map shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Replaces entries where `keep` is false by `fill`; those entries get no gradient.
    pub fn mask_fill(&mut self, a: Var, keep: &[bool], fill: f64) -> Result<Var> {
        if keep.len() != self.value(a).numel() {
            return Err(Error::shape("mask_fill mask size"));
        }
        let data = self
            .data(a)
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MaskFill {
                src: a,
                keep: keep.to_vec(),
            },
            &[a],
        ))
    }

    /// `a[n×d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims(a);
        if self.value(b).numel() != d || self.value(b).rank() != 1 {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.data(b);
        let mut data = self.data(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bv[j];
            }
        }
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[n×d] ⊙ b[d]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims(a);
        if self.value(b).numel() != d || self.value(b).rank() != 1 {
            return Err(Error::shape(format!(
                "mul_row: {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.data(b);
        let mut data = self.data(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] *= bv[j];
            }
        }
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::MulRow(a, b), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[n×k] · b[m×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_bt: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; n * m];
        matmul_bt_into(self.data(a), self.data(b), &mut out, n, k, m);
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log of a non-positive value"));
        }
        let out = self.map(a, f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt of a negative value"));
        }
        let out = self.map(a, f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Sums a list of same-shaped values left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of an empty list"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::invalid("concat_cols of an empty list"))?;
        if parts
            .iter()
            .any(|&p| self.dims(p).0 != n || self.value(p).rank() != 2)
        {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(a);
        if start + len > d || len == 0 {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of width {d}",
                start + len
            )));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let out = Tensor::matrix(n, len, data)?;
        Ok(self.push(out, Op::SliceCols { src: a, start }, &[a]))
    }

    /// Stacks same-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let d = rows
            .first()
            .map(|&r| self.value(r).numel())
            .ok_or_else(|| Error::invalid("stack_rows of an empty list"))?;
        if rows.iter().any(|&r| self.value(r).numel() != d) {
            return Err(Error::shape("stack_rows: lengths differ"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.data(r));
        }
        let out = Tensor::matrix(rows.len(), d, data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rows))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::OutOfVocabulary {
                id: bad,
                vocab_size: v,
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise `softmax(scale · a)`. Entries where `allowed` is false get
    /// exactly zero weight; a row with nothing allowed is all zeros.
    pub fn softmax_rows(&mut self, a: Var, scale: f64, allowed: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.dims(a);
        if let Some(mask) = allowed {
            if mask.len() != n * m {
                return Err(Error::shape("softmax_rows mask size"));
            }
        }
        let src = self.data(a);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row_mask = allowed.map(|mk| &mk[i * m..(i + 1) * m]);
            softmax_into(
                &src[i * m..(i + 1) * m],
                scale,
                row_mask,
                &mut data[i * m..(i + 1) * m],
            );
        }
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { src: a, scale }, &[a]))
    }

    /// Divides each row by its Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (n, d) = self.dims(a);
        let src = self.data(a);
        let mut norms = Vec::with_capacity(n);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > NORM_EPS {
                for j in 0..d {
                    data[i * d + j] = row[j] / norm;
                }
            }
        }
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("normalize shape");
        self.push(out, Op::NormalizeRows { src: a, norms }, &[a])
    }

    /// Column-wise thresholded normalization of a similarity matrix:
    /// `relu(s_ij + γ) / sqrt(Σ_i (s_ij + γ)²)` over unmasked rows `i`.
    ///
    /// Masked columns are filled with [`MASKED`]; masked rows become 0 and do
    /// not enter the column denominators. With `relu_in_denominator` the
    /// squared terms are `relu(s_ij + γ)²`.
    pub fn cam_normalize(
        &mut self,
        s: Var,
        gamma: f64,
        row_mask: &[bool],
        col_mask: &[bool],
        relu_in_denominator: bool,
        eps: f64,
    ) -> Result<Var> {
        let (n, m) = self.dims(s);
        if row_mask.len() != n || col_mask.len() != m {
            return Err(Error::shape("cam_normalize mask lengths"));
        }
        let src = self.data(s);
        let mut data = vec![0.0; n * m];
        let mut denoms = Vec::with_capacity(m);
        for j in 0..m {
            if !col_mask[j] {
                for i in 0..n {
                    data[i * m + j] = MASKED;
                }
                denoms.push(0.0);
                continue;
            }
            let mut sq = 0.0;
            for i in 0..n {
                if row_mask[i] {
                    let z = src[i * m + j] + gamma;
                    let w = if relu_in_denominator { z.max(0.0) } else { z };
                    sq += w * w;
                }
            }
            let root = sq.sqrt();
            let den = root.max(eps);
            for i in 0..n {
                if row_mask[i] {
                    data[i * m + j] = (src[i * m + j] + gamma).max(0.0) / den;
                }
            }
            denoms.push(if root > eps { root } else { -eps });
        }
        let out = Tensor::new(self.shape(s).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::CamNormalize {
                src: s,
                gamma,
                row_mask: row_mask.to_vec(),
                col_mask: col_mask.to_vec(),
                relu_in_denominator,
                denoms,
            },
            &[s],
        ))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (n, d) = self.dims(a);
        let src = self.data(a);
        let mut data = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv;
            }
        }
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("layer_norm shape");
        self.push(out, Op::LayerNorm { src: a, inv_std }, &[a])
    }

    /// Mean over the rows whose mask entry is true.
    pub fn mean_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.dims(a);
        if mask.len() != n {
            return Err(Error::shape("mean_rows mask length"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("mean over zero unmasked rows"));
        }
        let src = self.data(a);
        let mut data = vec![0.0; d];
        for i in (0..n).filter(|&i| mask[i]) {
            for j in 0..d {
                data[j] += src[i * d + j];
            }
        }
        for v in &mut data {
            *v /= count as f64;
        }
        let out = Tensor::vector(data)?;
        Ok(self.push(
            out,
            Op::MeanRows {
                src: a,
                mask: mask.to_vec(),
                count,
            },
            &[a],
        ))
    }

    /// Per-column maximum over unmasked rows (ties go to the lowest row).
    pub fn max_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.dims(a);
        if mask.len() != n {
            return Err(Error::shape("max_rows mask length"));
        }
        let first = mask
            .iter()
            .position(|&m| m)
            .ok_or_else(|| Error::invalid("max over zero unmasked rows"))?;
        let src = self.data(a);
        let mut argmax = vec![first; d];
        for i in (first + 1..n).filter(|&i| mask[i]) {
            for j in 0..d {
                if src[i * d + j] > src[argmax[j] * d + j] {
                    argmax[j] = i;
                }
            }
        }
        let data = (0..d).map(|j| src[argmax[j] * d + j]).collect();
        let out = Tensor::vector(data)?;
        Ok(self.push(out, Op::MaxRows { src: a, argmax }, &[a]))
    }

    /// `Σ_t −log softmax(logits_t)[target_t]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {n} logit rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::OutOfVocabulary {
                id: *bad,
                vocab_size: v,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            softmax_into(row, 1.0, None, &mut probs[i * v..(i + 1) * v]);
            if let Some(t) = *target {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += -(row[t] - max - lse);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Runs [`Tape::backward`] and adds each bound parameter's gradient to its
    /// accumulator in `store`. Parameters not on the tape are untouched.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for &(id, var) in &self.bound {
            if let Some(g) = &grads.grads[var.0] {
                for (acc, v) in store.get_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(a, f) => self.acc(grads, *a, |ga| axpy(ga, g, *f)),
            Op::AddScalar(a) => self.acc(grads, *a, |ga| axpy(ga, g, 1.0)),
            Op::MaskFill { src, keep } => self.acc(grads, *src, |gs| {
                for ((x, gi), &k) in gs.iter_mut().zip(g).zip(keep) {
                    if k {
                        *x += gi;
                    }
                }
            }),
            Op::AddRow(a, b) => {
                let (n, d) = self.dims(*a);
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (n, d) = self.dims(*a);
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..d {
                            ga[i * d + j] += g[i * d + j] * bv[j];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j] * av[i * d + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.acc(grads, *a, |ga| matmul_bt_into(g, bv, ga, n, m, k));
                self.acc(grads, *b, |gb| matmul_at_into(av, g, gb, n, k, m));
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).0;
                let (av, bv) = (self.data(*a), self.data(*b));
                // out = A·Bᵀ: dA = G · B, dB = Gᵀ · A
                self.acc(grads, *a, |ga| matmul_into(g, bv, ga, n, m, k));
                self.acc(grads, *b, |gb| matmul_at_into(g, av, gb, n, m, k));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let av = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * y;
                }
            }),
            Op::Log(a) => {
                let av = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += gi / v;
                    }
                });
            }
            Op::Sqrt(a) => self.acc(grads, *a, |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *x += gi / (2.0 * y);
                    }
                }
            }),
            Op::Sum(a) => self.acc(grads, *a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::SumSquares(a) => {
                let av = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for (x, v) in ga.iter_mut().zip(av) {
                        *x += 2.0 * v * g[0];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = self.dims(parts[0]).0;
                let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    self.acc(grads, p, |gp| {
                        for i in 0..n {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let (n, d) = self.dims(*src);
                let len = self.nodes[idx].value.cols();
                self.acc(grads, *src, |gs| {
                    for i in 0..n {
                        for j in 0..len {
                            gs[i * d + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::StackRows(rows) => {
                let d = self.value(rows[0]).numel();
                for (i, &r) in rows.iter().enumerate() {
                    self.acc(grads, r, |gr| axpy(gr, &g[i * d..(i + 1) * d], 1.0));
                }
            }
            Op::Gather { table, ids } => {
                let d = self.dims(*table).1;
                self.acc(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Softmax { src, scale } => {
                let (n, m) = self.dims(*src);
                self.acc(grads, *src, |gs| {
                    for i in 0..n {
                        let y = &out[i * m..(i + 1) * m];
                        let gi = &g[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            gs[i * m + j] += scale * y[j] * (gi[j] - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows { src, norms } => {
                let (n, d) = self.dims(*src);
                self.acc(grads, *src, |gs| {
                    for i in 0..n {
                        if norms[i] <= NORM_EPS {
                            continue;
                        }
                        let y = &out[i * d..(i + 1) * d];
                        let gi = &g[i * d..(i + 1) * d];
                        let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gs[i * d + j] += (gi[j] - y[j] * dot) / norms[i];
                        }
                    }
                });
            }
            Op::CamNormalize {
                src,
                gamma,
                row_mask,
                col_mask,
                relu_in_denominator,
                denoms,
            } => {
                let (n, m) = self.dims(*src);
                let sv = self.data(*src);
                self.acc(grads, *src, |gs| {
                    for j in 0..m {
                        if !col_mask[j] {
                            continue;
                        }
                        let den = denoms[j];
                        let clamped = den < 0.0;
                        let den = den.abs();
                        // Σ_i g_ij · relu(z_ij)
                        let mut gr = 0.0;
                        for i in 0..n {
                            if row_mask[i] {
                                gr += g[i * m + j] * (sv[i * m + j] + gamma).max(0.0);
                            }
                        }
                        for k in 0..n {
                            if !row_mask[k] {
                                continue;
                            }
                            let z = sv[k * m + j] + gamma;
                            let mut d = 0.0;
                            if z > 0.0 {
                                d += g[k * m + j] / den;
                            }
                            if !clamped {
                                let w_dw = if *relu_in_denominator { z.max(0.0) } else { z };
                                d -= gr * w_dw / (den * den * den);
                            }
                            gs[k * m + j] += d;
                        }
                    }
                });
            }
            Op::LayerNorm { src, inv_std } => {
                let (n, d) = self.dims(*src);
                self.acc(grads, *src, |gs| {
                    for i in 0..n {
                        let y = &out[i * d..(i + 1) * d];
                        let gi = &g[i * d..(i + 1) * d];
                        let mean_g = gi.iter().sum::<f64>() / d as f64;
                        let mean_gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gs[i * d + j] += inv_std[i] * (gi[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                });
            }
            Op::MeanRows { src, mask, count } => {
                let (n, d) = self.dims(*src);
                let inv = 1.0 / *count as f64;
                self.acc(grads, *src, |gs| {
                    for i in (0..n).filter(|&i| mask[i]) {
                        for j in 0..d {
                            gs[i * d + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::MaxRows { src, argmax } => {
                let d = self.dims(*src).1;
                self.acc(grads, *src, |gs| {
                    for (j, &i) in argmax.iter().enumerate() {
                        gs[i * d + j] += g[j];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.dims(*logits).1;
                self.acc(grads, *logits, |gl| {
                    for (i, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            for j in 0..v {
                                gl[i * v + j] += g[0] * probs[i * v + j];
                            }
                            gl[i * v + t] -= g[0];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |ga| axpy(ga, g, 1.0)),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of `scale · row` into `out`, honoring `allowed`.
pub(crate) fn softmax_into(row: &[f64], scale: f64, allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if ok(j) && scale * x > max {
            max = scale * x;
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (j, &x) in row.iter().enumerate() {
        out[j] = if ok(j) { (scale * x - max).exp() } else { 0.0 };
        total += out[j];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
