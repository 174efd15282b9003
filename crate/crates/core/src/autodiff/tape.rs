use serde::{Deserialize, Serialize};

use super::kernels;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Accounting bucket for matmul multiply-adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopTag {
    /// Q/K/V/O projections and attention score/value products.
    Mha,
    /// FFN up and down projections.
    Ffn,
    /// Everything else (LM head, router, tests).
    Other,
}

/// Multiply-add counts per [`FlopTag`], accumulated while counting is enabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub mha: u64,
    pub ffn: u64,
    pub other: u64,
}

impl FlopCounter {
    fn add(&mut self, tag: FlopTag, macs: u64) {
        match tag {
            FlopTag::Mha => self.mha += macs,
            FlopTag::Ffn => self.ffn += macs,
            FlopTag::Other => self.other += macs,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    ScaleBy { a: Var, s: Var },
    Relu { a: Var },
    Silu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var, axis: usize },
    CausalMask { a: Var, offset: usize },
    RmsNorm { x: Var, gain: Var, cols: usize, inv: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Select { a: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list: every op appends a node; `backward` replays it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counter: Option<FlopCounter>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that tallies matmul multiply-adds by [`FlopTag`].
    pub fn with_flop_counting() -> Self {
        Self { nodes: Vec::new(), counter: Some(FlopCounter::default()) }
    }

    pub fn flop_counter(&self) -> Option<FlopCounter> {
        self.counter
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push_node(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(rg);
        self.push_node(value, op)
    }

    fn matrix(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).rows_cols()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_tagged(a, b, FlopTag::Other)
    }

    pub fn matmul_tagged(&mut self, a: Var, b: Var, tag: FlopTag) -> Result<Var> {
        let (m, k) = self.matrix(a)?;
        let (k2, n) = self.matrix(b)?;
        if k != k2 {
            return dim_err(format!("matmul inner extents differ: {m}x{k} · {k2}x{n}"));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        if let Some(c) = &mut self.counter {
            c.add(tag, (m * k * n) as u64);
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(a)?;
        let out = kernels::transpose(self.data(a), rows, cols);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddScalar { a }, &[a])
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err(format!("scale_by expects a 1-element scale, got {:?}", self.shape(s)));
        }
        let sv = self.data(s)[0];
        let out = self.data(a).iter().map(|x| x * sv).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::ScaleBy { a, s }, &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu { a }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x * kernels::sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Silu { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return dim_err("mean of empty tensor");
        }
        let s: f64 = self.data(a).iter().sum();
        Ok(self.push(vec![1], vec![s / n as f64], Op::Mean { a }, &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        if shape[axis] == 0 {
            return dim_err("softmax over an empty axis");
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::softmax_strided(x, &mut out, o * len * inner + i, len, inner);
            }
        }
        Ok(self.push(shape, out, Op::Softmax { a, axis }, &[a]))
    }

    /// Sets `a[i, j] = -inf` wherever key `j` lies in the future of query `i`.
    /// Query `i` sits at absolute position `offset + i`.
    pub fn causal_mask(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (q, k) = self.matrix(a)?;
        if offset + q > k {
            return dim_err(format!("causal mask: {q} queries at offset {offset} exceed {k} keys"));
        }
        let mut out = self.data(a).to_vec();
        for i in 0..q {
            for v in &mut out[i * k + offset + i + 1..(i + 1) * k] {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(vec![q, k], out, Op::CausalMask { a, offset }, &[a]))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.matrix(x)?;
        if self.shape(gain) != [cols] {
            return dim_err(format!("rmsnorm gain {:?} does not match width {cols}", self.shape(gain)));
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let mut out = vec![0.0; rows * cols];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let s = 1.0 / (ms + eps).sqrt();
            inv.push(s);
            for c in 0..cols {
                out[r * cols + c] = row[c] * s * gd[c];
            }
        }
        Ok(self.push(vec![rows, cols], out, Op::RmsNorm { x, gain, cols, inv }, &[x, gain]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return dim_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("slice axis {axis} out of range for {shape:?}"));
        }
        if start + len > shape[axis] {
            return Err(Error::Index(format!(
                "slice {start}..{} exceeds extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(new_shape, out, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, &[a]))
    }

    /// Gathers rows of a `[vocab×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix(table)?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix(logits)?;
        if rows != targets.len() {
            return dim_err(format!("{rows} logit rows but {} targets", targets.len()));
        }
        if rows == 0 {
            return dim_err("cross entropy over zero rows");
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::softmax_strided(x, &mut probs, r * cols, cols, 1);
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Index(format!("target {t} outside {cols} classes")));
            }
            // log-sum-exp form keeps tiny probabilities finite
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(vec![1], vec![loss / rows as f64], op, &[logits]))
    }

    /// Ceil-mode max pooling of an `[h×w×d]` grid with kernel `(kh, kw)`.
    ///
    /// Partial windows at the bottom/right edges are pooled over the cells they
    /// cover. The backward pass routes each output gradient to the first
    /// row-major argmax of its window.
    pub fn maxpool_grid(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var> {
        let (kh, kw) = kernel;
        let shape = self.shape(x).to_vec();
        let [h, w, d] = shape[..] else {
            return dim_err(format!("maxpool expects [h, w, d], got {shape:?}"));
        };
        if h == 0 || w == 0 || d == 0 {
            return dim_err(format!("maxpool over zero-extent grid {shape:?}"));
        }
        if kh == 0 || kw == 0 {
            return dim_err(format!("maxpool kernel {kh}x{kw} has a zero extent"));
        }
        let (oh, ow) = (h.div_ceil(kh), w.div_ceil(kw));
        let src = self.data(x);
        let mut out = vec![0.0; oh * ow * d];
        let mut argmax = vec![0; oh * ow * d];
        for pr in 0..oh {
            for pc in 0..ow {
                for ch in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for r in pr * kh..((pr + 1) * kh).min(h) {
                        for c in pc * kw..((pc + 1) * kw).min(w) {
                            let idx = (r * w + c) * d + ch;
                            if best_idx == usize::MAX || src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (pr * ow + pc) * d + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        Ok(self.push(vec![oh, ow, d], out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// The single element `a[index]` (flat) as a 1-element tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).numel();
        if index >= n {
            return Err(Error::Index(format!("select {index} from {n} elements")));
        }
        let v = self.data(a)[index];
        Ok(self.push(vec![1], vec![v], Op::Select { a, index }, &[a]))
    }

    /// Reverse pass from a 1-element `loss`. Gradients accumulate into every
    /// node that requires them; call on a fresh tape per step.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_node(i, &op, &g);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn acc(&mut self, v: Var, g: &[f64]) {
        if self.wants(v) {
            self.nodes[v.0].value.accumulate_grad(g);
        }
    }

    fn backward_node(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let ga = kernels::matmul_rhs_t(g, self.data(b), m, k, n);
                    self.acc(a, &ga);
                }
                if self.wants(b) {
                    let gb = kernels::matmul_lhs_t(self.data(a), g, m, k, n);
                    self.acc(b, &gb);
                }
            }
            Op::Transpose { a, rows, cols } => {
                let ga = kernels::transpose(g, cols, rows);
                self.acc(a, &ga);
            }
            Op::Add { a, b } => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub { a, b } => {
                self.acc(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(b, &neg);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect();
                self.acc(a, &ga);
                self.acc(b, &gb);
            }
            Op::Scale { a, c } => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.acc(a, &ga);
            }
            Op::AddScalar { a } => self.acc(a, g),
            Op::ScaleBy { a, s } => {
                let sv = self.data(s)[0];
                let ga: Vec<f64> = g.iter().map(|v| v * sv).collect();
                let gs: f64 = g.iter().zip(self.data(a)).map(|(x, y)| x * y).sum();
                self.acc(a, &ga);
                self.acc(s, &[gs]);
            }
            Op::Relu { a } => {
                let ga: Vec<f64> =
                    g.iter().zip(self.data(a)).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                self.acc(a, &ga);
            }
            Op::Silu { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gv, &x)| {
                        let s = kernels::sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.acc(a, &ga);
            }
            Op::Sum { a } => {
                let ga = vec![g[0]; self.value(a).numel()];
                self.acc(a, &ga);
            }
            Op::Mean { a } => {
                let n = self.value(a).numel();
                let ga = vec![g[0] / n as f64; n];
                self.acc(a, &ga);
            }
            Op::Softmax { a, axis } => {
                let y = self.data(Var(i));
                let (outer, len, inner) = kernels::axis_split(self.shape(Var(i)), axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            ga[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.acc(a, &ga);
            }
            Op::CausalMask { a, offset } => {
                let (q, k) = self.matrix(Var(i)).expect("mask output is a matrix");
                let mut ga = g.to_vec();
                for r in 0..q {
                    for v in &mut ga[r * k + offset + r + 1..(r + 1) * k] {
                        *v = 0.0;
                    }
                }
                self.acc(a, &ga);
            }
            Op::RmsNorm { x, gain, cols, ref inv } => {
                let xd = self.data(x);
                let gd = self.data(gain);
                let rows = inv.len();
                let mut gx = vec![0.0; rows * cols];
                let mut gg = vec![0.0; cols];
                for r in 0..rows {
                    let s = inv[r];
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = (0..cols).map(|c| gr[c] * gd[c] * xr[c]).sum();
                    let coef = s * s * s * dot / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = s * gd[c] * gr[c] - coef * xr[c];
                        gg[c] += gr[c] * xr[c] * s;
                    }
                }
                self.acc(x, &gx);
                self.acc(gain, &gg);
            }
            Op::Concat { ref parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(self.shape(Var(i)), axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + start) * inner;
                            gp.extend_from_slice(&g[from..from + len * inner]);
                        }
                        self.acc(p, &gp);
                    }
                    start += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = kernels::axis_split(self.shape(a), axis);
                let len = self.shape(Var(i))[axis];
                let mut ga = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    ga[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                self.acc(a, &ga);
            }
            Op::Reshape { a } => self.acc(a, g),
            Op::Embedding { table, ref ids } => {
                if self.wants(table) {
                    let d = self.shape(table)[1];
                    let mut gt = vec![0.0; self.value(table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                    self.acc(table, &gt);
                }
            }
            Op::CrossEntropy { logits, ref targets, ref probs } => {
                let cols = self.shape(logits)[1];
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * cols + t] -= scale;
                }
                self.acc(logits, &gl);
            }
            Op::MaxPool { x, ref argmax } => {
                let mut gx = vec![0.0; self.value(x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                self.acc(x, &gx);
            }
            Op::Select { a, index } => {
                let mut ga = vec![0.0; self.value(a).numel()];
                ga[index] = g[0];
                self.acc(a, &ga);
            }
        }
    }
}
