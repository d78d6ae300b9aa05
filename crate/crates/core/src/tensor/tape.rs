use rand::Rng;

use super::linalg::{mm_nn, mm_nt, mm_tn};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    AddBias {
        a: usize,
        bias: usize,
    },
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat {
        inputs: Vec<usize>,
        widths: Vec<usize>,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    EmbeddingBag {
        table: usize,
        bags: Vec<Vec<usize>>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Select {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
        index: usize,
    },
    Sum(usize),
    ScatterOverride {
        base: usize,
        values: usize,
        cols: usize,
        cells: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward ops; [`Tape::backward`] replays them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not
    /// influence the loss (or does not require gradients).
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, zeros when it was not reached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::ForeignVar(v.0))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `a (..., k) · b (k, n)`, or `b (n, k)` transposed when `trans_b`.
    /// Leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.rank() < 1 || bv.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![0, 0],
                got: bv.shape.clone(),
            });
        }
        let k = av.last_dim();
        let (bk, n) = if trans_b {
            (bv.shape[1], bv.shape[0])
        } else {
            (bv.shape[0], bv.shape[1])
        };
        if bk != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                got: bv.shape.clone(),
            });
        }
        let m = av.numel() / k.max(1);
        let data = if trans_b {
            mm_nt(&av.data, &bv.data, m, k, n)
        } else {
            mm_nn(&av.data, &bv.data, m, k, n)
        };
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape, data },
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Batched `a (B, m, k) · b (B, k, n)`, or `b (B, n, k)` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.rank() != 3 || bv.rank() != 3 || av.shape[0] != bv.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                expected: av.shape.clone(),
                got: bv.shape.clone(),
            });
        }
        let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
        let (bk, n) = if trans_b {
            (bv.shape[2], bv.shape[1])
        } else {
            (bv.shape[1], bv.shape[2])
        };
        if bk != k {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                expected: vec![batch, k, n],
                got: bv.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(batch * m * n);
        for s in 0..batch {
            let a_s = &av.data[s * m * k..(s + 1) * m * k];
            let b_s = &bv.data[s * k * n..(s + 1) * k * n];
            if trans_b {
                data.extend(mm_nt(a_s, b_s, m, k, n));
            } else {
                data.extend(mm_nn(a_s, b_s, m, k, n));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data,
            },
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a)?.value.shape, &self.node(b)?.value.shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: sa.clone(),
                got: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    /// `a (..., n) + bias (n)` broadcast over leading axes.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(bias)?.value);
        let n = av.last_dim();
        if bv.shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                expected: vec![n],
                got: bv.shape.clone(),
            });
        }
        let data = av
            .data
            .chunks(n.max(1))
            .flat_map(|r| r.iter().zip(&bv.data).map(|(x, y)| x + y))
            .collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { a: a.0, bias: bias.0 }, rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x * factor).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale(a.0, factor), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x.tanh()).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a.0), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.last_dim().max(1);
        let mut data = av.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a.0), rg)
    }

    /// Softmax over the last axis where `masked[j]` entries are treated as
    /// −∞ logits: they come out exactly 0 and receive exactly 0 gradient.
    pub fn masked_softmax(&mut self, a: Var, masked: &[bool]) -> Result<Var> {
        let av = &self.node(a)?.value;
        if masked.len() != av.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                expected: av.shape.clone(),
                got: vec![masked.len()],
            });
        }
        let n = av.last_dim().max(1);
        let mut data = av.data.clone();
        for (r, (row, mrow)) in data.chunks_mut(n).zip(masked.chunks(n)).enumerate() {
            if mrow.iter().all(|&m| m) {
                return Err(TensorError::AllMasked { row: r });
            }
            for (x, &m) in row.iter_mut().zip(mrow) {
                if m {
                    *x = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a.0), rg))
    }

    /// `scores = q kᵀ / sqrt(k_dim)` followed by a masked softmax, the
    /// attention-weight computation for `q, k: (B, T, dh)`.
    pub fn masked_attention_scores(&mut self, q: Var, k: Var, masked: &[bool]) -> Result<Var> {
        let dh = self.node(q)?.value.last_dim();
        let raw = self.bmm(q, k, true)?;
        let scaled = self.scale(raw, 1.0 / (dh as f64).sqrt());
        self.masked_softmax(scaled, masked)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.last_dim().max(1);
        let mut data = av.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a.0), rg)
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = &self
            .node(*inputs.first().ok_or(TensorError::ShapeMismatch {
                op: "concat",
                expected: vec![1],
                got: vec![0],
            })?)?
            .value;
        let lead = first.shape[..first.rank().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = &self.node(v)?.value;
            if t.rank() == 0 || t.shape[..t.rank() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: lead.clone(),
                    got: t.shape.clone(),
                });
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[v.0].value.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                widths,
            },
            rg,
        ))
    }

    /// Gather rows of a `(rows, d)` table: output `(indices.len(), d)`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        let (rows, d) = table_dims(tv, "embedding")?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(&tv.data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), d],
                data,
            },
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of table rows per bag: output `(bags.len(), d)`. An empty bag
    /// yields a zero row. This is a multi-hot row times the table.
    pub fn embedding_bag(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        let (rows, d) = table_dims(tv, "embedding_bag")?;
        let mut data = vec![0.0; bags.len() * d];
        for (bag, out) in bags.iter().zip(data.chunks_mut(d.max(1))) {
            for &i in bag {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "embedding_bag",
                        index: i,
                        size: rows,
                    });
                }
                for (o, w) in out.iter_mut().zip(&tv.data[i * d..(i + 1) * d]) {
                    *o += w;
                }
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![bags.len(), d],
                data,
            },
            Op::EmbeddingBag {
                table: table.0,
                bags: bags.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let n = xv.last_dim();
        for p in [gamma, beta] {
            let s = &self.node(p)?.value.shape;
            if s[..] != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    expected: vec![n],
                    got: s.clone(),
                });
            }
        }
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let rows = xv.numel() / n.max(1);
        let mut normalized = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data.chunks(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                normalized.push(xh);
                data.push(xh * g[j] + b[j]);
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        let value = av.reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = &self.node(a)?.value;
        let rank = av.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::BadPermutation(perm.to_vec()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| av.shape[p]).collect();
        let offsets = permuted_offsets(&av.shape, perm);
        let data = offsets.iter().map(|&o| av.data[o]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Pick `index` along `axis`, removing that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        if axis >= av.rank() {
            return Err(TensorError::IndexOutOfRange {
                op: "select",
                index: axis,
                size: av.rank(),
            });
        }
        let axis_len = av.shape[axis];
        if index >= axis_len {
            return Err(TensorError::IndexOutOfRange {
                op: "select",
                index,
                size: axis_len,
            });
        }
        let outer: usize = av.shape[..axis].iter().product();
        let inner: usize = av.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * axis_len + index) * inner;
            data.extend_from_slice(&av.data[start..start + inner]);
        }
        let mut shape = av.shape.clone();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape, data },
            Op::Select {
                a: a.0,
                outer,
                axis_len,
                inner,
                index,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcast `base (cols)` to `(rows, cols)` and overwrite the listed
    /// `(row, col)` cells with consecutive entries of `values (cells)`.
    pub fn scatter_override(&mut self, base: Var, rows: usize, cells: &[(usize, usize)], values: Var) -> Result<Var> {
        let bv = &self.node(base)?.value;
        let vv = &self.node(values)?.value;
        if bv.rank() != 1 || vv.rank() != 1 || vv.numel() != cells.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_override",
                expected: vec![cells.len()],
                got: vv.shape.clone(),
            });
        }
        let cols = bv.numel();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(&bv.data);
        }
        let mut flat = Vec::with_capacity(cells.len());
        let mut taken = vec![false; rows * cols];
        for (&(r, c), &v) in cells.iter().zip(&vv.data) {
            if r >= rows || c >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_override",
                    index: r * cols + c,
                    size: rows * cols,
                });
            }
            let cell = r * cols + c;
            if std::mem::replace(&mut taken[cell], true) {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_override (duplicate cell)",
                    index: cell,
                    size: rows * cols,
                });
            }
            data[cell] = v;
            flat.push(cell);
        }
        let rg = self.rg(base) || self.rg(values);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ScatterOverride {
                base: base.0,
                values: values.0,
                cols,
                cells: flat,
            },
            rg,
        ))
    }

    /// Inverted dropout: zero each entry with probability `rate`, scale
    /// survivors by `1/(1-rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let shape = self.node(a)?.value.shape.clone();
        let numel: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor { shape, data: mask });
        self.mul(a, m)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.node(loss)?.value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(id, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backward_node(&self, id: usize, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |target: usize, contrib: Vec<f64>| -> Result<()> {
            if target >= id {
                // Inputs always precede outputs; anything else is a cycle.
                return Err(TensorError::ForeignVar(target));
            }
            if !self.nodes[target].requires_grad {
                return Ok(());
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        let val = |i: usize| &self.nodes[i].value.data;
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                if needs(a) {
                    let da = if trans_b {
                        mm_nn(g, val(b), m, n, k)
                    } else {
                        mm_nt(g, val(b), m, n, k)
                    };
                    acc(a, da)?;
                }
                if needs(b) {
                    let db = if trans_b {
                        mm_tn(g, val(a), m, n, k)
                    } else {
                        mm_tn(val(a), g, m, k, n)
                    };
                    acc(b, db)?;
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let mut da = Vec::with_capacity(batch * m * k);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        da.extend(if trans_b {
                            mm_nn(gs, bs, m, n, k)
                        } else {
                            mm_nt(gs, bs, m, n, k)
                        });
                    }
                    acc(a, da)?;
                }
                if needs(b) {
                    let mut db = Vec::with_capacity(batch * k * n);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        db.extend(if trans_b {
                            mm_tn(gs, as_, m, n, k)
                        } else {
                            mm_tn(as_, gs, m, k, n)
                        });
                    }
                    acc(b, db)?;
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec())?;
                acc(b, g.to_vec())?;
            }
            &Op::AddBias { a, bias } => {
                acc(a, g.to_vec())?;
                if needs(bias) {
                    let n = self.nodes[bias].value.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(bias, db)?;
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect())?;
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect())?;
                }
            }
            &Op::Scale(a, f) => acc(a, g.iter().map(|x| x * f).collect())?,
            &Op::Tanh(a) => {
                let y = &node.value.data;
                acc(a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect())?;
            }
            &Op::Softmax(a) => {
                let y = &node.value.data;
                let n = node.value.last_dim().max(1);
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                acc(a, da)?;
            }
            &Op::LogSoftmax(a) => {
                let y = &node.value.data;
                let n = node.value.last_dim().max(1);
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gi - yi.exp() * gsum;
                    }
                }
                acc(a, da)?;
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&inp, &w) in inputs.iter().zip(widths) {
                    if needs(inp) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(inp, d)?;
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, indices } => {
                let tv = &self.nodes[*table].value;
                let d = tv.last_dim();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (o, x) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                acc(*table, dt)?;
            }
            Op::EmbeddingBag { table, bags } => {
                let tv = &self.nodes[*table].value;
                let d = tv.last_dim();
                let mut dt = vec![0.0; tv.numel()];
                for (r, bag) in bags.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    for &i in bag {
                        for (o, x) in dt[i * d..(i + 1) * d].iter_mut().zip(gr) {
                            *o += x;
                        }
                    }
                }
                acc(*table, dt)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let n = self.nodes[*gamma].value.numel();
                let gam = val(*gamma);
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, xr) in g.chunks(n.max(1)).zip(normalized.chunks(n.max(1))) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dr, gr), xr)) in dx
                        .chunks_mut(n.max(1))
                        .zip(g.chunks(n.max(1)))
                        .zip(normalized.chunks(n.max(1)))
                        .enumerate()
                    {
                        let gh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_g = gh.iter().sum::<f64>() / n as f64;
                        let mean_gx = gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dr[j] = inv_std[r] * (gh[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    acc(*x, dx)?;
                }
            }
            &Op::Reshape(a) => acc(a, g.to_vec())?,
            Op::Permute { a, perm } => {
                let offsets = permuted_offsets(&self.nodes[*a].value.shape, perm);
                let mut da = vec![0.0; g.len()];
                for (&o, &gi) in offsets.iter().zip(g) {
                    da[o] = gi;
                }
                acc(*a, da)?;
            }
            &Op::Select {
                a,
                outer,
                axis_len,
                inner,
                index,
            } => {
                let mut da = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    let start = (o * axis_len + index) * inner;
                    da[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                acc(a, da)?;
            }
            &Op::Sum(a) => {
                let n = self.nodes[a].value.numel();
                acc(a, vec![g[0]; n])?;
            }
            Op::ScatterOverride {
                base,
                values,
                cols,
                cells,
            } => {
                if needs(*base) {
                    let mut taken = vec![false; g.len()];
                    for &c in cells {
                        taken[c] = true;
                    }
                    let mut db = vec![0.0; *cols];
                    for (row, trow) in g.chunks(*cols).zip(taken.chunks(*cols)) {
                        for j in 0..*cols {
                            if !trow[j] {
                                db[j] += row[j];
                            }
                        }
                    }
                    acc(*base, db)?;
                }
                if needs(*values) {
                    acc(*values, cells.iter().map(|&c| g[c]).collect())?;
                }
            }
        }
        Ok(())
    }
}

fn table_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![0, 0],
            got: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// For each output element (row-major in permuted order) the offset of the
/// source element in the input.
fn permuted_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = in_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        offsets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offsets
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
