//! A small reverse-mode tape over dense matrices, with just the operations
//! the reasoning head needs.

use super::tensor::Matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GroupAttention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    BceWithLogits(Var, f64),
    MeanScalars(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation so it can be differentiated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, self.value(a).cols), "add_row shape mismatch");
        let b = b.data.clone();
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x *= s);
        self.push(value, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(value, Op::Gelu(a))
    }

    /// Per-row layer normalization with learned gain and bias (`1 × n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in value.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        assert!(start + width <= src.cols, "slice_cols out of range");
        let mut value = Matrix::zeros(src.rows, width);
        for r in 0..src.rows {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..start + width]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let src = self.value(a);
        assert!(start + count <= src.rows, "slice_rows out of range");
        let value = Matrix::from_vec(
            count,
            src.cols,
            src.data[start * src.cols..(start + count) * src.cols].to_vec(),
        );
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Query row `i` attends over key/value rows `i·group .. (i+1)·group`:
    /// `softmax(scale · q_i K_iᵀ) V_i`.
    pub fn group_attention(&mut self, q: Var, k: Var, v: Var, group: usize, scale: f64) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(km.rows, qm.rows * group, "group_attention key count");
        assert_eq!(vm.rows, km.rows, "group_attention value count");
        assert_eq!(qm.cols, km.cols, "group_attention key width");
        let mut probs = Vec::with_capacity(km.rows);
        let mut value = Matrix::zeros(qm.rows, vm.cols);
        for i in 0..qm.rows {
            let qi = qm.row(i);
            let mut p: Vec<f64> = (0..group)
                .map(|j| scale * qi.iter().zip(km.row(i * group + j)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            softmax_in_place(&mut p);
            let out = value.row_mut(i);
            for (j, &pj) in p.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(vm.row(i * group + j)) {
                    *o += pj * vv;
                }
            }
            probs.extend(p);
        }
        self.push(
            value,
            Op::GroupAttention {
                q,
                k,
                v,
                group,
                scale,
                probs,
            },
        )
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target`, for a `1 × 1` logit.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Var {
        let z = self.value(logit);
        assert_eq!(z.len(), 1, "bce_with_logits expects a scalar");
        let z = z.data[0];
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        self.push(Matrix::from_vec(1, 1, vec![loss]), Op::BceWithLogits(logit, target))
    }

    pub fn mean_scalars(&mut self, parts: &[Var]) -> Var {
        let sum: f64 = parts.iter().map(|&p| self.value(p).data[0]).sum();
        self.push(
            Matrix::from_vec(1, 1, vec![sum / parts.len() as f64]),
            Op::MeanScalars(parts.to_vec()),
        )
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = self.value(output);
        grads[output.0] = Some(Matrix::filled(out.rows, out.cols, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, d: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul_t(bv));
                acc(grads, *b, av.t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                // out = A Bᵀ: dA = G B, dB = Gᵀ A
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul(bv));
                acc(grads, *b, g.t_matmul(av));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.clone());
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(grads, *bias, db);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|x| *x *= s);
                acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data.iter_mut().zip(&x.data) {
                    *dv *= gelu_grad(xv);
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let n = g.cols as f64;
                let mut dx = Matrix::zeros(g.rows, g.cols);
                let mut dgain = Matrix::zeros(1, g.cols);
                let mut dbias = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let dxhat: Vec<f64> = gr.iter().zip(&gv.data).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] / n * (n * dxhat[c] - sum_d - xr[c] * sum_dx);
                    }
                    for c in 0..g.cols {
                        dgain.data[c] += gr[c] * xr[c];
                        dbias.data[c] += gr[c];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    let mut d = Matrix::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    acc(grads, p, d);
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows, src.cols);
                d.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let m = self.value(p);
                    let n = m.rows * m.cols;
                    acc(
                        grads,
                        p,
                        Matrix::from_vec(m.rows, m.cols, g.data[offset..offset + n].to_vec()),
                    );
                    offset += n;
                }
            }
            Op::GroupAttention {
                q,
                k,
                v,
                group,
                scale,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Matrix::zeros(qm.rows, qm.cols);
                let mut dk = Matrix::zeros(km.rows, km.cols);
                let mut dv = Matrix::zeros(vm.rows, vm.cols);
                for i in 0..qm.rows {
                    let gi = g.row(i);
                    let p = &probs[i * group..(i + 1) * group];
                    let dp: Vec<f64> = (0..*group)
                        .map(|j| gi.iter().zip(vm.row(i * group + j)).map(|(a, b)| a * b).sum())
                        .collect();
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..*group {
                        let row = i * group + j;
                        for (o, &gv) in dv.row_mut(row).iter_mut().zip(gi) {
                            *o += p[j] * gv;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for (o, &kv) in dq.row_mut(i).iter_mut().zip(km.row(row)) {
                            *o += ds * kv;
                        }
                        let qi = qm.row(i);
                        for (o, &qv) in dk.row_mut(row).iter_mut().zip(qi) {
                            *o += ds * qv;
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::BceWithLogits(logit, target) => {
                let z = self.value(*logit).data[0];
                acc(grads, *logit, Matrix::from_vec(1, 1, vec![g.data[0] * (sigmoid(z) - target)]));
            }
            Op::MeanScalars(parts) => {
                let share = g.data[0] / parts.len() as f64;
                for &p in parts {
                    acc(grads, p, Matrix::from_vec(1, 1, vec![share]));
                }
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of `v`, or zeros of its shape when it did not influence the output.
    pub fn of(&self, tape: &Tape, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let m = tape.value(v);
            Matrix::zeros(m.rows, m.cols)
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
