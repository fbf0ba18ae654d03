//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] owns every intermediate value produced during one forward
//! pass. Each operation pushes a node holding its value plus the inputs and
//! cached quantities its vector-Jacobian rule needs. [`Graph::backward`] walks
//! the tape once in reverse.
//!
//! Matrices are row-major `[rows × cols]`. Attention-shaped operations act on
//! a batch of `B` sequences of length `S` stacked into `N = B·S` rows; row `r`
//! belongs to sequence `r / S` at position `r % S`.

use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{LabError, Result};
use crate::tensor::{gelu_grad_scalar, gelu_scalar, gemm, shape_err, softmax_row, Tensor};

/// Targets equal to this value are excluded from the cross-entropy mean.
pub const IGNORE_INDEX: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    Rotary {
        x: Var,
        positions: Rc<[usize]>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    QKt {
        q: Var,
        k: Var,
        seq: usize,
    },
    Pv {
        p: Var,
        v: Var,
        seq: usize,
    },
    RowDot(Var, Var),
    SetDiag {
        s: Var,
        d: Var,
        seq: usize,
    },
    ZeroDiag {
        p: Var,
        seq: usize,
    },
    TakeDiag {
        p: Var,
        seq: usize,
    },
    MulCol {
        c: Var,
        x: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    t.rows_cols()
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(LabError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node; tracked for gradients when `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let needs = t.requires_grad;
        self.push("leaf", t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Named trainable leaf whose gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        let v = self.leaf(t.clone().with_grad())?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = match ta.shape() {
            [m, k] => (*m, *k),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        let n = match tb.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            needs,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = match ta.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(LabError::Invalid(format!(
                    "transpose of rank-{} tensor",
                    s.len()
                )))
            }
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(
            "transpose",
            Tensor::new(vec![n, m], out)?,
            Op::Transpose(a),
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", t, Op::Add(a, b), needs)
    }

    /// `a[r, :] + bias` for every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, n) = dims2(ta);
        if tb.len() != n {
            return Err(shape_err("add_row", ta, tb));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(bias);
        self.push("add_row", t, Op::AddRow(a, bias), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", t, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push("scale", t, Op::Scale(a, c), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push("gelu", t, Op::Gelu(a), needs)
    }

    /// Row softmax over entries whose mask bit is set; fully masked rows are zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(LabError::Shape {
                    op: "softmax_rows",
                    lhs: vec![m, n],
                    rhs: vec![mk.len()],
                });
            }
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row_mask = mask.map(|mk| &mk[r * n..(r + 1) * n]);
            softmax_row(
                &tx.data()[r * n..(r + 1) * n],
                row_mask,
                &mut out[r * n..(r + 1) * n],
            );
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push("softmax_rows", t, Op::Softmax(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", tx, self.value(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if self.value(gain).len() != n {
            return Err(shape_err("rms_norm", tx, self.value(gain)));
        }
        let g = self.value(gain).data();
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let rs = 1.0 / (ms + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                out[r * n + j] = row[j] * rs * g[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain);
        self.push("rms_norm", t, Op::RmsNorm { x, gain, rstd }, needs)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = match tt.shape() {
            [v, d] => (*v, *d),
            s => {
                return Err(LabError::Shape {
                    op: "embedding",
                    lhs: s.to_vec(),
                    rhs: vec![ids.len()],
                })
            }
        };
        if ids.is_empty() {
            return Err(LabError::Invalid("embedding lookup of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(LabError::UnknownToken { id, vocab: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs(table);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Mean negative log-likelihood (natural log) over non-ignored rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, v) = dims2(tl);
        if targets.len() != m {
            return Err(LabError::Shape {
                op: "cross_entropy",
                lhs: vec![m, v],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..m {
            let t = targets[r];
            if t == IGNORE_INDEX {
                continue;
            }
            if t < 0 || t as usize >= v {
                return Err(LabError::UnknownToken {
                    id: t.max(0) as usize,
                    vocab: v,
                });
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            softmax_row(row, None, &mut probs[r * v..(r + 1) * v]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            count += 1;
        }
        if count == 0 {
            return Err(LabError::Empty(
                "cross_entropy has no non-ignored targets".into(),
            ));
        }
        let loss = Tensor::new(vec![1], vec![total / count as f64])?;
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        )
    }

    /// Pairwise rotary rotation of each row by its position.
    pub fn rotary(&mut self, x: Var, positions: Rc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        let out = rotate(tx, &positions, false)?;
        let needs = self.needs(x);
        self.push("rotary", out, Op::Rotary { x, positions }, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if start + len > n || len == 0 {
            return Err(LabError::Invalid(format!(
                "slice_cols {start}..{} of width {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&tx.data()[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let needs = self.needs(x);
        self.push("slice_cols", t, Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LabError::Invalid("concat of nothing".into()))?;
        let (m, _) = dims2(self.value(*first));
        let widths: Vec<usize> = parts.iter().map(|p| dims2(self.value(*p)).1).collect();
        for p in parts {
            if dims2(self.value(*p)).0 != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Per-sequence `Q Kᵀ`: `[N×h] × [N×h] → [N×S]`.
    pub fn qk_t(&mut self, q: Var, k: Var, seq: usize) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let (n, h) = dims2(tq);
        if tk.shape() != tq.shape() || seq == 0 || n % seq != 0 {
            return Err(shape_err("qk_t", tq, tk));
        }
        let mut out = vec![0.0; n * seq];
        for b in 0..n / seq {
            let rows = b * seq..(b + 1) * seq;
            gemm(
                seq,
                h,
                seq,
                &tq.data()[rows.start * h..rows.end * h],
                false,
                &tk.data()[rows.start * h..rows.end * h],
                true,
                &mut out[rows.start * seq..rows.end * seq],
                false,
            );
        }
        let t = Tensor::new(vec![n, seq], out)?;
        let needs = self.needs(q) || self.needs(k);
        self.push("qk_t", t, Op::QKt { q, k, seq }, needs)
    }

    /// Per-sequence `P V`: `[N×S] × [N×h] → [N×h]`.
    pub fn pv(&mut self, p: Var, v: Var, seq: usize) -> Result<Var> {
        let (tp, tv) = (self.value(p), self.value(v));
        let (n, s) = dims2(tp);
        let (nv, h) = dims2(tv);
        if s != seq || nv != n || n % seq != 0 {
            return Err(shape_err("pv", tp, tv));
        }
        let mut out = vec![0.0; n * h];
        for b in 0..n / seq {
            let rows = b * seq..(b + 1) * seq;
            gemm(
                seq,
                seq,
                h,
                &tp.data()[rows.start * seq..rows.end * seq],
                false,
                &tv.data()[rows.start * h..rows.end * h],
                false,
                &mut out[rows.start * h..rows.end * h],
                false,
            );
        }
        let t = Tensor::new(vec![n, h], out)?;
        let needs = self.needs(p) || self.needs(v);
        self.push("pv", t, Op::Pv { p, v, seq }, needs)
    }

    /// Row-wise dot product: `[N×h] · [N×h] → [N×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_dot", ta, tb));
        }
        let (m, n) = dims2(ta);
        let out = (0..m)
            .map(|r| {
                ta.data()[r * n..(r + 1) * n]
                    .iter()
                    .zip(&tb.data()[r * n..(r + 1) * n])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let t = Tensor::new(vec![m, 1], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("row_dot", t, Op::RowDot(a, b), needs)
    }

    /// Overwrites each row's own-position entry `[r, r % S]` with `d[r]`.
    pub fn set_diag(&mut self, s: Var, d: Var, seq: usize) -> Result<Var> {
        let (ts, td) = (self.value(s), self.value(d));
        let (n, w) = dims2(ts);
        if w != seq || td.len() != n {
            return Err(shape_err("set_diag", ts, td));
        }
        let mut out = ts.data().to_vec();
        for r in 0..n {
            out[r * seq + r % seq] = td.data()[r];
        }
        let t = Tensor::new(vec![n, seq], out)?;
        let needs = self.needs(s) || self.needs(d);
        self.push("set_diag", t, Op::SetDiag { s, d, seq }, needs)
    }

    pub fn zero_diag(&mut self, p: Var, seq: usize) -> Result<Var> {
        let tp = self.value(p);
        let (n, w) = dims2(tp);
        if w != seq {
            return Err(LabError::Invalid(format!(
                "zero_diag width {w} != seq {seq}"
            )));
        }
        let mut out = tp.data().to_vec();
        for r in 0..n {
            out[r * seq + r % seq] = 0.0;
        }
        let t = Tensor::new(vec![n, seq], out)?;
        let needs = self.needs(p);
        self.push("zero_diag", t, Op::ZeroDiag { p, seq }, needs)
    }

    pub fn take_diag(&mut self, p: Var, seq: usize) -> Result<Var> {
        let tp = self.value(p);
        let (n, w) = dims2(tp);
        if w != seq {
            return Err(LabError::Invalid(format!(
                "take_diag width {w} != seq {seq}"
            )));
        }
        let out = (0..n).map(|r| tp.data()[r * seq + r % seq]).collect();
        let t = Tensor::new(vec![n, 1], out)?;
        let needs = self.needs(p);
        self.push("take_diag", t, Op::TakeDiag { p, seq }, needs)
    }

    /// Scales row `r` of `x` by `c[r]`.
    pub fn mul_col(&mut self, c: Var, x: Var) -> Result<Var> {
        let (tc, tx) = (self.value(c), self.value(x));
        let (m, n) = dims2(tx);
        if tc.len() != m {
            return Err(shape_err("mul_col", tc, tx));
        }
        let mut out = tx.data().to_vec();
        for r in 0..m {
            let s = tc.data()[r];
            out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(c) || self.needs(x);
        self.push("mul_col", t, Op::MulCol { c, x }, needs)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(LabError::Invalid(format!(
                "gather_rows out of range for {m} rows"
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        let needs = self.needs(x);
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    /// Places row `i` of `x` at row `rows[i]` of an `[total × n]` zero matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if rows.len() != m || rows.iter().any(|&r| r >= total) {
            return Err(LabError::Invalid("scatter_rows index mismatch".into()));
        }
        let mut out = vec![0.0; total * n];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..n {
                out[r * n + j] += tx.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![total, n], out)?;
        let needs = self.needs(x);
        self.push(
            "scatter_rows",
            t,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    /// Picks `x[r, idx[r]]` for each row: `[N×E] → [N×1]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if idx.len() != m || idx.iter().any(|&c| c >= n) {
            return Err(LabError::Invalid("gather_cols index mismatch".into()));
        }
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| tx.data()[r * n + c])
            .collect();
        let t = Tensor::new(vec![m, 1], out)?;
        let needs = self.needs(x);
        self.push(
            "gather_cols",
            t,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += tx.data()[r * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let t = Tensor::new(vec![1, n], out)?;
        let needs = self.needs(x);
        self.push("mean_rows", t, Op::MeanRows(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::new(vec![1], vec![s])?, Op::Sum(x), needs)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(LabError::Invalid("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.vjp(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Grads(grads))
    }

    /// Gradients of every registered parameter (zeros for unused ones).
    /// A name registered more than once gets the sum over its uses.
    pub fn param_grads(&self, grads: &Grads) -> IndexMap<String, Tensor> {
        let mut out: IndexMap<String, Tensor> = IndexMap::new();
        for (name, v) in &self.params {
            let shape = self.value(*v).shape().to_vec();
            let entry = out
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            if let Some(g) = grads.get(*v) {
                for (a, b) in entry.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        out
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn vjp(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, dy, false, tb.data(), true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, ta.data(), true, dy, false, gb, true);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = dims2(&node.value);
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                let n = self.value(*bias).len();
                if let Some(g) = self.acc(grads, *bias) {
                    for row in dy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..dy.len() {
                        g[i] += dy[i] * tb[i];
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for i in 0..dy.len() {
                        g[i] += dy[i] * ta[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * c);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..dy.len() {
                        g[i] += dy[i] * gelu_grad_scalar(x[i]);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (m, n) = dims2(&node.value);
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &dy[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = dims2(&node.value);
                let gv = self.value(*gain).data();
                if let Some(g) = self.acc(grads, *gain) {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += dy[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *bias) {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += dy[r * n + j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let dh = dy[r * n + j] * gv[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * n + j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in 0..n {
                            let dh = dy[r * n + j] * gv[j];
                            g[r * n + j] += rstd[r] * (dh - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, rstd } => {
                let (m, n) = dims2(&node.value);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                if let Some(g) = self.acc(grads, *gain) {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += dy[r * n + j] * xv[r * n + j] * rstd[r];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..m {
                        let rs = rstd[r];
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += dy[r * n + j] * gv[j] * xv[r * n + j];
                        }
                        let coef = rs * rs * rs * dot / n as f64;
                        for j in 0..n {
                            g[r * n + j] += rs * dy[r * n + j] * gv[j] - xv[r * n + j] * coef;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(g) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += dy[i * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).shape()[1];
                let scale = dy[0] / *count as f64;
                if let Some(g) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        for j in 0..v {
                            g[r * v + j] += scale * probs[r * v + j];
                        }
                        g[r * v + t as usize] -= scale;
                    }
                }
            }
            Op::Rotary { x, positions } => {
                let shape = node.value.shape().to_vec();
                if let Some(g) = self.acc(grads, *x) {
                    let dyt = Tensor::new(shape, dy.to_vec()).expect("shape");
                    let back = rotate(&dyt, positions, true).expect("validated in forward");
                    g.iter_mut().zip(back.data()).for_each(|(g, d)| *g += d);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = dims2(&node.value);
                let n = dims2(self.value(*x)).1;
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..m {
                        for j in 0..w {
                            g[r * n + start + j] += dy[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.value);
                let mut off = 0;
                for p in parts {
                    let w = dims2(self.value(*p)).1;
                    if let Some(g) = self.acc(grads, *p) {
                        for r in 0..m {
                            for j in 0..w {
                                g[r * w + j] += dy[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::QKt { q, k, seq } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let (n, h) = dims2(tq);
                let s = *seq;
                for b in 0..n / s {
                    let r0 = b * s;
                    let dyb = &dy[r0 * s..(r0 + s) * s];
                    if let Some(g) = self.acc(grads, *q) {
                        let kb = &tk.data()[r0 * h..(r0 + s) * h];
                        gemm(
                            s,
                            s,
                            h,
                            dyb,
                            false,
                            kb,
                            false,
                            &mut g[r0 * h..(r0 + s) * h],
                            true,
                        );
                    }
                    if let Some(g) = self.acc(grads, *k) {
                        let qb = &tq.data()[r0 * h..(r0 + s) * h];
                        gemm(
                            s,
                            s,
                            h,
                            dyb,
                            true,
                            qb,
                            false,
                            &mut g[r0 * h..(r0 + s) * h],
                            true,
                        );
                    }
                }
            }
            Op::Pv { p, v, seq } => {
                let (tp, tv) = (self.value(*p), self.value(*v));
                let (n, h) = dims2(tv);
                let s = *seq;
                for b in 0..n / s {
                    let r0 = b * s;
                    let dyb = &dy[r0 * h..(r0 + s) * h];
                    if let Some(g) = self.acc(grads, *p) {
                        let vb = &tv.data()[r0 * h..(r0 + s) * h];
                        gemm(
                            s,
                            h,
                            s,
                            dyb,
                            false,
                            vb,
                            true,
                            &mut g[r0 * s..(r0 + s) * s],
                            true,
                        );
                    }
                    if let Some(g) = self.acc(grads, *v) {
                        let pb = &tp.data()[r0 * s..(r0 + s) * s];
                        gemm(
                            s,
                            s,
                            h,
                            pb,
                            true,
                            dyb,
                            false,
                            &mut g[r0 * h..(r0 + s) * h],
                            true,
                        );
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let (m, n) = dims2(self.value(*a));
                if let Some(g) = self.acc(grads, *a) {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += dy[r] * tb[r * n + j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += dy[r] * ta[r * n + j];
                        }
                    }
                }
            }
            Op::SetDiag { s, d, seq } => {
                let n = dims2(&node.value).0;
                if let Some(g) = self.acc(grads, *s) {
                    for r in 0..n {
                        for j in 0..*seq {
                            if j != r % seq {
                                g[r * seq + j] += dy[r * seq + j];
                            }
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *d) {
                    for r in 0..n {
                        g[r] += dy[r * seq + r % seq];
                    }
                }
            }
            Op::ZeroDiag { p, seq } => {
                let n = dims2(&node.value).0;
                if let Some(g) = self.acc(grads, *p) {
                    for r in 0..n {
                        for j in 0..*seq {
                            if j != r % seq {
                                g[r * seq + j] += dy[r * seq + j];
                            }
                        }
                    }
                }
            }
            Op::TakeDiag { p, seq } => {
                let n = dims2(&node.value).0;
                if let Some(g) = self.acc(grads, *p) {
                    for r in 0..n {
                        g[r * seq + r % seq] += dy[r];
                    }
                }
            }
            Op::MulCol { c, x } => {
                let (tc, tx) = (self.value(*c).data(), self.value(*x).data());
                let (m, n) = dims2(self.value(*x));
                if let Some(g) = self.acc(grads, *c) {
                    for r in 0..m {
                        g[r] += (0..n).map(|j| dy[r * n + j] * tx[r * n + j]).sum::<f64>();
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += dy[r * n + j] * tc[r];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let n = dims2(&node.value).1;
                if let Some(g) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            g[r * n + j] += dy[i * n + j];
                        }
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                let n = dims2(&node.value).1;
                if let Some(g) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            g[i * n + j] += dy[r * n + j];
                        }
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                let n = dims2(self.value(*x)).1;
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &c) in idx.iter().enumerate() {
                        g[r * n + c] += dy[r];
                    }
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = dims2(self.value(*x));
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += dy[j] / m as f64;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|v| *v += dy[0]);
                }
            }
        }
    }
}

/// Rotates adjacent column pairs `(2i, 2i+1)` of row `r` by
/// `positions[r] · 10000^(-2i/d)`; `inverse` applies the transpose.
fn rotate(x: &Tensor, positions: &[usize], inverse: bool) -> Result<Tensor> {
    let (m, d) = dims2(x);
    if d % 2 != 0 {
        return Err(LabError::Invalid(format!(
            "rotary needs an even head width, got {d}"
        )));
    }
    if positions.len() != m {
        return Err(LabError::Shape {
            op: "rotary",
            lhs: vec![m, d],
            rhs: vec![positions.len()],
        });
    }
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.data().to_vec();
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let theta = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let (sin, cos) = (sign * pos as f64 * theta).sin_cos();
            let a = x.data()[r * d + 2 * i];
            let b = x.data()[r * d + 2 * i + 1];
            out[r * d + 2 * i] = a * cos - b * sin;
            out[r * d + 2 * i + 1] = a * sin + b * cos;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Applies rotary position encoding to `[seq × d_head]` rows outside any graph.
pub fn rotary_apply(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    rotate(x, positions, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn leaf(g: &mut Graph, t: Tensor) -> Var {
        g.leaf(t.with_grad()).unwrap()
    }

    /// Central finite differences of `f` at every coordinate of every input.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| leaf(&mut g, t.clone())).collect();
            let out = f(&mut g, &vs);
            (g, vs, out)
        };
        let (g, vs, out) = eval(&inputs);
        let grads = g.backward(out).unwrap();
        let eps = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[i] -= eps;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.value(op).scalar() - gm.value(om).scalar()) / (2.0 * eps);
                let an = grads.get(vs[ti]).map_or(0.0, |g| g[i]);
                let rel = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
                assert!(rel < 1e-6, "input {ti} coord {i}: fd {fd} vs analytic {an}");
            }
        }
    }

    /// Reduces a tensor to a scalar with fixed random weights so every
    /// output coordinate carries a distinct upstream gradient.
    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let shape = g.value(x).shape().to_vec();
        let w = SeededRng::new(seed, "w").normal_tensor(&shape, 1.0);
        let wv = g.constant(w).unwrap();
        let p = g.mul(x, wv).unwrap();
        g.sum(p).unwrap()
    }

    fn rnd(seed: u64, shape: &[usize]) -> Tensor {
        SeededRng::new(seed, "in").normal_tensor(shape, 1.0)
    }

    #[test]
    fn matmul_and_bias_vjp() {
        check(
            vec![rnd(1, &[3, 4]), rnd(2, &[4, 2]), rnd(3, &[2])],
            |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                let y = g.add_row(y, v[2]).unwrap();
                let y = g.transpose(y).unwrap();
                weighted_sum(g, y, 7)
            },
        );
    }

    #[test]
    fn gelu_mul_scale_vjp() {
        check(vec![rnd(4, &[2, 5]), rnd(5, &[2, 5])], |g, v| {
            let a = g.gelu(v[0]).unwrap();
            let b = g.mul(a, v[1]).unwrap();
            let c = g.scale(b, -0.7).unwrap();
            let d = g.add(c, v[0]).unwrap();
            weighted_sum(g, d, 8)
        });
    }

    #[test]
    fn masked_softmax_vjp() {
        let mask = vec![true, false, true, false, false, false, true, true, true];
        check(vec![rnd(6, &[3, 3])], move |g, v| {
            let y = g.softmax_rows(v[0], Some(&mask)).unwrap();
            weighted_sum(g, y, 9)
        });
    }

    #[test]
    fn norms_vjp() {
        check(vec![rnd(7, &[3, 6]), rnd(8, &[6]), rnd(9, &[6])], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(g, y, 10)
        });
        check(vec![rnd(10, &[3, 6]), rnd(11, &[6])], |g, v| {
            let y = g.rms_norm(v[0], v[1], 1e-6).unwrap();
            weighted_sum(g, y, 11)
        });
    }

    #[test]
    fn embedding_and_cross_entropy_vjp() {
        check(vec![rnd(12, &[5, 3]), rnd(13, &[3, 5])], |g, v| {
            let e = g.embedding(v[0], &[4, 1, 1, 0]).unwrap();
            let logits = g.matmul(e, v[1]).unwrap();
            g.cross_entropy(logits, &[2, IGNORE_INDEX, 0, 4]).unwrap()
        });
    }

    #[test]
    fn attention_primitives_vjp() {
        // two sequences of length 3, head width 2
        check(
            vec![rnd(14, &[6, 2]), rnd(15, &[6, 2]), rnd(16, &[6, 2])],
            |g, v| {
                let s = g.qk_t(v[0], v[1], 3).unwrap();
                let d = g.row_dot(v[0], v[2]).unwrap();
                let s = g.set_diag(s, d, 3).unwrap();
                let p = g.softmax_rows(s, None).unwrap();
                let off = g.zero_diag(p, 3).unwrap();
                let diag = g.take_diag(p, 3).unwrap();
                let a = g.pv(off, v[1], 3).unwrap();
                let b = g.mul_col(diag, v[2]).unwrap();
                let o = g.add(a, b).unwrap();
                weighted_sum(g, o, 12)
            },
        );
    }

    #[test]
    fn routing_primitives_vjp() {
        check(vec![rnd(17, &[4, 3]), rnd(18, &[4, 2])], |g, v| {
            let p = g.softmax_rows(v[0], None).unwrap();
            let gp = g.gather_cols(p, &[0, 2, 2, 1]).unwrap();
            let part = g.gather_rows(v[1], &[1, 3]).unwrap();
            let back = g.scatter_rows(part, &[1, 3], 4).unwrap();
            let scaled = g.mul_col(gp, back).unwrap();
            let m = g.mean_rows(p).unwrap();
            let s1 = weighted_sum(g, scaled, 13);
            let s2 = weighted_sum(g, m, 14);
            g.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn slice_concat_rotary_vjp() {
        check(vec![rnd(19, &[3, 6])], |g, v| {
            let a = g.slice_cols(v[0], 0, 4).unwrap();
            let b = g.slice_cols(v[0], 4, 2).unwrap();
            let a = g.rotary(a, Rc::from(vec![0, 1, 5])).unwrap();
            let c = g.concat_cols(&[b, a]).unwrap();
            weighted_sum(g, c, 15)
        });
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 7])).unwrap();
        let loss = g.cross_entropy(l, &[3, 6]).unwrap();
        assert!((g.value(loss).scalar() - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_two_class_closed_form() {
        let mut g = Graph::new();
        let l = g
            .constant(Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap())
            .unwrap();
        let loss = g.cross_entropy(l, &[0]).unwrap();
        assert!((g.value(loss).scalar() - (4.0f64 / 3.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(
            g.cross_entropy(l, &[IGNORE_INDEX, IGNORE_INDEX]),
            Err(LabError::Empty(_))
        ));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(rnd(20, &[1, 8])).unwrap();
        let gain = g.constant(Tensor::filled(&[8], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[8])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 8.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);

        let c = g.constant(Tensor::filled(&[1, 4], 3.0)).unwrap();
        let gain = g.constant(Tensor::filled(&[4], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let p = g
            .constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let gain = g.constant(Tensor::filled(&[2], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.layer_norm(p, gain, bias, 1e-5).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-5);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn rms_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[4], 1.0)).unwrap();
        let z = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let y = g.rms_norm(z, gain, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let u = g
            .constant(Tensor::new(vec![1, 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap())
            .unwrap();
        let y = g.rms_norm(u, gain, 1e-6).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(u)) < 1e-6);

        let x = rnd(21, &[1, 5]);
        let gv = rnd(22, &[5]);
        let xv = g.constant(x.clone()).unwrap();
        let gvv = g.constant(gv.clone()).unwrap();
        let y = g.rms_norm(xv, gvv, 1e-6).unwrap();
        let ms = x.data().iter().map(|v| v * v).sum::<f64>() / 5.0;
        for j in 0..5 {
            let want = x.data()[j] / (ms + 1e-6).sqrt() * gv.data()[j];
            assert!((g.value(y).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rotary_cases() {
        let x = rnd(23, &[1, 4]);
        assert_eq!(rotary_apply(&x, &[0]).unwrap(), x);
        assert!(rotary_apply(&rnd(24, &[1, 3]), &[1]).is_err());

        let y = rotary_apply(&x, &[1]).unwrap();
        // hand-rolled 2×2 rotations for pairs (0,1) with θ=1 and (2,3) with θ=10000^(-1/2)
        for (pair, theta) in [(0usize, 1.0f64), (1, 0.01)] {
            let (a, b) = (x.data()[2 * pair], x.data()[2 * pair + 1]);
            let rot = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
            let want = [rot[0][0] * a + rot[0][1] * b, rot[1][0] * a + rot[1][1] * b];
            assert!((y.data()[2 * pair] - want[0]).abs() < 1e-15);
            assert!((y.data()[2 * pair + 1] - want[1]).abs() < 1e-15);
        }
        let y = rotary_apply(&x, &[37]).unwrap();
        for p in 0..2 {
            let n0 = x.data()[2 * p].hypot(x.data()[2 * p + 1]);
            let n1 = y.data()[2 * p].hypot(y.data()[2 * p + 1]);
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 2], 1e308)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(LabError::NonFinite(_))));
    }
}
