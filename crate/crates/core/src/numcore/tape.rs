//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; nodes are stored in
//! creation order, which is a topological order, so backward is a single
//! reverse sweep. Ops that are hot in the transformer (linear layers,
//! layer norm, packed causal attention, row-wise cross entropy) are fused and
//! carry hand-written backward rules.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows forming one independent sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Mix {
        h: Var,
        d: Var,
        alpha: f64,
    },
    Relu(Var),
    Gelu(Var),
    Square(Var),
    Log(Var),
    MaxScalar(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Attention {
        qkv: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
    GaussKl {
        mu: Var,
        sigma: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.value.len() / c, c)
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// C[m,n] (+)= op(A)[m,k] . op(B)[k,n]
// a_t: A is stored as [k,m]; b_t: B is stored as [n,k].
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three slices, whose lengths are checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the tape can record a fresh graph.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].dims2()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is valid")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    pub fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, trainable)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` with `a: [n,k]`, `b: [m,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims("matmul_bt", a)?;
        let (m, k2) = self.mat_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_bt",
                lhs: vec![n, k],
                rhs: vec![m, k2],
            });
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), false, self.value(b), true, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![n, m], Op::MatMulBt(a, b), ng))
    }

    /// `x · w + b` with `x: [n,k]`, `w: [k,m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.mat_dims("linear", x)?;
        let (k2, m) = self.mat_dims("linear", w)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "linear",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: vec![n, m],
                    rhs: self.shape(b).to_vec(),
                });
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            k,
            m,
            self.value(x),
            false,
            self.value(w),
            false,
            &mut out,
            b.is_some(),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, vec![n, m], Op::Linear { x, w, b }, ng))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(op, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    /// Adds a row vector `b: [m]` to every row of `x: [n,m]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if self.value(b).len() != m {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        debug_assert_eq!(out.len(), n * m);
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddRow(x, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::AddScalar(a), ng)
    }

    /// `alpha·h + (1−alpha)·d`. The endpoints pass one operand through
    /// unchanged, so `alpha = 1` returns `h` bit for bit.
    pub fn mix(&mut self, h: Var, d: Var, alpha: f64) -> Result<Var> {
        let out = if alpha == 1.0 {
            self.same_shape("mix", h, d)?;
            self.value(h).to_vec()
        } else if alpha == 0.0 {
            self.same_shape("mix", h, d)?;
            self.value(d).to_vec()
        } else {
            self.zip("mix", h, d, |x, y| alpha * x + (1.0 - alpha) * y)?
        };
        let ng = (alpha != 0.0 && self.ng(h)) || (alpha != 1.0 && self.ng(d));
        Ok(self.push(out, self.shape(h).to_vec(), Op::Mix { h, d, alpha }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::Gelu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * x).collect();
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::Square(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.ln()).collect();
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::Log(a), ng)
    }

    /// Elementwise `max(x, c)`.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(c)).collect();
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::MaxScalar(a, c), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        for p in [gamma, beta] {
            if self.value(p).len() != m {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; n * m];
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &xv[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                out[r * m + c] = g[c] * h + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            self.shape(x).to_vec(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Selects rows of `x` (embedding lookup, slicing, reordering).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!(
                "gather: row {bad} out of range for {n} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::invalid("gather: empty row selection"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(&xv[r * m..(r + 1) * m]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            vec![rows.len(), m],
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.mat_dims("concat_cols", a)?;
        let (n2, q) = self.mat_dims("concat_cols", b)?;
        if n != n2 {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: vec![n, p],
                rhs: vec![n2, q],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![n, p + q], Op::ConcatCols(a, b), ng))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv: [rows, 3d]` holds queries, keys and values side by side. Each
    /// segment attends only to its own earlier rows.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (n, c3) = self.mat_dims("causal_attention", qkv)?;
        if c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: vec![n, c3],
                rhs: vec![heads],
            });
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != n || segments.iter().any(|s| s.start + s.len > n) {
            return Err(Error::invalid(format!(
                "causal_attention: segments cover {covered} of {n} rows"
            )));
        }
        let d = c3 / 3;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let x = self.value(qkv);
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| heads * s.len * (s.len + 1) / 2).sum());
        let mut scores = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let qo = h * hd;
                let ko = d + h * hd;
                let vo = 2 * d + h * hd;
                for i in 0..seg.len {
                    let qi = (seg.start + i) * c3;
                    let q = &x[qi + qo..qi + qo + hd];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = (seg.start + j) * c3;
                        let k = &x[kj + ko..kj + ko + hd];
                        let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = (seg.start + i) * d + h * hd;
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs.push(p);
                        let vj = (seg.start + j) * c3;
                        let v = &x[vj + vo..vj + vo + hd];
                        for c in 0..hd {
                            out[orow + c] += p * v[c];
                        }
                    }
                }
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(
            out,
            vec![n, d],
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, m) = self.dims2(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(x);
        self.push(out, self.shape(x).to_vec(), Op::Softmax(x), ng)
    }

    /// Per-row negative log-likelihood `−log softmax(logits)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.mat_dims("cross_entropy_rows", logits)?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::UnknownToken { id: bad, vocab: v });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut out = vec![0.0; n];
        for r in 0..n {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[r * v + c] = e;
                z += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            out[r] = max + z.ln() - row[targets[r]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            vec![n],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::Mean(a), ng)
    }

    /// Column means of a `[n,m]` matrix, giving `[m]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.dims2(a);
        let mut out = vec![0.0; m];
        for row in self.value(a).chunks_exact(m) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(a);
        self.push(out, vec![m], Op::MeanRows(a), ng)
    }

    /// `Σ xᵢ·wᵢ` for constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.shape(a).to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s = self.value(a).iter().zip(w).map(|(x, w)| x * w).sum();
        let ng = self.ng(a);
        Ok(self.push(
            vec![s],
            vec![1],
            Op::WeightedSum { x: a, w: w.to_vec() },
            ng,
        ))
    }

    /// Elementwise KL of `N(μ, σ²)` from `N(0, 1)`: `½(μ² + σ² − log σ² − 1)`.
    pub fn gauss_kl(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        self.same_shape("gauss_kl", mu, sigma)?;
        if let Some(s) = self.value(sigma).iter().find(|&&s| s.is_nan() || s <= 0.0) {
            return Err(Error::invalid(format!(
                "gauss_kl: sigma must be positive, got {s}"
            )));
        }
        let out = self
            .value(mu)
            .iter()
            .zip(self.value(sigma))
            .map(|(&m, &s)| 0.5 * (m * m + s * s - (s * s).ln() - 1.0))
            .collect();
        let ng = self.ng(mu) || self.ng(sigma);
        Ok(self.push(out, self.shape(mu).to_vec(), Op::GaussKl { mu, sigma }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            // Keep non-leaf grads out of the result; they are consumed.
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].needs_grad;
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].dims2();
                let (_, n) = nodes[b.0].dims2();
                if want(*a) {
                    let ga = acc(grads, nodes, *a);
                    gemm(m, n, k, g, false, &nodes[b.0].value, true, ga, true);
                }
                if want(*b) {
                    let gb = acc(grads, nodes, *b);
                    gemm(k, m, n, &nodes[a.0].value, true, g, false, gb, true);
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = nodes[a.0].dims2();
                let (m, _) = nodes[b.0].dims2();
                if want(*a) {
                    let ga = acc(grads, nodes, *a);
                    gemm(n, m, k, g, false, &nodes[b.0].value, false, ga, true);
                }
                if want(*b) {
                    let gb = acc(grads, nodes, *b);
                    gemm(m, n, k, g, true, &nodes[a.0].value, false, gb, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = nodes[x.0].dims2();
                let (_, m) = nodes[w.0].dims2();
                if want(*x) {
                    let gx = acc(grads, nodes, *x);
                    gemm(n, m, k, g, false, &nodes[w.0].value, true, gx, true);
                }
                if want(*w) {
                    let gw = acc(grads, nodes, *w);
                    gemm(k, n, m, &nodes[x.0].value, true, g, false, gw, true);
                }
                if let Some(b) = b {
                    if want(*b) {
                        let gb = acc(grads, nodes, *b);
                        for row in g.chunks_exact(m) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        for (o, &x) in acc(grads, nodes, v).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    for (o, &x) in acc(grads, nodes, *a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if want(*b) {
                    for (o, &x) in acc(grads, nodes, *b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = &nodes[b.0].value;
                    for ((o, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if want(*b) {
                    let av = &nodes[a.0].value;
                    for ((o, &x), &y) in acc(grads, nodes, *b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    for (o, &v) in acc(grads, nodes, *x).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if want(*b) {
                    let m = nodes[b.0].value.len();
                    let gb = acc(grads, nodes, *b);
                    for row in g.chunks_exact(m) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    for (o, &x) in acc(grads, nodes, *a).iter_mut().zip(g) {
                        *o += x * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if want(*a) {
                    for (o, &x) in acc(grads, nodes, *a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::Mix { h, d, alpha } => {
                if *alpha != 0.0 && want(*h) {
                    for (o, &x) in acc(grads, nodes, *h).iter_mut().zip(g) {
                        *o += alpha * x;
                    }
                }
                if *alpha != 1.0 && want(*d) {
                    for (o, &x) in acc(grads, nodes, *d).iter_mut().zip(g) {
                        *o += (1.0 - alpha) * x;
                    }
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let av = &nodes[a.0].value;
                    for ((o, &x), &v) in acc(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let av = &nodes[a.0].value;
                    for ((o, &x), &v) in acc(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                        *o += x * gelu_grad(v);
                    }
                }
            }
            Op::Square(a) => {
                if want(*a) {
                    let av = &nodes[a.0].value;
                    for ((o, &x), &v) in acc(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                        *o += 2.0 * v * x;
                    }
                }
            }
            Op::Log(a) => {
                if want(*a) {
                    let av = &nodes[a.0].value;
                    for ((o, &x), &v) in acc(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                        *o += x / v;
                    }
                }
            }
            Op::MaxScalar(a, c) => {
                if want(*a) {
                    let av = &nodes[a.0].value;
                    for ((o, &x), &v) in acc(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                        if v > *c {
                            *o += x;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, m) = nodes[x.0].dims2();
                let gv = &nodes[gamma.0].value;
                if want(*gamma) {
                    let gg = acc(grads, nodes, *gamma);
                    for r in 0..n {
                        for c in 0..m {
                            gg[c] += g[r * m + c] * xhat[r * m + c];
                        }
                    }
                }
                if want(*beta) {
                    let gb = acc(grads, nodes, *beta);
                    for row in g.chunks_exact(m) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if want(*x) {
                    let gx = acc(grads, nodes, *x);
                    let mf = m as f64;
                    for r in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..m {
                            let dxh = g[r * m + c] * gv[c];
                            s1 += dxh;
                            s2 += dxh * xhat[r * m + c];
                        }
                        let is = inv_std[r];
                        for c in 0..m {
                            let dxh = g[r * m + c] * gv[c];
                            gx[r * m + c] += is / mf * (mf * dxh - s1 - xhat[r * m + c] * s2);
                        }
                    }
                }
            }
            Op::Gather { x, rows } => {
                if want(*x) {
                    let (_, m) = nodes[x.0].dims2();
                    let gx = acc(grads, nodes, *x);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..m {
                            gx[r * m + c] += g[i * m + c];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = nodes[a.0].dims2();
                let (_, q) = nodes[b.0].dims2();
                if want(*a) {
                    let ga = acc(grads, nodes, *a);
                    for r in 0..n {
                        for c in 0..p {
                            ga[r * p + c] += g[r * (p + q) + c];
                        }
                    }
                }
                if want(*b) {
                    let gb = acc(grads, nodes, *b);
                    for r in 0..n {
                        for c in 0..q {
                            gb[r * q + c] += g[r * (p + q) + p + c];
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                if !want(*qkv) {
                    return;
                }
                let (_, c3) = nodes[qkv.0].dims2();
                let d = c3 / 3;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let x = &nodes[qkv.0].value;
                let gx = acc(grads, nodes, *qkv);
                let mut pi = 0;
                let mut dp = Vec::new();
                for seg in segments {
                    for h in 0..*heads {
                        let qo = h * hd;
                        let ko = d + h * hd;
                        let vo = 2 * d + h * hd;
                        for i in 0..seg.len {
                            let p = &probs[pi..pi + i + 1];
                            pi += i + 1;
                            let grow = (seg.start + i) * d + h * hd;
                            let go = &g[grow..grow + hd];
                            dp.clear();
                            let mut dot = 0.0;
                            for (j, &pj) in p.iter().enumerate() {
                                let vj = (seg.start + j) * c3 + vo;
                                let s: f64 = go.iter().zip(&x[vj..vj + hd]).map(|(a, b)| a * b).sum();
                                dp.push(s);
                                dot += pj * s;
                                for c in 0..hd {
                                    gx[vj + c] += pj * go[c];
                                }
                            }
                            let qi = (seg.start + i) * c3 + qo;
                            for (j, &pj) in p.iter().enumerate() {
                                let ds = pj * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = (seg.start + j) * c3 + ko;
                                for c in 0..hd {
                                    gx[qi + c] += ds * x[kj + c];
                                    gx[kj + c] += ds * x[qi + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let m = node.dims2().1;
                    let y = &node.value;
                    let ga = acc(grads, nodes, *a);
                    for r in 0..y.len() / m {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            ga[r * m + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if want(*logits) {
                    let v = nodes[logits.0].dims2().1;
                    let gl = acc(grads, nodes, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..v {
                            gl[r * v + c] += gr * probs[r * v + c];
                        }
                        gl[r * v + t] -= gr;
                    }
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    for o in acc(grads, nodes, *a).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let n = nodes[a.0].value.len() as f64;
                    for o in acc(grads, nodes, *a).iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::MeanRows(a) => {
                if want(*a) {
                    let (n, m) = nodes[a.0].dims2();
                    let ga = acc(grads, nodes, *a);
                    for row in ga.chunks_exact_mut(m) {
                        for (o, &x) in row.iter_mut().zip(g) {
                            *o += x / n as f64;
                        }
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if want(*x) {
                    for (o, &wi) in acc(grads, nodes, *x).iter_mut().zip(w) {
                        *o += g[0] * wi;
                    }
                }
            }
            Op::GaussKl { mu, sigma } => {
                if want(*mu) {
                    let mv = &nodes[mu.0].value;
                    for ((o, &x), &m) in acc(grads, nodes, *mu).iter_mut().zip(g).zip(mv) {
                        *o += x * m;
                    }
                }
                if want(*sigma) {
                    let sv = &nodes[sigma.0].value;
                    for ((o, &x), &s) in acc(grads, nodes, *sigma).iter_mut().zip(g).zip(sv) {
                        *o += x * (s - 1.0 / s);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = t.constant(&Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = t.constant(&Tensor::matrix(2, 1, vec![1.0; 2]).unwrap());
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_shift() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let g = t.constant(&Tensor::from_vec(vec![2.0; 4]));
        let b = t.constant(&Tensor::from_vec(vec![0.0; 4]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
        let b2 = t.constant(&Tensor::from_vec(vec![0.5, -1.0, 0.0, 7.0]));
        let y2 = t.layer_norm(x, g, b2).unwrap();
        assert_eq!(t.value(y2), &[0.5, -1.0, 0.0, 7.0]);
    }

    #[test]
    fn square_grad() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_sum_grad() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::from_vec(vec![-1.0, 2.0]).with_requires_grad(true));
        let r = t.relu(x);
        let y = t.sum(r);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 40.0]).unwrap());
        let y = t.softmax_rows(x);
        for row in t.value(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reset_allows_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::scalar(2.0).with_requires_grad(true));
        let y = t.square(x);
        t.backward(y).unwrap();
        t.reset();
        assert!(t.is_empty());
        let x = t.leaf(&Tensor::scalar(5.0).with_requires_grad(true));
        let y = t.square(x);
        assert_eq!(t.backward(y).unwrap().get(x).unwrap(), &[10.0]);
    }

    #[test]
    fn mix_endpoints_pass_through() {
        let mut t = Tape::new();
        let h = t.constant(&Tensor::from_vec(vec![-0.0, 1.5, -2.25]));
        let d = t.constant(&Tensor::from_vec(vec![9.0, 8.0, 7.0]));
        let one = t.mix(h, d, 1.0).unwrap();
        assert_eq!(
            t.value(one).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.value(h).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let zero = t.mix(h, d, 0.0).unwrap();
        assert_eq!(t.value(zero), t.value(d));
    }

    #[test]
    fn gauss_kl_rejects_nonpositive_sigma() {
        let mut t = Tape::new();
        let m = t.constant(&Tensor::from_vec(vec![0.0]));
        let s = t.constant(&Tensor::from_vec(vec![0.0]));
        assert!(t.gauss_kl(m, s).is_err());
    }
}
