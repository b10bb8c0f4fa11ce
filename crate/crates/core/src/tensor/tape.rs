use super::attention::{self, AttnShape};
use super::gemm::gemm;
use super::{softmax_row, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// issued it, and only until that tape is reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    ScaleBy {
        a: Var,
        s: Var,
    },
    AddRows {
        a: Var,
        r: Var,
        tiled: bool,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    Gather {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    MeanRows {
        a: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward pass.
///
/// Each tape supports exactly one [`backward`](Tape::backward); call
/// [`reset`](Tape::reset) to reuse the allocation for the next pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
fn broadcast_source(i: usize, m: usize, g: usize, tiled: bool) -> usize {
    if tiled {
        i % g
    } else {
        i / (m / g)
    }
}

/// Takes the gradient buffer of `v` out of the node list, lets `f` add
/// into it while reading any node values, then puts it back.
fn acc(nodes: &mut [Node], v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let mut g = nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; len]);
    f(nodes, &mut g);
    nodes[v.0].grad = Some(g);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node and saved activation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::Contract(format!(
                "variable {} does not belong to this tape",
                v.0
            )));
        }
        Ok(())
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing upstream needs a gradient: keep the value, drop saved state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `ta`/`tb` select a transposed operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ar, ac) = av.dims2();
        let (br, bc) = bv.dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, ta, &bv.data, tb, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape.clone(), av.data.iter().map(|x| c * x).collect())?;
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    /// Multiplies every entry of `a` by the scalar variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        let sv = &self.nodes[s.0].value;
        if sv.len() != 1 {
            return Err(TensorError::Shape {
                op: "scale_by",
                lhs: self.nodes[a.0].value.shape.clone(),
                rhs: sv.shape.clone(),
            });
        }
        let c = sv.data[0];
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape.clone(), av.data.iter().map(|x| c * x).collect())?;
        self.push("scale_by", value, Op::ScaleBy { a, s }, &[a, s])
    }

    /// Broadcast add: `a` is `[m×n]`, `r` is `[g×n]` with `g | m`; every
    /// consecutive block of `m/g` rows of `a` receives one row of `r`.
    /// A bias vector is the `g = 1` case.
    pub fn add_rows(&mut self, a: Var, r: Var) -> Result<Var> {
        self.broadcast_rows(a, r, false)
    }

    /// Broadcast add that cycles through `r`: row `i` of `a` receives row
    /// `i mod g`. Adds a per-position table to a batch of sequences.
    pub fn add_tiled(&mut self, a: Var, r: Var) -> Result<Var> {
        self.broadcast_rows(a, r, true)
    }

    fn broadcast_rows(&mut self, a: Var, r: Var, tiled: bool) -> Result<Var> {
        self.check(a)?;
        self.check(r)?;
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[r.0].value;
        let (m, n) = av.dims2();
        let (g, n2) = rv.dims2();
        if n != n2 || m % g != 0 {
            return Err(TensorError::Shape {
                op: if tiled { "add_tiled" } else { "add_rows" },
                lhs: av.shape.clone(),
                rhs: rv.shape.clone(),
            });
        }
        let mut data = av.data.clone();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let src = &rv.data[broadcast_source(i, m, g, tiled) * n..][..n];
            for (x, y) in row.iter_mut().zip(src) {
                *x += y;
            }
        }
        let value = Tensor::new(av.shape.clone(), data)?;
        let name = if tiled { "add_tiled" } else { "add_rows" };
        self.push(name, value, Op::AddRows { a, r, tiled }, &[a, r])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape.clone(), av.data.iter().map(|&x| gelu(x)).collect())?;
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let n = av.cols();
        let mut data = vec![0.0; av.len()];
        for (src, dst) in av.data.chunks(n).zip(data.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(av.shape.clone(), data)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Normalizes each vector along the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let d = xv.cols();
        if d < 2 {
            return Err(TensorError::Contract(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if gv.len() != d || bv.len() != d {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: xv.shape.clone(),
                rhs: gv.shape.clone(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data[j] * h + bv.data[j];
            }
        }
        let value = Tensor::new(xv.shape.clone(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Batched multi-head scaled dot-product attention, see [`AttnShape`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = qv.cols();
        if shape.heads == 0 || d % shape.heads != 0 {
            return Err(TensorError::Config(format!(
                "model dim {d} is not divisible by {} heads",
                shape.heads
            )));
        }
        if qv.rows() != shape.batch * shape.tq {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: qv.shape.clone(),
                rhs: vec![shape.batch * shape.tq, d],
            });
        }
        for t in [kv, vv] {
            if t.rows() != shape.batch * shape.tk || t.cols() != d {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: qv.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
        }
        if matches!(
            shape.mask,
            super::Mask::Causal | super::Mask::PrefixCausal(_)
        ) && shape.tq != shape.tk
        {
            return Err(TensorError::Contract(
                "causal masks need equal query and key lengths".into(),
            ));
        }
        let (out, probs) = attention::forward(&qv.data, &kv.data, &vv.data, d, &shape);
        let value = Tensor::new(vec![shape.batch * shape.tq, d], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities saved by an attention node, laid out as
    /// `[batch][head][tq][tk]`. Only available when the node needs gradients.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttnShape)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, shape, .. } => Some((probs, *shape)),
            _ => None,
        }
    }

    /// Builds a matrix whose row `i` is row `index[i].1` of `sources[index[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        if sources.is_empty() || index.is_empty() {
            return Err(TensorError::Contract(
                "gather_rows needs sources and rows".into(),
            ));
        }
        for &s in sources {
            self.check(s)?;
        }
        let cols = self.nodes[sources[0].0].value.cols();
        for &s in sources {
            let t = &self.nodes[s.0].value;
            if t.cols() != cols {
                return Err(TensorError::Shape {
                    op: "gather_rows",
                    lhs: self.nodes[sources[0].0].value.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in index {
            let src = sources.get(s).ok_or(TensorError::Index {
                op: "gather_rows",
                index: s,
                extent: sources.len(),
            })?;
            let t = &self.nodes[src.0].value;
            if r >= t.rows() {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: t.rows(),
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                sources: sources.to_vec(),
                index: index.to_vec(),
            },
            sources,
        )
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let index: Vec<_> = ids.iter().map(|&i| (0, i)).collect();
        self.gather_rows(&[table], &index)
    }

    /// Mean over consecutive groups of `group` rows: `[m×n] → [m/group × n]`.
    pub fn mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2();
        if group == 0 || m % group != 0 {
            return Err(TensorError::Contract(format!(
                "mean_rows: {m} rows do not split into groups of {group}"
            )));
        }
        let mut out = vec![0.0; (m / group) * n];
        for (i, row) in av.data.chunks(n).enumerate() {
            let dst = &mut out[(i / group) * n..][..n];
            for (o, x) in dst.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= group as f64;
        }
        let value = Tensor::new(vec![m / group, n], out)?;
        self.push("mean_rows", value, Op::MeanRows { a, group }, &[a])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target equals `ignore` are skipped; if every row
    /// is skipped the loss is 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        self.check(logits)?;
        let lv = &self.nodes[logits.0].value;
        let (t, vocab) = lv.dims2();
        if targets.len() != t {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: lv.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &y) in targets.iter().enumerate() {
            if y == ignore {
                continue;
            }
            if y >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: y,
                    extent: vocab,
                });
            }
            let row = lv.row(r);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_row(row, p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.0].value.sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Reverse pass from a scalar `loss`. Every `requires_grad` node reachable
    /// from the loss accumulates its gradient; the tape is then spent.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.consumed {
            return Err(TensorError::Contract(
                "backward already ran on this tape; reset it before another pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (ar, ac) = nodes[a.0].value.dims2();
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let n = node.value.cols();
            acc(nodes, a, |ns, ga| {
                let bd = &ns[b.0].value.data;
                if ta {
                    gemm(k, n, m, bd, tb, g, true, ga, true);
                } else {
                    gemm(m, n, k, g, false, bd, !tb, ga, true);
                }
            });
            acc(nodes, b, |ns, gb| {
                let ad = &ns[a.0].value.data;
                if tb {
                    gemm(n, m, k, g, true, ad, ta, gb, true);
                } else {
                    gemm(k, m, n, ad, !ta, g, false, gb, true);
                }
            });
        }
        &Op::Add { a, b } => {
            for v in [a, b] {
                acc(nodes, v, |_, gv| {
                    for (x, y) in gv.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
        }
        &Op::Mul { a, b } => {
            acc(nodes, a, |ns, ga| {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(&ns[b.0].value.data) {
                    *x += y * w;
                }
            });
            acc(nodes, b, |ns, gb| {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(&ns[a.0].value.data) {
                    *x += y * w;
                }
            });
        }
        &Op::Scale { a, c } => acc(nodes, a, |_, ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += c * y;
            }
        }),
        &Op::ScaleBy { a, s } => {
            acc(nodes, a, |ns, ga| {
                let c = ns[s.0].value.data[0];
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            });
            acc(nodes, s, |ns, gs| {
                gs[0] += g
                    .iter()
                    .zip(&ns[a.0].value.data)
                    .map(|(y, x)| y * x)
                    .sum::<f64>();
            });
        }
        &Op::AddRows { a, r, tiled } => {
            acc(nodes, a, |_, ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            let (m, n) = node.value.dims2();
            acc(nodes, r, |ns, gr| {
                let rows = ns[r.0].value.rows();
                for (i, row) in g.chunks(n).enumerate() {
                    let dst = &mut gr[broadcast_source(i, m, rows, tiled) * n..][..n];
                    for (x, y) in dst.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            });
        }
        &Op::Gelu { a } => acc(nodes, a, |ns, ga| {
            for ((x, y), &v) in ga.iter_mut().zip(g).zip(&ns[a.0].value.data) {
                *x += y * gelu_grad(v);
            }
        }),
        &Op::Softmax { a } => {
            let n = node.value.cols();
            acc(nodes, a, |_, ga| {
                for ((gr, yr), dst) in g
                    .chunks(n)
                    .zip(node.value.data.chunks(n))
                    .zip(ga.chunks_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((x, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *x += yi * (gi - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = node.value.cols();
            acc(nodes, *beta, |_, gb| {
                for row in g.chunks(d) {
                    for (x, y) in gb.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            });
            acc(nodes, *gamma, |_, gg| {
                for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((x, y), h) in gg.iter_mut().zip(row).zip(hrow) {
                        *x += y * h;
                    }
                }
            });
            let gamma = *gamma;
            acc(nodes, *x, |ns, gx| {
                let gm = &ns[gamma.0].value.data;
                let mut dh = vec![0.0; d];
                for (r, ((row, hrow), dst)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dh[j] = row[j] * gm[j];
                        s1 += dh[j];
                        s2 += dh[j] * hrow[j];
                    }
                    let k = rstd[r] / d as f64;
                    for j in 0..d {
                        dst[j] += k * (d as f64 * dh[j] - s1 - hrow[j] * s2);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        } => {
            let (q, k, v) = (*q, *k, *v);
            let d = node.value.cols();
            // q, k, v may alias (self-attention on one input): merge afterwards.
            let mut gq = take_grad(nodes, q);
            let mut gk = if k == q {
                gq.as_ref().map(|x| vec![0.0; x.len()])
            } else {
                take_grad(nodes, k)
            };
            let mut gv = if v == q || v == k {
                nodes[v.0]
                    .requires_grad
                    .then(|| vec![0.0; nodes[v.0].value.len()])
            } else {
                take_grad(nodes, v)
            };
            attention::backward(
                &nodes[q.0].value.data,
                &nodes[k.0].value.data,
                &nodes[v.0].value.data,
                probs,
                g,
                d,
                shape,
                gq.as_deref_mut(),
                gk.as_deref_mut(),
                gv.as_deref_mut(),
            );
            for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                let Some(buf) = buf else { continue };
                match nodes[var.0].grad.as_mut() {
                    Some(existing) => {
                        for (x, y) in existing.iter_mut().zip(&buf) {
                            *x += y;
                        }
                    }
                    None => nodes[var.0].grad = Some(buf),
                }
            }
        }
        Op::Gather { sources, index } => {
            let cols = node.value.cols();
            for (si, &src) in sources.iter().enumerate() {
                acc(nodes, src, |_, gs| {
                    for (row, &(s, r)) in g.chunks(cols).zip(index) {
                        if s == si {
                            for (x, y) in gs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    }
                });
            }
        }
        &Op::MeanRows { a, group } => {
            let n = node.value.cols();
            acc(nodes, a, |_, ga| {
                let inv = 1.0 / group as f64;
                for (i, row) in ga.chunks_mut(n).enumerate() {
                    let src = &g[(i / group) * n..][..n];
                    for (x, y) in row.iter_mut().zip(src) {
                        *x += y * inv;
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let scale = g[0] / *count as f64;
            let vocab = node_cols(nodes, *logits);
            acc(nodes, *logits, |_, gl| {
                for (r, &y) in targets.iter().enumerate() {
                    if y == *ignore {
                        continue;
                    }
                    let p = &probs[r * vocab..(r + 1) * vocab];
                    let dst = &mut gl[r * vocab..(r + 1) * vocab];
                    for (x, pv) in dst.iter_mut().zip(p) {
                        *x += scale * pv;
                    }
                    dst[y] -= scale;
                }
            });
        }
        &Op::Sum { a } => acc(nodes, a, |_, ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
    }
}

fn take_grad(nodes: &mut [Node], var: Var) -> Option<Vec<f64>> {
    let node = &mut nodes[var.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.take().unwrap_or_else(|| vec![0.0; len]))
}

fn node_cols(nodes: &[Node], v: Var) -> usize {
    nodes[v.0].value.cols()
}
