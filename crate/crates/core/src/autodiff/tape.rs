//! Wengert tape for reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a row-major `rows × cols` matrix (scalars are
//! 1×1, vectors 1×n). A tape is built fresh for each forward pass and
//! discarded after the backward pass; gradients accumulate with `+=` so a
//! value consumed by several ops receives the sum of its contributions.

use std::sync::Arc;

use super::array::DifferentiableArray;
use super::gemm::gemm;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-node neighbor lists shared between the graph and EdgeConv nodes.
pub type NeighborLists = Arc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddRowVector {
        a: Var,
        v: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddTiled {
        a: Var,
        tile: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    ScaleByScalar {
        a: Var,
        s: Var,
    },
    MulRowwise {
        a: Var,
        s: Var,
    },
    LeakyRelu {
        a: Var,
        slope: f64,
    },
    Relu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Reshape {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    BlockMatMulNt {
        a: Var,
        b: Var,
        blocks: usize,
    },
    BlockMatMul {
        a: Var,
        b: Var,
        blocks: usize,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    EdgeConv {
        x: Var,
        w: Var,
        b: Var,
        slope: f64,
        /// Row (within the whole batch) of the maximizing neighbor per output entry.
        argmax: Vec<u32>,
        /// Pre-activation values.
        pre: Vec<f64>,
    },
    CrossEntropyMean {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records operations during a forward pass and replays them backwards.
pub struct Tape {
    nodes: Vec<Node>,
    branch_signature: Option<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// EdgeConv argmax marker for nodes aggregated over their own self edge.
const SELF_EDGE: u32 = u32::MAX;

fn mix(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x0100_0000_01b3).rotate_left(5)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch_signature: None,
        }
    }

    /// A tape that fingerprints every piecewise branch taken (activation
    /// signs, max-pooling winners). Two passes with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn with_branch_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            branch_signature: Some(0xcbf2_9ce4_8422_2325),
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branch_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record_branch(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(mut h) = self.branch_signature {
            for b in bits {
                h = mix(h, b);
            }
            self.branch_signature = Some(h);
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Gradient after [`Tape::backward`]; zeros if nothing flowed to `v`.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let n = self.node(v);
        if n.grad.is_empty() {
            vec![0.0; n.value.len()]
        } else {
            n.grad.clone()
        }
    }

    /// Record a trainable leaf copied from `array`, viewed as a matrix.
    pub fn param(&mut self, array: &DifferentiableArray) -> Var {
        let (rows, cols) = (array.rows(), array.cols());
        self.push(rows, cols, array.values().to_vec(), array.requires_grad(), Op::Leaf)
    }

    /// Record a constant (no gradient) matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "constant {rows}×{cols} given {} values",
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values, false, Op::Leaf))
    }

    /// Record a differentiable input leaf (gradient is tracked).
    pub fn variable(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        let v = self.constant(rows, cols, values)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::config(format!("matmul {m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(m, n, out, rg, Op::MatMul { a, b }))
    }

    /// `a + v` with the 1×c row vector `v` added to every row.
    pub fn add_row_vector(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(v) != (1, c) {
            return Err(Error::config(format!(
                "row vector {:?} does not match {r}×{c}",
                self.shape(v)
            )));
        }
        let bias = self.value(v);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.needs(&[a, v]);
        Ok(self.push(r, c, out, rg, Op::AddRowVector { a, v }))
    }

    /// `x · w + b` for every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_vector(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape != self.shape(b) {
            return Err(Error::config(format!("add {:?} + {:?}", shape, self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape.0, shape.1, out, rg, Op::Add { a, b }))
    }

    /// `a + tile` where the t×c `tile` repeats down the rows of `a`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (t, tc) = self.shape(tile);
        if tc != c || r % t != 0 {
            return Err(Error::config(format!("tile {t}×{tc} does not divide {r}×{c}")));
        }
        let tv = self.value(tile);
        let mut out = self.value(a).to_vec();
        for block in out.chunks_exact_mut(t * c) {
            for (o, x) in block.iter_mut().zip(tv) {
                *o += x;
            }
        }
        let rg = self.needs(&[a, tile]);
        Ok(self.push(r, c, out, rg, Op::AddTiled { a, tile }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(r, c, out, rg, Op::Scale { a, factor }))
    }

    /// `s · a` for a 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::config("scale_by expects a 1×1 scalar"));
        }
        let (r, c) = self.shape(a);
        let f = self.scalar(s);
        let out = self.value(a).iter().map(|x| x * f).collect();
        let rg = self.needs(&[a, s]);
        Ok(self.push(r, c, out, rg, Op::ScaleByScalar { a, s }))
    }

    /// Multiply row i of `a` by `s[i]` (s is r×1).
    pub fn mul_rowwise(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(s) != (r, 1) {
            return Err(Error::config(format!(
                "row scale {:?} does not match {r}×{c}",
                self.shape(s)
            )));
        }
        let sv = self.value(s);
        let mut out = self.value(a).to_vec();
        for (row, f) in out.chunks_exact_mut(c).zip(sv) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.needs(&[a, s]);
        Ok(self.push(r, c, out, rg, Op::MulRowwise { a, s }))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let signs: Vec<u64> = self.value(a).iter().map(|&x| (x > 0.0) as u64).collect();
        self.record_branch(signs.into_iter());
        let rg = self.needs(&[a]);
        Ok(self.push(r, c, out, rg, Op::LeakyRelu { a, slope }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let signs: Vec<u64> = self.value(a).iter().map(|&x| (x > 0.0) as u64).collect();
        self.record_branch(signs.into_iter());
        let rg = self.needs(&[a]);
        Ok(self.push(r, c, out, rg, Op::Relu { a }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(r, c, out, rg, Op::Tanh { a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(r, c, out, rg, Op::Sigmoid { a }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::config(format!("concat {ra}×{ca} with {rb}×{cb}")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for (x, y) in self.value(a).chunks_exact(ca).zip(self.value(b).chunks_exact(cb)) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(ra, ca + cb, out, rg, Op::ConcatCols { a, b }))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::config(format!("reshape {r}×{c} to {rows}×{cols}")));
        }
        let out = self.value(a).to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(rows, cols, out, rg, Op::Reshape { a }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = softmax_rows(self.value(a), c);
        let rg = self.needs(&[a]);
        Ok(self.push(r, c, out, rg, Op::SoftmaxRows { a }))
    }

    /// For each of `blocks` equal row blocks: `a_blk · b_blkᵀ`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (ra, d) = self.shape(a);
        if self.shape(b) != (ra, d) || blocks == 0 || ra % blocks != 0 {
            return Err(Error::config(format!(
                "block_matmul_nt {ra}×{d} with {:?} in {blocks} blocks",
                self.shape(b)
            )));
        }
        let t = ra / blocks;
        let mut out = vec![0.0; ra * t];
        let (av, bv) = (self.value(a), self.value(b));
        for blk in 0..blocks {
            let src = blk * t * d..(blk + 1) * t * d;
            let dst = blk * t * t..(blk + 1) * t * t;
            gemm(t, d, t, &av[src.clone()], false, &bv[src], true, 0.0, &mut out[dst]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(ra, t, out, rg, Op::BlockMatMulNt { a, b, blocks }))
    }

    /// For each of `blocks` equal row blocks: `a_blk (t×t) · b_blk (t×d)`.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (ra, t) = self.shape(a);
        let (rb, d) = self.shape(b);
        if ra != rb || blocks == 0 || ra != blocks * t {
            return Err(Error::config(format!(
                "block_matmul {ra}×{t} with {rb}×{d} in {blocks} blocks"
            )));
        }
        let mut out = vec![0.0; ra * d];
        let (av, bv) = (self.value(a), self.value(b));
        for blk in 0..blocks {
            let sa = blk * t * t..(blk + 1) * t * t;
            let sb = blk * t * d..(blk + 1) * t * d;
            gemm(t, t, d, &av[sa], false, &bv[sb.clone()], false, 0.0, &mut out[sb]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(ra, d, out, rg, Op::BlockMatMul { a, b, blocks }))
    }

    /// Row-wise standardization followed by a learned 1×c gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::config("layer_norm gain/bias must be 1×cols"));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut normalized = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, x) in row.iter().enumerate() {
                let xh = (x - mean) * is;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.needs(&[a, gain, bias]);
        Ok(self.push(
            r,
            c,
            out,
            rg,
            Op::LayerNorm {
                a,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// EdgeConv with a static graph over `blocks` stacked graphs of
    /// `neighbors.len()` nodes each.
    ///
    /// For node i and neighbor j: `e_ij = LeakyReLU([x_i ; x_j − x_i] · w + b)`,
    /// `h_i = max_j e_ij` coordinatewise; an empty neighborhood uses j = i.
    /// `w` is (2·d_in)×d_out with the `x_i` block on top.
    pub fn edge_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        neighbors: &NeighborLists,
        slope: f64,
    ) -> Result<Var> {
        let (rows, d_in) = self.shape(x);
        let (wr, d_out) = self.shape(w);
        let nodes = neighbors.len();
        if wr != 2 * d_in || self.shape(b) != (1, d_out) || nodes == 0 || rows % nodes != 0 {
            return Err(Error::config(format!(
                "edge_conv: x {rows}×{d_in}, w {wr}×{d_out}, b {:?}, {nodes} graph nodes",
                self.shape(b)
            )));
        }
        if rows >= SELF_EDGE as usize {
            return Err(Error::config("edge_conv: too many rows"));
        }
        if neighbors.iter().flatten().any(|&j| j >= nodes) {
            return Err(Error::config("edge_conv: neighbor index out of range"));
        }
        let wv = self.value(w);
        let (w_self, w_diff) = wv.split_at(d_in * d_out);
        // [x_i ; x_j - x_i]·w = x_i·(w_self - w_diff) + x_j·w_diff
        let w_center: Vec<f64> = w_self.iter().zip(w_diff).map(|(a, b)| a - b).collect();
        let xv = self.value(x);
        let mut center = vec![0.0; rows * d_out];
        gemm(rows, d_in, d_out, xv, false, &w_center, false, 0.0, &mut center);
        let mut nb = vec![0.0; rows * d_out];
        gemm(rows, d_in, d_out, xv, false, w_diff, false, 0.0, &mut nb);
        let bias = self.value(b);

        let mut pre = vec![0.0; rows * d_out];
        let mut argmax = vec![0u32; rows * d_out];
        for blk in 0..rows / nodes {
            let base = blk * nodes;
            for (i, list) in neighbors.iter().enumerate() {
                let row = base + i;
                let out = &mut pre[row * d_out..(row + 1) * d_out];
                let am = &mut argmax[row * d_out..(row + 1) * d_out];
                if list.is_empty() {
                    // Self edge: [x_i ; 0]·w, computed without the w_diff block.
                    out.copy_from_slice(bias);
                    for (p, &xv) in xv[row * d_in..(row + 1) * d_in].iter().enumerate() {
                        for (o, wv) in out.iter_mut().zip(&w_self[p * d_out..(p + 1) * d_out]) {
                            *o += xv * wv;
                        }
                    }
                    am.fill(SELF_EDGE);
                    continue;
                }
                let first = base + list[0];
                out.copy_from_slice(&nb[first * d_out..(first + 1) * d_out]);
                am.fill(first as u32);
                for &j in &list[1..] {
                    let jr = base + j;
                    let cand = &nb[jr * d_out..(jr + 1) * d_out];
                    for c in 0..d_out {
                        if cand[c] > out[c] {
                            out[c] = cand[c];
                            am[c] = jr as u32;
                        }
                    }
                }
                let ctr = &center[row * d_out..(row + 1) * d_out];
                for c in 0..d_out {
                    out[c] += ctr[c] + bias[c];
                }
            }
        }
        let out: Vec<f64> = pre.iter().map(|&z| if z > 0.0 { z } else { slope * z }).collect();
        if self.branch_signature.is_some() {
            let bits: Vec<u64> = pre
                .iter()
                .zip(&argmax)
                .map(|(&z, &a)| ((a as u64) << 1) | (z > 0.0) as u64)
                .collect();
            self.record_branch(bits.into_iter());
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            rows,
            d_out,
            out,
            rg,
            Op::EdgeConv {
                x,
                w,
                b,
                slope,
                argmax,
                pre,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits` (batch×classes) against `labels`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(Error::config(format!(
                "cross entropy: {} labels for {r}×{c} logits",
                labels.len()
            )));
        }
        let probs = softmax_rows(self.value(logits), c);
        let mut total = 0.0;
        for (row, &y) in self.value(logits).chunks_exact(c).zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let loss = total / r as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            rg,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(1, 1, vec![s], rg, Op::Sum { a }))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::config("backward requires a 1×1 loss"));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", self.scalar(loss))));
        }
        for n in &mut self.nodes {
            n.grad.clear();
        }
        self.nodes[loss.0].grad = vec![1.0];
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || node.grad.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut node.grad);
            propagate(node, &g, before);
            node.grad = g;
        }
        Ok(())
    }
}

/// Run `f` on the (zero-allocated if needed) gradient buffer of `v`, with
/// read access to every node's values.
fn with_grad(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let mut g = std::mem::take(&mut nodes[v.0].grad);
    if g.is_empty() {
        g = vec![0.0; nodes[v.0].value.len()];
    }
    f(&mut g, nodes);
    nodes[v.0].grad = g;
}

fn propagate(node: &Node, g: &[f64], prev: &mut [Node]) {
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (prev[a.0].rows, prev[a.0].cols);
            let n = prev[b.0].cols;
            with_grad(prev, *a, |ga, ns| {
                gemm(m, n, k, g, false, &ns[b.0].value, true, 1.0, ga)
            });
            with_grad(prev, *b, |gb, ns| {
                gemm(k, m, n, &ns[a.0].value, true, g, false, 1.0, gb)
            });
        }
        Op::AddRowVector { a, v } => {
            with_grad(prev, *a, |ga, _| add_into(ga, g));
            with_grad(prev, *v, |gv, _| {
                for row in g.chunks_exact(cols) {
                    add_into(gv, row);
                }
            });
        }
        Op::Add { a, b } => {
            with_grad(prev, *a, |ga, _| add_into(ga, g));
            with_grad(prev, *b, |gb, _| add_into(gb, g));
        }
        Op::AddTiled { a, tile } => {
            with_grad(prev, *a, |ga, _| add_into(ga, g));
            with_grad(prev, *tile, |gt, _| {
                let span = gt.len();
                for block in g.chunks_exact(span) {
                    add_into(gt, block);
                }
            });
        }
        Op::Scale { a, factor } => {
            with_grad(prev, *a, |ga, _| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += factor * y;
                }
            });
        }
        Op::ScaleByScalar { a, s } => {
            with_grad(prev, *a, |ga, ns| {
                let f = ns[s.0].value[0];
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += f * y;
                }
            });
            with_grad(prev, *s, |gs, ns| {
                gs[0] += dot(g, &ns[a.0].value);
            });
        }
        Op::MulRowwise { a, s } => {
            with_grad(prev, *a, |ga, ns| {
                let sv = &ns[s.0].value;
                for ((gr, yr), f) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(sv) {
                    for (x, y) in gr.iter_mut().zip(yr) {
                        *x += f * y;
                    }
                }
            });
            with_grad(prev, *s, |gs, ns| {
                let av = &ns[a.0].value;
                for ((x, yr), ar) in gs.iter_mut().zip(g.chunks_exact(cols)).zip(av.chunks_exact(cols)) {
                    *x += dot(yr, ar);
                }
            });
        }
        Op::LeakyRelu { a, slope } => {
            with_grad(prev, *a, |ga, ns| {
                for ((x, y), z) in ga.iter_mut().zip(g).zip(&ns[a.0].value) {
                    *x += if *z > 0.0 { *y } else { slope * y };
                }
            });
        }
        Op::Relu { a } => {
            with_grad(prev, *a, |ga, ns| {
                for ((x, y), z) in ga.iter_mut().zip(g).zip(&ns[a.0].value) {
                    if *z > 0.0 {
                        *x += y;
                    }
                }
            });
        }
        Op::Tanh { a } => {
            with_grad(prev, *a, |ga, _| {
                for ((x, y), t) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += y * (1.0 - t * t);
                }
            });
        }
        Op::Sigmoid { a } => {
            with_grad(prev, *a, |ga, _| {
                for ((x, y), s) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += y * s * (1.0 - s);
                }
            });
        }
        Op::ConcatCols { a, b } => {
            let ca = prev[a.0].cols;
            let cb = prev[b.0].cols;
            with_grad(prev, *a, |ga, _| {
                for (x, y) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                    add_into(x, &y[..ca]);
                }
            });
            with_grad(prev, *b, |gb, _| {
                for (x, y) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                    add_into(x, &y[ca..]);
                }
            });
        }
        Op::Reshape { a } => {
            with_grad(prev, *a, |ga, _| add_into(ga, g));
        }
        Op::SoftmaxRows { a } => {
            with_grad(prev, *a, |ga, _| {
                for ((x, yr), sr) in ga
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(node.value.chunks_exact(cols))
                {
                    let inner = dot(yr, sr);
                    for ((xi, yi), si) in x.iter_mut().zip(yr).zip(sr) {
                        *xi += si * (yi - inner);
                    }
                }
            });
        }
        Op::BlockMatMulNt { a, b, blocks } => {
            let t = rows / blocks;
            let d = prev[a.0].cols;
            with_grad(prev, *a, |ga, ns| {
                let bv = &ns[b.0].value;
                for blk in 0..*blocks {
                    let s = blk * t * t..(blk + 1) * t * t;
                    let v = blk * t * d..(blk + 1) * t * d;
                    gemm(t, t, d, &g[s], false, &bv[v.clone()], false, 1.0, &mut ga[v]);
                }
            });
            with_grad(prev, *b, |gb, ns| {
                let av = &ns[a.0].value;
                for blk in 0..*blocks {
                    let s = blk * t * t..(blk + 1) * t * t;
                    let v = blk * t * d..(blk + 1) * t * d;
                    gemm(t, t, d, &g[s], true, &av[v.clone()], false, 1.0, &mut gb[v]);
                }
            });
        }
        Op::BlockMatMul { a, b, blocks } => {
            let t = prev[a.0].cols;
            let d = cols;
            with_grad(prev, *a, |ga, ns| {
                let bv = &ns[b.0].value;
                for blk in 0..*blocks {
                    let s = blk * t * t..(blk + 1) * t * t;
                    let v = blk * t * d..(blk + 1) * t * d;
                    gemm(t, d, t, &g[v.clone()], false, &bv[v], true, 1.0, &mut ga[s]);
                }
            });
            with_grad(prev, *b, |gb, ns| {
                let av = &ns[a.0].value;
                for blk in 0..*blocks {
                    let s = blk * t * t..(blk + 1) * t * t;
                    let v = blk * t * d..(blk + 1) * t * d;
                    gemm(t, t, d, &av[s], true, &g[v.clone()], false, 1.0, &mut gb[v]);
                }
            });
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            with_grad(prev, *a, |ga, ns| {
                let gv = &ns[gain.0].value;
                let mut dxhat = vec![0.0; cols];
                for (r, &is) in inv_std.iter().enumerate() {
                    let yr = &g[r * cols..(r + 1) * cols];
                    let xh = &normalized[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dxhat[j] = yr[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dot(&dxhat, xh) / cols as f64;
                    let out = &mut ga[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += is * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            });
            with_grad(prev, *gain, |gg, _| {
                for (yr, xr) in g.chunks_exact(cols).zip(normalized.chunks_exact(cols)) {
                    for ((o, y), x) in gg.iter_mut().zip(yr).zip(xr) {
                        *o += y * x;
                    }
                }
            });
            with_grad(prev, *bias, |gb, _| {
                for yr in g.chunks_exact(cols) {
                    add_into(gb, yr);
                }
            });
        }
        Op::EdgeConv {
            x,
            w,
            b,
            slope,
            argmax,
            pre,
        } => {
            let d_out = cols;
            let d_in = prev[x.0].cols;
            // dZ: gradient at the pre-activation; it reaches the center term
            // directly and the neighbor term through the winning row.
            let dz: Vec<f64> = g
                .iter()
                .zip(pre)
                .map(|(y, z)| if *z > 0.0 { *y } else { slope * y })
                .collect();
            // Split dZ by which weight block the row's pre-activation used.
            let mut dnb = vec![0.0; rows * d_out];
            let mut dz_center = dz.clone();
            let mut dz_self = vec![0.0; rows * d_out];
            for (idx, &src) in argmax.iter().enumerate() {
                if src == SELF_EDGE {
                    dz_self[idx] = dz[idx];
                    dz_center[idx] = 0.0;
                } else {
                    dnb[src as usize * d_out + idx % d_out] += dz[idx];
                }
            }
            with_grad(prev, *x, |gx, ns| {
                let wv = &ns[w.0].value;
                let (w_self, w_diff) = wv.split_at(d_in * d_out);
                let w_center: Vec<f64> = w_self.iter().zip(w_diff).map(|(a, b)| a - b).collect();
                gemm(rows, d_out, d_in, &dz_center, false, &w_center, true, 1.0, gx);
                gemm(rows, d_out, d_in, &dnb, false, w_diff, true, 1.0, gx);
                gemm(rows, d_out, d_in, &dz_self, false, w_self, true, 1.0, gx);
            });
            with_grad(prev, *w, |gw, ns| {
                let xv = &ns[x.0].value;
                let (gw_self, gw_diff) = gw.split_at_mut(d_in * d_out);
                gemm(d_in, rows, d_out, xv, true, &dz, false, 1.0, gw_self);
                let diff: Vec<f64> = dnb.iter().zip(&dz_center).map(|(a, b)| a - b).collect();
                gemm(d_in, rows, d_out, xv, true, &diff, false, 1.0, gw_diff);
            });
            with_grad(prev, *b, |gb, _| {
                for row in dz.chunks_exact(d_out) {
                    add_into(gb, row);
                }
            });
        }
        Op::CrossEntropyMean {
            logits,
            labels,
            probs,
        } => {
            let scale = g[0] / labels.len() as f64;
            let c = prev[logits.0].cols;
            with_grad(prev, *logits, |gl, _| {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
        Op::Sum { a } => {
            with_grad(prev, *a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a row-major matrix with `cols` columns.
pub fn softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks_exact(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for x in row {
            let e = (x - m).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}
