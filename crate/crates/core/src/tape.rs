//! Reverse-mode autodiff over a recorded tape of primitive operations.
//!
//! Nodes hold flat `Vec<f64>` values; scalars are length-1 vectors. The op
//! set is exactly what the certified training objective and the attack
//! oracles need. Subgradient conventions: `max`/`min` route the adjoint to
//! the first extremal argument (lowest index); `minmax` treats an exact tie
//! as already sorted.

use crate::error::{GloroError, Result};
use crate::net::{conv_apply, conv_apply_transpose, conv_grad_kernel, ConvMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// value = W x, W a flattened rows x cols parameter node.
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Conv { kernel: NodeId, x: NodeId, meta: ConvMeta },
    AddVec { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    MinMax { x: NodeId },
    /// value[i] = x[perm[i]] (a permutation).
    Gather { x: NodeId, perm: Vec<usize> },
    Index { x: NodeId, i: usize },
    Dot { a: NodeId, b: NodeId },
    /// Scalar ||w_j - w_i||_2 over rows of a flattened matrix node.
    RowDiffNorm { w: NodeId, j: usize, i: usize, cols: usize },
    AddScalar { a: NodeId, b: NodeId },
    SubScalar { a: NodeId, b: NodeId },
    MulScalar { a: NodeId, b: NodeId },
    AddConst { x: NodeId },
    MaxMany { xs: Vec<NodeId> },
    MinMany { xs: Vec<NodeId> },
    SumMany { xs: Vec<NodeId> },
    ProdMany { xs: Vec<NodeId> },
    /// Cross-entropy of softmax over scalar logit nodes at `label`.
    CrossEntropy { logits: Vec<NodeId>, label: usize },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node w.r.t. one scalar output.
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &[f64] {
        &self.adjoints[id.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.leaf(vec![c])
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(wv.len(), rows * cols);
        debug_assert_eq!(xv.len(), cols);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = wv[r * cols..(r + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(out, Op::MatVec { w, x, rows, cols })
    }

    pub fn conv(&mut self, kernel: NodeId, x: NodeId, meta: ConvMeta) -> NodeId {
        let out = conv_apply(&self.nodes[kernel.0].value, &self.nodes[x.0].value, &meta);
        self.push(out, Op::Conv { kernel, x, meta })
    }

    pub fn add_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(out, Op::AddVec { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| c * v).collect();
        self.push(out, Op::Scale { x, c })
    }

    pub fn minmax(&mut self, x: NodeId) -> NodeId {
        let out = crate::net::minmax(&self.nodes[x.0].value);
        self.push(out, Op::MinMax { x })
    }

    pub fn gather(&mut self, x: NodeId, perm: Vec<usize>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = perm.iter().map(|&i| xv[i]).collect();
        self.push(out, Op::Gather { x, perm })
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = self.nodes[x.0].value[i];
        self.push(vec![v], Op::Index { x, i })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![v], Op::Dot { a, b })
    }

    pub fn row_diff_norm(&mut self, w: NodeId, j: usize, i: usize, cols: usize) -> NodeId {
        let wv = &self.nodes[w.0].value;
        let mut s = 0.0;
        for c in 0..cols {
            let d = wv[j * cols + c] - wv[i * cols + c];
            s += d * d;
        }
        self.push(vec![s.sqrt()], Op::RowDiffNorm { w, j, i, cols })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.scalar(a) + self.scalar(b);
        self.push(vec![v], Op::AddScalar { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.scalar(a) - self.scalar(b);
        self.push(vec![v], Op::SubScalar { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.scalar(a) * self.scalar(b);
        self.push(vec![v], Op::MulScalar { a, b })
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.scalar(x) + c;
        self.push(vec![v], Op::AddConst { x })
    }

    pub fn max_many(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let v = xs.iter().map(|&id| self.scalar(id)).fold(f64::NEG_INFINITY, f64::max);
        self.push(vec![v], Op::MaxMany { xs: xs.to_vec() })
    }

    pub fn min_many(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let v = xs.iter().map(|&id| self.scalar(id)).fold(f64::INFINITY, f64::min);
        self.push(vec![v], Op::MinMany { xs: xs.to_vec() })
    }

    pub fn sum_many(&mut self, xs: &[NodeId]) -> NodeId {
        let v: f64 = xs.iter().map(|&id| self.scalar(id)).sum();
        self.push(vec![v], Op::SumMany { xs: xs.to_vec() })
    }

    pub fn prod_many(&mut self, xs: &[NodeId]) -> NodeId {
        let v: f64 = xs.iter().map(|&id| self.scalar(id)).product();
        self.push(vec![v], Op::ProdMany { xs: xs.to_vec() })
    }

    /// -log softmax(logits)[label], computed stably.
    pub fn cross_entropy(&mut self, logits: &[NodeId], label: usize) -> NodeId {
        assert!(label < logits.len());
        let vals: Vec<f64> = logits.iter().map(|&id| self.scalar(id)).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(vec![lse - vals[label]], Op::CrossEntropy { logits: logits.to_vec(), label })
    }

    /// Accumulates adjoints of every node w.r.t. the scalar at `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(GloroError::InvalidArgument(
                "backward root must be a scalar node".into(),
            ));
        }
        let mut adj: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[root.0][0] = 1.0;

        for id in (0..=root.0).rev() {
            let g = std::mem::take(&mut adj[id]);
            if g.iter().all(|&v| v == 0.0) {
                adj[id] = g;
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatVec { w, x, rows, cols } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..*cols {
                            adj[w.0][r * cols + c] += gr * xv[c];
                            adj[x.0][c] += gr * wv[r * cols + c];
                        }
                    }
                }
                Op::Conv { kernel, x, meta } => {
                    let kv = &self.nodes[kernel.0].value;
                    let xv = &self.nodes[x.0].value;
                    let gk = conv_grad_kernel(xv, &g, meta);
                    for (a, b) in adj[kernel.0].iter_mut().zip(&gk) {
                        *a += b;
                    }
                    let gx = conv_apply_transpose(kv, &g, meta);
                    for (a, b) in adj[x.0].iter_mut().zip(&gx) {
                        *a += b;
                    }
                }
                Op::AddVec { a, b } => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[b.0][i] += gi;
                    }
                }
                Op::Scale { x, c } => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[x.0][i] += c * gi;
                    }
                }
                Op::MinMax { x } => {
                    // Recover the per-pair permutation from the input values.
                    let xv = &self.nodes[x.0].value;
                    let n = xv.len();
                    let mut i = 0;
                    while i + 1 < n {
                        if xv[i] <= xv[i + 1] {
                            adj[x.0][i] += g[i];
                            adj[x.0][i + 1] += g[i + 1];
                        } else {
                            adj[x.0][i] += g[i + 1];
                            adj[x.0][i + 1] += g[i];
                        }
                        i += 2;
                    }
                    if n % 2 == 1 {
                        adj[x.0][n - 1] += g[n - 1];
                    }
                }
                Op::Gather { x, perm } => {
                    for (out_i, &in_i) in perm.iter().enumerate() {
                        adj[x.0][in_i] += g[out_i];
                    }
                }
                Op::Index { x, i } => {
                    adj[x.0][*i] += g[0];
                }
                Op::Dot { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = &self.nodes[b.0].value;
                    for i in 0..av.len() {
                        adj[a.0][i] += g[0] * bv[i];
                        adj[b.0][i] += g[0] * av[i];
                    }
                }
                Op::RowDiffNorm { w, j, i, cols } => {
                    let norm = self.nodes[id].value[0];
                    if norm > 0.0 {
                        let wv = &self.nodes[w.0].value;
                        for c in 0..*cols {
                            let d = (wv[j * cols + c] - wv[i * cols + c]) / norm;
                            adj[w.0][j * cols + c] += g[0] * d;
                            adj[w.0][i * cols + c] -= g[0] * d;
                        }
                    }
                }
                Op::AddScalar { a, b } => {
                    adj[a.0][0] += g[0];
                    adj[b.0][0] += g[0];
                }
                Op::SubScalar { a, b } => {
                    adj[a.0][0] += g[0];
                    adj[b.0][0] -= g[0];
                }
                Op::MulScalar { a, b } => {
                    let av = self.nodes[a.0].value[0];
                    let bv = self.nodes[b.0].value[0];
                    adj[a.0][0] += g[0] * bv;
                    adj[b.0][0] += g[0] * av;
                }
                Op::AddConst { x } => {
                    adj[x.0][0] += g[0];
                }
                Op::MaxMany { xs } => {
                    let mut best = 0;
                    for (i, &x) in xs.iter().enumerate() {
                        if self.nodes[x.0].value[0] > self.nodes[xs[best].0].value[0] {
                            best = i;
                        }
                    }
                    adj[xs[best].0][0] += g[0];
                }
                Op::MinMany { xs } => {
                    let mut best = 0;
                    for (i, &x) in xs.iter().enumerate() {
                        if self.nodes[x.0].value[0] < self.nodes[xs[best].0].value[0] {
                            best = i;
                        }
                    }
                    adj[xs[best].0][0] += g[0];
                }
                Op::SumMany { xs } => {
                    for &x in xs {
                        adj[x.0][0] += g[0];
                    }
                }
                Op::ProdMany { xs } => {
                    for (i, &x) in xs.iter().enumerate() {
                        let mut p = 1.0;
                        for (j, &y) in xs.iter().enumerate() {
                            if i != j {
                                p *= self.nodes[y.0].value[0];
                            }
                        }
                        adj[x.0][0] += g[0] * p;
                    }
                }
                Op::CrossEntropy { logits, label } => {
                    let vals: Vec<f64> = logits.iter().map(|&x| self.nodes[x.0].value[0]).collect();
                    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (i, &x) in logits.iter().enumerate() {
                        let p = exps[i] / z;
                        let target = if i == *label { 1.0 } else { 0.0 };
                        adj[x.0][0] += g[0] * (p - target);
                    }
                }
            }
            adj[id] = g;
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Tape node ids for a network's trainable parameters, per layer.
pub struct TapeParams {
    /// `(weights, bias)` for dense and conv layers, `None` otherwise.
    pub per_layer: Vec<Option<(NodeId, NodeId)>>,
}

/// Records every trainable parameter of `net` as a leaf node.
pub fn record_params(tape: &mut Tape, net: &crate::net::Network) -> TapeParams {
    let per_layer = net
        .layers
        .iter()
        .map(|layer| match layer {
            crate::net::Layer::Dense { weights, bias, .. } => {
                Some((tape.leaf(weights.clone()), tape.leaf(bias.clone())))
            }
            crate::net::Layer::Conv { kernel, bias, .. } => {
                Some((tape.leaf(kernel.clone()), tape.leaf(bias.clone())))
            }
            _ => None,
        })
        .collect();
    TapeParams { per_layer }
}

/// Records the forward pass of `net` on input node `x`, returning the logits
/// node. Layer parameters are read from `params` so their gradients flow.
pub fn forward_on_tape(
    tape: &mut Tape,
    net: &crate::net::Network,
    params: &TapeParams,
    x: NodeId,
) -> Result<NodeId> {
    use crate::net::Layer;
    let shapes = net.activation_shapes()?;
    if tape.value(x).len() != net.input_dim() {
        return Err(GloroError::ShapeMismatch(format!(
            "input node has {} entries, expected {}",
            tape.value(x).len(),
            net.input_dim()
        )));
    }
    let mut act = x;
    for (li, layer) in net.layers.iter().enumerate() {
        act = match layer {
            Layer::Dense { rows, cols, .. } => {
                let (w, b) = params.per_layer[li].unwrap();
                let y = tape.matvec(w, act, *rows, *cols);
                tape.add_vec(y, b)
            }
            Layer::Conv { out_c, in_c, kh, kw, stride, .. } => {
                let (k, b) = params.per_layer[li].unwrap();
                let meta = ConvMeta::new(&shapes[li], *out_c, *in_c, *kh, *kw, *stride)?;
                let y = tape.conv(k, act, meta);
                let bcast: Vec<usize> = (0..meta.out_dim()).map(|i| i % meta.out_c).collect();
                let bfull = tape.gather(b, bcast);
                tape.add_vec(y, bfull)
            }
            Layer::MinMax => tape.minmax(act),
            Layer::InvertibleDownsample { factor } => {
                let s = &shapes[li];
                let perm = crate::net::downsample_permutation(s[0], s[1], s[2], *factor);
                tape.gather(act, perm)
            }
        };
    }
    Ok(act)
}
