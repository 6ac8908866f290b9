//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so indices are a topological order and `backward` is a
//! single reverse sweep. Forward values are never modified after creation.

use std::collections::BTreeMap;

use super::select::{softmax_selected, topk_indices, topk_margin, validate_selection};
use super::{Array, Param};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    RowMean(Var),
    RowVar(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax {
        logits: Var,
        selected: Vec<Vec<usize>>,
    },
    StackLayers(Vec<Var>),
    WeightedLayerSum {
        weights: Var,
        bank: Var,
    },
    MeanLayers(Var),
    MeanTokens(Var),
    GatherCols {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
    grad: Option<Array>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    frozen: Vec<String>,
    bound: BTreeMap<String, Var>,
    min_topk_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// A tape that records gradients for every leaf flagged `requires_grad`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            frozen: Vec::new(),
            bound: BTreeMap::new(),
            min_topk_margin: f64::INFINITY,
        }
    }

    /// A tape on which no node requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Parameters whose name starts with any of `prefixes` are bound as
    /// constants.
    pub fn with_frozen(mut self, prefixes: &[String]) -> Self {
        self.frozen = prefixes.to_vec();
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf. Binding the same name twice returns the
    /// same node.
    pub fn param(&mut self, p: &Param) -> Result<Var> {
        if let Some(&v) = self.bound.get(&p.name) {
            return Ok(v);
        }
        let trainable = !self.frozen.iter().any(|f| p.name.starts_with(f.as_str()));
        let v = self.leaf(p.value.clone(), trainable)?;
        self.bound.insert(p.name.clone(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every bound parameter that has one, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Array> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Smallest top-k margin seen by [`Tape::topk_rows`] so far.
    pub fn topk_margin(&self) -> f64 {
        self.min_topk_margin
    }

    /// Per-row top-k index sets of a matrix node. The selection is a
    /// constant for differentiation purposes.
    pub fn topk_rows(&mut self, logits: Var, k: usize) -> Result<Vec<Vec<usize>>> {
        let value = &self.nodes[logits.0].value;
        let (rows, _) = value.dims2()?;
        let mut sets = Vec::with_capacity(rows);
        let mut margin = self.min_topk_margin;
        for r in 0..rows {
            let row = value.row(r);
            sets.push(topk_indices(row, k)?);
            margin = margin.min(topk_margin(row, k));
        }
        self.min_topk_margin = margin;
        Ok(sets)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, out, op, rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(name, out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: va.shape().to_vec(),
            right: vb.shape().to_vec(),
        };
        let (n, k) = va.dims2().map_err(|_| mismatch())?;
        let (k2, m) = vb.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let out = Array::matrix(n, m, out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Adds a length-`m` vector to every row of an `n x m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (n, m) = vx.dims2()?;
        if vb.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Array::matrix(n, m, out)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", out, Op::AddBias(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    /// Concatenates two matrices along the feature (column) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, p) = va.dims2()?;
        let (n2, q) = vb.dims2()?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(va.row(i));
            out.extend_from_slice(vb.row(i));
        }
        let out = Array::matrix(n, p + q, out)?;
        let rg = self.rg(&[a, b]);
        self.push("concat_cols", out, Op::ConcatCols(a, b), rg)
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, m) = vx.dims2()?;
        let data = (0..n).map(|i| vx.row(i).iter().sum::<f64>() / m as f64).collect();
        let rg = self.rg(&[x]);
        self.push("row_mean", Array::vector(data), Op::RowMean(x), rg)
    }

    /// Population variance of each row.
    pub fn row_var(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, m) = vx.dims2()?;
        let data = (0..n)
            .map(|i| {
                let row = vx.row(i);
                let mean = row.iter().sum::<f64>() / m as f64;
                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push("row_var", Array::vector(data), Op::RowVar(x), rg)
    }

    /// Per-row normalization over the feature axis followed by the affine
    /// map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, m) = vx.dims2()?;
        for v in [vg, vb] {
            if v.shape() != [m] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: vx.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let mut xhat = Vec::with_capacity(n * m);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(vg.data()[j] * h + vb.data()[j]);
            }
        }
        let out = Array::matrix(n, m, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row-wise softmax restricted to `selected`; all other entries are
    /// exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, selected: Vec<Vec<usize>>) -> Result<Var> {
        let vl = self.value(logits);
        let (n, m) = vl.dims2()?;
        validate_selection(&selected, n, m)?;
        let mut out = vec![0.0; n * m];
        for (r, set) in selected.iter().enumerate() {
            softmax_selected(vl.row(r), set, &mut out[r * m..(r + 1) * m]);
        }
        let out = Array::matrix(n, m, out)?;
        let rg = self.rg(&[logits]);
        self.push("masked_softmax", out, Op::MaskedSoftmax { logits, selected }, rg)
    }

    /// Stacks `M` matrices of shape `L x D` into an `L x M x D` array.
    pub fn stack_layers(&mut self, layers: &[Var]) -> Result<Var> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("stack_layers: no layers"))?;
        let (l, d) = self.value(*first).dims2()?;
        for &v in layers {
            if self.value(v).shape() != [l, d] {
                return Err(Error::ShapeMismatch {
                    op: "stack_layers",
                    left: vec![l, d],
                    right: self.value(v).shape().to_vec(),
                });
            }
        }
        let m = layers.len();
        let mut out = vec![0.0; l * m * d];
        for (i, &v) in layers.iter().enumerate() {
            let src = self.value(v);
            for t in 0..l {
                out[(t * m + i) * d..(t * m + i + 1) * d].copy_from_slice(src.row(t));
            }
        }
        let out = Array::new(vec![l, m, d], out)?;
        let rg = self.rg(layers);
        self.push("stack_layers", out, Op::StackLayers(layers.to_vec()), rg)
    }

    /// `out[l, :] = sum_i weights[l, i] * bank[l, i, :]`.
    pub fn weighted_layer_sum(&mut self, weights: Var, bank: Var) -> Result<Var> {
        let (vw, vb) = (self.value(weights), self.value(bank));
        let mismatch = || Error::ShapeMismatch {
            op: "weighted_layer_sum",
            left: vw.shape().to_vec(),
            right: vb.shape().to_vec(),
        };
        let (l, m) = vw.dims2().map_err(|_| mismatch())?;
        let d = match vb.shape() {
            &[bl, bm, d] if bl == l && bm == m => d,
            _ => return Err(mismatch()),
        };
        let (wd, bd) = (vw.data(), vb.data());
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            let orow = &mut out[t * d..(t + 1) * d];
            for i in 0..m {
                let w = wd[t * m + i];
                if w == 0.0 {
                    continue;
                }
                let src = &bd[(t * m + i) * d..(t * m + i + 1) * d];
                for (o, &s) in orow.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let out = Array::matrix(l, d, out)?;
        let rg = self.rg(&[weights, bank]);
        self.push(
            "weighted_layer_sum",
            out,
            Op::WeightedLayerSum { weights, bank },
            rg,
        )
    }

    /// Mean over the layer axis of an `L x M x D` array.
    pub fn mean_layers(&mut self, bank: Var) -> Result<Var> {
        let vb = self.value(bank);
        let (l, m, d) = match vb.shape() {
            &[l, m, d] => (l, m, d),
            s => {
                return Err(Error::invalid(format!(
                    "mean_layers: expected rank 3, got {s:?}"
                )))
            }
        };
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            let orow = &mut out[t * d..(t + 1) * d];
            for i in 0..m {
                let src = &vb.data()[(t * m + i) * d..(t * m + i + 1) * d];
                for (o, &s) in orow.iter_mut().zip(src) {
                    *o += s;
                }
            }
            for o in orow.iter_mut() {
                *o /= m as f64;
            }
        }
        let out = Array::matrix(l, d, out)?;
        let rg = self.rg(&[bank]);
        self.push("mean_layers", out, Op::MeanLayers(bank), rg)
    }

    /// Mean over the token (row) axis, giving a length-`D` vector.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (l, d) = vx.dims2()?;
        let mut out = vec![0.0; d];
        for t in 0..l {
            for (o, &v) in out.iter_mut().zip(vx.row(t)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= l as f64;
        }
        let rg = self.rg(&[x]);
        self.push("mean_tokens", Array::vector(out), Op::MeanTokens(x), rg)
    }

    /// Picks `x[i, index[i]]` from each row.
    pub fn gather_cols(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let (n, m) = vx.dims2()?;
        if index.len() != n || index.iter().any(|&j| j >= m) {
            return Err(Error::invalid(format!(
                "gather_cols: {} indices for a {n} x {m} matrix",
                index.len()
            )));
        }
        let data = index.iter().enumerate().map(|(i, &j)| vx.get2(i, j)).collect();
        let rg = self.rg(&[x]);
        self.push("gather_cols", Array::vector(data), Op::GatherCols { x, index }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Array::scalar(s), Op::Mean(x), rg)
    }

    /// Accumulates d(loss)/d(node) into the grad buffer of every node that
    /// requires a gradient. Calling it twice doubles the buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            propagate(&self.nodes, i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => {
                    for (b, v) in buf.data_mut().iter_mut().zip(&g) {
                        *b += v;
                    }
                }
                None => node.grad = Some(Array::new(node.value.shape().to_vec(), g)?),
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Array::zeros(node.value.shape()));
            }
        }
        Ok(())
    }
}

fn adj_of<'a>(
    nodes: &[Node],
    adj: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n, k) = (va.shape()[0], va.shape()[1]);
            let m = vb.shape()[1];
            if let Some(ga) = adj_of(nodes, adj, *a) {
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    for p in 0..k {
                        let brow = &vb.data()[p * m..(p + 1) * m];
                        ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = adj_of(nodes, adj, *b) {
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    for p in 0..k {
                        let a_rp = va.data()[r * k + p];
                        for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *o += a_rp * gv;
                        }
                    }
                }
            }
        }
        Op::AddBias(x, bias) => {
            let m = out.shape()[1];
            if let Some(gx) = adj_of(nodes, adj, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = adj_of(nodes, adj, *bias) {
                for row in g.chunks(m) {
                    add_into(gb, row);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = adj_of(nodes, adj, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = adj_of(nodes, adj, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = adj_of(nodes, adj, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = adj_of(nodes, adj, *b) {
                for (o, v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(ga) = adj_of(nodes, adj, *a) {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(vb) {
                    *o += gv * y;
                }
            }
            if let Some(gb) = adj_of(nodes, adj, *b) {
                for ((o, gv), x) in gb.iter_mut().zip(g).zip(va) {
                    *o += gv * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = adj_of(nodes, adj, *x) {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += c * v;
                }
            }
        }
        Op::AddScalar(x) => {
            if let Some(gx) = adj_of(nodes, adj, *x) {
                add_into(gx, g);
            }
        }
        Op::ConcatCols(a, b) => {
            let p = val(*a).shape()[1];
            let w = out.shape()[1];
            if let Some(ga) = adj_of(nodes, adj, *a) {
                for (r, row) in g.chunks(w).enumerate() {
                    add_into(&mut ga[r * p..(r + 1) * p], &row[..p]);
                }
            }
            if let Some(gb) = adj_of(nodes, adj, *b) {
                let q = w - p;
                for (r, row) in g.chunks(w).enumerate() {
                    add_into(&mut gb[r * q..(r + 1) * q], &row[p..]);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = adj_of(nodes, adj, *x) {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            }
        }
        Op::Gelu(x) => {
            let vx = val(*x).data();
            if let Some(gx) = adj_of(nodes, adj, *x) {
                for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                    *o += gv * gelu_grad(xv);
                }
            }
        }
        Op::RowMean(x) => {
            let m = val(*x).shape()[1];
            if let Some(gx) = adj_of(nodes, adj, *x) {
                for (r, row) in gx.chunks_mut(m).enumerate() {
                    let s = g[r] / m as f64;
                    row.iter_mut().for_each(|o| *o += s);
                }
            }
        }
        Op::RowVar(x) => {
            let vx = val(*x);
            let m = vx.shape()[1];
            if let Some(gx) = adj_of(nodes, adj, *x) {
                for (r, row) in gx.chunks_mut(m).enumerate() {
                    let src = vx.row(r);
                    let mean = src.iter().sum::<f64>() / m as f64;
                    let s = 2.0 * g[r] / m as f64;
                    for (o, &v) in row.iter_mut().zip(src) {
                        *o += s * (v - mean);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let m = out.shape()[1];
            let gam = val(*gamma).data();
            if let Some(gg) = adj_of(nodes, adj, *gamma) {
                for (row, hrow) in g.chunks(m).zip(xhat.chunks(m)) {
                    for ((o, gv), h) in gg.iter_mut().zip(row).zip(hrow) {
                        *o += gv * h;
                    }
                }
            }
            if let Some(gb) = adj_of(nodes, adj, *beta) {
                for row in g.chunks(m) {
                    add_into(gb, row);
                }
            }
            if let Some(gx) = adj_of(nodes, adj, *x) {
                let mut dxhat = vec![0.0; m];
                for (r, (row, hrow)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                    for ((d, gv), gm) in dxhat.iter_mut().zip(row).zip(gam) {
                        *d = gv * gm;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dh =
                        dxhat.iter().zip(hrow).map(|(d, h)| d * h).sum::<f64>() / m as f64;
                    for ((o, d), h) in gx[r * m..(r + 1) * m].iter_mut().zip(&dxhat).zip(hrow) {
                        *o += rstd[r] * (d - mean_d - h * mean_dh);
                    }
                }
            }
        }
        Op::MaskedSoftmax { logits, selected } => {
            let m = out.shape()[1];
            if let Some(gl) = adj_of(nodes, adj, *logits) {
                for (r, set) in selected.iter().enumerate() {
                    let y = &out.data()[r * m..(r + 1) * m];
                    let grow = &g[r * m..(r + 1) * m];
                    let dot: f64 = set.iter().map(|&j| y[j] * grow[j]).sum();
                    for &j in set {
                        gl[r * m + j] += y[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::StackLayers(layers) => {
            let (l, m, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            for (idx, &v) in layers.iter().enumerate() {
                if let Some(gv) = adj_of(nodes, adj, v) {
                    for t in 0..l {
                        let src = &g[(t * m + idx) * d..(t * m + idx + 1) * d];
                        add_into(&mut gv[t * d..(t + 1) * d], src);
                    }
                }
            }
        }
        Op::WeightedLayerSum { weights, bank } => {
            let (vw, vb) = (val(*weights), val(*bank));
            let (l, m) = (vw.shape()[0], vw.shape()[1]);
            let d = vb.shape()[2];
            if let Some(gw) = adj_of(nodes, adj, *weights) {
                for t in 0..l {
                    let grow = &g[t * d..(t + 1) * d];
                    for i in 0..m {
                        let src = &vb.data()[(t * m + i) * d..(t * m + i + 1) * d];
                        gw[t * m + i] += grow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = adj_of(nodes, adj, *bank) {
                for t in 0..l {
                    let grow = &g[t * d..(t + 1) * d];
                    for i in 0..m {
                        let w = vw.data()[t * m + i];
                        if w == 0.0 {
                            continue;
                        }
                        for (o, gv) in gb[(t * m + i) * d..(t * m + i + 1) * d].iter_mut().zip(grow) {
                            *o += w * gv;
                        }
                    }
                }
            }
        }
        Op::MeanLayers(bank) => {
            let (l, m, d) = {
                let s = val(*bank).shape();
                (s[0], s[1], s[2])
            };
            if let Some(gb) = adj_of(nodes, adj, *bank) {
                for t in 0..l {
                    let grow = &g[t * d..(t + 1) * d];
                    for i in 0..m {
                        for (o, gv) in gb[(t * m + i) * d..(t * m + i + 1) * d].iter_mut().zip(grow) {
                            *o += gv / m as f64;
                        }
                    }
                }
            }
        }
        Op::MeanTokens(x) => {
            let (l, d) = (val(*x).shape()[0], val(*x).shape()[1]);
            if let Some(gx) = adj_of(nodes, adj, *x) {
                for row in gx.chunks_mut(d) {
                    for (o, gv) in row.iter_mut().zip(g) {
                        *o += gv / l as f64;
                    }
                }
            }
        }
        Op::GatherCols { x, index } => {
            let m = val(*x).shape()[1];
            if let Some(gx) = adj_of(nodes, adj, *x) {
                for (r, &j) in index.iter().enumerate() {
                    gx[r * m + j] += g[r];
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = adj_of(nodes, adj, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            if let Some(gx) = adj_of(nodes, adj, *x) {
                gx.iter_mut().for_each(|o| *o += g[0] / n);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
