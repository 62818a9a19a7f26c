//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every forward operation as a node. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! a [`Gradients`] table; [`Gradients::accumulate`] adds the parameter slots
//! into a [`ParamStore`]. A graph is built for a single forward pass and then
//! dropped, so there is no graph reuse across optimizer steps.
//!
//! Only the operations the network needs are provided. Each one is covered
//! by a central-difference check in the tests below.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms in
/// [`Graph::binary_cross_entropy`].
pub const BCE_EPS: f64 = 1e-7;

const NO_SLOT: u32 = u32::MAX;

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension {
                context: "tensor values vs shape",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    /// Convenience for 2-D literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(n * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension {
                    context: "ragged rows",
                    left: vec![c],
                    right: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![n, c], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Allocates (or resets) the gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub momentum: Vec<f64>,
}

/// Registry of named parameters. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        tensor.zero_grad();
        let momentum = vec![0.0; tensor.numel()];
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            momentum,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Neighbor table for a 3×3×3 same-padded convolution evaluated on a subset
/// of output voxels. Entry `o * 27 + t` holds the input row for output `o` at
/// kernel tap `t`, or `u32::MAX` where the tap falls outside the grid or on
/// a voxel that has no input row (treated as zero).
#[derive(Clone, Debug)]
pub struct ConvPlan {
    taps: Vec<u32>,
    outputs: usize,
}

pub const KERNEL_TAPS: usize = 27;

impl ConvPlan {
    /// `dims` is (W, H, D) with layout `(x·H + y)·D + z`; `input_row[v]` maps
    /// voxel `v` to its row in the input tensor.
    pub fn new(dims: [usize; 3], input_row: &[Option<u32>], outputs: &[usize]) -> Result<Self> {
        let [w, h, d] = dims;
        let volume = w * h * d;
        if input_row.len() != volume {
            return Err(Error::Dimension {
                context: "conv input row map",
                left: vec![w, h, d],
                right: vec![input_row.len()],
            });
        }
        let mut taps = Vec::with_capacity(outputs.len() * KERNEL_TAPS);
        for &o in outputs {
            if o >= volume {
                return Err(Error::Index { index: o, len: volume });
            }
            let (x, y, z) = (o / (h * d), (o / d) % h, o % d);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        let inside = (0..w as i64).contains(&nx)
                            && (0..h as i64).contains(&ny)
                            && (0..d as i64).contains(&nz);
                        let slot = if inside {
                            let v = ((nx as usize) * h + ny as usize) * d + nz as usize;
                            input_row[v].unwrap_or(NO_SLOT)
                        } else {
                            NO_SLOT
                        };
                        taps.push(slot);
                    }
                }
            }
        }
        Ok(Self {
            taps,
            outputs: outputs.len(),
        })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Concat { a: Var, b: Var },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<u32> },
    MaskedMaxPool { x: Var, argmax: Vec<u32> },
    WeightedInterp {
        w: Var,
        src: Var,
        idx: Vec<u32>,
        k: usize,
        sums: Vec<f64>,
    },
    Conv3d { x: Var, w: Var, b: Var, plan: Arc<ConvPlan> },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        scale: f64,
    },
    Bce { p: Var, targets: Vec<f64>, scale: f64 },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Forward tape. Nodes are appended in evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), c)
        }
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            grad: None,
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a registered parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        self.push(t.shape.clone(), t.values.clone(), Op::Param(id), true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Dimension {
                context: "linear: x [n, c_in] against w [c_in, c_out]",
                left: xs,
                right: ws,
            });
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            let row = &mut out[i * cout..(i + 1) * cout];
            row.copy_from_slice(bv);
            for k in 0..cin {
                let a = xv[i * cin + k];
                if a == 0.0 {
                    continue;
                }
                let wr = &wv[k * cout..(k + 1) * cout];
                for (o, &wk) in row.iter_mut().zip(wr) {
                    *o += a * wk;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![n, cout], out, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    /// Per-row normalization over channels, `γ·(x − μ)/√(σ² + ε) + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c) = rows_cols(self.shape(x));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension {
                context: "layer_norm: gamma and beta must be [c]",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = Vec::with_capacity(n);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Channel-wise concatenation along the last axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = rows_cols(self.shape(a));
        let (rb, cb) = rows_cols(self.shape(b));
        if ra != rb {
            return Err(Error::Dimension {
                context: "concat_channels leading dimension",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let c = ca + cb;
        let mut out = Vec::with_capacity(ra * c);
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![ra, c], out, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                context: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Dimension {
                context: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Row gather: `out[r] = x[idx[r]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        let mut packed = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
            packed.push(i as u32);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx: packed }, rg))
    }

    /// Max over the slot axis of `x` viewed as `[n, m, c]`, ignoring slots
    /// whose mask entry is false. Rows with no valid slot produce zeros.
    /// Gradient goes to the lowest-index argmax slot.
    pub fn masked_max_pool(&mut self, x: Var, n: usize, m: usize, mask: &[bool]) -> Result<Var> {
        let (rows, c) = rows_cols(self.shape(x));
        if rows != n * m || mask.len() != n * m {
            return Err(Error::Dimension {
                context: "masked_max_pool: x [n*m, c] and mask [n*m]",
                left: self.shape(x).to_vec(),
                right: vec![n, m, mask.len()],
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![NO_SLOT; n * c];
        for i in 0..n {
            for s in 0..m {
                if !mask[i * m + s] {
                    continue;
                }
                let src = (i * m + s) * c;
                for j in 0..c {
                    let v = xv[src + j];
                    let a = &mut argmax[i * c + j];
                    if *a == NO_SLOT || v > out[i * c + j] {
                        out[i * c + j] = v;
                        *a = (src + j) as u32;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c], out, Op::MaskedMaxPool { x, argmax }, rg))
    }

    /// Normalized weighted interpolation:
    /// `out[i] = Σ_k w[i,k]·src[idx[i,k]] / Σ_k w[i,k]`.
    /// A row whose weight sum is not strictly positive falls back to the
    /// uniform mean and passes no gradient to its weights.
    pub fn weighted_interp(&mut self, w: Var, src: Var, idx: &[usize], k: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let (m, c) = rows_cols(self.shape(src));
        if k == 0 || ws.len() != 2 || ws[1] != k || idx.len() != ws[0] * k {
            return Err(Error::Dimension {
                context: "weighted_interp: w [n, k] against neighbor table",
                left: ws,
                right: vec![idx.len(), k],
            });
        }
        let n = ws[0];
        let wv = self.value(w);
        let sv = self.value(src);
        let mut out = vec![0.0; n * c];
        let mut sums = vec![0.0; n];
        let mut packed = Vec::with_capacity(idx.len());
        for i in 0..n {
            let s: f64 = wv[i * k..(i + 1) * k].iter().sum();
            sums[i] = s;
            let row = &mut out[i * c..(i + 1) * c];
            for t in 0..k {
                let j = idx[i * k + t];
                if j >= m {
                    return Err(Error::Index { index: j, len: m });
                }
                packed.push(j as u32);
                let coef = if s > 0.0 { wv[i * k + t] / s } else { 1.0 / k as f64 };
                for (o, &f) in row.iter_mut().zip(&sv[j * c..(j + 1) * c]) {
                    *o += coef * f;
                }
            }
        }
        let rg = self.rg(w) || self.rg(src);
        Ok(self.push(
            vec![n, c],
            out,
            Op::WeightedInterp {
                w,
                src,
                idx: packed,
                k,
                sums,
            },
            rg,
        ))
    }

    /// 3×3×3 convolution evaluated at the outputs described by `plan`.
    /// `w` is `[27·c_in, c_out]` with tap-major rows, `b` is `[c_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, plan: Arc<ConvPlan>) -> Result<Var> {
        let (n_in, cin) = rows_cols(self.shape(x));
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != KERNEL_TAPS * cin || self.shape(b) != [ws[1]] {
            return Err(Error::Dimension {
                context: "conv3d: w [27*c_in, c_out]",
                left: self.shape(x).to_vec(),
                right: ws,
            });
        }
        if let Some(&bad) = plan.taps.iter().find(|&&t| t != NO_SLOT && t as usize >= n_in) {
            return Err(Error::Index {
                index: bad as usize,
                len: n_in,
            });
        }
        let cout = ws[1];
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; plan.outputs * cout];
        for o in 0..plan.outputs {
            let row = &mut out[o * cout..(o + 1) * cout];
            row.copy_from_slice(bv);
            for t in 0..KERNEL_TAPS {
                let slot = plan.taps[o * KERNEL_TAPS + t];
                if slot == NO_SLOT {
                    continue;
                }
                let xr = &xv[slot as usize * cin..(slot as usize + 1) * cin];
                for (ci, &a) in xr.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let wr = &wv[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                    for (r, &wk) in row.iter_mut().zip(wr) {
                        *r += a * wk;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let outputs = plan.outputs;
        Ok(self.push(vec![outputs, cout], out, Op::Conv3d { x, w, b, plan }, rg))
    }

    /// Softmax cross-entropy. Returns the scalar `scale · Σ_i CE_i` and the
    /// per-sample losses.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        scale: f64,
    ) -> Result<(Var, Vec<f64>)> {
        let (n, c) = rows_cols(self.shape(logits));
        if targets.len() != n {
            return Err(Error::Dimension {
                context: "softmax_cross_entropy targets",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Category { got: bad, classes: c });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut losses = Vec::with_capacity(n);
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let (top, mx) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            // log-sum-exp as ln(1 + rest) keeps near-zero losses precise
            let mut rest = 0.0;
            for (j, (p, &l)) in probs[i * c..(i + 1) * c].iter_mut().zip(row).enumerate() {
                *p = (l - mx).exp();
                if j != top {
                    rest += *p;
                }
            }
            let z = 1.0 + rest;
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            losses.push(rest.ln_1p() + (mx - row[targets[i]]));
        }
        let total = scale * losses.iter().sum::<f64>();
        let rg = self.rg(logits);
        let v = self.push(
            vec![1],
            vec![total],
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
                scale,
            },
            rg,
        );
        Ok((v, losses))
    }

    /// Binary cross-entropy on probabilities clamped to `[ε, 1−ε]`,
    /// returning `scale · Σ_i BCE_i`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64], scale: f64) -> Result<Var> {
        if targets.len() != self.value(p).len() {
            return Err(Error::Dimension {
                context: "binary_cross_entropy targets",
                left: self.shape(p).to_vec(),
                right: vec![targets.len()],
            });
        }
        let total: f64 = self
            .value(p)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| bce(p, t))
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            vec![1],
            vec![scale * total],
            Op::Bce {
                p,
                targets: targets.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Dimension {
                context: "backward requires a scalar output",
                left: self.shape(out).to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (n, cin) = rows_cols(self.shape(*x));
                let cout = self.shape(*w)[1];
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(gb) = slot(grads, self, *b) {
                    for i in 0..n {
                        for (a, &gi) in gb.iter_mut().zip(&g[i * cout..(i + 1) * cout]) {
                            *a += gi;
                        }
                    }
                }
                if let Some(gw) = slot(grads, self, *w) {
                    for i in 0..n {
                        let gr = &g[i * cout..(i + 1) * cout];
                        for k in 0..cin {
                            let a = xv[i * cin + k];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, &gj) in gw[k * cout..(k + 1) * cout].iter_mut().zip(gr) {
                                *o += a * gj;
                            }
                        }
                    }
                }
                if let Some(gx) = slot(grads, self, *x) {
                    for i in 0..n {
                        let gr = &g[i * cout..(i + 1) * cout];
                        for k in 0..cin {
                            let wr = &wv[k * cout..(k + 1) * cout];
                            gx[i * cin + k] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
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
                let c = self.shape(*gamma)[0];
                let n = inv_std.len();
                if let Some(gb) = slot(grads, self, *beta) {
                    for i in 0..n {
                        for (a, &gi) in gb.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *a += gi;
                        }
                    }
                }
                if let Some(gg) = slot(grads, self, *gamma) {
                    for i in 0..n {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                let gv = self.value(*gamma);
                if let Some(gx) = slot(grads, self, *x) {
                    let mut dh = vec![0.0; c];
                    for i in 0..n {
                        let h = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dh[j] = g[i * c + j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = slot(grads, self, *x) {
                    for ((o, &xi), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(gx) = slot(grads, self, *x) {
                    for ((o, &yi), &gi) in gx.iter_mut().zip(y).zip(g) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Concat { a, b } => {
                let (n, ca) = rows_cols(self.shape(*a));
                let (_, cb) = rows_cols(self.shape(*b));
                let c = ca + cb;
                if let Some(ga) = slot(grads, self, *a) {
                    for i in 0..n {
                        for (o, &gi) in ga[i * ca..(i + 1) * ca].iter_mut().zip(&g[i * c..i * c + ca]) {
                            *o += gi;
                        }
                    }
                }
                if let Some(gb) = slot(grads, self, *b) {
                    for i in 0..n {
                        for (o, &gi) in gb[i * cb..(i + 1) * cb]
                            .iter_mut()
                            .zip(&g[i * c + ca..(i + 1) * c])
                        {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(grads, self, v) {
                        for (o, &gi) in gv.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(grads, self, *a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += s * gi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(grads, self, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(grads, self, *a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let (_, c) = rows_cols(self.shape(*x));
                if let Some(gx) = slot(grads, self, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        for (o, &gi) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::MaskedMaxPool { x, argmax } => {
                if let Some(gx) = slot(grads, self, *x) {
                    for (&a, &gi) in argmax.iter().zip(g) {
                        if a != NO_SLOT {
                            gx[a as usize] += gi;
                        }
                    }
                }
            }
            Op::WeightedInterp { w, src, idx, k, sums } => {
                let k = *k;
                let (_, c) = rows_cols(self.shape(*src));
                let n = sums.len();
                let wv = self.value(*w);
                let sv = self.value(*src);
                let out = &node.value;
                if let Some(gs) = slot(grads, self, *src) {
                    for i in 0..n {
                        let gr = &g[i * c..(i + 1) * c];
                        for t in 0..k {
                            let j = idx[i * k + t] as usize;
                            let coef = if sums[i] > 0.0 {
                                wv[i * k + t] / sums[i]
                            } else {
                                1.0 / k as f64
                            };
                            for (o, &gi) in gs[j * c..(j + 1) * c].iter_mut().zip(gr) {
                                *o += coef * gi;
                            }
                        }
                    }
                }
                if let Some(gw) = slot(grads, self, *w) {
                    for i in 0..n {
                        if sums[i] <= 0.0 {
                            continue;
                        }
                        let gr = &g[i * c..(i + 1) * c];
                        let or = &out[i * c..(i + 1) * c];
                        for t in 0..k {
                            let j = idx[i * k + t] as usize;
                            let fr = &sv[j * c..(j + 1) * c];
                            let dot: f64 = gr
                                .iter()
                                .zip(fr.iter().zip(or))
                                .map(|(gi, (f, o))| gi * (f - o))
                                .sum();
                            gw[i * k + t] += dot / sums[i];
                        }
                    }
                }
            }
            Op::Conv3d { x, w, b, plan } => {
                let (_, cin) = rows_cols(self.shape(*x));
                let cout = self.shape(*w)[1];
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(gb) = slot(grads, self, *b) {
                    for o in 0..plan.outputs {
                        for (a, &gi) in gb.iter_mut().zip(&g[o * cout..(o + 1) * cout]) {
                            *a += gi;
                        }
                    }
                }
                if let Some(gw) = slot(grads, self, *w) {
                    for o in 0..plan.outputs {
                        let gr = &g[o * cout..(o + 1) * cout];
                        for t in 0..KERNEL_TAPS {
                            let slot = plan.taps[o * KERNEL_TAPS + t];
                            if slot == NO_SLOT {
                                continue;
                            }
                            let xr = &xv[slot as usize * cin..(slot as usize + 1) * cin];
                            for (ci, &a) in xr.iter().enumerate() {
                                if a == 0.0 {
                                    continue;
                                }
                                let row = (t * cin + ci) * cout;
                                for (dst, &gj) in gw[row..row + cout].iter_mut().zip(gr) {
                                    *dst += a * gj;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = slot(grads, self, *x) {
                    for o in 0..plan.outputs {
                        let gr = &g[o * cout..(o + 1) * cout];
                        for t in 0..KERNEL_TAPS {
                            let slot = plan.taps[o * KERNEL_TAPS + t];
                            if slot == NO_SLOT {
                                continue;
                            }
                            let s = slot as usize;
                            for ci in 0..cin {
                                let row = (t * cin + ci) * cout;
                                gx[s * cin + ci] += gr
                                    .iter()
                                    .zip(&wv[row..row + cout])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                scale,
            } => {
                let (_, c) = rows_cols(self.shape(*logits));
                if let Some(gl) = slot(grads, self, *logits) {
                    let s = g[0] * scale;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce { p, targets, scale } => {
                let pv = self.value(*p);
                if let Some(gp) = slot(grads, self, *p) {
                    let s = g[0] * scale;
                    for ((o, &pi), &t) in gp.iter_mut().zip(pv).zip(targets) {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pi) {
                            continue;
                        }
                        *o += s * (-t / pi + (1.0 - t) / (1.0 - pi));
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], graph: &Graph, v: Var) -> Option<&'a mut Vec<f64>> {
    if !graph.rg(v) {
        return None;
    }
    let len = graph.nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Variance floor inside [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a single probability with clamping.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Per-node gradients from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate(&self, graph: &Graph, store: &mut ParamStore) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let t = &mut store.get_mut(*id).tensor;
                if t.grad.is_none() {
                    t.zero_grad();
                }
                for (o, &gi) in t.grad.as_mut().unwrap().iter_mut().zip(g) {
                    *o += gi;
                }
            }
        }
    }
}

/// Relative error used by the gradient checks: `|a − n| / (|a| + |n| + 1e−12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences over every coordinate of `x`; returns the max relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, h, &coords)
}

/// As [`finite_difference_check`] but only over the listed coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(v).unwrap_or(&zeros);
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.values[i] += h;
        let mut minus = x.clone();
        minus.values[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store_with(w: Tensor, b: Tensor) -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let wi = s.add("w", w).unwrap();
        let bi = s.add("b", b).unwrap();
        (s, wi, bi)
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap());
        let gamma = g.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let beta = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // [1, 2, 3, 4]: mean 2.5, variance 1.25.
        let want = (1.0 - 2.5) / (1.25f64 + LAYER_NORM_EPS).sqrt();
        assert!((g.value(y)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 4]));
        let gamma = g.constant(Tensor::zeros(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![4]));
        assert!(matches!(g.layer_norm(x, gamma, beta), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_identity_and_dot() {
        let (s, w, b) = store_with(
            Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let (wv, bv) = (g.param(&s, w), g.param(&s, b));
        let y = g.linear(x, wv, bv).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let (s, w, b) = store_with(
            Tensor::from_rows(&[&[2.0], &[3.0]]).unwrap(),
            Tensor::new(vec![1], vec![1.0]).unwrap(),
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 1.0]]).unwrap());
        let (wv, bv) = (g.param(&s, w), g.param(&s, b));
        let y = g.linear(x, wv, bv).unwrap();
        assert_eq!(g.value(y), &[6.0]);
    }

    #[test]
    fn linear_zero_weights_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, w, b) = store_with(Tensor::zeros(vec![4, 3]), Tensor::zeros(vec![3]));
        let mut g = Graph::new();
        let x = g.constant(random(vec![5, 4], &mut rng));
        let (wv, bv) = (g.param(&s, w), g.param(&s, b));
        let y = g.linear(x, wv, bv).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let (s, w, b) = store_with(Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![2]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4]));
        let (wv, bv) = (g.param(&s, w), g.param(&s, b));
        let err = g.linear(x, wv, bv).unwrap_err().to_string();
        assert!(err.contains("[1, 4]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn relu_values_and_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
        let err = finite_difference_check(
            |g, x| {
                let y = g.relu(x);
                Ok(g.sum(y))
            },
            &Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_positive_region_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.5, 1.0, 7.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn sigmoid_values_and_grad() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.7) - (1.0 - sigmoid(-1.7))).abs() < 1e-15);
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert!((grads.get(x).unwrap()[0] - 0.25).abs() < 1e-15);
        let fd = (sigmoid(1e-6) - sigmoid(-1e-6)) / 2e-6;
        assert!((fd - 0.25).abs() < 1e-10);
    }

    #[test]
    fn concat_values_identity_and_split_grad() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[&[1.0]]).unwrap());
        let b = g.input(Tensor::from_rows(&[&[2.0, 3.0]]).unwrap());
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0]);

        let e = g.constant(Tensor::zeros(vec![1, 0]));
        let c2 = g.concat_channels(b, e).unwrap();
        assert_eq!(g.value(c2), g.value(b));
        assert_eq!(g.shape(c2), &[1, 2]);

        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[&[1.0]]).unwrap());
        let b = g.input(Tensor::from_rows(&[&[2.0]]).unwrap());
        let c = g.concat_channels(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0]);
    }

    #[test]
    fn concat_leading_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 1]));
        let b = g.constant(Tensor::zeros(vec![3, 1]));
        assert!(matches!(g.concat_channels(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn max_pool_cases() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let y = g.masked_max_pool(x, 1, 2, &[true, true]).unwrap();
        assert_eq!(g.value(y), &[3.0, 5.0]);
        let y1 = g.masked_max_pool(x, 1, 2, &[false, true]).unwrap();
        assert_eq!(g.value(y1), &[3.0, 2.0]);
        let y0 = g.masked_max_pool(x, 1, 2, &[false, false]).unwrap();
        assert_eq!(g.value(y0), &[0.0, 0.0]);
        let s = g.sum(y0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn max_pool_tie_goes_to_lowest_slot() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 1], vec![2.0, 2.0, 1.0]).unwrap());
        let y = g.masked_max_pool(x, 1, 3, &[true; 3]).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_cases() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(vec![3, 11]));
        let (s, per) = g.softmax_cross_entropy(l, &[0, 5, 10], 1.0 / 3.0).unwrap();
        assert!((g.scalar(s) - 11f64.ln()).abs() < 1e-12);
        assert!(per.iter().all(|&p| (p - 11f64.ln()).abs() < 1e-12));

        let mut g = Graph::new();
        let l = g.input(Tensor::from_rows(&[&[10.0, -10.0]]).unwrap());
        let (s, _) = g.softmax_cross_entropy(l, &[0], 1.0).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((g.scalar(s) - expected).abs() < 1e-20);
        assert!((g.scalar(s) - 2.06e-9).abs() < 1e-11);

        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(l, &[3], 1.0),
            Err(Error::Category { got: 3, classes: 3 })
        ));
    }

    #[test]
    fn softmax_ce_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(vec![4, 11], &mut rng);
        let err = finite_difference_check(
            |g, l| Ok(g.softmax_cross_entropy(l, &[0, 3, 7, 10], 0.25)?.0),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bce_cases() {
        assert!((bce(0.5, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce(1.0, 1.0) < 2e-7);
        assert!(bce(0.0, 0.0) < 2e-7);

        // p = 0.8 from x = ln 4; d/dx of BCE(σ(x), 1) = σ(x) − 1 = −0.2.
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(4f64.ln()));
        let p = g.sigmoid(x);
        assert!((g.value(p)[0] - 0.8).abs() < 1e-15);
        let l = g.binary_cross_entropy(p, &[1.0], 1.0).unwrap();
        let grads = g.backward(l).unwrap();
        assert!((grads.get(x).unwrap()[0] + 0.2).abs() < 1e-12);
        let err = finite_difference_check(
            |g, x| {
                let p = g.sigmoid(x);
                g.binary_cross_entropy(p, &[1.0], 1.0)
            },
            &Tensor::scalar(4f64.ln()),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fd_check_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(vec![3, 2], &mut rng);
        let err = finite_difference_check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let b = g.constant(Tensor::zeros(vec![2]));
                let y = g.linear(x, wv, b)?;
                Ok(g.sum(y))
            },
            &random(vec![4, 3], &mut rng),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn fd_check_sigmoid_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(vec![3, 2], &mut rng);
        let b = random(vec![2], &mut rng);
        let err = finite_difference_check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.linear(x, wv, bv)?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            },
            &random(vec![4, 3], &mut rng),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_check_max_pool_away_from_ties() {
        let x = Tensor::new(vec![6, 2], vec![0.1, 0.9, 0.5, 0.3, 0.7, 0.2, 0.4, 0.8, 0.6, 0.35, 0.15, 0.05])
            .unwrap();
        let mask = [true, true, true, false, true, true];
        let err = finite_difference_check(
            move |g, x| {
                let y = g.masked_max_pool(x, 2, 3, &mask)?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_check_weighted_interp_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = random(vec![4, 3], &mut rng);
        let idx = vec![0, 1, 2, 3, 1, 0];
        let w = Tensor::new(vec![2, 3], vec![0.2, 0.6, 0.4, 0.9, 0.3, 0.5]).unwrap();
        let idx2 = idx.clone();
        let src2 = src.clone();
        let err_w = finite_difference_check(
            move |g, w| {
                let s = g.constant(src2.clone());
                let y = g.weighted_interp(w, s, &idx2, 3)?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err_w < 1e-6, "{err_w}");
        let err_s = finite_difference_check(
            move |g, s| {
                let wv = g.constant(w.clone());
                let y = g.weighted_interp(wv, s, &idx, 3)?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            },
            &src,
            1e-6,
        )
        .unwrap();
        assert!(err_s < 1e-6, "{err_s}");
    }

    #[test]
    fn weighted_interp_arithmetic() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![1, 2], vec![0.2, 0.6]).unwrap());
        let s = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let y = g.weighted_interp(w, s, &[0, 1], 2).unwrap();
        assert!((g.value(y)[0] - 2.5).abs() < 1e-15);

        let w0 = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y0 = g.weighted_interp(w0, s, &[0, 1], 2).unwrap();
        assert_eq!(g.value(y0), &[2.0]);
    }

    #[test]
    fn conv3d_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [3, 2, 3];
        let vol = 18;
        let rows: Vec<Option<u32>> = (0..vol as u32).map(Some).collect();
        let outputs: Vec<usize> = (0..vol).collect();
        let plan = Arc::new(ConvPlan::new(dims, &rows, &outputs).unwrap());
        let x = random(vec![vol, 2], &mut rng);
        let w = random(vec![27 * 2, 3], &mut rng);
        let b = random(vec![3], &mut rng);
        let (p1, w1, b1) = (plan.clone(), w.clone(), b.clone());
        let err_x = finite_difference_check(
            move |g, x| {
                let wv = g.constant(w1.clone());
                let bv = g.constant(b1.clone());
                let y = g.conv3d(x, wv, bv, p1.clone())?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err_x < 1e-6, "{err_x}");
        let err_w = finite_difference_check(
            move |g, w| {
                let xv = g.constant(x.clone());
                let bv = g.constant(b.clone());
                let y = g.conv3d(xv, w, bv, plan.clone())?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err_w < 1e-6, "{err_w}");
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let y = g.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(y), &[2.0, 2.0, 1.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
        assert!(matches!(g.gather_rows(x, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn param_grads_accumulate_into_store() {
        let (mut s, w, b) = store_with(
            Tensor::from_rows(&[&[2.0], &[3.0]]).unwrap(),
            Tensor::new(vec![1], vec![1.0]).unwrap(),
        );
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&[&[1.0, -1.0]]).unwrap());
            let (wv, bv) = (g.param(&s, w), g.param(&s, b));
            let y = g.linear(x, wv, bv).unwrap();
            let l = g.sum(y);
            g.backward(l).unwrap().accumulate(&g, &mut s);
        }
        assert_eq!(s.get(w).tensor.grad().unwrap(), &[2.0, -2.0]);
        assert_eq!(s.get(b).tensor.grad().unwrap(), &[2.0]);
        s.zero_grad();
        assert_eq!(s.get(b).tensor.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(vec![1])).unwrap();
        assert!(s.add("a", Tensor::zeros(vec![1])).is_err());
        assert_eq!(s.get(ParamId(0)).momentum, vec![0.0]);
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn max_pool_invariant_under_slot_shuffle(
                vals in proptest::collection::vec(-5.0f64..5.0, 12),
                perm_seed in 0u64..1000,
            ) {
                use rand::seq::SliceRandom;
                let mut order: Vec<usize> = (0..4).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
                let shuffled: Vec<f64> = order.iter().flat_map(|&s| vals[s * 3..s * 3 + 3].to_vec()).collect();
                let mut g = Graph::new();
                let a = g.constant(Tensor::new(vec![4, 3], vals).unwrap());
                let b = g.constant(Tensor::new(vec![4, 3], shuffled).unwrap());
                let ya = g.masked_max_pool(a, 1, 4, &[true; 4]).unwrap();
                let yb = g.masked_max_pool(b, 1, 4, &[true; 4]).unwrap();
                prop_assert_eq!(g.value(ya), g.value(yb));
            }

            #[test]
            fn concat_then_split_recovers(
                a in proptest::collection::vec(-5.0f64..5.0, 6),
                b in proptest::collection::vec(-5.0f64..5.0, 9),
            ) {
                let mut g = Graph::new();
                let av = g.constant(Tensor::new(vec![3, 2], a.clone()).unwrap());
                let bv = g.constant(Tensor::new(vec![3, 3], b.clone()).unwrap());
                let c = g.concat_channels(av, bv).unwrap();
                let v = g.value(c);
                let left: Vec<f64> = (0..3).flat_map(|i| v[i * 5..i * 5 + 2].to_vec()).collect();
                let right: Vec<f64> = (0..3).flat_map(|i| v[i * 5 + 2..i * 5 + 5].to_vec()).collect();
                prop_assert_eq!(left, a);
                prop_assert_eq!(right, b);
            }

            #[test]
            fn layer_norm_gradients_match_fd(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random(vec![3, 6], &mut rng);
                let gamma = random(vec![6], &mut rng);
                let beta = random(vec![6], &mut rng);
                let mix = random(vec![6, 1], &mut rng);
                let err = finite_difference_check(
                    move |g, x| {
                        let (gm, bt, m) = (g.constant(gamma.clone()), g.constant(beta.clone()), g.constant(mix.clone()));
                        let y = g.layer_norm(x, gm, bt)?;
                        let zero = g.constant(Tensor::zeros(vec![1]));
                        let y = g.linear(y, m, zero)?;
                        Ok(g.sum(y))
                    },
                    &x,
                    1e-5,
                ).unwrap();
                prop_assert!(err < 1e-5, "{}", err);
            }

            #[test]
            fn linear_relu_gradients_match_fd(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = random(vec![3, 4], &mut rng);
                let b = random(vec![4], &mut rng);
                let x = random(vec![5, 3], &mut rng);
                // Skip inputs that sit near a ReLU kink.
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
                let pre = g.linear(xv, wv, bv).unwrap();
                prop_assume!(g.value(pre).iter().all(|v| v.abs() > 1e-3));
                let err = finite_difference_check(
                    move |g, x| {
                        let wv = g.constant(w.clone());
                        let bv = g.constant(b.clone());
                        let y = g.linear(x, wv, bv)?;
                        let y = g.relu(y);
                        let y = g.sigmoid(y);
                        Ok(g.sum(y))
                    },
                    &x,
                    1e-5,
                ).unwrap();
                prop_assert!(err < 1e-5, "{}", err);
            }

            #[test]
            fn forward_is_deterministic(seed in 0u64..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random(vec![6, 4], &mut rng);
                let run = |x: &Tensor| {
                    let mut g = Graph::new();
                    let v = g.constant(x.clone());
                    let y = g.sigmoid(v);
                    let (l, _) = g.softmax_cross_entropy(y, &[0, 1, 2, 3, 0, 1], 1.0).unwrap();
                    g.scalar(l).to_bits()
                };
                prop_assert_eq!(run(&x), run(&x));
            }
        }
    }
}
