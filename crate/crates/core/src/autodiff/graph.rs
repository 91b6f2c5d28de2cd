use std::f64::consts::PI;

use super::tape::{ParameterTape, SegmentId};
use crate::error::{Error, Result};

/// Row-major batch of vectors. Row `r` holds the value for sample `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(vec![value])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Contiguous run of samples belonging to one ray inside a composite node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySpan {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine {
        input: NodeId,
        weight: usize,
        bias: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    ExpNeg(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        input: NodeId,
        start: usize,
    },
    LinComb {
        inputs: Vec<NodeId>,
        coeffs: Vec<f64>,
    },
    RowGather {
        input: NodeId,
        rows: Vec<usize>,
    },
    ScatterBlend {
        parts: Vec<(NodeId, Vec<(usize, f64)>)>,
    },
    Gather {
        per_row: usize,
        entries: Vec<(usize, f64)>,
    },
    PosEnc {
        input: NodeId,
        window: Vec<f64>,
        identity: bool,
    },
    SquaredError {
        a: NodeId,
        b: NodeId,
        scale: f64,
    },
    Composite {
        rgb: NodeId,
        sigma: NodeId,
        spans: Vec<RaySpan>,
        deltas: Vec<f64>,
        background: [f64; 3],
        /// Transmittance before each sample, then one trailing value per ray.
        trans: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Define-by-run computation graph over a borrowed parameter tape.
///
/// A graph is built for one minibatch (or one worker's share of it), run
/// backward once, and dropped. Parameter gradients are written into a
/// caller-provided buffer so several graphs can share one tape.
pub struct Graph<'p> {
    tape: &'p ParameterTape,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(tape: &'p ParameterTape) -> Self {
        Self {
            tape,
            nodes: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'p ParameterTape {
        self.tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    /// `out[r, j] = sum_k W[j, k] * in[r, k] + b[j]` with `W` stored row-major
    /// as `out_dim x in_dim`.
    pub fn affine(&mut self, input: NodeId, weight: SegmentId, bias: SegmentId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        let in_dim = x.cols;
        let ws = self.tape.segment(weight);
        let bs = self.tape.segment(bias);
        let out_dim = bs.len;
        if ws.len != in_dim * out_dim {
            return Err(Error::shape(
                "affine",
                format!("weight of {in_dim}x{out_dim} = {}", in_dim * out_dim),
                ws.len,
            ));
        }
        let (w_off, b_off) = (ws.offset, bs.offset);
        let params = self.tape.values();
        let w = &params[w_off..w_off + ws.len];
        let b = &params[b_off..b_off + out_dim];
        let rows = x.rows;
        let mut out = Matrix::zeros(rows, out_dim);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(b);
        }
        if rows > 0 && in_dim > 0 && out_dim > 0 {
            // SAFETY: slice lengths match the (m, k, n) extents and strides below.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    in_dim,
                    out_dim,
                    1.0,
                    x.data.as_ptr(),
                    in_dim as isize,
                    1,
                    w.as_ptr(),
                    1,
                    in_dim as isize,
                    1.0,
                    out.data.as_mut_ptr(),
                    out_dim as isize,
                    1,
                );
            }
        }
        Ok(self.push(
            Op::Affine {
                input,
                weight: w_off,
                bias: b_off,
                in_dim,
                out_dim,
            },
            out,
        ))
    }

    fn map(&mut self, input: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let x = &self.nodes[input.0].value;
        let out = Matrix {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, out)
    }

    /// Subgradient at exactly zero is zero.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.map(input, Op::Relu(input), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.map(input, Op::Sigmoid(input), sigmoid)
    }

    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        self.map(input, Op::Softplus(input), softplus)
    }

    pub fn exp_neg(&mut self, input: NodeId) -> NodeId {
        self.map(input, Op::ExpNeg(input), |v| (-v).exp())
    }

    /// Column-wise concatenation; every input must have the same row count.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let rows = inputs
            .first()
            .map(|i| self.nodes[i.0].value.rows)
            .ok_or_else(|| Error::InvalidArgument("concat of zero nodes".into()))?;
        let mut cols = 0;
        for i in inputs {
            let v = &self.nodes[i.0].value;
            if v.rows != rows {
                return Err(Error::shape("concat", format!("{rows} rows"), v.shape_str()));
            }
            cols += v.cols;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut c = 0;
            for i in inputs {
                let src = self.nodes[i.0].value.row(r);
                dst[c..c + src.len()].copy_from_slice(src);
                c += src.len();
            }
        }
        Ok(self.push(Op::Concat(inputs.to_vec()), out))
    }

    /// Columns `start..start + len` of `input`.
    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        if start + len > x.cols {
            return Err(Error::shape("slice", format!("{} columns", start + len), x.cols));
        }
        let mut out = Matrix::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(Op::Slice { input, start }, out))
    }

    /// `sum_i coeffs[i] * inputs[i]` over same-shaped nodes.
    pub fn lin_comb(&mut self, inputs: &[NodeId], coeffs: &[f64]) -> Result<NodeId> {
        if inputs.is_empty() || inputs.len() != coeffs.len() {
            return Err(Error::shape("lin_comb", inputs.len(), coeffs.len()));
        }
        let first = &self.nodes[inputs[0].0].value;
        let mut out = Matrix::zeros(first.rows, first.cols);
        for (i, &c) in inputs.iter().zip(coeffs) {
            let v = &self.nodes[i.0].value;
            if v.rows != out.rows || v.cols != out.cols {
                return Err(Error::shape("lin_comb", out.shape_str(), v.shape_str()));
            }
            for (o, x) in out.data.iter_mut().zip(&v.data) {
                *o += c * x;
            }
        }
        Ok(self.push(
            Op::LinComb {
                inputs: inputs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            out,
        ))
    }

    /// Selects (and possibly repeats) rows of `input`.
    pub fn row_gather(&mut self, input: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        let mut out = Matrix::zeros(rows.len(), x.cols);
        for (dst, &src) in rows.iter().enumerate() {
            if src >= x.rows {
                return Err(Error::shape("row_gather", format!("row < {}", x.rows), src));
            }
            out.row_mut(dst).copy_from_slice(x.row(src));
        }
        Ok(self.push(Op::RowGather { input, rows }, out))
    }

    /// Weighted sum scattered into `rows` output rows: row `k` of part `p`
    /// contributes `weight * part[k]` to output row `target`, where
    /// `(target, weight)` is the `k`-th entry of that part's routing table.
    pub fn scatter_blend(
        &mut self,
        rows: usize,
        cols: usize,
        parts: Vec<(NodeId, Vec<(usize, f64)>)>,
    ) -> Result<NodeId> {
        let mut out = Matrix::zeros(rows, cols);
        for (node, routes) in &parts {
            let x = &self.nodes[node.0].value;
            if x.cols != cols || x.rows != routes.len() {
                return Err(Error::shape(
                    "scatter_blend",
                    format!("{}x{cols}", routes.len()),
                    x.shape_str(),
                ));
            }
            for (k, &(target, w)) in routes.iter().enumerate() {
                if target >= rows {
                    return Err(Error::shape("scatter_blend", format!("row < {rows}"), target));
                }
                for (o, v) in out.row_mut(target).iter_mut().zip(x.row(k)) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(Op::ScatterBlend { parts }, out))
    }

    /// Interpolated parameter lookup: `out[r, j] = sum_k w_rk * theta[idx_rk + j]`
    /// where `entries[r * per_row + k] = (idx_rk, w_rk)` index the tape's flat
    /// value array.
    pub fn gather(&mut self, width: usize, per_row: usize, entries: Vec<(usize, f64)>) -> Result<NodeId> {
        if per_row == 0 || entries.len() % per_row != 0 {
            return Err(Error::shape("gather", format!("multiple of {per_row}"), entries.len()));
        }
        let params = self.tape.values();
        let rows = entries.len() / per_row;
        let mut out = Matrix::zeros(rows, width);
        for r in 0..rows {
            let dst = out.row_mut(r);
            for &(idx, w) in &entries[r * per_row..(r + 1) * per_row] {
                if idx + width > params.len() {
                    return Err(Error::shape("gather", format!("index < {}", params.len()), idx + width));
                }
                for (o, p) in dst.iter_mut().zip(&params[idx..idx + width]) {
                    *o += w * p;
                }
            }
        }
        Ok(self.push(Op::Gather { per_row, entries }, out))
    }

    /// Positional encoding with per-band window weights.
    ///
    /// Output layout per row: `[v (if identity), w_0 sin(pi v), w_0 cos(pi v),
    /// w_1 sin(2 pi v), w_1 cos(2 pi v), ...]` where each block spans the
    /// input dimension.
    pub fn posenc(&mut self, input: NodeId, window: &[f64], identity: bool) -> NodeId {
        let x = &self.nodes[input.0].value;
        let d = x.cols;
        let cols = posenc_dim(d, window.len(), identity);
        let mut out = Matrix::zeros(x.rows, cols);
        for r in 0..x.rows {
            posenc_row(x.row(r), window, identity, out.row_mut(r));
        }
        self.push(
            Op::PosEnc {
                input,
                window: window.to_vec(),
                identity,
            },
            out,
        )
    }

    /// `scale * sum (a - b)^2` as a 1x1 node.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rows != vb.rows || va.cols != vb.cols {
            return Err(Error::shape("squared_error", va.shape_str(), vb.shape_str()));
        }
        let s: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Op::SquaredError { a, b, scale }, Matrix::scalar(scale * s)))
    }

    /// Front-to-back alpha compositing of per-sample colors (`n x 3`) and
    /// densities (`n x 1`) into one RGB row per ray.
    pub fn composite(
        &mut self,
        rgb: NodeId,
        sigma: NodeId,
        spans: Vec<RaySpan>,
        deltas: Vec<f64>,
        background: [f64; 3],
    ) -> Result<NodeId> {
        let (c, s) = (&self.nodes[rgb.0].value, &self.nodes[sigma.0].value);
        if c.cols != 3 || s.cols != 1 || c.rows != s.rows || deltas.len() != s.rows {
            return Err(Error::shape(
                "composite",
                format!("{0}x3 colors, {0}x1 densities, {0} deltas", s.rows),
                format!("{}, {}, {}", c.shape_str(), s.shape_str(), deltas.len()),
            ));
        }
        let mut out = Matrix::zeros(spans.len(), 3);
        let mut trans = Vec::with_capacity(s.rows + spans.len());
        for (ray, span) in spans.iter().enumerate() {
            if span.start + span.len > s.rows {
                return Err(Error::shape("composite", format!("span end <= {}", s.rows), span.start + span.len));
            }
            let mut t = 1.0;
            let acc = out.row_mut(ray);
            for k in span.start..span.start + span.len {
                trans.push(t);
                let next = t * (-s.data[k] * deltas[k]).exp();
                let w = t - next;
                for ch in 0..3 {
                    acc[ch] += w * c.data[3 * k + ch];
                }
                t = next;
            }
            for ch in 0..3 {
                acc[ch] += t * background[ch];
            }
            trans.push(t);
        }
        Ok(self.push(
            Op::Composite {
                rgb,
                sigma,
                spans,
                deltas,
                background,
                trans,
            },
            out,
        ))
    }

    /// Reverse sweep from a scalar node. Parameter gradients are added into
    /// `grads`, which must be as long as the tape.
    pub fn backward(&self, loss: NodeId, grads: &mut [f64]) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::NonScalarLoss {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        self.vjp(loss, &[1.0], grads).map(|_| ())
    }

    /// Vector-Jacobian product from any node with an explicit upstream
    /// gradient. Returns the adjoints that reached input nodes.
    pub fn vjp(&self, output: NodeId, upstream: &[f64], grads: &mut [f64]) -> Result<InputGrads> {
        let ov = &self.nodes[output.0].value;
        if upstream.len() != ov.data.len() {
            return Err(Error::shape("vjp", ov.data.len(), upstream.len()));
        }
        if grads.len() != self.tape.len() {
            return Err(Error::shape("backward", self.tape.len(), grads.len()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(upstream.to_vec());
        let params = self.tape.values();

        for id in (0..=output.0).rev() {
            if matches!(self.nodes[id].op, Op::Input) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Affine {
                    input,
                    weight,
                    bias,
                    in_dim,
                    out_dim,
                } => {
                    let (in_dim, out_dim) = (*in_dim, *out_dim);
                    let x = &self.nodes[input.0].value;
                    let rows = x.rows;
                    if rows == 0 {
                        continue;
                    }
                    let gw = &mut grads[*weight..*weight + in_dim * out_dim];
                    // SAFETY: extents and strides match the buffer sizes.
                    unsafe {
                        matrixmultiply::dgemm(
                            out_dim,
                            rows,
                            in_dim,
                            1.0,
                            g.as_ptr(),
                            1,
                            out_dim as isize,
                            x.data.as_ptr(),
                            in_dim as isize,
                            1,
                            1.0,
                            gw.as_mut_ptr(),
                            in_dim as isize,
                            1,
                        );
                    }
                    let gb = &mut grads[*bias..*bias + out_dim];
                    for r in 0..rows {
                        for (b, v) in gb.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                            *b += v;
                        }
                    }
                    let w = &params[*weight..*weight + in_dim * out_dim];
                    let gx = accumulate_slot(&mut adj, *input, rows * in_dim);
                    // SAFETY: as above.
                    unsafe {
                        matrixmultiply::dgemm(
                            rows,
                            out_dim,
                            in_dim,
                            1.0,
                            g.as_ptr(),
                            out_dim as isize,
                            1,
                            w.as_ptr(),
                            in_dim as isize,
                            1,
                            1.0,
                            gx.as_mut_ptr(),
                            in_dim as isize,
                            1,
                        );
                    }
                }
                Op::Relu(input) => {
                    let x = &self.nodes[input.0].value.data;
                    let gx = accumulate_slot(&mut adj, *input, x.len());
                    for ((d, &v), &u) in gx.iter_mut().zip(x).zip(&g) {
                        if v > 0.0 {
                            *d += u;
                        }
                    }
                }
                Op::Sigmoid(input) => {
                    let y = &node.value.data;
                    let gx = accumulate_slot(&mut adj, *input, y.len());
                    for ((d, &s), &u) in gx.iter_mut().zip(y).zip(&g) {
                        *d += s * (1.0 - s) * u;
                    }
                }
                Op::Softplus(input) => {
                    let x = &self.nodes[input.0].value.data;
                    let gx = accumulate_slot(&mut adj, *input, x.len());
                    for ((d, &v), &u) in gx.iter_mut().zip(x).zip(&g) {
                        *d += sigmoid(v) * u;
                    }
                }
                Op::ExpNeg(input) => {
                    let y = &node.value.data;
                    let gx = accumulate_slot(&mut adj, *input, y.len());
                    for ((d, &e), &u) in gx.iter_mut().zip(y).zip(&g) {
                        *d -= e * u;
                    }
                }
                Op::Concat(inputs) => {
                    let rows = node.value.rows;
                    let cols = node.value.cols;
                    let mut c0 = 0;
                    for i in inputs {
                        let w = self.nodes[i.0].value.cols;
                        let gx = accumulate_slot(&mut adj, *i, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gx[r * w + j] += g[r * cols + c0 + j];
                            }
                        }
                        c0 += w;
                    }
                }
                Op::Slice { input, start } => {
                    let x = &self.nodes[input.0].value;
                    let len = node.value.cols;
                    let gx = accumulate_slot(&mut adj, *input, x.rows * x.cols);
                    for r in 0..x.rows {
                        for j in 0..len {
                            gx[r * x.cols + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::LinComb { inputs, coeffs } => {
                    for (i, &c) in inputs.iter().zip(coeffs) {
                        let gx = accumulate_slot(&mut adj, *i, g.len());
                        for (d, u) in gx.iter_mut().zip(&g) {
                            *d += c * u;
                        }
                    }
                }
                Op::RowGather { input, rows } => {
                    let x = &self.nodes[input.0].value;
                    let cols = x.cols;
                    let gx = accumulate_slot(&mut adj, *input, x.rows * cols);
                    for (dst, &src) in rows.iter().enumerate() {
                        for j in 0..cols {
                            gx[src * cols + j] += g[dst * cols + j];
                        }
                    }
                }
                Op::ScatterBlend { parts } => {
                    let cols = node.value.cols;
                    for (part, routes) in parts {
                        let gx = accumulate_slot(&mut adj, *part, routes.len() * cols);
                        for (k, &(target, w)) in routes.iter().enumerate() {
                            for j in 0..cols {
                                gx[k * cols + j] += w * g[target * cols + j];
                            }
                        }
                    }
                }
                Op::Gather { per_row, entries } => {
                    let width = node.value.cols;
                    for (r, chunk) in entries.chunks(*per_row).enumerate() {
                        let gr = &g[r * width..(r + 1) * width];
                        for &(idx, w) in chunk {
                            for (p, u) in grads[idx..idx + width].iter_mut().zip(gr) {
                                *p += w * u;
                            }
                        }
                    }
                }
                Op::PosEnc {
                    input,
                    window,
                    identity,
                } => {
                    let x = &self.nodes[input.0].value;
                    let d = x.cols;
                    let cols = node.value.cols;
                    let gx = accumulate_slot(&mut adj, *input, x.rows * d);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dst = &mut gx[r * d..(r + 1) * d];
                        let mut c = 0;
                        if *identity {
                            for j in 0..d {
                                dst[j] += gr[j];
                            }
                            c = d;
                        }
                        for (k, &wk) in window.iter().enumerate() {
                            let freq = (1u64 << k) as f64 * PI;
                            for j in 0..d {
                                let a = freq * xr[j];
                                let gs = gr[c + j];
                                let gc = gr[c + d + j];
                                dst[j] += wk * freq * (a.cos() * gs - a.sin() * gc);
                            }
                            c += 2 * d;
                        }
                    }
                }
                Op::SquaredError { a, b, scale } => {
                    let va = &self.nodes[a.0].value.data;
                    let vb = &self.nodes[b.0].value.data;
                    let diff: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| 2.0 * scale * g[0] * (x - y))
                        .collect();
                    let ga = accumulate_slot(&mut adj, *a, diff.len());
                    for (d, v) in ga.iter_mut().zip(&diff) {
                        *d += v;
                    }
                    let gb = accumulate_slot(&mut adj, *b, diff.len());
                    for (d, v) in gb.iter_mut().zip(&diff) {
                        *d -= v;
                    }
                }
                Op::Composite {
                    rgb,
                    sigma,
                    spans,
                    deltas,
                    background,
                    trans,
                } => {
                    let c = &self.nodes[rgb.0].value.data;
                    let n = deltas.len();
                    let mut gc = vec![0.0; 3 * n];
                    let mut gs = vec![0.0; n];
                    let mut toff = 0;
                    for (ray, span) in spans.iter().enumerate() {
                        let gr = &g[3 * ray..3 * ray + 3];
                        let t = &trans[toff..toff + span.len + 1];
                        toff += span.len + 1;
                        let t_end = t[span.len];
                        let mut suffix = t_end * dot3(gr, background);
                        for local in (0..span.len).rev() {
                            let k = span.start + local;
                            let w = t[local] - t[local + 1];
                            let ck = &c[3 * k..3 * k + 3];
                            let gdotc = dot3(gr, ck);
                            gs[k] += deltas[k] * (t[local + 1] * gdotc - suffix);
                            for ch in 0..3 {
                                gc[3 * k + ch] += w * gr[ch];
                            }
                            suffix += w * gdotc;
                        }
                    }
                    let dst = accumulate_slot(&mut adj, *rgb, 3 * n);
                    for (d, v) in dst.iter_mut().zip(&gc) {
                        *d += v;
                    }
                    let dst = accumulate_slot(&mut adj, *sigma, n);
                    for (d, v) in dst.iter_mut().zip(&gs) {
                        *d += v;
                    }
                }
            }
        }
        Ok(InputGrads(adj))
    }
}

/// Adjoints of the input nodes after a reverse sweep.
pub struct InputGrads(Vec<Option<Vec<f64>>>);

impl InputGrads {
    /// Gradient with respect to an input node, or `None` when the output
    /// does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }
}

fn accumulate_slot(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    adj[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn posenc_dim(in_dim: usize, bands: usize, identity: bool) -> usize {
    in_dim * (usize::from(identity) + 2 * bands)
}

pub(crate) fn posenc_row(x: &[f64], window: &[f64], identity: bool, out: &mut [f64]) {
    let d = x.len();
    let mut c = 0;
    if identity {
        out[..d].copy_from_slice(x);
        c = d;
    }
    for (k, &wk) in window.iter().enumerate() {
        let freq = (1u64 << k) as f64 * PI;
        for j in 0..d {
            let a = freq * x[j];
            out[c + j] = wk * a.sin();
            out[c + d + j] = wk * a.cos();
        }
        c += 2 * d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tape_with(weights: &[f64], bias: &[f64]) -> (ParameterTape, SegmentId, SegmentId) {
        let mut tape = ParameterTape::new();
        let mut wi = weights.iter().copied();
        let w = tape.add_segment("w", weights.len(), || wi.next().unwrap());
        let mut bi = bias.iter().copied();
        let b = tape.add_segment("b", bias.len(), || bi.next().unwrap());
        (tape, w, b)
    }

    #[test]
    fn affine_identity_passes_input_through() {
        let (tape, w, b) = tape_with(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        let mut g = Graph::new(&tape);
        let x = g.input(Matrix::row_vector(vec![3.0, -1.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, -1.0]);
    }

    #[test]
    fn affine_hand_sum() {
        let (tape, w, b) = tape_with(&[1.0, 1.0], &[0.5]);
        let mut g = Graph::new(&tape);
        let x = g.input(Matrix::row_vector(vec![2.0, 3.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data, vec![5.5]);
    }

    #[test]
    fn affine_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out_dim, in_dim, rows) = (4, 3, 5);
        let wv: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xv: Vec<f64> = (0..rows * in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (tape, w, b) = tape_with(&wv, &bv);
        let mut g = Graph::new(&tape);
        let x = g.input(Matrix::from_vec(rows, in_dim, xv.clone()).unwrap());
        let y = g.affine(x, w, b).unwrap();
        for r in 0..rows {
            for j in 0..out_dim {
                let mut acc = bv[j];
                for k in 0..in_dim {
                    acc += wv[j * in_dim + k] * xv[r * in_dim + k];
                }
                assert!((g.value(y).row(r)[j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_rejects_bad_weight_shape() {
        let (tape, w, b) = tape_with(&[1.0, 2.0, 3.0], &[0.0, 0.0]);
        let mut g = Graph::new(&tape);
        let x = g.input(Matrix::row_vector(vec![1.0, 1.0]));
        assert!(matches!(g.affine(x, w, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let tape = ParameterTape::new();
        let mut g = Graph::new(&tape);
        let x = g.input(Matrix::row_vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 2.0]);
        let neg = g.input(Matrix::row_vector(vec![-3.0, -0.5]));
        let z = g.relu(neg);
        assert_eq!(g.value(z).data, vec![0.0, 0.0]);

        let grads = g.vjp(y, &[1.0, 1.0, 1.0], &mut []).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = ParameterTape::new();
        let mut g = Graph::new(&tape);
        let x = g.input(Matrix::row_vector(vec![1.0, 2.0]));
        let mut grads = vec![];
        assert!(matches!(
            g.backward(x, &mut grads),
            Err(Error::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }
}
