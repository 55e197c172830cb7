//! Forward and reverse passes of the point-cloud encoder.
//!
//! Layout: EdgeConv layers run in sequence over the chain graph; every
//! layer's per-point output is concatenated, max-pooled over points, and
//! fed through the fully connected stack.
//!
//! The EdgeConv pre-activation for center `i` and neighbor `j` is
//! `x_i Wc + (x_j - x_i) Wr + b`, computed as `x_i (Wc - Wr) + x_j Wr + b`
//! so each point is multiplied once per layer instead of once per edge.

use super::graph::ChainGraph;
use super::params::{EncoderParams, Layer};
use crate::tractogram::Point;

#[inline]
pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Row-major `n x d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn zeros(n: usize, d: usize) -> Self {
        Features {
            n,
            d,
            data: vec![0.0; n * d],
        }
    }

    pub fn from_points(points: &[Point]) -> Self {
        Features {
            n: points.len(),
            d: 3,
            data: points.iter().flatten().copied().collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }
}

/// `out[i] = x[i] M` for every row, `M` given as `d_in` rows of `d_out`.
fn project(x: &Features, rows: &[f64], d_out: usize) -> Features {
    let mut out = Features::zeros(x.n, d_out);
    for i in 0..x.n {
        let dst = &mut out.data[i * d_out..(i + 1) * d_out];
        for (c, &xc) in x.row(i).iter().enumerate() {
            let m = &rows[c * d_out..(c + 1) * d_out];
            for (o, &w) in m.iter().enumerate() {
                dst[o] += xc * w;
            }
        }
    }
    out
}

/// Splits an EdgeConv weight into the center-minus-relative block and the
/// relative block.
fn split_edge_weight(layer: &Layer) -> (Vec<f64>, &[f64]) {
    let d_in = layer.inputs() / 2;
    let d_out = layer.outputs();
    let (center, relative) = layer.weight.split_at(d_in * d_out);
    let diff = center.iter().zip(relative).map(|(c, r)| c - r).collect();
    (diff, relative)
}

pub(crate) struct EdgeTrace {
    input: Features,
    /// Max pre-activation per point and channel.
    pre: Features,
    /// Neighbor achieving the max, per point and channel.
    arg: Vec<usize>,
}

pub(crate) fn edgeconv_layer(
    x: &Features,
    graph: &ChainGraph,
    layer: &Layer,
    slope: f64,
) -> (Features, EdgeTrace) {
    let d_out = layer.outputs();
    let (diff, relative) = split_edge_weight(layer);
    let a = project(x, &diff, d_out);
    let b = project(x, relative, d_out);
    let mut pre = Features::zeros(x.n, d_out);
    let mut arg = vec![0usize; x.n * d_out];
    for i in 0..x.n {
        let ai = a.row(i);
        let nbrs = graph.neighbors(i);
        for o in 0..d_out {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = nbrs[0];
            for &j in nbrs {
                let h = ai[o] + b.data[j * d_out + o] + layer.bias[o];
                if h > best {
                    best = h;
                    best_j = j;
                }
            }
            pre.data[i * d_out + o] = best;
            arg[i * d_out + o] = best_j;
        }
    }
    let out = Features {
        n: pre.n,
        d: pre.d,
        data: pre.data.iter().map(|&h| leaky(h, slope)).collect(),
    };
    (
        out,
        EdgeTrace {
            input: x.clone(),
            pre,
            arg,
        },
    )
}

/// Accumulates parameter gradients for one EdgeConv layer and returns the
/// gradient with respect to its input when `want_input` is set.
fn edgeconv_backward(
    trace: &EdgeTrace,
    d_out_grad: &Features,
    layer: &Layer,
    grad: &mut Layer,
    slope: f64,
    want_input: bool,
) -> Option<Features> {
    let x = &trace.input;
    let d_in = x.d;
    let d_out = layer.outputs();
    let mut d_a = Features::zeros(x.n, d_out);
    let mut d_b = Features::zeros(x.n, d_out);
    for i in 0..x.n {
        for o in 0..d_out {
            let idx = i * d_out + o;
            let g = d_out_grad.data[idx] * leaky_grad(trace.pre.data[idx], slope);
            if g == 0.0 {
                continue;
            }
            d_a.data[idx] += g;
            d_b.data[trace.arg[idx] * d_out + o] += g;
            grad.bias[o] += g;
        }
    }
    // Center block: dWc = x^T dA. Relative block: dWr = x^T dB - x^T dA.
    let (g_center, g_relative) = grad.weight.split_at_mut(d_in * d_out);
    for i in 0..x.n {
        let xi = x.row(i);
        let da = d_a.row(i);
        let db = d_b.row(i);
        for c in 0..d_in {
            let xc = xi[c];
            if xc == 0.0 {
                continue;
            }
            let gc = &mut g_center[c * d_out..(c + 1) * d_out];
            for o in 0..d_out {
                gc[o] += xc * da[o];
            }
            let gr = &mut g_relative[c * d_out..(c + 1) * d_out];
            for o in 0..d_out {
                gr[o] += xc * (db[o] - da[o]);
            }
        }
    }
    if !want_input {
        return None;
    }
    let (diff, relative) = split_edge_weight(layer);
    let mut dx = Features::zeros(x.n, d_in);
    for i in 0..x.n {
        let da = d_a.row(i);
        let db = d_b.row(i);
        let dst = dx.row_mut(i);
        for c in 0..d_in {
            let wd = &diff[c * d_out..(c + 1) * d_out];
            let wr = &relative[c * d_out..(c + 1) * d_out];
            let mut s = 0.0;
            for o in 0..d_out {
                s += da[o] * wd[o] + db[o] * wr[o];
            }
            dst[c] = s;
        }
    }
    Some(dx)
}

/// Everything the reverse pass needs from one forward evaluation.
pub(crate) struct Trace {
    edges: Vec<EdgeTrace>,
    /// Per pooled channel: (edgeconv layer, channel within layer, point).
    pool_arg: Vec<(usize, usize, usize)>,
    fc_inputs: Vec<Vec<f64>>,
    fc_pre: Vec<Vec<f64>>,
}

pub(crate) fn forward(
    points: &[Point],
    graph: &ChainGraph,
    params: &EncoderParams,
    slope: f64,
) -> (Vec<f64>, Trace) {
    let mut x = Features::from_points(points);
    let mut edges = Vec::with_capacity(params.edgeconv.len());
    let mut pooled = Vec::new();
    let mut pool_arg = Vec::new();
    for (l, layer) in params.edgeconv.iter().enumerate() {
        let (out, trace) = edgeconv_layer(&x, graph, layer, slope);
        for o in 0..out.d {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for i in 0..out.n {
                let v = out.data[i * out.d + o];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            pooled.push(best);
            pool_arg.push((l, o, best_i));
        }
        edges.push(trace);
        x = out;
    }

    let mut h = pooled;
    let mut fc_inputs = Vec::with_capacity(params.fc.len());
    let mut fc_pre = Vec::with_capacity(params.fc.len());
    let last = params.fc.len() - 1;
    for (l, layer) in params.fc.iter().enumerate() {
        let mut y = layer.bias.clone();
        for (c, &hc) in h.iter().enumerate() {
            for (yo, &w) in y.iter_mut().zip(layer.row(c)) {
                *yo += hc * w;
            }
        }
        fc_inputs.push(h);
        let out = if l == last {
            y.clone()
        } else {
            y.iter().map(|&v| leaky(v, slope)).collect()
        };
        fc_pre.push(y);
        h = out;
    }
    (
        h,
        Trace {
            edges,
            pool_arg,
            fc_inputs,
            fc_pre,
        },
    )
}

/// Adds `d loss / d params` into `grad` given `dz = d loss / d embedding`.
pub(crate) fn backward(
    trace: &Trace,
    dz: &[f64],
    params: &EncoderParams,
    slope: f64,
    grad: &mut EncoderParams,
) {
    let last = params.fc.len() - 1;
    let mut dh = dz.to_vec();
    for l in (0..params.fc.len()).rev() {
        let layer = &params.fc[l];
        let g = &mut grad.fc[l];
        let dpre: Vec<f64> = if l == last {
            dh
        } else {
            dh.iter()
                .zip(&trace.fc_pre[l])
                .map(|(&d, &p)| d * leaky_grad(p, slope))
                .collect()
        };
        let input = &trace.fc_inputs[l];
        for (o, &d) in dpre.iter().enumerate() {
            g.bias[o] += d;
        }
        let d_out = layer.outputs();
        let mut dx = vec![0.0; input.len()];
        for (c, &xc) in input.iter().enumerate() {
            let grow = &mut g.weight[c * d_out..(c + 1) * d_out];
            let wrow = layer.row(c);
            let mut s = 0.0;
            for o in 0..d_out {
                grow[o] += xc * dpre[o];
                s += wrow[o] * dpre[o];
            }
            dx[c] = s;
        }
        dh = dx;
    }

    // Scatter pooled gradients back to per-layer point features.
    let mut d_outs: Vec<Features> = trace
        .edges
        .iter()
        .map(|t| Features::zeros(t.pre.n, t.pre.d))
        .collect();
    for (&(l, o, i), &d) in trace.pool_arg.iter().zip(&dh) {
        let f = &mut d_outs[l];
        f.data[i * f.d + o] += d;
    }

    for l in (0..params.edgeconv.len()).rev() {
        let d_out = std::mem::replace(&mut d_outs[l], Features::zeros(0, 0));
        let dx = edgeconv_backward(
            &trace.edges[l],
            &d_out,
            &params.edgeconv[l],
            &mut grad.edgeconv[l],
            slope,
            l > 0,
        );
        if let Some(dx) = dx {
            for (acc, v) in d_outs[l - 1].data.iter_mut().zip(dx.data) {
                *acc += v;
            }
        }
    }
}
