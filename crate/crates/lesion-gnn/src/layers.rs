//! Neighborhood-aggregation layers: GCN, GraphSAGE, EdgeConv, and GAT.
//!
//! Each layer maps node features NxD_in -> NxD_out over one patient graph.
//! GCN and SAGE consume the stored distance-decay edge weights; EdgeConv
//! uses feature differences along edges; GAT learns attention coefficients
//! over the connected nodes and ignores the stored weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{normalized_adjacency, LesionGraph};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Which message-passing layer the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gcn,
    Sage,
    Edge,
    Gat,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [LayerKind::Gcn, LayerKind::Sage, LayerKind::Edge, LayerKind::Gat];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Sage => "sage",
            LayerKind::Edge => "edge",
            LayerKind::Gat => "gat",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(LayerKind::Gcn),
            "sage" => Ok(LayerKind::Sage),
            "edge" => Ok(LayerKind::Edge),
            "gat" => Ok(LayerKind::Gat),
            other => Err(Error::Param(format!("unknown layer kind '{other}'"))),
        }
    }
}

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Glorot-uniform initialization.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect())
        .expect("consistent dims")
}

/// Learnable arrays of one message-passing layer.
#[derive(Clone, Debug)]
pub enum LayerParams {
    Gcn { w: Tensor, b: Tensor },
    Sage { w_self: Tensor, w_neigh: Tensor, b: Tensor },
    Edge { w: Tensor, b: Tensor },
    Gat { w: Tensor, attn: Tensor, b: Tensor },
}

impl LayerParams {
    pub fn init(kind: LayerKind, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        match kind {
            LayerKind::Gcn => LayerParams::Gcn {
                w: glorot(d_in, d_out, rng),
                b: Tensor::zeros(1, d_out),
            },
            LayerKind::Sage => LayerParams::Sage {
                w_self: glorot(d_in, d_out, rng),
                w_neigh: glorot(d_in, d_out, rng),
                b: Tensor::zeros(1, d_out),
            },
            LayerKind::Edge => LayerParams::Edge {
                w: glorot(2 * d_in, d_out, rng),
                b: Tensor::zeros(1, d_out),
            },
            LayerKind::Gat => LayerParams::Gat {
                w: glorot(d_in, d_out, rng),
                attn: glorot(2 * d_out, 1, rng),
                b: Tensor::zeros(1, d_out),
            },
        }
    }

    pub fn zeros(kind: LayerKind, d_in: usize, d_out: usize) -> Self {
        match kind {
            LayerKind::Gcn => LayerParams::Gcn {
                w: Tensor::zeros(d_in, d_out),
                b: Tensor::zeros(1, d_out),
            },
            LayerKind::Sage => LayerParams::Sage {
                w_self: Tensor::zeros(d_in, d_out),
                w_neigh: Tensor::zeros(d_in, d_out),
                b: Tensor::zeros(1, d_out),
            },
            LayerKind::Edge => LayerParams::Edge {
                w: Tensor::zeros(2 * d_in, d_out),
                b: Tensor::zeros(1, d_out),
            },
            LayerKind::Gat => LayerParams::Gat {
                w: Tensor::zeros(d_in, d_out),
                attn: Tensor::zeros(2 * d_out, 1),
                b: Tensor::zeros(1, d_out),
            },
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Gcn { .. } => LayerKind::Gcn,
            LayerParams::Sage { .. } => LayerKind::Sage,
            LayerParams::Edge { .. } => LayerKind::Edge,
            LayerParams::Gat { .. } => LayerKind::Gat,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            LayerParams::Gcn { w, b } => vec![("w", w), ("b", b)],
            LayerParams::Sage { w_self, w_neigh, b } => {
                vec![("w_self", w_self), ("w_neigh", w_neigh), ("b", b)]
            }
            LayerParams::Edge { w, b } => vec![("w", w), ("b", b)],
            LayerParams::Gat { w, attn, b } => vec![("w", w), ("attn", attn), ("b", b)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            LayerParams::Gcn { w, b } => vec![("w", w), ("b", b)],
            LayerParams::Sage { w_self, w_neigh, b } => {
                vec![("w_self", w_self), ("w_neigh", w_neigh), ("b", b)]
            }
            LayerParams::Edge { w, b } => vec![("w", w), ("b", b)],
            LayerParams::Gat { w, attn, b } => vec![("w", w), ("attn", attn), ("b", b)],
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub enum LayerVars {
    Gcn { w: Var, b: Var },
    Sage { w_self: Var, w_neigh: Var, b: Var },
    Edge { w: Var, b: Var },
    Gat { w: Var, attn: Var, b: Var },
}

impl LayerParams {
    pub fn register(&self, tape: &mut Tape) -> LayerVars {
        match self {
            LayerParams::Gcn { w, b } => {
                LayerVars::Gcn { w: tape.param(w.clone()), b: tape.param(b.clone()) }
            }
            LayerParams::Sage { w_self, w_neigh, b } => LayerVars::Sage {
                w_self: tape.param(w_self.clone()),
                w_neigh: tape.param(w_neigh.clone()),
                b: tape.param(b.clone()),
            },
            LayerParams::Edge { w, b } => {
                LayerVars::Edge { w: tape.param(w.clone()), b: tape.param(b.clone()) }
            }
            LayerParams::Gat { w, attn, b } => LayerVars::Gat {
                w: tape.param(w.clone()),
                attn: tape.param(attn.clone()),
                b: tape.param(b.clone()),
            },
        }
    }
}

impl LayerVars {
    pub fn flat(&self) -> Vec<Var> {
        match self {
            LayerVars::Gcn { w, b } => vec![*w, *b],
            LayerVars::Sage { w_self, w_neigh, b } => vec![*w_self, *w_neigh, *b],
            LayerVars::Edge { w, b } => vec![*w, *b],
            LayerVars::Gat { w, attn, b } => vec![*w, *attn, *b],
        }
    }
}

/// Structural quantities precomputed once per graph and shared by all layer
/// kinds and forward passes.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub n: usize,
    pub features: Tensor,
    pub label: u8,
    /// Renormalized adjacency for GCN propagation.
    pub adj_norm: Tensor,
    /// Row i holds w_ij / sum_j w_ij over i's neighbors (zero row when none).
    pub mean_mat: Tensor,
    /// Directed neighbor pairs (center, neighbor), both directions, sorted.
    pub directed: Vec<(usize, usize)>,
    /// Directed pairs plus self-loops, sorted by (center, neighbor).
    pub gat_edges: Vec<(usize, usize)>,
    /// Contiguous range of `gat_edges` per center node.
    pub gat_segments: Vec<(usize, usize)>,
}

impl GraphContext {
    pub fn new(graph: &LesionGraph) -> Self {
        let n = graph.node_count();
        let adj_norm = normalized_adjacency(graph);

        let mut mean_mat = Tensor::zeros(n, n);
        let mut row_sums = vec![0.0; n];
        for &(i, j, w) in &graph.edges {
            mean_mat.set(i, j, w);
            mean_mat.set(j, i, w);
            row_sums[i] += w;
            row_sums[j] += w;
        }
        for i in 0..n {
            if row_sums[i] > 0.0 {
                for j in 0..n {
                    let v = mean_mat.get(i, j) / row_sums[i];
                    mean_mat.set(i, j, v);
                }
            }
        }

        let mut directed = Vec::with_capacity(graph.edges.len() * 2);
        for &(i, j, _) in &graph.edges {
            directed.push((i, j));
            directed.push((j, i));
        }
        directed.sort_unstable();

        let mut gat_edges = directed.clone();
        for i in 0..n {
            gat_edges.push((i, i));
        }
        gat_edges.sort_unstable();
        let mut gat_segments = Vec::with_capacity(n);
        let mut start = 0;
        for i in 0..n {
            let mut end = start;
            while end < gat_edges.len() && gat_edges[end].0 == i {
                end += 1;
            }
            gat_segments.push((start, end));
            start = end;
        }

        GraphContext {
            n,
            features: graph.feature_matrix(),
            label: graph.label,
            adj_norm,
            mean_mat,
            directed,
            gat_edges,
            gat_segments,
        }
    }
}

/// GCN propagation H' = A_norm H W + b, optionally ReLU-activated.
pub fn gcn_forward(
    tape: &mut Tape,
    h: Var,
    ctx: &GraphContext,
    w: Var,
    b: Var,
    activate: bool,
) -> Result<Var> {
    let adj = tape.constant(ctx.adj_norm.clone());
    let agg = tape.matmul(adj, h)?;
    let lin = tape.matmul(agg, w)?;
    let out = tape.add_row(lin, b)?;
    Ok(if activate { tape.relu(out) } else { out })
}

/// GraphSAGE with weighted-mean neighbor aggregation:
/// h_i' = W_self h_i + W_neigh mean_j(w_ij h_j) + b.
pub fn sage_forward(
    tape: &mut Tape,
    h: Var,
    ctx: &GraphContext,
    w_self: Var,
    w_neigh: Var,
    b: Var,
    activate: bool,
) -> Result<Var> {
    let own = tape.matmul(h, w_self)?;
    let mean = tape.constant(ctx.mean_mat.clone());
    let agg = tape.matmul(mean, h)?;
    let neigh = tape.matmul(agg, w_neigh)?;
    let sum = tape.add(own, neigh)?;
    let out = tape.add_row(sum, b)?;
    Ok(if activate { tape.relu(out) } else { out })
}

/// EdgeConv: h_i' = sum_{j in N(i)} ReLU(W [h_i ; h_j - h_i] + b). The ReLU
/// belongs to the per-edge message MLP; nodes without neighbors map to zero.
pub fn edge_forward(
    tape: &mut Tape,
    h: Var,
    ctx: &GraphContext,
    w: Var,
    b: Var,
) -> Result<Var> {
    let d_out = tape.value(w).cols();
    if ctx.directed.is_empty() {
        return Ok(tape.constant(Tensor::zeros(ctx.n, d_out)));
    }
    let centers: Vec<usize> = ctx.directed.iter().map(|&(i, _)| i).collect();
    let neighbors: Vec<usize> = ctx.directed.iter().map(|&(_, j)| j).collect();
    let hc = tape.gather_rows(h, &centers);
    let hn = tape.gather_rows(h, &neighbors);
    let diff = tape.sub(hn, hc)?;
    let cat = tape.concat_cols(hc, diff)?;
    let lin = tape.matmul(cat, w)?;
    let biased = tape.add_row(lin, b)?;
    let msg = tape.relu(biased);
    Ok(tape.scatter_add_rows(msg, &centers, ctx.n))
}

/// Single-head GAT with self-loops. Attention logits use the concatenation
/// form a^T LeakyReLU([W h_i ; W h_j]); stored edge weights are ignored.
pub fn gat_forward(
    tape: &mut Tape,
    h: Var,
    ctx: &GraphContext,
    w: Var,
    attn: Var,
    b: Var,
    activate: bool,
) -> Result<Var> {
    let d_out = tape.value(w).cols();
    let wh = tape.matmul(h, w)?;
    // split a into the halves applied to the center and neighbor embeddings
    let a_center = tape.gather_rows(attn, &(0..d_out).collect::<Vec<_>>());
    let a_neigh = tape.gather_rows(attn, &(d_out..2 * d_out).collect::<Vec<_>>());
    let u = tape.matmul(wh, a_center)?;
    let v = tape.matmul(wh, a_neigh)?;

    let centers: Vec<usize> = ctx.gat_edges.iter().map(|&(i, _)| i).collect();
    let neighbors: Vec<usize> = ctx.gat_edges.iter().map(|&(_, j)| j).collect();
    let uc = tape.gather_rows(u, &centers);
    let vn = tape.gather_rows(v, &neighbors);
    let logits = tape.add(uc, vn)?;
    let act = tape.leaky_relu(logits, LEAKY_RELU_SLOPE);
    let alpha = tape.segment_softmax(act, &ctx.gat_segments);

    let msgs = tape.gather_rows(wh, &neighbors);
    let weighted = tape.mul_col(msgs, alpha)?;
    let agg = tape.scatter_add_rows(weighted, &centers, ctx.n);
    let out = tape.add_row(agg, b)?;
    Ok(if activate { tape.relu(out) } else { out })
}

/// Dispatch one layer forward by parameter kind.
pub fn layer_forward(
    tape: &mut Tape,
    h: Var,
    ctx: &GraphContext,
    vars: &LayerVars,
    activate: bool,
) -> Result<Var> {
    match vars {
        LayerVars::Gcn { w, b } => gcn_forward(tape, h, ctx, *w, *b, activate),
        LayerVars::Sage { w_self, w_neigh, b } => {
            sage_forward(tape, h, ctx, *w_self, *w_neigh, *b, activate)
        }
        LayerVars::Edge { w, b } => edge_forward(tape, h, ctx, *w, *b),
        LayerVars::Gat { w, attn, b } => gat_forward(tape, h, ctx, *w, *attn, *b, activate),
    }
}
