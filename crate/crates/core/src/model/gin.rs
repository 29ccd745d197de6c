//! Graph inception convolution.
//!
//! For every `K` branch and point `i`,
//! `y_i = sum_{j in N_i} h([A_ij; x_j - x_i])`, the branches are concatenated
//! in ascending `K` and mixed by `g`. Two exact rewrites keep the edge work
//! small: the first layer of `h` is applied to node features before taking
//! differences, and a linear last layer of `h` is moved past the neighbor sum.

use std::rc::Rc;

use crate::autodiff::{mlp_forward, Init, Mlp, ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{PctError, Result};
use crate::graph::{EdgeList, Graph, GraphSet};

/// Shapes and parameter names of one GIN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub prefix: String,
    pub ks: Vec<usize>,
    pub in_width: usize,
    /// Widths of the branch MLP `h` after its `1 + in_width` input.
    pub branch_widths: Vec<usize>,
    /// Hidden widths of the combiner `g`.
    pub combiner_widths: Vec<usize>,
    pub out_width: usize,
}

/// One neighborhood of a GIN layer as seen by the tape.
#[derive(Debug, Clone)]
pub struct BranchGraph {
    pub edges: Rc<EdgeList>,
    /// `|E| x 1` edge weights.
    pub weights: Var,
    /// Neighbors per point.
    pub degree: usize,
}

impl BranchGraph {
    /// Uses the weights stored in `graph` as constants.
    pub fn constant(tape: &mut Tape, graph: &Graph) -> Self {
        let w: Vec<f64> = graph.weights.iter().flatten().copied().collect();
        let weights = tape.input(Tensor::from_vec(w.len(), 1, w));
        BranchGraph {
            edges: Rc::new(graph.edges()),
            weights,
            degree: graph.degree(),
        }
    }

    /// Weights `exp(-|p_j - p_i|^2)` recomputed on the tape from `points`.
    pub fn differentiable(tape: &mut Tape, graph: &Graph, points: Var) -> Self {
        let edges = Rc::new(graph.edges());
        let d = tape.edge_diff(points, edges.clone());
        let sq = tape.sum_sq_rows(d);
        let neg = tape.scale(sq, -1.0);
        let weights = tape.exp(neg);
        BranchGraph {
            edges,
            weights,
            degree: graph.degree(),
        }
    }
}

impl GinLayer {
    pub fn branch_prefix(&self, k: usize) -> String {
        format!("{}.k{k}", self.prefix)
    }

    pub fn branch_out(&self) -> usize {
        *self.branch_widths.last().expect("branch widths are non-empty")
    }

    pub fn combiner(&self) -> Mlp {
        let mut widths = vec![self.ks.len() * self.branch_out()];
        widths.extend(&self.combiner_widths);
        widths.push(self.out_width);
        Mlp::new(format!("{}.g", self.prefix), widths)
    }

    fn branch_specs(&self, k: usize) -> Vec<ParamSpec> {
        let p = self.branch_prefix(k);
        let w0 = self.branch_widths[0];
        let fan_in = 1 + self.in_width;
        let mut specs = vec![
            ParamSpec {
                name: format!("{p}.l0.w_edge"),
                rows: 1,
                cols: w0,
                init: Init::Xavier { fan_in, fan_out: w0 },
            },
            ParamSpec {
                name: format!("{p}.l0.w_feat"),
                rows: self.in_width,
                cols: w0,
                init: Init::Xavier { fan_in, fan_out: w0 },
            },
            ParamSpec {
                name: format!("{p}.l0.b"),
                rows: 1,
                cols: w0,
                init: Init::Zeros,
            },
        ];
        for (l, w) in self.branch_widths.windows(2).enumerate() {
            let l = l + 1;
            specs.push(ParamSpec {
                name: format!("{p}.l{l}.w"),
                rows: w[0],
                cols: w[1],
                init: Init::Xavier { fan_in: w[0], fan_out: w[1] },
            });
            specs.push(ParamSpec {
                name: format!("{p}.l{l}.b"),
                rows: 1,
                cols: w[1],
                init: Init::Zeros,
            });
        }
        specs
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs: Vec<ParamSpec> = self.ks.iter().flat_map(|&k| self.branch_specs(k)).collect();
        specs.extend(self.combiner().param_specs());
        specs
    }

    fn branch(&self, tape: &mut Tape, k: usize, x: Var, g: &BranchGraph) -> Result<Var> {
        let p = self.branch_prefix(k);
        let params: &ParamStore = tape.params();
        let w0 = self.branch_widths[0];
        let w_edge = params.expect(&format!("{p}.l0.w_edge"), 1, w0)?;
        let w_feat = params.expect(&format!("{p}.l0.w_feat"), self.in_width, w0)?;
        let b0 = params.expect(&format!("{p}.l0.b"), 1, w0)?;
        let mut rest = Vec::new();
        for (l, w) in self.branch_widths.windows(2).enumerate() {
            let l = l + 1;
            rest.push((
                params.expect(&format!("{p}.l{l}.w"), w[0], w[1])?,
                params.expect(&format!("{p}.l{l}.b"), 1, w[1])?,
            ));
        }
        let (n, _) = tape.shape(x);
        if g.edges.nodes != n || tape.shape(g.weights) != (g.edges.len(), 1) {
            return Err(PctError::dim(format!("{p} graph"), format!("{n} nodes"), g.edges.nodes));
        }

        // First layer: A_ij w_edge + (x_j - x_i) W_feat + b = A_ij w_edge + z_j - z_i + b.
        let wf = tape.param(w_feat);
        let z = tape.matmul(x, wf);
        let we = tape.param(w_edge);
        let bias0 = tape.param(b0);

        let Some((&(w_last, b_last), middle)) = rest.split_last() else {
            let dz = tape.edge_diff(z, g.edges.clone());
            let a = tape.matmul(g.weights, we);
            let pre = tape.add(dz, a);
            let h = tape.add_row(pre, bias0);
            return Ok(tape.segment_sum(h, g.edges.clone()));
        };
        let s = if middle.is_empty() {
            tape.edge_conv(z, g.weights, we, bias0, g.edges.clone())
        } else {
            let dz = tape.edge_diff(z, g.edges.clone());
            let a = tape.matmul(g.weights, we);
            let pre = tape.add(dz, a);
            let pre = tape.add_row(pre, bias0);
            let mut h = tape.relu(pre);
            for &(w, b) in middle {
                let (w, b) = (tape.param(w), tape.param(b));
                h = tape.affine(h, w, b);
                h = tape.relu(h);
            }
            tape.segment_sum(h, g.edges.clone())
        };
        // sum_j (h_j W + b) = (sum_j h_j) W + degree * b
        let (w, b) = (tape.param(w_last), tape.param(b_last));
        let y = tape.matmul(s, w);
        let db = tape.scale(b, g.degree as f64);
        Ok(tape.add_row(y, db))
    }

    /// `x` is `n x in_width`; `graphs` holds one entry per `K` in ascending order.
    pub fn forward(&self, tape: &mut Tape, x: Var, graphs: &[BranchGraph]) -> Result<Var> {
        let (_, d) = tape.shape(x);
        if d != self.in_width {
            return Err(PctError::dim(format!("{} input", self.prefix), self.in_width, d));
        }
        if graphs.len() != self.ks.len() {
            return Err(PctError::dim(format!("{} branches", self.prefix), self.ks.len(), graphs.len()));
        }
        let mut ys = Vec::with_capacity(self.ks.len());
        for (&k, g) in self.ks.iter().zip(graphs) {
            ys.push(self.branch(tape, k, x, g)?);
        }
        let cat = if ys.len() == 1 { ys[0] } else { tape.concat_cols(&ys) };
        let g = self.combiner();
        mlp_forward(tape, cat, &g.prefix, &g.widths)
    }
}

/// Evaluates one GIN layer on fixed graphs without recording gradients for
/// the caller.
pub fn gin_conv(layer: &GinLayer, params: &ParamStore, graph_set: &GraphSet, x: &Tensor) -> Result<Tensor> {
    if graph_set.ks != layer.ks {
        return Err(PctError::dim(
            format!("{} ks", layer.prefix),
            format!("{:?}", layer.ks),
            format!("{:?}", graph_set.ks),
        ));
    }
    let mut tape = Tape::new(params);
    let xv = tape.input(x.clone());
    let graphs: Vec<BranchGraph> = graph_set.graphs.iter().map(|g| BranchGraph::constant(&mut tape, g)).collect();
    let y = layer.forward(&mut tape, xv, &graphs)?;
    Ok(tape.value(y).clone())
}
