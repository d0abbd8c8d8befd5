//! User-item bipartite graphs with symmetric degree normalization.
//!
//! Node embeddings are laid out as one `(M + N) x d` row-major block, users
//! first and items after, so item `i` lives in row `M + i`.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::data::{Dataset, Edge};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("behavior {0} has no training edges")]
    EmptyBehavior(usize),
    #[error("behavior index {0} out of range")]
    UnknownBehavior(usize),
    #[error("expected {expected} gates, got {got}")]
    GateCount { expected: usize, got: usize },
    #[error("gate {index} = {value} outside [0, 1]")]
    GateRange { index: usize, value: f64 },
    #[error("embedding block has {got} values, expected {expected}")]
    Shape { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted by `(user, item)`, no duplicates.
    pub edges: Vec<Edge>,
    pub user_degrees: Vec<usize>,
    pub item_degrees: Vec<usize>,
    /// `1 / sqrt(deg(u) * deg(i))` per edge.
    pub norm_coeffs: Vec<f64>,
    // CSR views: user u owns edges user_offsets[u]..user_offsets[u+1];
    // item i owns item_edges[item_offsets[i]..item_offsets[i+1]].
    user_offsets: Vec<usize>,
    item_offsets: Vec<usize>,
    item_edges: Vec<usize>,
}

impl BipartiteGraph {
    /// Builds a graph from any edge list; duplicates are collapsed.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[Edge]) -> BipartiteGraph {
        let mut edges = edges.to_vec();
        edges.sort_unstable();
        edges.dedup();
        let mut user_degrees = vec![0usize; num_users];
        let mut item_degrees = vec![0usize; num_items];
        for &(u, i) in &edges {
            user_degrees[u] += 1;
            item_degrees[i] += 1;
        }
        let norm_coeffs = edges
            .iter()
            .map(|&(u, i)| 1.0 / ((user_degrees[u] * item_degrees[i]) as f64).sqrt())
            .collect();
        let user_offsets = prefix_offsets(&user_degrees);
        let item_offsets = prefix_offsets(&item_degrees);
        let mut cursor = item_offsets.clone();
        let mut item_edges = vec![0usize; edges.len()];
        for (e, &(_, i)) in edges.iter().enumerate() {
            item_edges[cursor[i]] = e;
            cursor[i] += 1;
        }
        BipartiteGraph {
            num_users,
            num_items,
            edges,
            user_degrees,
            item_degrees,
            norm_coeffs,
            user_offsets,
            item_offsets,
            item_edges,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// One LightGCN hop: `out[u] = sum_e gate_e * c_e * x[item_e]` and the
    /// symmetric item update. `x` and the result are `(M + N) x dim`.
    ///
    /// The operator is self-adjoint for fixed gates, so it also computes the
    /// backward pass with respect to `x`.
    pub fn propagate(
        &self,
        x: &[f64],
        dim: usize,
        gates: Option<&[f64]>,
    ) -> Result<Vec<f64>, GraphError> {
        let expected = self.num_nodes() * dim;
        if x.len() != expected {
            return Err(GraphError::Shape {
                expected,
                got: x.len(),
            });
        }
        if let Some(g) = gates {
            if g.len() != self.num_edges() {
                return Err(GraphError::GateCount {
                    expected: self.num_edges(),
                    got: g.len(),
                });
            }
        }
        let mut out = vec![0.0; expected];
        self.propagate_into(x, dim, gates, &mut out);
        Ok(out)
    }

    pub(crate) fn propagate_into(&self, x: &[f64], dim: usize, gates: Option<&[f64]>, out: &mut [f64]) {
        let m = self.num_users;
        let weight = |e: usize| match gates {
            Some(g) => g[e] * self.norm_coeffs[e],
            None => self.norm_coeffs[e],
        };
        par::for_each_row(out, dim, |row, dst| {
            if row < m {
                for e in self.user_offsets[row]..self.user_offsets[row + 1] {
                    let w = weight(e);
                    if w == 0.0 {
                        continue;
                    }
                    let src = &x[(m + self.edges[e].1) * dim..][..dim];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
                }
            } else {
                let i = row - m;
                for &e in &self.item_edges[self.item_offsets[i]..self.item_offsets[i + 1]] {
                    let w = weight(e);
                    if w == 0.0 {
                        continue;
                    }
                    let src = &x[self.edges[e].0 * dim..][..dim];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
                }
            }
        });
    }

    /// Gradient of `<grad_out, propagate(x, gates)>` with respect to each gate.
    pub(crate) fn gate_gradient(&self, x: &[f64], grad_out: &[f64], dim: usize) -> Vec<f64> {
        let m = self.num_users;
        par::map_range(self.num_edges(), |e| {
            let (u, i) = self.edges[e];
            let xu = &x[u * dim..][..dim];
            let xi = &x[(m + i) * dim..][..dim];
            let gu = &grad_out[u * dim..][..dim];
            let gi = &grad_out[(m + i) * dim..][..dim];
            let s: f64 = (0..dim).map(|k| gu[k] * xi[k] + gi[k] * xu[k]).sum();
            self.norm_coeffs[e] * s
        })
    }
}

fn prefix_offsets(degrees: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(degrees.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for d in degrees {
        acc += d;
        offsets.push(acc);
    }
    offsets
}

/// Graph of one behavior's training edges.
pub fn build_behavior_graph(ds: &Dataset, behavior: usize) -> Result<BipartiteGraph, GraphError> {
    let edges = ds.edges.get(behavior).ok_or(GraphError::UnknownBehavior(behavior))?;
    if edges.is_empty() {
        return Err(GraphError::EmptyBehavior(behavior));
    }
    Ok(BipartiteGraph::from_edges(ds.num_users, ds.num_items, edges))
}

/// Set union of every behavior's training edges.
pub fn build_global_graph(ds: &Dataset) -> BipartiteGraph {
    let union: BTreeSet<Edge> = ds.edges.iter().flatten().copied().collect();
    let edges: Vec<Edge> = union.into_iter().collect();
    BipartiteGraph::from_edges(ds.num_users, ds.num_items, &edges)
}

/// A behavior graph whose edge messages are scaled by per-edge gates.
/// Normalization coefficients stay those of the ungated base graph.
#[derive(Clone, Debug)]
pub struct GatedGraph {
    pub base: Arc<BipartiteGraph>,
    pub gates: Vec<f64>,
}

pub fn gate_graph(g: Arc<BipartiteGraph>, gates: Vec<f64>) -> Result<GatedGraph, GraphError> {
    if gates.len() != g.num_edges() {
        return Err(GraphError::GateCount {
            expected: g.num_edges(),
            got: gates.len(),
        });
    }
    if let Some((index, &value)) = gates
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(GraphError::GateRange { index, value });
    }
    Ok(GatedGraph { base: g, gates })
}

impl GatedGraph {
    pub fn propagate(&self, x: &[f64], dim: usize) -> Result<Vec<f64>, GraphError> {
        self.base.propagate(x, dim, Some(&self.gates))
    }

    /// Applies a second set of gates on top of the current ones.
    pub fn compose(&self, more: &[f64]) -> Result<GatedGraph, GraphError> {
        if more.len() != self.gates.len() {
            return Err(GraphError::GateCount {
                expected: self.gates.len(),
                got: more.len(),
            });
        }
        let gates = self.gates.iter().zip(more).map(|(a, b)| a * b).collect();
        gate_graph(self.base.clone(), gates)
    }
}
