use ndarray::Array2;

use crate::data::BipartiteGraph;
use crate::par;

/// Symmetric-normalized bipartite adjacency. The entry for edge `(u, i)` is
/// `1 / sqrt(deg(u) * deg(i))`; both orientations are stored so either side
/// can be produced row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct NormAdjacency {
    n_users: usize,
    n_items: usize,
    user_side: Csr,
    item_side: Csr,
}

#[derive(Clone, Debug, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Csr {
    fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[r]..self.offsets[r + 1];
        (&self.cols[span.clone()], &self.weights[span])
    }

    /// `dst = self * src`, one output row per closure call.
    fn spmm(&self, src: &Array2<f64>, dst: &mut Array2<f64>) {
        let k = src.ncols();
        let src = src.as_slice().expect("standard layout");
        let out = dst.as_slice_mut().expect("standard layout");
        par::for_each_row_mut(out, k, |r, row| {
            row.fill(0.0);
            let (cols, weights) = self.row(r);
            for (&c, &w) in cols.iter().zip(weights) {
                let s = &src[c * k..(c + 1) * k];
                for (d, &v) in row.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        });
    }
}

impl NormAdjacency {
    pub fn from_graph(graph: &BipartiteGraph) -> Self {
        Self::from_edges(graph.n_users(), graph.n_items(), graph.edges())
    }

    /// Builds the normalized adjacency of an arbitrary edge subset, with
    /// degrees taken from that subset. Edges must be distinct.
    pub fn from_edges(n_users: usize, n_items: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<(usize, usize)> = edges.into_iter().collect();
        pairs.sort_unstable();
        let mut du = vec![0usize; n_users];
        let mut di = vec![0usize; n_items];
        for &(u, i) in &pairs {
            du[u] += 1;
            di[i] += 1;
        }
        let weight = |u: usize, i: usize| 1.0 / ((du[u] * di[i]) as f64).sqrt();
        let user_side = build_csr(n_users, pairs.iter().map(|&(u, i)| (u, i, weight(u, i))));
        let mut flipped: Vec<(usize, usize)> = pairs.iter().map(|&(u, i)| (i, u)).collect();
        flipped.sort_unstable();
        let item_side = build_csr(n_items, flipped.iter().map(|&(i, u)| (i, u, weight(u, i))));
        Self {
            n_users,
            n_items,
            user_side,
            item_side,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.user_side.cols.len()
    }

    /// `(item, weight)` pairs for a user row.
    pub fn user_row(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (c, w) = self.user_side.row(u);
        c.iter().copied().zip(w.iter().copied())
    }

    /// `(user, weight)` pairs for an item row.
    pub fn item_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (c, w) = self.item_side.row(i);
        c.iter().copied().zip(w.iter().copied())
    }

    /// Mean over layers `0..=layers` of `A^l E`, where `E` stacks `users` over
    /// `items`. Linear in `E` and self-adjoint, so the same routine
    /// back-propagates gradients.
    pub fn propagate(&self, users: &Array2<f64>, items: &Array2<f64>, layers: usize) -> (Array2<f64>, Array2<f64>) {
        assert_eq!(users.nrows(), self.n_users);
        assert_eq!(items.nrows(), self.n_items);
        assert_eq!(users.ncols(), items.ncols());
        let users = users.as_standard_layout().into_owned();
        let items = items.as_standard_layout().into_owned();
        let mut acc_u = users.clone();
        let mut acc_i = items.clone();
        let mut cur_u = users;
        let mut cur_i = items;
        let mut next_u = Array2::zeros(cur_u.raw_dim());
        let mut next_i = Array2::zeros(cur_i.raw_dim());
        for _ in 0..layers {
            self.user_side.spmm(&cur_i, &mut next_u);
            self.item_side.spmm(&cur_u, &mut next_i);
            acc_u += &next_u;
            acc_i += &next_i;
            std::mem::swap(&mut cur_u, &mut next_u);
            std::mem::swap(&mut cur_i, &mut next_i);
        }
        let scale = 1.0 / (layers as f64 + 1.0);
        acc_u *= scale;
        acc_i *= scale;
        (acc_u, acc_i)
    }
}

fn build_csr(rows: usize, sorted: impl Iterator<Item = (usize, usize, f64)>) -> Csr {
    let mut offsets = vec![0usize; rows + 1];
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    for (r, c, w) in sorted {
        offsets[r + 1] += 1;
        cols.push(c);
        weights.push(w);
    }
    for r in 0..rows {
        offsets[r + 1] += offsets[r];
    }
    Csr { offsets, cols, weights }
}
