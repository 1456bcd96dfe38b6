//! Block-sparse Cholesky factorization of 6×6-blocked normal equations.

use std::collections::BTreeSet;

use nalgebra::{Matrix6, Vector6};

const DAMPING_FLOOR: f64 = 1e-6;
/// A pivot that lost all but this fraction of its original magnitude during
/// elimination is treated as singular.
const PIVOT_TOL: f64 = 1e-13;

/// Elimination order and the lower-triangular block structure of `L`.
#[derive(Clone, Debug)]
pub(crate) struct Symbolic {
    /// Node eliminated at each position.
    order: Vec<usize>,
    /// Elimination position of each node.
    position: Vec<usize>,
    /// For each position, the sorted positions of the nonzero blocks below the
    /// diagonal in that block column of `L`.
    rows: Vec<Vec<usize>>,
}

impl Symbolic {
    /// Greedy minimum-degree ordering on the block graph.
    ///
    /// Ties are broken by `rank`, so the result depends only on the graph and
    /// the ranking, never on hash order.
    pub(crate) fn analyze(n: usize, edges: &[(usize, usize)], rank: &[usize]) -> Self {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        let mut queue: BTreeSet<(usize, usize, usize)> = (0..n).map(|v| (adj[v].len(), rank[v], v)).collect();
        let mut order = Vec::with_capacity(n);
        let mut structure: Vec<Vec<usize>> = vec![Vec::new(); n];
        while let Some((_, _, v)) = queue.pop_first() {
            let nbrs: Vec<usize> = adj[v].iter().copied().collect();
            for &u in &nbrs {
                queue.remove(&(adj[u].len(), rank[u], u));
                adj[u].remove(&v);
                for &w in &nbrs {
                    if w != u {
                        adj[u].insert(w);
                    }
                }
                queue.insert((adj[u].len(), rank[u], u));
            }
            adj[v].clear();
            structure[v] = nbrs;
            order.push(v);
        }
        let mut position = vec![0; n];
        for (p, &v) in order.iter().enumerate() {
            position[v] = p;
        }
        let rows = order
            .iter()
            .map(|&v| {
                let mut r: Vec<usize> = structure[v].iter().map(|&u| position[u]).collect();
                r.sort_unstable();
                r
            })
            .collect();
        Self { order, position, rows }
    }

    pub(crate) fn len(&self) -> usize {
        self.order.len()
    }

    fn slot(&self, col: usize, row: usize) -> usize {
        self.rows[col].binary_search(&row).expect("block outside symbolic structure")
    }
}

/// Symmetric block matrix `H` and right-hand side `b`, stored in elimination
/// order with only the lower triangle kept.
#[derive(Clone, Debug)]
pub(crate) struct BlockSystem<'a> {
    symbolic: &'a Symbolic,
    diag: Vec<Matrix6<f64>>,
    off: Vec<Vec<Matrix6<f64>>>,
    rhs: Vec<Vector6<f64>>,
}

impl<'a> BlockSystem<'a> {
    pub(crate) fn new(symbolic: &'a Symbolic) -> Self {
        let n = symbolic.len();
        Self {
            symbolic,
            diag: vec![Matrix6::zeros(); n],
            off: symbolic.rows.iter().map(|r| vec![Matrix6::zeros(); r.len()]).collect(),
            rhs: vec![Vector6::zeros(); n],
        }
    }

    /// Accumulates `H[a][b] += block` (and its transpose), nodes by index.
    pub(crate) fn add_block(&mut self, a: usize, b: usize, block: &Matrix6<f64>) {
        let (pa, pb) = (self.symbolic.position[a], self.symbolic.position[b]);
        if pa == pb {
            self.diag[pa] += block;
        } else if pa < pb {
            let s = self.symbolic.slot(pa, pb);
            self.off[pa][s] += block.transpose();
        } else {
            let s = self.symbolic.slot(pb, pa);
            self.off[pb][s] += block;
        }
    }

    pub(crate) fn add_rhs(&mut self, node: usize, v: &Vector6<f64>) {
        self.rhs[self.symbolic.position[node]] += v;
    }

    pub(crate) fn rhs(&self, node: usize) -> &Vector6<f64> {
        &self.rhs[self.symbolic.position[node]]
    }

    /// Cholesky factor of `H + λ·D`, where `D` is the diagonal of `H` floored at
    /// `DAMPING_FLOOR`.
    ///
    /// Returns `None` when a pivot block is not positive definite.
    pub(crate) fn factor(&self, lambda: f64) -> Option<BlockCholesky<'a>> {
        let sym = self.symbolic;
        let n = sym.len();
        let mut diag = self.diag.clone();
        let mut off = self.off.clone();
        for d in diag.iter_mut() {
            for i in 0..6 {
                d[(i, i)] += lambda * d[(i, i)].max(DAMPING_FLOOR);
            }
        }
        let original: Vec<Matrix6<f64>> = diag.clone();
        let mut inv_l = Vec::with_capacity(n);
        for p in 0..n {
            let l = diag[p].cholesky()?.l();
            if (0..6).any(|i| l[(i, i)] * l[(i, i)] <= PIVOT_TOL * original[p][(i, i)]) {
                return None;
            }
            let li = l.solve_lower_triangular(&Matrix6::identity())?;
            if !li.iter().all(|v| v.is_finite()) {
                return None;
            }
            let li_t = li.transpose();
            for blk in off[p].iter_mut() {
                *blk *= li_t;
            }
            let rows = &sym.rows[p];
            let (head, tail) = off.split_at_mut(p + 1);
            let col = &head[p];
            for a in 0..rows.len() {
                let ra = rows[a];
                diag[ra] -= col[a] * col[a].transpose();
                for b in 0..a {
                    let rb = rows[b];
                    let s = sym.slot(rb, ra);
                    tail[rb - p - 1][s] -= col[a] * col[b].transpose();
                }
            }
            inv_l.push(li);
        }
        Some(BlockCholesky { symbolic: sym, inv_l, off })
    }
}

/// `H = L Lᵀ` with `L` block lower triangular in elimination order.
#[derive(Clone, Debug)]
pub(crate) struct BlockCholesky<'a> {
    symbolic: &'a Symbolic,
    /// Inverses of the diagonal blocks of `L`.
    inv_l: Vec<Matrix6<f64>>,
    off: Vec<Vec<Matrix6<f64>>>,
}

impl BlockCholesky<'_> {
    /// Solves `H x = b` with `b` and `x` indexed by node.
    pub(crate) fn solve(&self, b: &[Vector6<f64>]) -> Vec<Vector6<f64>> {
        let sym = self.symbolic;
        let n = sym.len();
        let mut y: Vec<Vector6<f64>> = sym.order.iter().map(|&v| b[v]).collect();
        for p in 0..n {
            y[p] = self.inv_l[p] * y[p];
            let yp = y[p];
            for (s, &r) in sym.rows[p].iter().enumerate() {
                y[r] -= self.off[p][s] * yp;
            }
        }
        for p in (0..n).rev() {
            let mut acc = y[p];
            for (s, &r) in sym.rows[p].iter().enumerate() {
                acc -= self.off[p][s].transpose() * y[r];
            }
            y[p] = self.inv_l[p].transpose() * acc;
        }
        let mut x = vec![Vector6::zeros(); n];
        for (p, &v) in sym.order.iter().enumerate() {
            x[v] = y[p];
        }
        x
    }

    pub(crate) fn solve_system(&self, system: &BlockSystem<'_>) -> Vec<Vector6<f64>> {
        let n = self.symbolic.len();
        let b: Vec<Vector6<f64>> = (0..n).map(|v| *system.rhs(v)).collect();
        self.solve(&b)
    }
}
