//! Block-sparse symmetric positive definite solver for the normal equations.
//!
//! Parameter blocks are split into *structure* blocks (points, per-pair box
//! bounds), which are sparse among themselves, and *hub* blocks (poses,
//! global bounds), which end up in one dense matrix. Structure blocks are
//! eliminated one at a time in minimum-degree order; their contributions
//! fold into the hub matrix, which is then factored densely.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BlockSystem {
    dims: Vec<usize>,
    is_hub: Vec<bool>,
    /// Offset of each block in the full parameter vector.
    offset: Vec<usize>,
    /// Offset of each hub block in the dense hub matrix.
    hub_offset: Vec<usize>,
    n_hub: usize,
    /// Offset of each structure block's `d × d` diagonal in `diag`.
    diag_offset: Vec<usize>,
    diag: Vec<f64>,
    /// Structure-structure blocks `A_ab` with `a < b`, sized `d_a × d_b`.
    off: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// Per structure block, its hubs in increasing order with the offset of
    /// the `d_s × d_h` coupling `A_sh` in `arena`.
    coupling: Vec<Vec<(usize, usize)>>,
    arena: Vec<f64>,
    hub: DMatrix<f64>,
    rhs: DVector<f64>,
}

struct Factor {
    node: usize,
    /// Inverse of the node's Cholesky factor.
    l_inv: DMatrix<f64>,
    lower: Vec<(usize, DMatrix<f64>)>,
    hubs: Vec<usize>,
    /// `L⁻¹ [A_kh …]`, one column group per hub.
    x: DMatrix<f64>,
}

fn view(data: &[f64], rows: usize, cols: usize) -> DMatrixView<'_, f64> {
    DMatrixView::from_slice(data, rows, cols)
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> DMatrixViewMut<'_, f64> {
    DMatrixViewMut::from_slice(data, rows, cols)
}

impl BlockSystem {
    pub fn new(dims: Vec<usize>, is_hub: Vec<bool>) -> Self {
        assert_eq!(dims.len(), is_hub.len());
        let mut offset = Vec::with_capacity(dims.len());
        let mut hub_offset = vec![usize::MAX; dims.len()];
        let mut diag_offset = vec![usize::MAX; dims.len()];
        let (mut total, mut n_hub, mut n_diag) = (0, 0, 0);
        for (i, &d) in dims.iter().enumerate() {
            offset.push(total);
            total += d;
            if is_hub[i] {
                hub_offset[i] = n_hub;
                n_hub += d;
            } else {
                diag_offset[i] = n_diag;
                n_diag += d * d;
            }
        }
        Self {
            coupling: vec![Vec::new(); dims.len()],
            arena: Vec::new(),
            dims,
            is_hub,
            offset,
            hub_offset,
            n_hub,
            diag_offset,
            diag: vec![0.0; n_diag],
            off: BTreeMap::new(),
            hub: DMatrix::zeros(n_hub, n_hub),
            rhs: DVector::zeros(total),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offset[block]
    }

    pub fn dim(&self, block: usize) -> usize {
        self.dims[block]
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    fn diag_mut(&mut self, s: usize) -> DMatrixViewMut<'_, f64> {
        let (o, d) = (self.diag_offset[s], self.dims[s]);
        view_mut(&mut self.diag[o..o + d * d], d, d)
    }

    /// Arena offset of `A_sh`, allocated as zeros on first use.
    fn coupling_slot(&mut self, s: usize, h: usize) -> usize {
        match self.coupling[s].binary_search_by_key(&h, |e| e.0) {
            Ok(i) => self.coupling[s][i].1,
            Err(i) => {
                let o = self.arena.len();
                self.arena.resize(o + self.dims[h] * self.dims[s], 0.0);
                self.coupling[s].insert(i, (h, o));
                o
            }
        }
    }

    fn coupling_mut(&mut self, s: usize, h: usize) -> DMatrixViewMut<'_, f64> {
        let o = self.coupling_slot(s, h);
        let (ds, dh) = (self.dims[s], self.dims[h]);
        view_mut(&mut self.arena[o..o + ds * dh], ds, dh)
    }

    /// Adds `w Jᵀ J` and `w Jᵀ r` for one residual block given its
    /// per-parameter-block Jacobians.
    pub fn add_residual(&mut self, jac: &[(usize, DMatrix<f64>)], r: &DVector<f64>, w: f64) {
        for (ia, (a, ja)) in jac.iter().enumerate() {
            let off = self.offset[*a];
            self.rhs.rows_mut(off, ja.ncols()).gemv_tr(w, ja, r, 1.0);
            for (b, jb) in &jac[ia..] {
                self.add_product(*a, ja, *b, jb, w);
            }
        }
    }

    /// Adds `w J_aᵀ J_b` to the `(a, b)` block (and its transpose).
    fn add_product(&mut self, a: usize, ja: &DMatrix<f64>, b: usize, jb: &DMatrix<f64>, w: f64) {
        match (self.is_hub[a], self.is_hub[b]) {
            (false, false) if a == b => self.diag_mut(a).gemm_tr(w, ja, jb, 1.0),
            (false, false) => {
                let (key, x, y) = if a < b { ((a, b), ja, jb) } else { ((b, a), jb, ja) };
                self.off
                    .entry(key)
                    .or_insert_with(|| DMatrix::zeros(x.ncols(), y.ncols()))
                    .gemm_tr(w, x, y, 1.0);
            }
            (false, true) => self.coupling_mut(a, b).gemm_tr(w, ja, jb, 1.0),
            (true, false) => self.coupling_mut(b, a).gemm_tr(w, jb, ja, 1.0),
            (true, true) => {
                let (oa, ob) = (self.hub_offset[a], self.hub_offset[b]);
                let (da, db) = (ja.ncols(), jb.ncols());
                self.hub.view_mut((oa, ob), (da, db)).gemm_tr(w, ja, jb, 1.0);
                if a != b {
                    self.hub.view_mut((ob, oa), (db, da)).gemm_tr(w, jb, ja, 1.0);
                }
            }
        }
    }

    /// Diagonal of the assembled matrix in full-vector order.
    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.total_dim());
        for b in 0..self.n_blocks() {
            let db = self.dims[b];
            for i in 0..db {
                d[self.offset[b] + i] = if self.is_hub[b] {
                    let o = self.hub_offset[b] + i;
                    self.hub[(o, o)]
                } else {
                    self.diag[self.diag_offset[b] + i * db + i]
                };
            }
        }
        d
    }

    /// Adds `damping[i]` to the i-th diagonal entry.
    pub fn add_diagonal(&mut self, damping: &DVector<f64>) {
        for b in 0..self.n_blocks() {
            let db = self.dims[b];
            for i in 0..db {
                let v = damping[self.offset[b] + i];
                if self.is_hub[b] {
                    let o = self.hub_offset[b] + i;
                    self.hub[(o, o)] += v;
                } else {
                    self.diag[self.diag_offset[b] + i * db + i] += v;
                }
            }
        }
    }

    /// Full dense copy of the matrix (for testing).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.total_dim();
        let mut a = DMatrix::zeros(n, n);
        for b in 0..self.n_blocks() {
            let (o, d) = (self.offset[b], self.dims[b]);
            if !self.is_hub[b] {
                let od = self.diag_offset[b];
                a.view_mut((o, o), (d, d)).copy_from(&view(&self.diag[od..od + d * d], d, d));
                for &(h, oc) in &self.coupling[b] {
                    let (oh, dh) = (self.offset[h], self.dims[h]);
                    let m = view(&self.arena[oc..oc + d * dh], d, dh);
                    a.view_mut((o, oh), (d, dh)).copy_from(&m);
                    a.view_mut((oh, o), (dh, d)).copy_from(&m.transpose());
                }
            }
        }
        for (&(i, j), m) in &self.off {
            let (oi, oj) = (self.offset[i], self.offset[j]);
            a.view_mut((oi, oj), m.shape()).copy_from(m);
            a.view_mut((oj, oi), (m.ncols(), m.nrows())).copy_from(&m.transpose());
        }
        for a_blk in 0..self.n_blocks() {
            if !self.is_hub[a_blk] {
                continue;
            }
            for b_blk in 0..self.n_blocks() {
                if !self.is_hub[b_blk] {
                    continue;
                }
                let m = self.hub.view(
                    (self.hub_offset[a_blk], self.hub_offset[b_blk]),
                    (self.dims[a_blk], self.dims[b_blk]),
                );
                a.view_mut((self.offset[a_blk], self.offset[b_blk]), m.shape()).copy_from(&m);
            }
        }
        a
    }

    /// Solves `A x = rhs` by block elimination. Consumes the system.
    pub fn solve(mut self) -> Result<DVector<f64>> {
        let n = self.n_blocks();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(i, j) in self.off.keys() {
            adj[i].insert(j);
            adj[j].insert(i);
        }
        let mut queue: BTreeSet<(usize, usize)> = (0..n)
            .filter(|&i| !self.is_hub[i])
            .map(|i| (adj[i].len(), i))
            .collect();

        let mut rhs = self.rhs.clone();
        let mut factors: Vec<Factor> = Vec::with_capacity(queue.len());
        // Hub updates never feed back into structure elimination, so they
        // are deferred: nodes touching the same runs of contiguous hubs
        // are batched into one wide product at the end.
        let mut batches: BTreeMap<Vec<(usize, usize)>, Vec<f64>> = BTreeMap::new();
        while let Some((_, k)) = queue.pop_first() {
            let nbrs: Vec<usize> = core::mem::take(&mut adj[k]).into_iter().collect();
            for &i in &nbrs {
                queue.remove(&(adj[i].len(), i));
                adj[i].remove(&k);
            }
            for (a, &i) in nbrs.iter().enumerate() {
                for &j in &nbrs[a + 1..] {
                    adj[i].insert(j);
                    adj[j].insert(i);
                }
            }
            for &i in &nbrs {
                queue.insert((adj[i].len(), i));
            }

            let dk = self.dims[k];
            let ok = self.diag_offset[k];
            let akk = DMatrix::from_column_slice(dk, dk, &self.diag[ok..ok + dk * dk]);
            let l = akk
                .cholesky()
                .ok_or(Error::NumericalFailure {
                    block: alloc::format!("{k}"),
                    what: "matrix not positive definite",
                })?
                .unpack();
            let mut l_inv = DMatrix::identity(dk, dk);
            if !l.solve_lower_triangular_mut(&mut l_inv) {
                return Err(Error::NumericalFailure {
                    block: alloc::format!("{k}"),
                    what: "singular factor",
                });
            }
            // L_jk = A_jk L_kk⁻ᵀ, computed as (L_kk⁻¹ A_kj)ᵀ
            let lower: Vec<(usize, DMatrix<f64>)> = nbrs
                .iter()
                .map(|&j| {
                    let akj = if k < j {
                        self.off.remove(&(k, j)).unwrap()
                    } else {
                        self.off.remove(&(j, k)).unwrap().transpose()
                    };
                    (j, (&l_inv * akj).transpose())
                })
                .collect();

            // X = L_kk⁻¹ [A_kh₁ A_kh₂ …]
            let entries = core::mem::take(&mut self.coupling[k]);
            let hubs: Vec<usize> = entries.iter().map(|e| e.0).collect();
            let cols: usize = hubs.iter().map(|&h| self.dims[h]).sum();
            let mut a = Vec::with_capacity(dk * cols);
            for &(h, o) in &entries {
                a.extend_from_slice(&self.arena[o..o + dk * self.dims[h]]);
            }
            let x = &l_inv * DMatrix::from_vec(dk, cols, a);

            for (a, (i, lik)) in lower.iter().enumerate() {
                let mut dii = self.diag_mut(*i);
                dii.gemm(-1.0, lik, &lik.transpose(), 1.0);
                for (j, ljk) in &lower[a + 1..] {
                    let m = lik * ljk.transpose();
                    let key = (*i.min(j), *i.max(j));
                    let m = if i < j { m } else { m.transpose() };
                    match self.off.get_mut(&key) {
                        Some(x) => *x -= m,
                        None => {
                            self.off.insert(key, -m);
                        }
                    }
                }
                // A_ih -= L_ik L_hkᵀ = L_ik X_h
                let m = lik * &x;
                let mut c = 0;
                for &h in &hubs {
                    let dh = self.dims[h];
                    let mut v = self.coupling_mut(*i, h);
                    v -= m.columns(c, dh);
                    c += dh;
                }
            }
            if !hubs.is_empty() {
                let mut runs: Vec<(usize, usize)> = Vec::new();
                for &h in &hubs {
                    let (oh, dh) = (self.hub_offset[h], self.dims[h]);
                    match runs.last_mut() {
                        Some(run) if run.0 + run.1 == oh => run.1 += dh,
                        _ => runs.push((oh, dh)),
                    }
                }
                // columns of Xᵀ
                let batch = batches.entry(runs).or_default();
                for r in 0..dk {
                    batch.extend(x.row(r).iter());
                }
            }

            // forward substitution for this node
            let ok = self.offset[k];
            let yk = &l_inv * rhs.rows(ok, dk);
            rhs.rows_mut(ok, dk).copy_from(&yk);
            for (j, ljk) in &lower {
                let oj = self.offset[*j];
                let upd = ljk * &yk;
                let mut v = rhs.rows_mut(oj, upd.len());
                v -= upd;
            }
            let upd = x.tr_mul(&yk);
            let mut c = 0;
            for &h in &hubs {
                let (oh, dh) = (self.offset[h], self.dims[h]);
                let mut v = rhs.rows_mut(oh, dh);
                v -= upd.rows(c, dh);
                c += dh;
            }
            factors.push(Factor { node: k, l_inv, lower, hubs, x });
        }

        // only the lower triangle is updated; it is mirrored before factoring
        for (runs, cols) in batches {
            let rows: usize = runs.iter().map(|r| r.1).sum();
            let g = DMatrix::from_vec(rows, cols.len() / rows, cols);
            let mut ra = 0;
            for (i, &(oa, la)) in runs.iter().enumerate() {
                let mut rb = 0;
                for &(ob, lb) in &runs[..=i] {
                    let gbt = g.rows(rb, lb).transpose();
                    self.hub.view_mut((oa, ob), (la, lb)).gemm(-1.0, &g.rows(ra, la), &gbt, 1.0);
                    rb += lb;
                }
                ra += la;
            }
        }

        let mut x = DVector::zeros(self.total_dim());
        if self.n_hub > 0 {
            let mut bh = DVector::zeros(self.n_hub);
            for b in 0..n {
                if self.is_hub[b] {
                    bh.rows_mut(self.hub_offset[b], self.dims[b])
                        .copy_from(&rhs.rows(self.offset[b], self.dims[b]));
                }
            }
            self.hub.fill_upper_triangle_with_lower_triangle();
            let chol = self.hub.cholesky().ok_or(Error::NumericalFailure {
                block: "hub".into(),
                what: "matrix not positive definite",
            })?;
            let xh = chol.solve(&bh);
            for b in 0..n {
                if self.is_hub[b] {
                    x.rows_mut(self.offset[b], self.dims[b])
                        .copy_from(&xh.rows(self.hub_offset[b], self.dims[b]));
                }
            }
        }
        for f in factors.iter().rev() {
            let (ok, dk) = (self.offset[f.node], self.dims[f.node]);
            let mut v: DVector<f64> = rhs.rows(ok, dk).into_owned();
            for (j, ljk) in &f.lower {
                v -= ljk.transpose() * x.rows(self.offset[*j], self.dims[*j]);
            }
            if !f.hubs.is_empty() {
                let mut xh = DVector::zeros(f.x.ncols());
                let mut c = 0;
                for &h in &f.hubs {
                    let dh = self.dims[h];
                    xh.rows_mut(c, dh).copy_from(&x.rows(self.offset[h], dh));
                    c += dh;
                }
                v.gemv(-1.0, &f.x, &xh, 1.0);
            }
            let xk = f.l_inv.tr_mul(&v);
            x.rows_mut(ok, dk).copy_from(&xk);
        }
        Ok(x)
    }
}

/// Dense Cholesky reference solve.
pub fn dense_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a.cholesky().ok_or(Error::NumericalFailure {
        block: "dense".into(),
        what: "matrix not positive definite",
    })?;
    Ok(chol.solve(b))
}
