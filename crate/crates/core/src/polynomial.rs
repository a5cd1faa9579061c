//! Dense multivariate polynomial maps over a graded monomial basis.
//!
//! Monomials are ordered by total degree and, within a degree, in decreasing
//! lexicographic order of the exponent vector, so that the linear monomials
//! come out as `z1, z2, ...`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r = 1usize;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Number of monomials of exact degree `k` in `nvars` variables.
pub fn count_degree(nvars: usize, k: usize) -> usize {
    if nvars == 0 {
        return usize::from(k == 0);
    }
    binomial(k + nvars - 1, nvars - 1)
}

/// All exponent vectors of degree `k` in decreasing lexicographic order.
fn exponents_of_degree(nvars: usize, k: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; nvars];
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        let n = cur.len();
        if i + 1 == n {
            cur[i] = left;
            out.push(cur.clone());
            return;
        }
        for e in (0..=left).rev() {
            cur[i] = e;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    if nvars == 0 {
        if k == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(0, k as u32, &mut cur, &mut out);
    out
}

/// Full graded table of monomials of degree `0..=max_deg`, with recursion
/// data for evaluation and differentiation.
#[derive(Debug, Clone)]
struct Table {
    exps: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    /// `(parent, var)` such that `m = parent + e_var`; unused for the constant.
    parent: Vec<(usize, usize)>,
    /// For each monomial and variable: `(m_j, index of m - e_j)` when `m_j > 0`.
    deriv: Vec<Vec<Option<(f64, usize)>>>,
    offsets: Vec<usize>,
}

impl Table {
    fn new(nvars: usize, max_deg: usize) -> Self {
        let mut exps = Vec::new();
        let mut offsets = Vec::with_capacity(max_deg + 2);
        for k in 0..=max_deg {
            offsets.push(exps.len());
            exps.extend(exponents_of_degree(nvars, k));
        }
        offsets.push(exps.len());
        let index: HashMap<Vec<u32>, usize> =
            exps.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let mut parent = vec![(0, 0); exps.len()];
        let mut deriv = vec![vec![None; nvars]; exps.len()];
        for (i, e) in exps.iter().enumerate() {
            for j in 0..nvars {
                if e[j] > 0 {
                    let mut p = e.clone();
                    p[j] -= 1;
                    deriv[i][j] = Some((e[j] as f64, index[&p]));
                }
            }
            if let Some(j) = e.iter().position(|&v| v > 0) {
                let mut p = e.clone();
                p[j] -= 1;
                parent[i] = (index[&p], j);
            }
        }
        Table { exps, index, parent, deriv, offsets }
    }

    fn values(&self, z: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.exps.len()];
        v[0] = 1.0;
        for i in 1..self.exps.len() {
            let (p, j) = self.parent[i];
            v[i] = v[p] * z[j];
        }
        v
    }
}

/// Graded monomial basis in `nvars` variables with degrees `min_deg..=max_deg`.
#[derive(Debug, Clone)]
pub struct MonomialBasis {
    nvars: usize,
    min_deg: usize,
    max_deg: usize,
    table: Table,
    start: usize,
    end: usize,
}

impl PartialEq for MonomialBasis {
    fn eq(&self, other: &Self) -> bool {
        self.nvars == other.nvars && self.min_deg == other.min_deg && self.max_deg == other.max_deg
    }
}

impl MonomialBasis {
    pub fn new(nvars: usize, min_deg: usize, max_deg: usize) -> Self {
        assert!(min_deg <= max_deg, "min degree exceeds max degree");
        let table = Table::new(nvars, max_deg);
        let start = table.offsets[min_deg];
        let end = table.offsets[max_deg + 1];
        MonomialBasis { nvars, min_deg, max_deg, table, start, end }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }
    pub fn min_deg(&self) -> usize {
        self.min_deg
    }
    pub fn max_deg(&self) -> usize {
        self.max_deg
    }
    pub fn len(&self) -> usize {
        self.end - self.start
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exponent vector of basis element `i`.
    pub fn exponent(&self, i: usize) -> &[u32] {
        &self.table.exps[self.start + i]
    }

    /// Position of the exponent vector `m` in the basis, if present.
    pub fn index_of(&self, m: &[u32]) -> Option<usize> {
        self.table
            .index
            .get(m)
            .copied()
            .filter(|&i| i >= self.start && i < self.end)
            .map(|i| i - self.start)
    }

    /// Range of basis positions holding monomials of exact degree `k`.
    pub fn degree_range(&self, k: usize) -> std::ops::Range<usize> {
        if k < self.min_deg || k > self.max_deg {
            return 0..0;
        }
        (self.table.offsets[k] - self.start)..(self.table.offsets[k + 1] - self.start)
    }

    /// Values of all basis monomials at `z`.
    pub fn eval(&self, z: &[f64]) -> DVector<f64> {
        let v = self.table.values(z);
        DVector::from_column_slice(&v[self.start..self.end])
    }

    /// Monomial values for every column of `z`, as a `len × N` matrix.
    pub fn eval_batch(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let n = z.ncols();
        let mut out = DMatrix::zeros(self.len(), n);
        for k in 0..n {
            let v = self.table.values(z.column(k).as_slice());
            out.column_mut(k).copy_from_slice(&v[self.start..self.end]);
        }
        out
    }

    /// Jacobian of the monomial vector, `len × nvars`.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let v = self.table.values(z);
        let mut out = DMatrix::zeros(self.len(), self.nvars);
        for i in self.start..self.end {
            for j in 0..self.nvars {
                if let Some((c, p)) = self.table.deriv[i][j] {
                    out[(i - self.start, j)] = c * v[p];
                }
            }
        }
        out
    }

    /// Directional derivative of the monomial Jacobian along `dz`.
    pub fn jacobian_dir(&self, z: &[f64], dz: &[f64]) -> DMatrix<f64> {
        let v = self.table.values(z);
        let mut out = DMatrix::zeros(self.len(), self.nvars);
        for i in self.start..self.end {
            for j in 0..self.nvars {
                if let Some((c, p)) = self.table.deriv[i][j] {
                    let mut s = 0.0;
                    for l in 0..self.nvars {
                        if let Some((c2, p2)) = self.table.deriv[p][l] {
                            s += c2 * v[p2] * dz[l];
                        }
                    }
                    out[(i - self.start, j)] = c * s;
                }
            }
        }
        out
    }
}

/// Polynomial map `P(z) = C φ(z)` with `φ` the monomial vector.
#[derive(Debug, Clone)]
pub struct PolyMap {
    pub basis: MonomialBasis,
    /// `outdim × basis.len()` coefficients.
    pub coeffs: DMatrix<f64>,
}

impl PolyMap {
    pub fn zeros(outdim: usize, nvars: usize, min_deg: usize, max_deg: usize) -> Self {
        let basis = MonomialBasis::new(nvars, min_deg, max_deg);
        let coeffs = DMatrix::zeros(outdim, basis.len());
        PolyMap { basis, coeffs }
    }

    /// Linear map `z ↦ A z` with degrees `1..=max_deg` available.
    pub fn from_linear(a: &DMatrix<f64>, max_deg: usize) -> Self {
        let mut p = PolyMap::zeros(a.nrows(), a.ncols(), 1, max_deg.max(1));
        p.set_linear(a);
        p
    }

    pub fn outdim(&self) -> usize {
        self.coeffs.nrows()
    }
    pub fn nvars(&self) -> usize {
        self.basis.nvars()
    }

    /// Linear part `DP(0)` (requires the basis to contain degree one).
    pub fn linear_part(&self) -> DMatrix<f64> {
        let r = self.basis.degree_range(1);
        if r.is_empty() {
            return DMatrix::zeros(self.outdim(), self.nvars());
        }
        self.coeffs.columns(r.start, r.len()).clone_owned()
    }

    pub fn set_linear(&mut self, a: &DMatrix<f64>) {
        let r = self.basis.degree_range(1);
        assert_eq!(r.len(), a.ncols());
        self.coeffs.columns_mut(r.start, r.len()).copy_from(a);
    }

    pub fn eval(&self, z: &[f64]) -> DVector<f64> {
        &self.coeffs * self.basis.eval(z)
    }

    pub fn eval_batch(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        &self.coeffs * self.basis.eval_batch(z)
    }

    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        &self.coeffs * self.basis.jacobian(z)
    }

    /// `d/dt DP(z + t dz)` at `t = 0`.
    pub fn jacobian_dir(&self, z: &[f64], dz: &[f64]) -> DMatrix<f64> {
        &self.coeffs * self.basis.jacobian_dir(z, dz)
    }

    /// `Q(z) = P(M z)`, re-expanded in the basis of the new variables.
    pub fn compose_linear(&self, m: &DMatrix<f64>) -> Result<PolyMap> {
        if m.nrows() != self.nvars() {
            return Err(Error::InvalidInput(format!(
                "compose_linear: matrix has {} rows, polynomial has {} variables",
                m.nrows(),
                self.nvars()
            )));
        }
        let k = m.ncols();
        let b = &self.basis;
        let full = Table::new(k, b.max_deg());
        let out_basis = MonomialBasis::new(k, b.min_deg(), b.max_deg());
        let mut coeffs = DMatrix::zeros(self.outdim(), out_basis.len());
        // expansion of (Mz)^m for every monomial m, built by recursion on the parent table
        let src = Table::new(self.nvars(), b.max_deg());
        let nf = full.exps.len();
        let mut expansions: Vec<Vec<f64>> = Vec::with_capacity(src.exps.len());
        let mut one = vec![0.0; nf];
        one[0] = 1.0;
        expansions.push(one);
        for i in 1..src.exps.len() {
            let (p, var) = src.parent[i];
            let mut e = vec![0.0; nf];
            for (t, &c) in expansions[p].iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for j in 0..k {
                    let mji = m[(var, j)];
                    if mji == 0.0 {
                        continue;
                    }
                    let mut ex = full.exps[t].clone();
                    ex[j] += 1;
                    e[full.index[&ex]] += c * mji;
                }
            }
            expansions.push(e);
        }
        for i in 0..b.len() {
            let si = b.start + i;
            for (t, &c) in expansions[si].iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let col = out_basis.index_of(&full.exps[t]).expect("degree preserved");
                for o in 0..self.outdim() {
                    coeffs[(o, col)] += self.coeffs[(o, i)] * c;
                }
            }
        }
        Ok(PolyMap { basis: out_basis, coeffs })
    }

    /// `A · P` for a matrix `A` acting on the output.
    pub fn left_mul(&self, a: &DMatrix<f64>) -> PolyMap {
        PolyMap { basis: self.basis.clone(), coeffs: a * &self.coeffs }
    }

    pub fn to_data(&self) -> PolyMapData {
        PolyMapData {
            nvars: self.nvars(),
            min_deg: self.basis.min_deg(),
            max_deg: self.basis.max_deg(),
            outdim: self.outdim(),
            coeffs: crate::model::matrix_rows(&self.coeffs),
        }
    }

    pub fn from_data(d: &PolyMapData) -> Result<Self> {
        let basis = MonomialBasis::new(d.nvars, d.min_deg, d.max_deg);
        let coeffs = crate::model::matrix_from_rows(&d.coeffs, d.outdim, basis.len())?;
        Ok(PolyMap { basis, coeffs })
    }
}

/// Serialised form of a [`PolyMap`]; coefficient rows follow the basis order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolyMapData {
    pub nvars: usize,
    pub min_deg: usize,
    pub max_deg: usize,
    pub outdim: usize,
    pub coeffs: Vec<Vec<f64>>,
}
