//! Hierarchical Tucker representation of a symmetric-input multilinear map
//! `x ↦ T(x, …, x)` from `Rⁿ` to `R^ν`.
//!
//! Node matrices are stored as frames with orthonormal columns: a leaf frame
//! is `n × k_t`, an interior frame is `(k_{t1} k_{t2}) × k_t`. The root frame
//! `(k_{t1} k_{t2}) × ν` is unconstrained. Child index pairs `(q, r)` are
//! flattened as `q·k_{t2} + r`, matching the Kronecker product `v1 ⊗ v2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Node of a dimension tree; leaves own exactly one mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub lo: usize,
    pub hi: usize,
    pub children: Option<(usize, usize)>,
    pub parent: Option<usize>,
}

/// Balanced binary dimension tree, stored in pre-order (root first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimTree {
    pub nodes: Vec<TreeNode>,
}

impl DimTree {
    pub fn balanced(order: usize) -> Self {
        assert!(order >= 2, "tensor order must be at least 2");
        let mut nodes = Vec::new();
        fn build(lo: usize, hi: usize, parent: Option<usize>, nodes: &mut Vec<TreeNode>) -> usize {
            let id = nodes.len();
            nodes.push(TreeNode { lo, hi, children: None, parent });
            if hi - lo > 1 {
                let mid = lo + (hi - lo).div_ceil(2);
                let a = build(lo, mid, Some(id), nodes);
                let b = build(mid, hi, Some(id), nodes);
                nodes[id].children = Some((a, b));
            }
            id
        }
        build(0, order, None, &mut nodes);
        DimTree { nodes }
    }

    pub fn order(&self) -> usize {
        self.nodes[0].hi
    }

    pub fn is_leaf(&self, t: usize) -> bool {
        self.nodes[t].children.is_none()
    }

    pub fn depth(&self, t: usize) -> usize {
        let mut d = 0;
        let mut c = t;
        while let Some(p) = self.nodes[c].parent {
            d += 1;
            c = p;
        }
        d
    }
}

/// Hierarchical Tucker tensor of order `d` over `Rⁿ` with values in `R^ν`.
#[derive(Debug, Clone)]
pub struct HtTensor {
    pub n: usize,
    pub nu: usize,
    pub tree: DimTree,
    pub mats: Vec<DMatrix<f64>>,
}

/// Intermediate values of a batch evaluation.
pub struct Forward {
    /// Node values `k_t × N`.
    pub values: Vec<DMatrix<f64>>,
    /// Node inputs: `x` for leaves, Khatri-Rao product of child values otherwise.
    pub inputs: Vec<DMatrix<f64>>,
}

fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ka, kb) = (a.nrows(), b.nrows());
    let n = a.ncols();
    let mut out = DMatrix::zeros(ka * kb, n);
    for s in 0..n {
        for q in 0..ka {
            let aq = a[(q, s)];
            for r in 0..kb {
                out[(q * kb + r, s)] = aq * b[(r, s)];
            }
        }
    }
    out
}

impl HtTensor {
    /// Rank of each node for a uniform rank bound.
    pub fn ranks(tree: &DimTree, n: usize, nu: usize, rank: usize) -> Vec<usize> {
        let mut k = vec![0; tree.nodes.len()];
        for t in (0..tree.nodes.len()).rev() {
            k[t] = match tree.nodes[t].children {
                None => rank.min(n),
                Some((a, b)) => {
                    if t == 0 {
                        nu
                    } else {
                        rank.min(k[a] * k[b])
                    }
                }
            };
        }
        k
    }

    fn frame_shape(tree: &DimTree, k: &[usize], n: usize, t: usize) -> (usize, usize) {
        match tree.nodes[t].children {
            None => (n, k[t]),
            Some((a, b)) => (k[a] * k[b], k[t]),
        }
    }

    /// Zero tensor with orthonormal Gaussian frames and a zero root.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, order: usize, n: usize, nu: usize, rank: usize) -> Self {
        let tree = DimTree::balanced(order);
        let k = Self::ranks(&tree, n, nu, rank);
        let mats = (0..tree.nodes.len())
            .map(|t| {
                let (r, c) = Self::frame_shape(&tree, &k, n, t);
                if t == 0 {
                    DMatrix::zeros(r, c)
                } else {
                    linalg::random_stiefel(rng, r, c)
                }
            })
            .collect();
        HtTensor { n, nu, tree, mats }
    }

    pub fn order(&self) -> usize {
        self.tree.order()
    }

    pub fn num_nodes(&self) -> usize {
        self.tree.nodes.len()
    }

    pub fn rank(&self, t: usize) -> usize {
        self.mats[t].ncols()
    }

    /// Whether the frame of node `t` must have orthonormal columns.
    pub fn is_orthonormal_node(&self, t: usize) -> bool {
        t != 0
    }

    /// Batch forward pass over the columns of `x` (`n × N`).
    pub fn forward(&self, x: &DMatrix<f64>) -> Forward {
        let m = self.num_nodes();
        let mut values = vec![DMatrix::zeros(0, 0); m];
        let mut inputs = vec![DMatrix::zeros(0, 0); m];
        for t in (0..m).rev() {
            match self.tree.nodes[t].children {
                None => {
                    values[t] = self.mats[t].tr_mul(x);
                    inputs[t] = x.clone();
                }
                Some((a, b)) => {
                    let kr = khatri_rao(&values[a], &values[b]);
                    values[t] = self.mats[t].tr_mul(&kr);
                    inputs[t] = kr;
                }
            }
        }
        Forward { values, inputs }
    }

    /// `T(x, …, x)` for every column of `x`; returns `ν × N`.
    pub fn eval_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.num_nodes();
        let mut values: Vec<Option<DMatrix<f64>>> = vec![None; m];
        for t in (0..m).rev() {
            let v = match self.tree.nodes[t].children {
                None => self.mats[t].tr_mul(x),
                Some((a, b)) => {
                    let kr = khatri_rao(values[a].as_ref().unwrap(), values[b].as_ref().unwrap());
                    values[a] = None;
                    values[b] = None;
                    self.mats[t].tr_mul(&kr)
                }
            };
            values[t] = Some(v);
        }
        values[0].take().unwrap()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.eval_batch(&xm).column(0).into_owned()
    }

    /// Adjoints `k_t × N` of every node value for the objective `Σ_s ⟨g_s, T(x_s)⟩`.
    pub fn backward(&self, fwd: &Forward, g: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let m = self.num_nodes();
        let mut adj = vec![DMatrix::zeros(0, 0); m];
        adj[0] = g.clone();
        for t in 0..m {
            if let Some((a, b)) = self.tree.nodes[t].children {
                let ka = self.rank(a);
                let kb = self.rank(b);
                let big = &self.mats[t] * &adj[t];
                let n = g.ncols();
                let mut ga = DMatrix::zeros(ka, n);
                let mut gb = DMatrix::zeros(kb, n);
                let va = &fwd.values[a];
                let vb = &fwd.values[b];
                for s in 0..n {
                    for q in 0..ka {
                        let mut acc = 0.0;
                        for r in 0..kb {
                            let c = big[(q * kb + r, s)];
                            acc += c * vb[(r, s)];
                            gb[(r, s)] += c * va[(q, s)];
                        }
                        ga[(q, s)] = acc;
                    }
                }
                adj[a] = ga;
                adj[b] = gb;
            }
        }
        adj
    }

    /// Gradients of `Σ_s ⟨g_s, T(x_s)⟩` with respect to every node frame.
    pub fn grad_nodes(&self, x: &DMatrix<f64>, g: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let fwd = self.forward(x);
        let adj = self.backward(&fwd, g);
        (0..self.num_nodes()).map(|t| &fwd.inputs[t] * adj[t].transpose()).collect()
    }

    /// Gradient with respect to the frame of one node.
    pub fn grad_node(&self, t: usize, x: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
        self.grad_nodes(x, g).swap_remove(t)
    }

    /// Per-sample environment of node `t`: the output is `E_s M_tᵀ in_s`, with
    /// `E_s` the `ν × k_t` matrix stored column-major in column `s` of the
    /// returned `(ν k_t) × N` matrix.
    pub fn environment(&self, t: usize, fwd: &Forward) -> DMatrix<f64> {
        let n = fwd.values[0].ncols();
        let k = self.rank(t);
        let mut env = DMatrix::zeros(self.nu * k, n);
        for i in 0..self.nu {
            let mut g = DMatrix::zeros(self.nu, n);
            g.row_mut(i).fill(1.0);
            let adj = self.backward(fwd, &g);
            for s in 0..n {
                for p in 0..k {
                    env[(i + self.nu * p, s)] = adj[t][(p, s)];
                }
            }
        }
        env
    }

    /// Frame of node `t` expanded over its modes: `k_t × n^{|t|}`, with the
    /// leftmost mode most significant.
    fn expanded(&self, t: usize) -> DMatrix<f64> {
        match self.tree.nodes[t].children {
            None => self.mats[t].transpose(),
            Some((a, b)) => {
                let ea = self.expanded(a);
                let eb = self.expanded(b);
                let (ka, na) = ea.shape();
                let (kb, nb) = eb.shape();
                let k = self.rank(t);
                let bm = &self.mats[t];
                let mut out = DMatrix::zeros(k, na * nb);
                for p in 0..k {
                    // coefficient matrix C(q, r) = B[(q kb + r), p]
                    let c = DMatrix::from_fn(ka, kb, |q, r| bm[(q * kb + r, p)]);
                    let m = ea.transpose() * c * &eb; // na × nb
                    for i in 0..na {
                        for j in 0..nb {
                            out[(p, i * nb + j)] = m[(i, j)];
                        }
                    }
                }
                out
            }
        }
    }

    /// Dense `ν × n^d` tensor; index `(i1, …, id)` flattened with `i1` most significant.
    pub fn densify(&self) -> Result<DMatrix<f64>> {
        let size = self.n.pow(self.order() as u32);
        const LIMIT: usize = 1_000_000;
        if size > LIMIT {
            return Err(Error::TooLarge { size, limit: LIMIT });
        }
        Ok(self.expanded(0))
    }

    /// Gramians `G_t` with `G_root = I`; the singular values of the
    /// matricisation at `t` are the square roots of the eigenvalues of `G_t`.
    fn gramians(&self) -> Vec<DMatrix<f64>> {
        let m = self.num_nodes();
        let mut g = vec![DMatrix::zeros(0, 0); m];
        g[0] = DMatrix::identity(self.nu, self.nu);
        for t in 0..m {
            if let Some((a, b)) = self.tree.nodes[t].children {
                let ka = self.rank(a);
                let kb = self.rank(b);
                let bm = &self.mats[t];
                let k = bm.ncols();
                let mut ga = DMatrix::zeros(ka, ka);
                let mut gb = DMatrix::zeros(kb, kb);
                // slices C_p(q, r) = B[(q kb + r), p]
                let slices: Vec<DMatrix<f64>> =
                    (0..k).map(|p| DMatrix::from_fn(ka, kb, |q, r| bm[(q * kb + r, p)])).collect();
                for p in 0..k {
                    for pp in 0..k {
                        let w = g[t][(p, pp)];
                        if w == 0.0 {
                            continue;
                        }
                        ga += (&slices[p] * slices[pp].transpose()) * w;
                        gb += (slices[p].transpose() * &slices[pp]) * w;
                    }
                }
                g[a] = ga;
                g[b] = gb;
            }
        }
        g
    }

    /// Singular values (descending) of the matricisation of the full tensor
    /// that separates the modes of node `t` from all other indices, including
    /// the output index. For the root, the modes of the whole tensor are
    /// separated from the output index. Requires orthonormal non-root frames.
    pub fn singular_values(&self, t: usize) -> Vec<f64> {
        let mut ev: Vec<f64> = if t == 0 {
            let b = &self.mats[0];
            SymmetricEigen::new(b.tr_mul(b)).eigenvalues.iter().cloned().collect()
        } else {
            let g = self.gramians();
            SymmetricEigen::new(g[t].clone()).eigenvalues.iter().cloned().collect()
        };
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if t == 0 {
            ev.truncate(self.nu.min(self.mats[0].nrows()));
        }
        ev.into_iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Largest deviation from orthonormality among the constrained frames.
    pub fn orthonormality_defect(&self) -> f64 {
        (1..self.num_nodes())
            .map(|t| {
                let m = &self.mats[t];
                (m.tr_mul(m) - DMatrix::identity(m.ncols(), m.ncols())).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_data(&self) -> HtTensorData {
        HtTensorData {
            order: self.order(),
            n: self.n,
            nu: self.nu,
            frames: self
                .mats
                .iter()
                .map(|m| crate::model::MatrixData::from_matrix(m))
                .collect(),
        }
    }

    pub fn from_data(d: &HtTensorData) -> Result<Self> {
        let tree = DimTree::balanced(d.order);
        if d.frames.len() != tree.nodes.len() {
            return Err(Error::InvalidInput("tensor frame count does not match its tree".into()));
        }
        let mats = d.frames.iter().map(|m| m.to_matrix()).collect::<Result<Vec<_>>>()?;
        Ok(HtTensor { n: d.n, nu: d.nu, tree, mats })
    }
}

/// Serialised form of an [`HtTensor`]; frames are listed in tree pre-order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HtTensorData {
    pub order: usize,
    pub n: usize,
    pub nu: usize,
    pub frames: Vec<crate::model::MatrixData>,
}
