//! Dense linear algebra helpers on top of nalgebra: polar factors,
//! orthogonal complements, pseudo-inverse solves and an ordered real Schur
//! decomposition.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen, QR, SVD};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Symmetric part `(A + Aᵀ)/2`.
pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Frobenius inner product.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Polar factor `A (AᵀA)^{-1/2}` computed from the symmetric eigendecomposition
/// of the Gram matrix.
pub fn polar_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = a.transpose() * a;
    let eig = SymmetricEigen::new(g);
    let p = eig.eigenvalues.len();
    let mut inv_sqrt = DMatrix::zeros(p, p);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    for i in 0..p {
        let l = eig.eigenvalues[i];
        if l <= scale * 1e-28 {
            return Err(Error::Singular {
                rank: eig.eigenvalues.iter().filter(|v| **v > scale * 1e-28).count(),
                dim: p,
            });
        }
        inv_sqrt[(i, i)] = 1.0 / l.sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(a * (v * inv_sqrt * v.transpose()))
}

/// Orthonormal basis (as rows) of the orthogonal complement of the column
/// space of `w`, where `w` has orthonormal columns.
pub fn complement_rows(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let k = w.ncols();
    // QR of [w | I] gives a full orthogonal factor whose first k columns span w.
    let mut m = DMatrix::zeros(n, n);
    m.columns_mut(0, k).copy_from(w);
    let mut col = k;
    let proj = DMatrix::<f64>::identity(n, n) - w * w.transpose();
    // pick the identity columns with the largest projected norm to keep [w | e_i] well conditioned
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        proj.column(b)
            .norm()
            .partial_cmp(&proj.column(a).norm())
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(n - k) {
        m[(i, col)] = 1.0;
        col += 1;
    }
    let q = QR::new(m).q();
    let mut out = q.columns(k, n - k).transpose();
    // remove any residual component along w and re-orthonormalise
    out = &out - &out * w * w.transpose();
    let c = polar_factor(&out.transpose()).expect("complement of orthonormal frame");
    c.transpose()
}

/// Least squares / minimum norm solution of `J x = r` through the SVD pseudo-inverse.
pub fn pinv_solve(j: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let svd = SVD::new(j.clone(), true, true);
    let smax = svd.singular_values.amax();
    let tol = smax * 1e-13 * (j.nrows().max(j.ncols()) as f64);
    svd.solve(r, tol).expect("svd with vectors")
}

/// Numerical rank from singular values.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = a.singular_values();
    let smax = s.amax();
    s.iter().filter(|v| **v > smax * rel_tol).count()
}

/// Random matrix with orthonormal columns.
pub fn random_stiefel<R: Rng + ?Sized>(rng: &mut R, n: usize, p: usize) -> DMatrix<f64> {
    let a = random_normal(rng, n, p);
    polar_factor(&a).expect("gaussian matrix has full rank")
}

/// Matrix of independent standard normal entries, filled column by column.
pub fn random_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, p: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    a
}

/// Real Schur form `A = Q T Qᵀ` with the selected eigenvalues moved to the
/// leading diagonal blocks.
#[derive(Debug, Clone)]
pub struct OrderedSchur {
    pub q: DMatrix<f64>,
    pub t: DMatrix<f64>,
    /// Sizes of the diagonal blocks (1 or 2) in order.
    pub blocks: Vec<usize>,
    /// Number of leading rows/columns holding the selected eigenvalues.
    pub nselected: usize,
}

fn block_eigenvalues(t: &DMatrix<f64>, i: usize, size: usize) -> Vec<Complex<f64>> {
    if size == 1 {
        vec![Complex::new(t[(i, i)], 0.0)]
    } else {
        let a = t[(i, i)];
        let b = t[(i, i + 1)];
        let c = t[(i + 1, i)];
        let d = t[(i + 1, i + 1)];
        let tr = 0.5 * (a + d);
        let disc = 0.25 * (a - d) * (a - d) + b * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            vec![Complex::new(tr + s, 0.0), Complex::new(tr - s, 0.0)]
        } else {
            let s = (-disc).sqrt();
            vec![Complex::new(tr, s), Complex::new(tr, -s)]
        }
    }
}

/// Eigenvalues of the diagonal blocks of a quasi-triangular matrix.
pub fn schur_eigenvalues(t: &DMatrix<f64>, blocks: &[usize]) -> Vec<Complex<f64>> {
    let mut out = Vec::new();
    let mut i = 0;
    for &b in blocks {
        out.extend(block_eigenvalues(t, i, b));
        i += b;
    }
    out
}

/// Exchange the adjacent diagonal blocks starting at `i` with sizes `p` and `q`.
fn swap_blocks(t: &mut DMatrix<f64>, qm: &mut DMatrix<f64>, i: usize, p: usize, q: usize) -> Result<()> {
    let a11 = t.view((i, i), (p, p)).clone_owned();
    let a12 = t.view((i, i + p), (p, q)).clone_owned();
    let a22 = t.view((i + p, i + p), (q, q)).clone_owned();
    // A11 X - X A22 = -A12, vectorised column-major
    let m = p * q;
    let mut k = DMatrix::zeros(m, m);
    for c in 0..q {
        for r in 0..p {
            let row = c * p + r;
            for s in 0..p {
                k[(row, c * p + s)] += a11[(r, s)];
            }
            for d in 0..q {
                k[(row, d * p + r)] -= a22[(d, c)];
            }
        }
    }
    let rhs = DVector::from_iterator(m, a12.iter().map(|v| -v));
    let x = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidInput("schur reordering: blocks share an eigenvalue".into()))?;
    let x = DMatrix::from_column_slice(p, q, x.as_slice());
    let s = p + q;
    let mut basis = DMatrix::zeros(s, s);
    basis.view_mut((0, 0), (p, q)).copy_from(&x);
    for j in 0..q {
        basis[(p + j, j)] = 1.0;
    }
    for j in 0..p {
        basis[(j, q + j)] = 1.0;
    }
    let qh = QR::new(basis).q();
    let rows = t.rows(i, s).clone_owned();
    t.rows_mut(i, s).copy_from(&(qh.transpose() * rows));
    let cols = t.columns(i, s).clone_owned();
    t.columns_mut(i, s).copy_from(&(cols * &qh));
    let qc = qm.columns(i, s).clone_owned();
    qm.columns_mut(i, s).copy_from(&(qc * &qh));
    for r in (i + q)..(i + s) {
        for c in i..(i + q) {
            t[(r, c)] = 0.0;
        }
    }
    Ok(())
}

/// Real Schur decomposition with the eigenvalues for which `select` is true
/// ordered first. Complex conjugate pairs are kept together: a 2×2 block is
/// selected when either of its eigenvalues is.
pub fn ordered_schur<F: Fn(Complex<f64>) -> bool>(a: &DMatrix<f64>, select: F) -> Result<OrderedSchur> {
    let n = a.nrows();
    if n != a.ncols() || n == 0 {
        return Err(Error::InvalidInput("schur needs a nonempty square matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("schur input".into()));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::InvalidInput("schur iteration did not converge".into()))?;
    let (mut q, mut t) = schur.unpack();
    let anorm = a.norm().max(f64::MIN_POSITIVE);
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > f64::EPSILON * anorm {
            blocks.push(2);
            i += 2;
        } else {
            if i + 1 < n {
                t[(i + 1, i)] = 0.0;
            }
            blocks.push(1);
            i += 1;
        }
    }
    for c in 0..n {
        for r in (c + 2)..n {
            t[(r, c)] = 0.0;
        }
    }
    let mut start = Vec::with_capacity(blocks.len());
    let mut off = 0;
    for &b in &blocks {
        start.push(off);
        off += b;
    }
    let mut selected: Vec<bool> = blocks
        .iter()
        .zip(&start)
        .map(|(&b, &s)| block_eigenvalues(&t, s, b).into_iter().any(&select))
        .collect();
    // bubble selected blocks to the front, preserving relative order
    let mut target = 0;
    for idx in 0..blocks.len() {
        if !selected[idx] {
            continue;
        }
        let mut j = idx;
        while j > target {
            let pos: usize = blocks[..j - 1].iter().sum();
            swap_blocks(&mut t, &mut q, pos, blocks[j - 1], blocks[j])?;
            blocks.swap(j - 1, j);
            selected.swap(j - 1, j);
            j -= 1;
        }
        target += 1;
    }
    let nselected = blocks.iter().zip(&selected).filter(|(_, s)| **s).map(|(b, _)| *b).sum();
    Ok(OrderedSchur { q, t, blocks, nselected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polar_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_normal(&mut rng, 6, 3);
        let p = polar_factor(&a).unwrap();
        let svd = a.clone().svd(true, true);
        let p2 = svd.u.unwrap() * svd.v_t.unwrap();
        assert!((p - p2).norm() < 1e-12);
    }

    #[test]
    fn complement_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_stiefel(&mut rng, 7, 3);
        let c = complement_rows(&w);
        assert_eq!(c.shape(), (4, 7));
        assert!((&c * c.transpose() - DMatrix::identity(4, 4)).norm() < 1e-12);
        assert!((&c * &w).norm() < 1e-12);
    }

    #[test]
    fn schur_reorders_selected_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 6;
            let a = random_normal(&mut rng, n, n);
            let ev = a.complex_eigenvalues();
            // select the eigenvalue(s) of smallest modulus
            let minmod = ev.iter().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
            let s = ordered_schur(&a, |c| (c.norm() - minmod).abs() < 1e-9).unwrap();
            let recon = &s.q * &s.t * s.q.transpose();
            assert!((recon - &a).norm() < 1e-10 * a.norm());
            let k = s.nselected;
            assert!(k == 1 || k == 2);
            let lead = schur_eigenvalues(&s.t, &s.blocks);
            assert!((lead[0].norm() - minmod).abs() < 1e-8);
            let qs = s.q.columns(0, k);
            let inv = &a * qs - qs * s.t.view((0, 0), (k, k));
            assert!(inv.norm() < 1e-10 * a.norm());
        }
    }
}
