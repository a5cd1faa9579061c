//! Matrix manifolds used by the optimisers: Euclidean space, the Stiefel
//! manifold of orthonormal frames, the generalised orthogonal autoencoder
//! manifold and finite products of these.
//!
//! The GOAE manifold holds pairs `p = [p1 | p2]` (`n × m` and `n × l`) with
//! `p1ᵀp1 = I` and `p1ᵀp2 = M` for a fixed `m × l` matrix `M`. With `M = 0`
//! it is the orthogonal autoencoder manifold.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, sym};

/// Shape data of a GOAE manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct Goae {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub mmat: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Manifold {
    Euclidean,
    Stiefel,
    Goae(Goae),
}

/// Outcome of a GOAE retraction.
#[derive(Debug, Clone)]
pub struct RetractionReport {
    pub point: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Distance `‖p + X - R(p, X)‖` achieved.
    pub distance: f64,
}

impl Goae {
    pub fn new(n: usize, m: usize, l: usize, mmat: DMatrix<f64>) -> Self {
        assert_eq!(mmat.shape(), (m, l));
        Goae { n, m, l, mmat }
    }

    pub fn oae(n: usize, m: usize, l: usize) -> Self {
        Goae::new(n, m, l, DMatrix::zeros(m, l))
    }

    fn split(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (x.columns(0, self.m).clone_owned(), x.columns(self.m, self.l).clone_owned())
    }

    fn join(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.m + self.l);
        out.columns_mut(0, self.m).copy_from(a);
        out.columns_mut(self.m, self.l).copy_from(b);
        out
    }

    /// Constraint map `h(p) = (p1ᵀp1 - I, p1ᵀp2 - M)`.
    pub fn constraint(&self, p: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p1, p2) = self.split(p);
        (p1.tr_mul(&p1) - DMatrix::identity(self.m, self.m), p1.tr_mul(&p2) - &self.mmat)
    }

    /// Derivative of the constraint map at `p` along `x`.
    pub fn constraint_derivative(&self, p: &DMatrix<f64>, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p1, p2) = self.split(p);
        let (x1, x2) = self.split(x);
        (x1.tr_mul(&p1) + p1.tr_mul(&x1), x1.tr_mul(&p2) + p1.tr_mul(&x2))
    }

    /// Normal vector `(p1 K1 + p2 K2ᵀ, p1 K2)` for symmetric `K1` (`m × m`) and `K2` (`m × l`).
    pub fn normal_vector(&self, p: &DMatrix<f64>, k1: &DMatrix<f64>, k2: &DMatrix<f64>) -> DMatrix<f64> {
        let (p1, p2) = self.split(p);
        self.join(&(&p1 * k1 + &p2 * k2.transpose()), &(&p1 * k2))
    }

    /// Solves for the multipliers `(K1, K2)` such that `x - N(K1, K2)` is tangent.
    fn multipliers(&self, p: &DMatrix<f64>, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, p2) = self.split(p);
        let (d1, d2) = self.constraint_derivative(p, x);
        let (m, l) = (self.m, self.l);
        let g = DMatrix::identity(l, l) + p2.tr_mul(&p2);
        let mm = &self.mmat;
        let k2 = if mm.iter().all(|v| *v == 0.0) {
            let chol = g.clone().cholesky().expect("I + p2ᵀp2 is positive definite");
            chol.solve(&d2.transpose()).transpose()
        } else {
            // K2 G - (K2 MᵀM + M K2ᵀ M)/2 = D2 - D1 M/2
            let rhs = &d2 - &d1 * mm * 0.5;
            let mtm = mm.tr_mul(mm);
            let dim = m * l;
            let mut op = DMatrix::zeros(dim, dim);
            for c in 0..dim {
                let mut e = DMatrix::zeros(m, l);
                e[(c % m, c / m)] = 1.0;
                let img = &e * &g - (&e * &mtm + mm * e.transpose() * mm) * 0.5;
                op.column_mut(c).copy_from_slice(img.as_slice());
            }
            let sol = op
                .lu()
                .solve(&DVector::from_column_slice(rhs.as_slice()))
                .expect("GOAE projection system is nonsingular near the manifold");
            DMatrix::from_column_slice(m, l, sol.as_slice())
        };
        let k1 = (&d1 - &k2 * mm.transpose() - mm * k2.transpose()) * 0.5;
        (k1, k2)
    }

    pub fn project(&self, p: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (k1, k2) = self.multipliers(p, x);
        x - self.normal_vector(p, &k1, &k2)
    }

    /// Closest point projection of `p + x` onto the manifold.
    ///
    /// The stationarity conditions reduce to `p1 a = q1 + q2 Mᵀ - q2 q2ᵀ p1`
    /// with `p1ᵀp1 = I` and `a` symmetric, then `p2 = q2 - p1 (p1ᵀq2 - M)`.
    /// The square system in `(p1, a)` is solved by Newton's method with a
    /// pseudo-inverse Jacobian, seeded at the current point.
    pub fn retract_report(&self, p: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<RetractionReport> {
        let (n, m) = (self.n, self.m);
        let q = p + x;
        let (q1, q2) = self.split(&q);
        let (mut p1, _) = self.split(p);
        let base = &q1 + &q2 * self.mmat.transpose();
        let q2q2t = &q2 * q2.transpose();
        let rhs = |p1: &DMatrix<f64>| &base - &q2q2t * p1;
        let mut a = sym(&p1.tr_mul(&rhs(&p1)));
        let nsym = m * (m + 1) / 2;
        let nskew = m * (m - 1) / 2;
        let neq = n * m + nsym + nskew;
        let nunk = n * m + m * m;
        let residual = |p1: &DMatrix<f64>, a: &DMatrix<f64>| -> DVector<f64> {
            let mut r = DVector::zeros(neq);
            let e1 = p1 * a - rhs(p1);
            r.rows_mut(0, n * m).copy_from_slice(e1.as_slice());
            let e2 = p1.tr_mul(p1) - DMatrix::identity(m, m);
            let mut k = n * m;
            for j in 0..m {
                for i in 0..=j {
                    r[k] = e2[(i, j)];
                    k += 1;
                }
            }
            for j in 0..m {
                for i in 0..j {
                    r[k] = a[(i, j)] - a[(j, i)];
                    k += 1;
                }
            }
            r
        };
        let scale = 1.0f64.max(q.norm());
        let tol = 1e-12 * scale;
        let mut res = residual(&p1, &a);
        let mut it = 0;
        while res.norm() > tol {
            if it == 50 {
                return Err(Error::Retraction { residual: res.norm() });
            }
            let mut jac = DMatrix::zeros(neq, nunk);
            for c in 0..nunk {
                let (dp1, da) = if c < n * m {
                    let mut d = DMatrix::zeros(n, m);
                    d[(c % n, c / n)] = 1.0;
                    (d, DMatrix::zeros(m, m))
                } else {
                    let cc = c - n * m;
                    let mut d = DMatrix::zeros(m, m);
                    d[(cc % m, cc / m)] = 1.0;
                    (DMatrix::zeros(n, m), d)
                };
                let e1 = &dp1 * &a + &p1 * &da + &q2q2t * &dp1;
                let e2 = dp1.tr_mul(&p1) + p1.tr_mul(&dp1);
                let mut col = DVector::zeros(neq);
                col.rows_mut(0, n * m).copy_from_slice(e1.as_slice());
                let mut k = n * m;
                for j in 0..m {
                    for i in 0..=j {
                        col[k] = e2[(i, j)];
                        k += 1;
                    }
                }
                for j in 0..m {
                    for i in 0..j {
                        col[k] = da[(i, j)] - da[(j, i)];
                        k += 1;
                    }
                }
                jac.set_column(c, &col);
            }
            let step = linalg::pinv_solve(&jac, &res);
            p1 -= DMatrix::from_column_slice(n, m, &step.as_slice()[..n * m]);
            a -= DMatrix::from_column_slice(m, m, &step.as_slice()[n * m..]);
            let new_res = residual(&p1, &a);
            if !new_res.norm().is_finite() {
                return Err(Error::Retraction { residual: f64::INFINITY });
            }
            res = new_res;
            it += 1;
        }
        let p2 = &q2 - &p1 * (p1.tr_mul(&q2) - &self.mmat);
        let point = self.join(&p1, &p2);
        let distance = (&q - &point).norm();
        Ok(RetractionReport { point, iterations: it, residual: res.norm(), distance })
    }

    pub fn dim(&self) -> usize {
        self.n * (self.m + self.l) - self.m * (self.m + 1) / 2 - self.m * self.l
    }
}

impl Manifold {
    /// Orthogonal projection onto the tangent space at `p`.
    pub fn project(&self, p: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Manifold::Euclidean => x.clone(),
            Manifold::Stiefel => x - p * sym(&p.tr_mul(x)),
            Manifold::Goae(g) => g.project(p, x),
        }
    }

    pub fn retract(&self, p: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Manifold::Euclidean => Ok(p + x),
            Manifold::Stiefel => linalg::polar_factor(&(p + x)),
            Manifold::Goae(g) => g.retract_report(p, x).map(|r| r.point),
        }
    }

    /// Vector transport by projection onto the tangent space at `p_new`.
    pub fn transport(&self, p_new: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.project(p_new, x)
    }

    /// Riemannian gradient from the Euclidean gradient.
    pub fn riemannian_gradient(&self, p: &DMatrix<f64>, egrad: &DMatrix<f64>) -> DMatrix<f64> {
        self.project(p, egrad)
    }

    /// Riemannian Hessian applied to the tangent vector `v`, from the
    /// Euclidean gradient and Hessian-vector product. `None` when the
    /// curvature term is not available in closed form.
    pub fn riemannian_hessian(
        &self,
        p: &DMatrix<f64>,
        egrad: &DMatrix<f64>,
        ehess_v: &DMatrix<f64>,
        v: &DMatrix<f64>,
    ) -> Option<DMatrix<f64>> {
        match self {
            Manifold::Euclidean => Some(ehess_v.clone()),
            Manifold::Stiefel => Some(self.project(p, &(ehess_v - v * sym(&p.tr_mul(egrad))))),
            Manifold::Goae(_) => None,
        }
    }

    /// Size of the constraint violation at `p`.
    pub fn constraint_residual(&self, p: &DMatrix<f64>) -> f64 {
        match self {
            Manifold::Euclidean => 0.0,
            Manifold::Stiefel => (p.tr_mul(p) - DMatrix::identity(p.ncols(), p.ncols())).norm(),
            Manifold::Goae(g) => {
                let (a, b) = g.constraint(p);
                (a.norm_squared() + b.norm_squared()).sqrt()
            }
        }
    }

    /// Intrinsic dimension for a point of the given shape.
    pub fn dim(&self, shape: (usize, usize)) -> usize {
        match self {
            Manifold::Euclidean => shape.0 * shape.1,
            Manifold::Stiefel => shape.0 * shape.1 - shape.1 * (shape.1 + 1) / 2,
            Manifold::Goae(g) => g.dim(),
        }
    }
}

/// Product of manifolds acting componentwise on a list of matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Product(pub Vec<Manifold>);

impl Product {
    pub fn project(&self, p: &[DMatrix<f64>], x: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        self.0.iter().zip(p.iter().zip(x)).map(|(m, (p, x))| m.project(p, x)).collect()
    }

    pub fn retract(&self, p: &[DMatrix<f64>], x: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        self.0.iter().zip(p.iter().zip(x)).map(|(m, (p, x))| m.retract(p, x)).collect()
    }

    pub fn constraint_residual(&self, p: &[DMatrix<f64>]) -> f64 {
        self.0.iter().zip(p).map(|(m, p)| m.constraint_residual(p).powi(2)).sum::<f64>().sqrt()
    }
}

/// Random point on a GOAE manifold: orthonormal `p1` and `p2 = p1 M + p1⊥ Z`.
pub fn random_goae_point<R: rand::Rng + ?Sized>(rng: &mut R, g: &Goae) -> DMatrix<f64> {
    let p1 = linalg::random_stiefel(rng, g.n, g.m);
    let z = linalg::random_normal(rng, g.n, g.l);
    let perp = &z - &p1 * p1.tr_mul(&z);
    let p2 = &p1 * &g.mmat + perp;
    g.join(&p1, &p2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stiefel_projection_is_tangent_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = linalg::random_stiefel(&mut rng, 6, 2);
        let x = linalg::random_normal(&mut rng, 6, 2);
        let t = Manifold::Stiefel.project(&p, &x);
        assert!(sym(&p.tr_mul(&t)).norm() < 1e-14);
        assert!((Manifold::Stiefel.project(&p, &t) - &t).norm() < 1e-14);
    }

    #[test]
    fn goae_zero_step_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Goae::new(5, 2, 3, linalg::random_normal(&mut rng, 2, 3));
        let p = random_goae_point(&mut rng, &g);
        let r = g.retract_report(&p, &DMatrix::zeros(5, 5)).unwrap();
        assert!((r.point - p).norm() < 1e-12);
    }

    #[test]
    fn oae_projection_matches_closed_form() {
        // with M = 0: K1 = sym(p1ᵀX1), K2 = (X1ᵀp2 + p1ᵀX2)(I + p2ᵀp1⊥p1⊥ᵀp2)⁻¹
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Goae::oae(6, 2, 3);
        let p = random_goae_point(&mut rng, &g);
        let x = linalg::random_normal(&mut rng, 6, 5);
        let (p1, p2) = g.split(&p);
        let (x1, x2) = g.split(&x);
        let perp = DMatrix::identity(6, 6) - &p1 * p1.transpose();
        let k1 = sym(&p1.tr_mul(&x1));
        let k2 = (x1.tr_mul(&p2) + p1.tr_mul(&x2))
            * (DMatrix::identity(3, 3) + p2.transpose() * &perp * &p2).try_inverse().unwrap();
        let y1 = &x1 - &p1 * &k1 - &perp * &p2 * k2.transpose();
        let y2 = &x2 - &p1 * &k2;
        let t = g.project(&p, &x);
        assert!((t.columns(0, 2) - y1).norm() < 1e-12);
        assert!((t.columns(2, 3) - y2).norm() < 1e-12);
    }
}
