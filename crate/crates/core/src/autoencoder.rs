//! Polynomial autoencoders on the orthogonal autoencoder manifold.
//!
//! The encoder is linear, `z = Uᵀx`, and the decoder `W(z) = Uz + W_nl(z)`
//! has a purely nonlinear part with `Uᵀ W_nl = M` (zero for the orthogonal
//! autoencoder, so that `Uᵀ W(z) = z`). The point `[U | C]`, with `C` the
//! coefficients of `W_nl`, lives on a GOAE manifold.
//!
//! Fitting reconstructs the data first and then fits the map `S` in the
//! latent space so that `W(S(Uᵀx)) ≈ y`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{fit_linear_map, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::foliation::{linear_init, Select};
use crate::matmanifold::{Goae, Manifold};
use crate::model::MatrixData;
use crate::polynomial::{PolyMap, PolyMapData};
use crate::riemopt::{rbfgs, BfgsOptions, BfgsStats, Objective};
use crate::romanalysis::{normal_form_2d, NormalForm, NormalFormStyle};

#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    /// `n × ν`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// `ν → n`, degrees `2..=d`.
    pub wnl: PolyMap,
    /// `ν → ν`, degrees `1..=q`.
    pub s: PolyMap,
    /// `Uᵀ C`; zero for the orthogonal autoencoder.
    pub mmat: DMatrix<f64>,
}

impl AutoencoderModel {
    pub fn nu(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_orthogonal(&self) -> bool {
        self.mmat.iter().all(|&v| v == 0.0)
    }

    pub fn encode_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.u.tr_mul(x)
    }

    pub fn decode_batch(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        &self.u * z + self.wnl.eval_batch(z)
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.u * z + self.wnl.eval(z.as_slice())
    }

    /// The decoder as a single polynomial of degrees `1..=d`.
    pub fn decoder(&self) -> PolyMap {
        let n = self.u.nrows();
        let nu = self.nu();
        let mut w = PolyMap::zeros(n, nu, 1, self.wnl.basis.max_deg());
        w.set_linear(&self.u);
        for i in 0..self.wnl.basis.len() {
            let j = w.basis.index_of(self.wnl.basis.exponent(i)).expect("nonlinear monomials are part of the full basis");
            w.coeffs.set_column(j, &self.wnl.coeffs.column(i));
        }
        w
    }

    /// Largest violation of `UᵀU = I` and `UᵀC = M`.
    pub fn constraint_residual(&self) -> f64 {
        let nu = self.nu();
        let a = (self.u.tr_mul(&self.u) - DMatrix::identity(nu, nu)).amax();
        let b = (self.u.tr_mul(&self.wnl.coeffs) - &self.mmat).amax();
        a.max(b)
    }

    /// Relative prediction errors `‖W(S(Uᵀx)) − y‖ / ‖y‖`.
    pub fn prediction_errors(&self, ds: &TrajectoryDataset) -> Vec<f64> {
        let pred = self.decode_batch(&self.s.eval_batch(&self.encode_batch(&ds.xs)));
        (pred - &ds.ys)
            .column_iter()
            .zip(ds.ys.column_iter())
            .map(|(e, y)| e.norm() / y.norm().max(f64::MIN_POSITIVE))
            .collect()
    }

    pub fn to_data(&self) -> AutoencoderData {
        AutoencoderData {
            u: MatrixData::from_matrix(&self.u),
            wnl: self.wnl.to_data(),
            s: self.s.to_data(),
            mmat: MatrixData::from_matrix(&self.mmat),
        }
    }

    pub fn from_data(d: &AutoencoderData) -> Result<Self> {
        Ok(AutoencoderModel {
            u: d.u.to_matrix()?,
            wnl: PolyMap::from_data(&d.wnl)?,
            s: PolyMap::from_data(&d.s)?,
            mmat: d.mmat.to_matrix()?,
        })
    }
}

/// Serialised autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AutoencoderData {
    pub u: MatrixData,
    pub wnl: PolyMapData,
    pub s: PolyMapData,
    pub mmat: MatrixData,
}

#[derive(Debug, Clone)]
pub struct AutoencoderConfig {
    pub select: Select,
    pub decoder_order: usize,
    pub map_order: usize,
    /// Prescribed `UᵀC`; `None` gives the orthogonal autoencoder.
    pub goae: Option<DMatrix<f64>>,
    pub bfgs: BfgsOptions,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig { select: Select::Indices(vec![0]), decoder_order: 5, map_order: 5, goae: None, bfgs: BfgsOptions::default() }
    }
}

fn split(p: &DMatrix<f64>, nu: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (p.columns(0, nu).into_owned(), p.columns(nu, p.ncols() - nu).into_owned())
}

/// `Σ w'_k ‖W(Uᵀy_k) − y_k‖²` as a function of `[U | C]`.
struct Reconstruction<'a> {
    ys: &'a DMatrix<f64>,
    weights: Vec<f64>,
    basis: &'a crate::polynomial::MonomialBasis,
    nu: usize,
}

impl Reconstruction<'_> {
    fn errors(&self, p: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (u, c) = split(p, self.nu);
        let z = u.tr_mul(self.ys);
        let e = &u * &z + &c * self.basis.eval_batch(&z) - self.ys;
        (u, c, z, e)
    }
}

impl Objective for Reconstruction<'_> {
    fn value(&self, p: &DMatrix<f64>) -> f64 {
        let (_, _, _, e) = self.errors(p);
        e.column_iter().zip(&self.weights).map(|(c, w)| w * c.norm_squared()).sum()
    }

    fn gradient(&self, p: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let (u, c, z, e) = self.errors(p);
        let n = u.nrows();
        let mut gu = DMatrix::zeros(n, self.nu);
        let mut gc = DMatrix::zeros(n, c.ncols());
        let mut f = 0.0;
        for k in 0..e.ncols() {
            let w = self.weights[k];
            f += w * e.column(k).norm_squared();
            let g = e.column(k) * (2.0 * w);
            let zk = z.column(k);
            let psi = self.basis.eval(zk.as_slice());
            let dw = &u + &c * self.basis.jacobian(zk.as_slice());
            gc += &g * psi.transpose();
            gu += &g * zk.transpose() + self.ys.column(k) * dw.tr_mul(&g).transpose();
        }
        let mut out = DMatrix::zeros(n, p.ncols());
        out.columns_mut(0, self.nu).copy_from(&gu);
        out.columns_mut(self.nu, c.ncols()).copy_from(&gc);
        (f, out)
    }
}

/// `Σ w_k ‖W(S(Uᵀx_k)) − y_k‖²` as a function of the coefficients of `S`.
struct Dynamics<'a> {
    decoder: PolyMap,
    phi: DMatrix<f64>,
    ds: &'a TrajectoryDataset,
}

impl Objective for Dynamics<'_> {
    fn value(&self, d: &DMatrix<f64>) -> f64 {
        let pred = self.decoder.eval_batch(&(d * &self.phi)) - &self.ds.ys;
        pred.column_iter().zip(&self.ds.weights).map(|(c, w)| w * c.norm_squared()).sum()
    }

    fn gradient(&self, d: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let s = d * &self.phi;
        let e = self.decoder.eval_batch(&s) - &self.ds.ys;
        let mut g = DMatrix::zeros(d.nrows(), d.ncols());
        let mut f = 0.0;
        for k in 0..e.ncols() {
            let w = self.ds.weights[k];
            f += w * e.column(k).norm_squared();
            let dw = self.decoder.jacobian(s.column(k).as_slice());
            g += dw.tr_mul(&e.column(k)) * self.phi.column(k).transpose() * (2.0 * w);
        }
        (f, g)
    }
}

/// Reports of both fitting stages.
#[derive(Debug, Clone)]
pub struct AutoencoderReport {
    pub reconstruction: BfgsStats,
    pub dynamics: BfgsStats,
}

/// Right invariant subspace of the linear part near the origin. Data that
/// span only a subspace are handled in coordinates of that subspace.
fn initial_subspace(ds: &TrajectoryDataset, select: &Select, sigma: usize) -> Result<DMatrix<f64>> {
    let near = ds.restrict_ball(ds.default_radius())?;
    match fit_linear_map(&near) {
        Ok(a) => Ok(linear_init(&a, select, sigma)?.w1),
        Err(Error::Singular { .. }) => {
            let svd = near.xs.clone().svd(true, false);
            let r = crate::linalg::rank(&near.xs, 1e-10);
            let q = svd.u.expect("left singular vectors were requested").columns(0, r).into_owned();
            let reduced = TrajectoryDataset::new(q.tr_mul(&near.xs), q.tr_mul(&near.ys))?;
            let a = fit_linear_map(&reduced)?;
            Ok(q * linear_init(&a, select, sigma)?.w1)
        }
        Err(e) => Err(e),
    }
}

/// Fits an autoencoder: reconstruction on the GOAE manifold, then `S`.
pub fn fit_autoencoder(ds: &TrajectoryDataset, cfg: &AutoencoderConfig) -> Result<(AutoencoderModel, AutoencoderReport)> {
    if cfg.decoder_order < 2 || cfg.map_order < 1 {
        return Err(Error::InvalidInput("decoder order must be at least 2 and map order at least 1".into()));
    }
    let w1 = initial_subspace(ds, &cfg.select, cfg.decoder_order)?;
    let n = ds.dim();
    let nu = w1.ncols();
    let wnl = PolyMap::zeros(n, nu, 2, cfg.decoder_order);
    let l = wnl.basis.len();
    let mmat = match &cfg.goae {
        None => DMatrix::zeros(nu, l),
        Some(m) => {
            if m.shape() != (nu, l) {
                return Err(Error::InvalidInput(format!("GOAE matrix must be {nu} × {l}")));
            }
            log::warn!("generalised orthogonal autoencoders are known to be poorly posed");
            m.clone()
        }
    };
    let goae = Goae::new(n, nu, l, mmat.clone());
    let man = Manifold::Goae(goae);
    let mut p0 = DMatrix::zeros(n, nu + l);
    p0.columns_mut(0, nu).copy_from(&w1);
    if cfg.goae.is_some() {
        // C = U M satisfies the constraint
        p0.columns_mut(nu, l).copy_from(&(&w1 * &mmat));
    }
    let weights: Vec<f64> = ds.ys.column_iter().map(|y| 1.0 / y.norm_squared()).collect();
    let rec = Reconstruction { ys: &ds.ys, weights, basis: &wnl.basis, nu };
    let (p, rstats) = rbfgs(&man, &rec, &p0, &cfg.bfgs)?;
    let (u, c) = split(&p, nu);
    let mut model = AutoencoderModel { u, wnl, s: PolyMap::zeros(nu, nu, 1, cfg.map_order), mmat };
    model.wnl.coeffs = c;

    // least squares in the latent space as the starting point
    let zx = model.encode_batch(&ds.xs);
    let zy = model.encode_batch(&ds.ys);
    let phi = model.s.basis.eval_batch(&zx);
    let mut wphi = phi.clone();
    let mut wzy = zy.clone();
    for k in 0..phi.ncols() {
        let w = ds.weights[k].sqrt();
        wphi.column_mut(k).scale_mut(w);
        wzy.column_mut(k).scale_mut(w);
    }
    let svd = wphi.transpose().svd(true, true);
    let d0 = svd
        .solve(&wzy.transpose(), 1e-13 * svd.singular_values.max())
        .map_err(|e| Error::Optimisation(format!("latent map fit: {e}")))?
        .transpose();
    let dyn_obj = Dynamics { decoder: model.decoder(), phi, ds };
    let (d, dstats) = rbfgs(&Manifold::Euclidean, &dyn_obj, &d0, &cfg.bfgs)?;
    model.s.coeffs = d;
    Ok((model, AutoencoderReport { reconstruction: rstats, dynamics: dstats }))
}

/// Normal form of the latent map satisfying `W_n ∘ S_n = S ∘ W_n`.
pub fn ae_normal_form(model: &AutoencoderModel) -> Result<NormalForm> {
    if model.nu() != 2 {
        return Err(Error::InvalidInput(format!("normal forms need a two dimensional latent space, got {}", model.nu())));
    }
    normal_form_2d(&model.s, NormalFormStyle::Decoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subspace_data() -> TrajectoryDataset {
        // data on the plane spanned by the first two coordinates of a rotated frame
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = linalg::random_stiefel(&mut rng, 4, 4);
        let s = DMatrix::from_row_slice(2, 2, &[0.9 * 0.3f64.cos(), -0.9 * 0.3f64.sin(), 0.9 * 0.3f64.sin(), 0.9 * 0.3f64.cos()]);
        let mut a = DMatrix::zeros(4, 4);
        a.view_mut((0, 0), (2, 2)).copy_from(&s);
        a[(2, 2)] = 0.3;
        a[(3, 3)] = 0.2;
        let a = &q * a * q.transpose();
        let z = linalg::random_normal(&mut rng, 2, 100) * 0.2;
        let xs = q.columns(0, 2) * &z;
        TrajectoryDataset::new(xs.clone(), a * xs).unwrap()
    }

    #[test]
    fn linear_subspace_is_recovered() {
        let ds = subspace_data();
        let cfg = AutoencoderConfig { decoder_order: 3, map_order: 1, ..Default::default() };
        let (m, rep) = fit_autoencoder(&ds, &cfg).unwrap();
        assert!(rep.reconstruction.f_final < 1e-20, "{}", rep.reconstruction.f_final);
        assert!(rep.dynamics.f_final < 1e-20, "{}", rep.dynamics.f_final);
        assert!(m.constraint_residual() < 1e-10);
        let z = DVector::from_vec(vec![0.1, -0.05]);
        assert!((m.u.tr_mul(&m.decode(&z)) - &z).amax() < 1e-12);
    }

    #[test]
    fn reconstruction_gradient_matches_differences() {
        let ds = subspace_data();
        let wnl = PolyMap::zeros(4, 2, 2, 3);
        let rec = Reconstruction { ys: &ds.ys, weights: vec![1.0; ds.len()], basis: &wnl.basis, nu: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = linalg::random_normal(&mut rng, 4, 2 + wnl.basis.len());
        let v = linalg::random_normal(&mut rng, 4, 2 + wnl.basis.len());
        let (_, g) = rec.gradient(&p);
        let h = 1e-6;
        let fd = (rec.value(&(&p + &v * h)) - rec.value(&(&p - &v * h))) / (2.0 * h);
        assert!((fd - g.dot(&v)).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn decoder_polynomial_matches_parts() {
        let ds = subspace_data();
        let cfg = AutoencoderConfig { decoder_order: 3, map_order: 2, ..Default::default() };
        let (mut m, _) = fit_autoencoder(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        m.wnl.coeffs = linalg::random_normal(&mut rng, 4, m.wnl.basis.len());
        let z = DVector::from_vec(vec![0.3, -0.2]);
        assert!((m.decoder().eval(z.as_slice()) - m.decode(&z)).amax() < 1e-14);
    }

    #[test]
    fn linear_latent_map_has_trivial_normal_form() {
        let ds = subspace_data();
        let cfg = AutoencoderConfig { decoder_order: 3, map_order: 3, ..Default::default() };
        let (m, _) = fit_autoencoder(&ds, &cfg).unwrap();
        let nf = ae_normal_form(&m).unwrap();
        assert!((nf.radial(0.1) - 0.09).abs() < 1e-8, "{}", nf.radial(0.1));
        assert!((nf.angular(0.1).abs() - 0.3).abs() < 1e-8);
    }
}
