//! Locally defined foliation near the invariant manifold.
//!
//! With the encoder `U` of a fitted foliation held fixed, the transversal
//! encoder `Û(x) = U⊥x − W₀(U(x))` and the linear map `B` are fitted so that
//! `B Û(x) ≈ Û(y)` for samples near the manifold. The zero level set of `Û`
//! is the invariant manifold; its decoder `W` solves `U(W(z)) = z`,
//! `Û(W(z)) = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::foliation::FoliationModel;
use crate::matmanifold::Manifold;
use crate::model::MatrixData;
use crate::polynomial::{PolyMap, PolyMapData};
use crate::riemopt::{gauss_southwell, BlockProblem, GsOptions, GsReport, Objective};

/// `exp(x/(x − κ²))` on `[0, κ²)`, zero beyond.
pub fn bump(x: f64, kappa: f64) -> f64 {
    let k2 = kappa * kappa;
    if (0.0..k2).contains(&x) {
        (x / (x - k2)).exp()
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct LocalFoliationModel {
    /// `(n − ν) × n`, orthonormal rows.
    pub uperp: DMatrix<f64>,
    /// `ν → n − ν`, degrees `2..=p`.
    pub w0: PolyMap,
    pub b: DMatrix<f64>,
    pub kappa: f64,
}

impl LocalFoliationModel {
    /// Initial guess: transversal linear dynamics of the foliation, `W₀ = 0`.
    pub fn initial(fol: &FoliationModel, order: usize, kappa: f64) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidInput("local foliation order must be at least 2".into()));
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidInput(format!("bump radius must be positive, got {kappa}")));
        }
        Ok(LocalFoliationModel {
            uperp: fol.u1perp.clone(),
            w0: PolyMap::zeros(fol.n - fol.nu, fol.nu, 2, order),
            b: fol.b1.clone(),
            kappa,
        })
    }

    /// `Û(x)` for the columns of `x`, given `z = U(x)`.
    pub fn uhat_with(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
        &self.uperp * x - self.w0.eval_batch(z)
    }

    pub fn uhat_batch(&self, fol: &FoliationModel, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.uhat_with(x, &fol.encode_batch(x))
    }

    pub fn uhat(&self, fol: &FoliationModel, x: &DVector<f64>) -> DVector<f64> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.uhat_batch(fol, &xm).column(0).into_owned()
    }

    /// Bump-weighted objective value on a dataset.
    pub fn objective(&self, fol: &FoliationModel, ds: &TrajectoryDataset) -> f64 {
        let ux = self.uhat_batch(fol, &ds.xs);
        let uy = self.uhat_batch(fol, &ds.ys);
        let r = &self.b * &ux - uy;
        (0..r.ncols())
            .map(|k| ds.weights[k] * bump(ux.column(k).norm_squared(), self.kappa) * r.column(k).norm_squared())
            .sum()
    }

    pub fn to_data(&self, decoder: Option<&ManifoldDecoder>) -> LocalFoliationData {
        LocalFoliationData {
            uperp: MatrixData::from_matrix(&self.uperp),
            w0: self.w0.to_data(),
            b: MatrixData::from_matrix(&self.b),
            kappa: self.kappa,
            decoder: decoder.map(|d| d.w.to_data()),
            decoder_radius: decoder.map(|d| d.radius),
        }
    }

    pub fn from_data(d: &LocalFoliationData) -> Result<Self> {
        Ok(LocalFoliationModel {
            uperp: d.uperp.to_matrix()?,
            w0: PolyMap::from_data(&d.w0)?,
            b: d.b.to_matrix()?,
            kappa: d.kappa,
        })
    }
}

/// Serialised local foliation with its reconstructed decoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LocalFoliationData {
    pub uperp: MatrixData,
    pub w0: PolyMapData,
    pub b: MatrixData,
    pub kappa: f64,
    pub decoder: Option<PolyMapData>,
    pub decoder_radius: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub kappa: f64,
    pub order: usize,
    /// Number of times the bump weights are recomputed; each round is a full
    /// Gauss-Southwell run with the weights held fixed.
    pub rounds: usize,
    pub gs: GsOptions,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig { kappa: 0.2, order: 7, rounds: 4, gs: GsOptions::default() }
    }
}

/// `Σ_k ω_k ‖r₀_k + L(M)_k‖²` for a linear operator `L`.
struct Quadratic<'a> {
    r0: DMatrix<f64>,
    weights: &'a [f64],
    lin: Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + 'a>,
    adj: Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + 'a>,
}

impl Quadratic<'_> {
    fn weighted(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = r.clone();
        for (k, mut c) in r.column_iter_mut().enumerate() {
            c *= 2.0 * self.weights[k];
        }
        r
    }
}

impl Objective for Quadratic<'_> {
    fn value(&self, m: &DMatrix<f64>) -> f64 {
        let r = &self.r0 + (self.lin)(m);
        r.column_iter().zip(self.weights).map(|(c, w)| w * c.norm_squared()).sum()
    }

    fn gradient(&self, m: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let r = &self.r0 + (self.lin)(m);
        let f = r.column_iter().zip(self.weights).map(|(c, w)| w * c.norm_squared()).sum();
        (f, (self.adj)(&self.weighted(&r)))
    }

    fn hess_vec(&self, _m: &DMatrix<f64>, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        Some((self.adj)(&self.weighted(&(self.lin)(v))))
    }
}

/// Blocks `B`, `U⊥` (as `U⊥ᵀ` on the Stiefel manifold) and the coefficients
/// of `W₀`, with the bump weights frozen.
struct LocalProblem<'a> {
    model: LocalFoliationModel,
    xs: &'a DMatrix<f64>,
    ys: &'a DMatrix<f64>,
    psi_x: DMatrix<f64>,
    psi_y: DMatrix<f64>,
    weights: Vec<f64>,
}

impl LocalProblem<'_> {
    fn uhat(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let c = &self.model.w0.coeffs;
        (&self.model.uperp * self.xs - c * &self.psi_x, &self.model.uperp * self.ys - c * &self.psi_y)
    }
}

impl BlockProblem for LocalProblem<'_> {
    fn num_blocks(&self) -> usize {
        3
    }

    fn group(&self, b: usize) -> usize {
        b
    }

    fn name(&self, b: usize) -> String {
        ["B", "Uperp", "W0"][b].into()
    }

    fn manifold(&self, b: usize) -> Manifold {
        if b == 1 {
            Manifold::Stiefel
        } else {
            Manifold::Euclidean
        }
    }

    fn point(&self, b: usize) -> DMatrix<f64> {
        match b {
            0 => self.model.b.clone(),
            1 => self.model.uperp.transpose(),
            _ => self.model.w0.coeffs.clone(),
        }
    }

    fn set_point(&mut self, b: usize, p: DMatrix<f64>) {
        match b {
            0 => self.model.b = p,
            1 => self.model.uperp = p.transpose(),
            _ => self.model.w0.coeffs = p,
        }
    }

    fn value(&self) -> f64 {
        let (ux, uy) = self.uhat();
        let r = &self.model.b * ux - uy;
        r.column_iter().zip(&self.weights).map(|(c, w)| w * c.norm_squared()).sum()
    }

    fn block_objective<'b>(&'b self, b: usize) -> Box<dyn Objective + 'b> {
        let (ux, uy) = self.uhat();
        let bm = &self.model.b;
        let c = &self.model.w0.coeffs;
        match b {
            0 => {
                let uxt = ux.transpose();
                Box::new(Quadratic {
                    r0: -uy,
                    weights: &self.weights,
                    lin: Box::new(move |m| m * &ux),
                    adj: Box::new(move |g| g * &uxt),
                })
            }
            1 => {
                let (x, y) = (self.xs, self.ys);
                Box::new(Quadratic {
                    r0: c * &self.psi_y - bm * c * &self.psi_x,
                    weights: &self.weights,
                    lin: Box::new(move |v| bm * v.tr_mul(x) - v.tr_mul(y)),
                    adj: Box::new(move |g| x * g.transpose() * bm - y * g.transpose()),
                })
            }
            _ => {
                let (px, py) = (&self.psi_x, &self.psi_y);
                Box::new(Quadratic {
                    r0: bm * &self.model.uperp * self.xs - &self.model.uperp * self.ys,
                    weights: &self.weights,
                    lin: Box::new(move |m| m * py - bm * m * px),
                    adj: Box::new(move |g| g * py.transpose() - bm.tr_mul(g) * px.transpose()),
                })
            }
        }
    }
}

fn bump_weights(model: &LocalFoliationModel, ds: &TrajectoryDataset, ux: &DMatrix<f64>) -> Result<Vec<f64>> {
    let w: Vec<f64> = (0..ux.ncols())
        .map(|k| ds.weights[k] * bump(ux.column(k).norm_squared(), model.kappa))
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        let mut d: Vec<f64> = ux.column_iter().map(|c| c.norm()).collect();
        d.sort_by(f64::total_cmp);
        // enough support to cover about a tenth of the samples
        let suggested = 1.5 * d[d.len() / 10].max(f64::MIN_POSITIVE);
        return Err(Error::NoSupport { suggested });
    }
    Ok(w)
}

/// Fits the locally defined foliation around the manifold selected by `fol`.
/// Returns the model and the trace of each weighting round.
pub fn fit_local(
    ds: &TrajectoryDataset,
    fol: &FoliationModel,
    cfg: &LocalConfig,
) -> Result<(LocalFoliationModel, Vec<GsReport>)> {
    if fol.nu >= fol.n {
        return Err(Error::InvalidInput("the foliation has no transversal directions".into()));
    }
    let mut model = LocalFoliationModel::initial(fol, cfg.order, cfg.kappa)?;
    let zx = fol.encode_batch(&ds.xs);
    let zy = fol.encode_batch(&ds.ys);
    let psi_x = model.w0.basis.eval_batch(&zx);
    let psi_y = model.w0.basis.eval_batch(&zy);
    let mut reports = Vec::new();
    for round in 0..cfg.rounds.max(1) {
        let ux = model.uhat_with(&ds.xs, &zx);
        let weights = bump_weights(&model, ds, &ux)?;
        let support = weights.iter().filter(|&&w| w > 0.0).count();
        log::info!("local foliation round {round}: {support} samples inside the bump");
        let mut problem = LocalProblem {
            model,
            xs: &ds.xs,
            ys: &ds.ys,
            psi_x: psi_x.clone(),
            psi_y: psi_y.clone(),
            weights,
        };
        reports.push(gauss_southwell(&mut problem, &cfg.gs)?);
        model = problem.model;
    }
    Ok((model, reports))
}

/// Decoder of the invariant manifold `Û = 0`.
#[derive(Debug, Clone)]
pub struct ManifoldDecoder {
    /// Polynomial fit (`ν → n`, degrees `1..=p`) of the exact decoder.
    pub w: PolyMap,
    /// Radius in `z` of the collocation grid.
    pub radius: f64,
    /// Largest collocation misfit of the polynomial.
    pub fit_error: f64,
    q_inv: DMatrix<f64>,
}

const ITER_TOL: f64 = 1e-12;
const ITER_MAX: usize = 200;

impl ManifoldDecoder {
    /// `DW(0) = Q⁻¹[I; 0]` with `Q = [U₁; U⊥]`.
    pub fn linear_part(&self, nu: usize) -> DMatrix<f64> {
        self.q_inv.columns(0, nu).into_owned()
    }

    /// Solves `U(x) = z`, `Û(x) = 0` by the fixed-point iteration, falling
    /// back to Newton continuation where it does not contract.
    pub fn eval_exact(&self, fol: &FoliationModel, lf: &LocalFoliationModel, z: &DVector<f64>) -> Result<DVector<f64>> {
        solve_point(&self.q_inv, fol, lf, z)
    }
}

fn solve_point(q_inv: &DMatrix<f64>, fol: &FoliationModel, lf: &LocalFoliationModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    fixed_point(q_inv, fol, lf, z).or_else(|_| newton_continuation(q_inv, fol, lf, z))
}

fn fixed_point(q_inv: &DMatrix<f64>, fol: &FoliationModel, lf: &LocalFoliationModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    let nu = fol.nu;
    let xlin = q_inv.columns(0, nu) * z;
    let w0 = lf.w0.eval(z.as_slice());
    let mut wt = DVector::zeros(fol.n);
    let mut rhs = DVector::zeros(fol.n);
    rhs.rows_mut(nu, fol.n - nu).copy_from(&w0);
    let mut change = f64::NAN;
    for _ in 0..ITER_MAX {
        let x = &xlin + &wt;
        let nl = fol.encode(&x) - &fol.u1 * &x;
        rhs.rows_mut(0, nu).copy_from(&(-nl));
        let next = q_inv * &rhs;
        change = (&next - &wt).amax();
        wt = next;
        if !change.is_finite() {
            break;
        }
        if change < ITER_TOL {
            return Ok(xlin + wt);
        }
    }
    Err(Error::Newton { residual: change })
}

/// `[U(x) − z; U⊥x − W₀(z)]`.
fn system(fol: &FoliationModel, lf: &LocalFoliationModel, x: &DVector<f64>, z: &DVector<f64>, w0: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(fol.n);
    g.rows_mut(0, fol.nu).copy_from(&(fol.encode(x) - z));
    g.rows_mut(fol.nu, fol.n - fol.nu).copy_from(&(&lf.uperp * x - w0));
    g
}

/// Newton's method with a difference Jacobian, continued along the ray from
/// the origin to `z`. Used where the fixed-point iteration does not contract.
fn newton_continuation(q_inv: &DMatrix<f64>, fol: &FoliationModel, lf: &LocalFoliationModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    const STEPS: usize = 20;
    let n = fol.n;
    let mut x = DVector::zeros(n);
    let mut residual = f64::NAN;
    for step in 1..=STEPS {
        let zs = z * (step as f64 / STEPS as f64);
        let w0 = lf.w0.eval(zs.as_slice());
        if step == 1 {
            x = q_inv.columns(0, fol.nu) * &zs;
        }
        let mut done = false;
        for _ in 0..50 {
            let g = system(fol, lf, &x, &zs, &w0);
            residual = g.amax();
            if !residual.is_finite() {
                return Err(Error::Newton { residual });
            }
            if residual < 1e-13 * (1.0 + zs.amax()) {
                done = true;
                break;
            }
            let mut jac = DMatrix::zeros(n, n);
            let h = 1e-7 * (1.0 + x.amax());
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                jac.set_column(j, &((system(fol, lf, &xp, &zs, &w0) - system(fol, lf, &xm, &zs, &w0)) / (2.0 * h)));
            }
            let dx = jac.lu().solve(&g).ok_or(Error::Newton { residual })?;
            x -= dx;
        }
        if !done {
            return Err(Error::Newton { residual });
        }
    }
    Ok(x)
}

/// Collocation points: a polar grid of 16 radii and 32 angles for `ν = 2`,
/// 33 equispaced points for `ν = 1`, random-free otherwise (a tensor grid of
/// 9 points per axis).
fn collocation(nu: usize, radius: f64) -> Vec<DVector<f64>> {
    match nu {
        1 => (0..33).map(|i| DVector::from_element(1, radius * (i as f64 / 16.0 - 1.0))).collect(),
        2 => {
            let mut pts = Vec::with_capacity(16 * 32);
            for i in 1..=16 {
                let r = radius * i as f64 / 16.0;
                for j in 0..32 {
                    let t = 2.0 * std::f64::consts::PI * j as f64 / 32.0;
                    pts.push(DVector::from_vec(vec![r * t.cos(), r * t.sin()]));
                }
            }
            pts
        }
        _ => {
            let total = 9usize.pow(nu as u32);
            (0..total)
                .map(|mut k| {
                    DVector::from_fn(nu, |_, _| {
                        let i = k % 9;
                        k /= 9;
                        radius * (i as f64 / 4.0 - 1.0) / (nu as f64).sqrt()
                    })
                })
                .collect()
        }
    }
}

/// Reconstructs the manifold decoder on a grid of radius `radius` in `z`
/// and fits a polynomial of the local foliation's order to it.
pub fn reconstruct_decoder(fol: &FoliationModel, lf: &LocalFoliationModel, radius: f64) -> Result<ManifoldDecoder> {
    let n = fol.n;
    let nu = fol.nu;
    let mut q = DMatrix::zeros(n, n);
    q.rows_mut(0, nu).copy_from(&fol.u1);
    q.rows_mut(nu, n - nu).copy_from(&lf.uperp);
    let q_inv = q.clone().try_inverse().ok_or(Error::Singular { rank: crate::linalg::rank(&q, 1e-12), dim: n })?;
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!("decoder radius must be positive, got {radius}")));
    }
    let pts = collocation(nu, radius);
    let mut xs = DMatrix::zeros(n, pts.len());
    let mut zs = DMatrix::zeros(nu, pts.len());
    let mut converged_to = 0.0f64;
    for (k, z) in pts.iter().enumerate() {
        match solve_point(&q_inv, fol, lf, z) {
            Ok(x) => {
                xs.set_column(k, &x);
                zs.set_column(k, z);
                converged_to = converged_to.max(z.norm());
            }
            Err(_) => {
                return Err(Error::Optimisation(format!(
                    "decoder equations have no solution at |z| = {:.4}; solved up to radius {:.4}",
                    z.norm(),
                    converged_to
                )))
            }
        }
    }
    let order = lf.w0.basis.max_deg();
    let mut w = PolyMap::zeros(n, nu, 1, order);
    let phi = w.basis.eval_batch(&zs);
    let svd = phi.transpose().svd(true, true);
    let coeffs = svd
        .solve(&xs.transpose(), 1e-13 * svd.singular_values.max())
        .map_err(|e| Error::Optimisation(format!("decoder fit: {e}")))?;
    w.coeffs = coeffs.transpose();
    let fit_error = (&w.coeffs * &phi - &xs).amax();
    Ok(ManifoldDecoder { w, radius, fit_error, q_inv })
}

/// Decoder over the `q`-quantile of the latent data radii. Far from the
/// manifold the local foliation is unreliable and the decoder equations may
/// lose their solution; the radius is then reduced by 10% at a time, at most
/// `MAX_SHRINK` times.
pub fn decoder_for_data(fol: &FoliationModel, lf: &LocalFoliationModel, ds: &TrajectoryDataset, q: f64) -> Result<ManifoldDecoder> {
    const MAX_SHRINK: usize = 10;
    let z = fol.encode_batch(&ds.xs);
    let radii: Vec<f64> = z.column_iter().map(|c| c.norm()).collect();
    let mut radius = crate::pipeline::quantile(&radii, q);
    let mut last = None;
    for _ in 0..=MAX_SHRINK {
        match reconstruct_decoder(fol, lf, radius) {
            Ok(d) => return Ok(d),
            Err(e @ Error::Optimisation(_)) => {
                log::warn!("decoder at radius {radius:.4}: {e}");
                last = Some(e);
                radius *= 0.9;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Radius in `z` covering the samples inside the bump.
pub fn support_radius(fol: &FoliationModel, lf: &LocalFoliationModel, ds: &TrajectoryDataset) -> f64 {
    let z = fol.encode_batch(&ds.xs);
    let u = lf.uhat_with(&ds.xs, &z);
    (0..z.ncols())
        .filter(|&k| bump(u.column(k).norm_squared(), lf.kappa) > 0.0)
        .map(|k| z.column(k).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foliation::{initial_model, FoliationConfig};
    use crate::linalg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bump_values() {
        assert_eq!(bump(0.0, 0.3), 1.0);
        assert_eq!(bump(0.09, 0.3), 0.0);
        assert_eq!(bump(0.2, 0.3), 0.0);
        assert!((bump(0.5, 1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!(bump(0.09 - 1e-9, 0.3) < 1e-100);
    }

    fn linear_setup() -> (TrajectoryDataset, FoliationModel) {
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, 0.0, 0.7, 0.2, 0.0, 0.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = linalg::random_normal(&mut rng, 3, 200) * 0.1;
        let ds = TrajectoryDataset::new(xs.clone(), &a * xs).unwrap();
        let cfg = FoliationConfig { encoder_order: 1, map_order: 1, ..Default::default() };
        (ds.clone(), initial_model(&ds, &cfg).unwrap())
    }

    #[test]
    fn linear_data_keeps_linear_leaves() {
        let (ds, fol) = linear_setup();
        let cfg = LocalConfig { kappa: 10.0, order: 3, rounds: 1, ..Default::default() };
        let (lf, reports) = fit_local(&ds, &fol, &cfg).unwrap();
        assert!(lf.w0.coeffs.amax() < 1e-8);
        let mut ev: Vec<f64> = lf.b.complex_eigenvalues().iter().map(|c| c.re).collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 0.5).abs() < 1e-8 && (ev[1] - 0.7).abs() < 1e-8, "{ev:?}");
        assert!(lf.objective(&fol, &ds) < 1e-20);
        assert!(reports[0].max_increase() <= 1e-12);
    }

    #[test]
    fn linear_decoder_is_exact() {
        let (_, fol) = linear_setup();
        let lf = LocalFoliationModel::initial(&fol, 3, 0.2).unwrap();
        let dec = reconstruct_decoder(&fol, &lf, 0.5).unwrap();
        let z = DVector::from_element(1, 0.3);
        let x = dec.eval_exact(&fol, &lf, &z).unwrap();
        assert!((&fol.w1 * (&fol.u1 * &fol.w1).try_inverse().unwrap() * &z - &x).amax() < 1e-14);
        assert!(dec.fit_error < 1e-14);
    }

    #[test]
    fn nonlinear_decoder_satisfies_both_equations() {
        let (ds, _) = linear_setup();
        let cfg = FoliationConfig { encoder_order: 3, map_order: 1, rank: 2, ..Default::default() };
        let mut fol = initial_model(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in &mut fol.tensors {
            t.mats[0] = linalg::random_normal(&mut rng, t.mats[0].nrows(), t.mats[0].ncols()) * 0.3;
        }
        let mut lf = LocalFoliationModel::initial(&fol, 4, 0.2).unwrap();
        lf.w0.coeffs = linalg::random_normal(&mut rng, lf.w0.coeffs.nrows(), lf.w0.coeffs.ncols()) * 0.2;
        let dec = reconstruct_decoder(&fol, &lf, 0.2).unwrap();
        for i in 0..100 {
            let z = DVector::from_element(1, 0.2 * (2.0 * i as f64 / 99.0 - 1.0));
            let x = dec.eval_exact(&fol, &lf, &z).unwrap();
            assert!((fol.encode(&x) - &z).amax() < 1e-8);
            assert!(lf.uhat(&fol, &x).amax() < 1e-8);
        }
    }

    #[test]
    fn no_support_suggests_a_radius() {
        let (ds, fol) = linear_setup();
        let cfg = LocalConfig { kappa: 1e-6, order: 3, rounds: 1, ..Default::default() };
        match fit_local(&ds, &fol, &cfg) {
            Err(Error::NoSupport { suggested }) => assert!(suggested > 1e-6),
            other => panic!("{other:?}"),
        }
    }
}
