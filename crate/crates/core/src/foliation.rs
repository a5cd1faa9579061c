//! Invariant foliations of maps identified from data.
//!
//! The encoder is `U(x) = U₁x + Σ_d T_d(…)` with `U₁` having orthonormal rows
//! and `T_d` homogeneous polynomials of degree `d` stored as hierarchical
//! Tucker tensors. The nonlinear terms vanish on the range of `W₁`, the right
//! invariant subspace of the selected eigenvalues, so `U(W₁z)` is linear in
//! `z`. The conjugate map `S` is a polynomial. Both are fitted by minimising
//! `Σ_k ‖x_k‖⁻² ‖S(U(x_k)) − U(y_k)‖²`.

use std::cell::RefCell;

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fit_linear_map, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::httensor::{HtTensor, HtTensorData};
use crate::linalg;
use crate::matmanifold::Manifold;
use crate::model::MatrixData;
use crate::polynomial::{PolyMap, PolyMapData};
use crate::riemopt::{gauss_southwell, BlockProblem, GsOptions, GsReport, Objective};

/// How the nonlinear part of the encoder sees the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NonlinearArgument {
    /// `T_d(U₁⊥x)`: the tensors act on the `n − ν` complementary coordinates.
    Complement,
    /// `T_d(x) − T_d(W₁W₁ᵀx)`: the tensors act on the full state.
    FullDifference,
}

/// Which eigenvalues of the linear part span the foliation.
#[derive(Debug, Clone, PartialEq)]
pub enum Select {
    /// The real eigenvalue or complex pair whose argument (rad/step) is
    /// closest to the target; ties go to the larger modulus.
    Frequency(f64),
    /// Indices into the eigenvalues sorted by decreasing modulus. Complex
    /// pairs are completed automatically.
    Indices(Vec<usize>),
}

/// Flagged near-resonance `Π μ_k^{m_k} ≈ μ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub kind: ResonanceKind,
    pub exponents: Vec<u32>,
    pub target: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResonanceKind {
    Foliation,
    Internal,
    Manifold,
}

/// Eigenvalues of the linear part and the associated diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// `(re, im)` sorted by decreasing modulus.
    pub eigenvalues: Vec<(f64, f64)>,
    pub selected: Vec<usize>,
    /// Spectral quotient of the left-invariant subspace.
    pub beth: f64,
    /// Spectral quotient of the right-invariant subspace.
    pub aleph: f64,
    pub resonances: Vec<Resonance>,
}

/// Result of the linear initialisation.
#[derive(Debug, Clone)]
pub struct LinearInit {
    pub u1: DMatrix<f64>,
    pub s1: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub u1perp: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub report: SpectralReport,
}

fn sorted_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let sch = linalg::ordered_schur(a, |_| false)?;
    let mut ev = linalg::schur_eigenvalues(&sch.t, &sch.blocks);
    ev.sort_by(|x, y| y.norm().total_cmp(&x.norm()).then(y.im.total_cmp(&x.im)));
    Ok(ev)
}

fn close(a: Complex<f64>, b: Complex<f64>, scale: f64) -> bool {
    (a - b).norm() <= 1e-9 * scale.max(1e-300)
}

fn resolve_selection(ev: &[Complex<f64>], select: &Select) -> Result<Vec<usize>> {
    let scale = ev.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut idx: Vec<usize> = match select {
        Select::Frequency(target) => {
            let best = (0..ev.len())
                .filter(|&i| ev[i].im >= 0.0)
                .min_by(|&i, &j| {
                    let di = (ev[i].arg() - target).abs();
                    let dj = (ev[j].arg() - target).abs();
                    di.total_cmp(&dj).then(ev[j].norm().total_cmp(&ev[i].norm()))
                })
                .ok_or_else(|| Error::InvalidInput("no eigenvalues".into()))?;
            vec![best]
        }
        Select::Indices(v) => {
            if let Some(&bad) = v.iter().find(|&&i| i >= ev.len()) {
                return Err(Error::InvalidInput(format!("eigenvalue index {bad} out of range 0..{}", ev.len())));
            }
            v.clone()
        }
    };
    // complete conjugate pairs
    let mut extra = Vec::new();
    for &i in &idx {
        if ev[i].im.abs() > 1e-12 * scale {
            let j = (0..ev.len())
                .find(|&j| j != i && close(ev[j], ev[i].conj(), scale))
                .ok_or_else(|| Error::InvalidInput("unpaired complex eigenvalue".into()))?;
            extra.push(j);
        }
    }
    idx.extend(extra);
    idx.sort();
    idx.dedup();
    Ok(idx)
}

/// Schur-based linear initialisation: invariant subspaces of `a` for the
/// selected eigenvalues.
pub fn linear_init(a: &DMatrix<f64>, select: &Select, sigma: usize) -> Result<LinearInit> {
    let n = a.nrows();
    let ev = sorted_eigenvalues(a)?;
    let sel = resolve_selection(&ev, select)?;
    let nu = sel.len();
    if nu == 0 {
        return Err(Error::InvalidInput("selection picks no eigenvalues".into()));
    }
    let scale = ev.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let chosen: Vec<Complex<f64>> = sel.iter().map(|&i| ev[i]).collect();
    let is_sel = |mu: Complex<f64>| chosen.iter().any(|&c| (c - mu).norm() <= 1e-6 * scale.max(1e-300));

    let first = linalg::ordered_schur(a, is_sel)?;
    if first.nselected != nu {
        return Err(Error::InvalidInput(format!(
            "selection splits a block of the Schur form ({} of {nu} eigenvalues ordered)",
            first.nselected
        )));
    }
    let w1 = first.q.columns(0, nu).clone_owned();
    let u1perp = first.q.columns(nu, n - nu).transpose();
    let b1 = &u1perp * a * u1perp.transpose();

    let last = linalg::ordered_schur(a, |mu| !is_sel(mu))?;
    if last.nselected != n - nu {
        return Err(Error::InvalidInput("could not order the unselected eigenvalues first".into()));
    }
    let u1 = last.q.columns(n - nu, nu).transpose();
    let s1 = &u1 * a * u1.transpose();

    let an = a.norm().max(f64::MIN_POSITIVE);
    let left = (&u1 * a - &s1 * &u1).norm();
    let right = (a * &w1 - &w1 * (w1.transpose() * a * &w1)).norm();
    if left > 1e-8 * an || right > 1e-8 * an {
        return Err(Error::Invariant(format!("invariant subspace residuals {left:e} (left), {right:e} (right)")));
    }
    let report = spectral_report(&ev, &sel, sigma);
    Ok(LinearInit { u1, s1, w1, u1perp, b1, report })
}

/// Spectral quotients and near-resonances among the eigenvalues `ev`
/// (sorted by decreasing modulus) for the selection `sel`, with exponent
/// sums up to `sigma − 1`.
pub fn spectral_report(ev: &[Complex<f64>], sel: &[usize], sigma: usize) -> SpectralReport {
    let logs: Vec<f64> = ev.iter().map(|c| c.norm().ln()).collect();
    let rest: Vec<usize> = (0..ev.len()).filter(|i| !sel.contains(i)).collect();
    let min_sel = sel.iter().map(|&i| logs[i]).fold(f64::INFINITY, f64::min);
    let max_all = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_rest = rest.iter().map(|&i| logs[i]).fold(f64::INFINITY, f64::min);
    let max_sel = sel.iter().map(|&i| logs[i]).fold(f64::NEG_INFINITY, f64::max);
    SpectralReport {
        eigenvalues: ev.iter().map(|c| (c.re, c.im)).collect(),
        selected: sel.to_vec(),
        beth: min_sel / max_all,
        aleph: if rest.is_empty() { f64::NAN } else { min_rest / max_sel },
        resonances: resonance_check(ev, sel, sigma),
    }
}

fn for_each_exponent(n: usize, max_sum: usize, f: &mut dyn FnMut(&[u32])) {
    fn rec(pos: usize, left: usize, m: &mut Vec<u32>, f: &mut dyn FnMut(&[u32])) {
        if pos == m.len() {
            f(m);
            return;
        }
        for k in 0..=left {
            m[pos] = k as u32;
            rec(pos + 1, left - k, m, f);
        }
        m[pos] = 0;
    }
    let mut m = vec![0u32; n];
    rec(0, max_sum, &mut m, f);
}

/// Near-resonances `|Π μ_k^{m_k} − μ_j| < 0.05 min|μ|` with `Σ m ≤ σ − 1`:
/// foliation conditions (some unselected exponent nonzero, selected target),
/// internal conditions (selected only, order at least two) and manifold
/// conditions (selected exponents, unselected target).
pub fn resonance_check(ev: &[Complex<f64>], sel: &[usize], sigma: usize) -> Vec<Resonance> {
    let n = ev.len();
    let tol = 0.05 * ev.iter().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
    let rest: Vec<usize> = (0..n).filter(|i| !sel.contains(i)).collect();
    let mut out = Vec::new();
    if sigma < 2 {
        return out;
    }
    for_each_exponent(n, sigma - 1, &mut |m| {
        let order: u32 = m.iter().sum();
        if order == 0 {
            return;
        }
        let prod = m.iter().zip(ev).fold(Complex::new(1.0, 0.0), |acc, (&k, &mu)| acc * mu.powu(k));
        let uses_rest = rest.iter().any(|&l| m[l] != 0);
        let only_sel = !uses_rest;
        let mut push = |kind, target: usize| {
            let d = (prod - ev[target]).norm();
            if d < tol {
                out.push(Resonance { kind, exponents: m.to_vec(), target, distance: d });
            }
        };
        if uses_rest {
            for &j in sel {
                push(ResonanceKind::Foliation, j);
            }
        }
        if only_sel && order >= 2 {
            for &j in sel {
                push(ResonanceKind::Internal, j);
            }
        }
        if only_sel && order >= 1 {
            for &j in &rest {
                push(ResonanceKind::Manifold, j);
            }
        }
    });
    out
}

/// Fitted invariant foliation.
#[derive(Debug, Clone)]
pub struct FoliationModel {
    pub n: usize,
    pub nu: usize,
    /// `ν × n`, orthonormal rows.
    pub u1: DMatrix<f64>,
    /// `n × ν`, orthonormal columns spanning the right invariant subspace.
    pub w1: DMatrix<f64>,
    /// `(n − ν) × n`, orthonormal rows annihilating `W₁`.
    pub u1perp: DMatrix<f64>,
    /// Linear transversal dynamics `U₁⊥ A U₁⊥ᵀ`.
    pub b1: DMatrix<f64>,
    pub argument: NonlinearArgument,
    /// Tensors of degree `2, 3, …, p`.
    pub tensors: Vec<HtTensor>,
    pub s: PolyMap,
    pub koopman: bool,
    pub spectral: SpectralReport,
}

impl FoliationModel {
    pub fn encoder_order(&self) -> usize {
        self.tensors.len() + 1
    }

    /// Inputs of the nonlinear terms: one matrix for the complement form, a
    /// `(full, projected)` pair for the difference form.
    fn arguments(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        match self.argument {
            NonlinearArgument::Complement => (&self.u1perp * x, None),
            NonlinearArgument::FullDifference => (x.clone(), Some(&self.w1 * (self.w1.transpose() * x))),
        }
    }

    fn tensor_term(&self, d: usize, args: &(DMatrix<f64>, Option<DMatrix<f64>>)) -> DMatrix<f64> {
        let t = &self.tensors[d];
        let mut v = t.eval_batch(&args.0);
        if let Some(p) = &args.1 {
            v -= t.eval_batch(p);
        }
        v
    }

    /// Nonlinear part of the encoder for the columns of `x`.
    pub fn nonlinear_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let args = self.arguments(x);
        let mut out = DMatrix::zeros(self.nu, x.ncols());
        for d in 0..self.tensors.len() {
            out += self.tensor_term(d, &args);
        }
        out
    }

    pub fn encode_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.u1 * x + self.nonlinear_batch(x)
    }

    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.encode_batch(&xm).column(0).into_owned()
    }

    /// Per-sample `S(U(x)) − U(y)` and `U(x)`.
    fn residuals(&self, ds: &TrajectoryDataset) -> (DMatrix<f64>, DMatrix<f64>) {
        let ux = self.encode_batch(&ds.xs);
        let uy = self.encode_batch(&ds.ys);
        (self.s.eval_batch(&ux) - uy, ux)
    }

    /// Objective value and relative errors `‖S(U(x)) − U(y)‖ / ‖U(x)‖`.
    /// Samples with negligible `‖U(x)‖` are left out of the relative errors.
    pub fn residual(&self, ds: &TrajectoryDataset) -> (f64, Vec<f64>) {
        let (r, ux) = self.residuals(ds);
        let value: f64 = r.column_iter().zip(&ds.weights).map(|(c, w)| w * c.norm_squared()).sum();
        let norms: Vec<f64> = ux.column_iter().map(|c| c.norm()).collect();
        let rms = (norms.iter().map(|v| v * v).sum::<f64>() / norms.len().max(1) as f64).sqrt();
        let eps = 1e-10 * rms;
        let erel = r
            .column_iter()
            .zip(&norms)
            .filter(|(_, &u)| u > eps)
            .map(|(c, &u)| c.norm() / u)
            .collect();
        (value, erel)
    }

    pub fn to_data(&self) -> FoliationData {
        FoliationData {
            n: self.n,
            nu: self.nu,
            argument: self.argument,
            koopman: self.koopman,
            u1: MatrixData::from_matrix(&self.u1),
            w1: MatrixData::from_matrix(&self.w1),
            u1perp: MatrixData::from_matrix(&self.u1perp),
            b1: MatrixData::from_matrix(&self.b1),
            tensors: self.tensors.iter().map(|t| t.to_data()).collect(),
            s: self.s.to_data(),
            spectral: self.spectral.clone(),
        }
    }

    pub fn from_data(d: &FoliationData) -> Result<Self> {
        let m = FoliationModel {
            n: d.n,
            nu: d.nu,
            u1: d.u1.to_matrix()?,
            w1: d.w1.to_matrix()?,
            u1perp: d.u1perp.to_matrix()?,
            b1: d.b1.to_matrix()?,
            argument: d.argument,
            tensors: d.tensors.iter().map(HtTensor::from_data).collect::<Result<_>>()?,
            s: PolyMap::from_data(&d.s)?,
            koopman: d.koopman,
            spectral: d.spectral.clone(),
        };
        if m.u1.shape() != (m.nu, m.n) || m.w1.shape() != (m.n, m.nu) || m.u1perp.shape() != (m.n - m.nu, m.n) {
            return Err(Error::InvalidInput("foliation matrices have inconsistent shapes".into()));
        }
        Ok(m)
    }
}

/// Serialised foliation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoliationData {
    pub n: usize,
    pub nu: usize,
    pub argument: NonlinearArgument,
    pub koopman: bool,
    pub u1: MatrixData,
    pub w1: MatrixData,
    pub u1perp: MatrixData,
    pub b1: MatrixData,
    pub tensors: Vec<HtTensorData>,
    pub s: PolyMapData,
    pub spectral: SpectralReport,
}

/// Settings of a foliation fit.
#[derive(Debug, Clone)]
pub struct FoliationConfig {
    pub select: Select,
    pub encoder_order: usize,
    pub map_order: usize,
    pub rank: usize,
    pub koopman: bool,
    pub argument: NonlinearArgument,
    /// Radius of the ball used to estimate the linear part; `None` picks the
    /// data's default radius.
    pub linear_radius: Option<f64>,
    pub seed: u64,
    pub gs: GsOptions,
}

impl Default for FoliationConfig {
    fn default() -> Self {
        FoliationConfig {
            select: Select::Indices(vec![0]),
            encoder_order: 5,
            map_order: 7,
            rank: 4,
            koopman: false,
            argument: NonlinearArgument::FullDifference,
            linear_radius: None,
            seed: 1,
            gs: GsOptions::default(),
        }
    }
}

/// One additive term `sign · E_s Mᵀ in_s` of a quantity that is linear in a
/// block variable `M`. Column `s` of `env` holds `E_s` (`ν × k`, column-major);
/// `None` stands for the identity.
struct LinTerm {
    sign: f64,
    env: Option<DMatrix<f64>>,
    inp: DMatrix<f64>,
}

/// `base + Σ terms`, evaluated for every sample.
struct Side {
    base: DMatrix<f64>,
    terms: Vec<LinTerm>,
}

impl Side {
    fn lin(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let nu = self.base.nrows();
        let mut out = DMatrix::zeros(nu, self.base.ncols());
        for t in &self.terms {
            let z = m.tr_mul(&t.inp);
            match &t.env {
                None => out += &z * t.sign,
                Some(env) => {
                    for s in 0..out.ncols() {
                        let e = env.column(s);
                        for p in 0..z.nrows() {
                            let zp = t.sign * z[(p, s)];
                            for i in 0..nu {
                                out[(i, s)] += e[i + nu * p] * zp;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn eval(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.base + self.lin(m)
    }

    /// Gradient of `Σ_s ⟨g_s, lin_s(M)⟩` with respect to `M`.
    fn adjoint(&self, g: &DMatrix<f64>, shape: (usize, usize)) -> DMatrix<f64> {
        let nu = g.nrows();
        let mut out = DMatrix::zeros(shape.0, shape.1);
        for t in &self.terms {
            let h = match &t.env {
                None => g.clone(),
                Some(env) => {
                    let mut h = DMatrix::zeros(shape.1, g.ncols());
                    for s in 0..g.ncols() {
                        let e = env.column(s);
                        for p in 0..shape.1 {
                            h[(p, s)] = (0..nu).map(|i| e[i + nu * p] * g[(i, s)]).sum();
                        }
                    }
                    h
                }
            };
            out.gemm(t.sign, &t.inp, &h.transpose(), 1.0);
        }
        out
    }
}

/// Per-sample `r_s = S(a_s) − b_s`, `DS(a_s)` and the curvature
/// `Σ_i r_{s,i} ∇²S_i(a_s)`, the last two flattened column-major.
struct Linearisation {
    r: DMatrix<f64>,
    jac: DMatrix<f64>,
    curv: DMatrix<f64>,
}

/// Objective `Σ w_s ‖S(a_s(M)) − b_s(M)‖²` with `a`, `b` affine in `M`.
struct EncoderBlock<'a> {
    s: &'a PolyMap,
    weights: &'a [f64],
    x: Side,
    y: Side,
    shape: (usize, usize),
    cache: RefCell<Option<(DMatrix<f64>, Linearisation)>>,
}

impl EncoderBlock<'_> {
    fn linearise(&self, m: &DMatrix<f64>) -> Linearisation {
        let a = self.x.eval(m);
        let b = self.y.eval(m);
        let nu = a.nrows();
        let cols: Vec<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> = (0..a.ncols())
            .into_par_iter()
            .map(|s| {
                let z = a.column(s);
                let r = self.s.eval(z.as_slice()) - b.column(s);
                let j = self.s.jacobian(z.as_slice());
                let mut h = DMatrix::zeros(nu, nu);
                let mut e = vec![0.0; nu];
                for l in 0..nu {
                    e[l] = 1.0;
                    h.set_column(l, &self.s.jacobian_dir(z.as_slice(), &e).tr_mul(&r));
                    e[l] = 0.0;
                }
                (r, j, h)
            })
            .collect();
        let n = a.ncols();
        let mut r = DMatrix::zeros(nu, n);
        let mut jac = DMatrix::zeros(nu * nu, n);
        let mut curv = DMatrix::zeros(nu * nu, n);
        for (s, (rs, js, hs)) in cols.into_iter().enumerate() {
            r.set_column(s, &rs);
            jac.column_mut(s).copy_from_slice(js.as_slice());
            curv.column_mut(s).copy_from_slice(hs.as_slice());
        }
        Linearisation { r, jac, curv }
    }

    fn cached(&self, m: &DMatrix<f64>) -> std::cell::Ref<'_, Linearisation> {
        let fresh = matches!(&*self.cache.borrow(), Some((mm, _)) if mm == m);
        if !fresh {
            let lin = self.linearise(m);
            *self.cache.borrow_mut() = Some((m.clone(), lin));
        }
        std::cell::Ref::map(self.cache.borrow(), |c| &c.as_ref().unwrap().1)
    }
}

impl Objective for EncoderBlock<'_> {
    fn value(&self, m: &DMatrix<f64>) -> f64 {
        let a = self.x.eval(m);
        let b = self.y.eval(m);
        let sa = self.s.eval_batch(&a);
        (sa - b).column_iter().zip(self.weights).map(|(c, w)| w * c.norm_squared()).sum()
    }

    fn gradient(&self, m: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let lin = self.cached(m);
        let nu = lin.r.nrows();
        let n = lin.r.ncols();
        let mut ga = DMatrix::zeros(nu, n);
        let mut gb = DMatrix::zeros(nu, n);
        let mut f = 0.0;
        for s in 0..n {
            let w = self.weights[s];
            let r = lin.r.column(s);
            let j = lin.jac.column(s);
            f += w * r.norm_squared();
            for c in 0..nu {
                ga[(c, s)] = 2.0 * w * (0..nu).map(|i| j[i + nu * c] * r[i]).sum::<f64>();
                gb[(c, s)] = -2.0 * w * r[c];
            }
        }
        let g = self.x.adjoint(&ga, self.shape) + self.y.adjoint(&gb, self.shape);
        (f, g)
    }

    fn hess_vec(&self, m: &DMatrix<f64>, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let lin = self.cached(m);
        let da = self.x.lin(v);
        let db = self.y.lin(v);
        let nu = da.nrows();
        let n = da.ncols();
        let mut ha = DMatrix::zeros(nu, n);
        let mut hb = DMatrix::zeros(nu, n);
        let mut dr = vec![0.0; nu];
        for s in 0..n {
            let w = self.weights[s];
            let j = lin.jac.column(s);
            let h = lin.curv.column(s);
            for (i, d) in dr.iter_mut().enumerate() {
                *d = (0..nu).map(|c| j[i + nu * c] * da[(c, s)]).sum::<f64>() - db[(i, s)];
                hb[(i, s)] = -2.0 * w * *d;
            }
            for c in 0..nu {
                let gn: f64 = (0..nu).map(|i| j[i + nu * c] * dr[i]).sum();
                let cu: f64 = (0..nu).map(|l| h[c + nu * l] * da[(l, s)]).sum();
                ha[(c, s)] = 2.0 * w * (gn + cu);
            }
        }
        Some(self.x.adjoint(&ha, self.shape) + self.y.adjoint(&hb, self.shape))
    }
}

/// Objective in the coefficients `C` of `S`: `Σ w_s ‖C φ(a_s) − b_s‖²`.
struct MapBlock<'a> {
    phi: DMatrix<f64>,
    b: DMatrix<f64>,
    weights: &'a [f64],
}

impl MapBlock<'_> {
    fn weighted(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = r.clone();
        for (s, mut c) in r.column_iter_mut().enumerate() {
            c *= self.weights[s];
        }
        r
    }
}

impl Objective for MapBlock<'_> {
    fn value(&self, c: &DMatrix<f64>) -> f64 {
        let r = c * &self.phi - &self.b;
        r.column_iter().zip(self.weights).map(|(col, w)| w * col.norm_squared()).sum()
    }

    fn gradient(&self, c: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let r = c * &self.phi - &self.b;
        let f = r.column_iter().zip(self.weights).map(|(col, w)| w * col.norm_squared()).sum();
        (f, self.weighted(&r) * self.phi.transpose() * 2.0)
    }

    fn hess_vec(&self, _c: &DMatrix<f64>, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        Some(self.weighted(&(v * &self.phi)) * self.phi.transpose() * 2.0)
    }
}

#[derive(Debug, Clone, Copy)]
enum BlockKind {
    Linear,
    Node { degree: usize, node: usize },
    Map,
}

/// Block structure of the foliation objective for Gauss-Southwell.
pub struct FoliationProblem<'a> {
    pub model: FoliationModel,
    ds: &'a TrajectoryDataset,
    blocks: Vec<BlockKind>,
}

impl<'a> FoliationProblem<'a> {
    pub fn new(model: FoliationModel, ds: &'a TrajectoryDataset) -> Self {
        let mut blocks = vec![BlockKind::Linear];
        for (d, t) in model.tensors.iter().enumerate() {
            for node in 0..t.num_nodes() {
                blocks.push(BlockKind::Node { degree: d, node });
            }
        }
        blocks.push(BlockKind::Map);
        FoliationProblem { model, ds, blocks }
    }

    fn node_side(&self, data: &DMatrix<f64>, degree: usize, node: usize) -> Side {
        let m = &self.model;
        let args = m.arguments(data);
        let mut base = &m.u1 * data;
        for d in 0..m.tensors.len() {
            if d != degree {
                base += m.tensor_term(d, &args);
            }
        }
        let t = &m.tensors[degree];
        let mut terms = Vec::new();
        let fwd = t.forward(&args.0);
        terms.push(LinTerm { sign: 1.0, env: Some(t.environment(node, &fwd)), inp: fwd.inputs[node].clone() });
        if let Some(p) = &args.1 {
            let fwd = t.forward(p);
            terms.push(LinTerm { sign: -1.0, env: Some(t.environment(node, &fwd)), inp: fwd.inputs[node].clone() });
        }
        Side { base, terms }
    }

    fn linear_side(&self, data: &DMatrix<f64>) -> Side {
        Side { base: self.model.nonlinear_batch(data), terms: vec![LinTerm { sign: 1.0, env: None, inp: data.clone() }] }
    }
}

impl BlockProblem for FoliationProblem<'_> {
    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn group(&self, b: usize) -> usize {
        match self.blocks[b] {
            BlockKind::Linear => 0,
            BlockKind::Node { degree, .. } => 1 + degree,
            BlockKind::Map => 1 + self.model.tensors.len(),
        }
    }

    fn name(&self, b: usize) -> String {
        match self.blocks[b] {
            BlockKind::Linear => "U1".into(),
            BlockKind::Node { degree, node } => format!("T{}[{}]", degree + 2, node),
            BlockKind::Map => "S".into(),
        }
    }

    fn manifold(&self, b: usize) -> Manifold {
        match self.blocks[b] {
            BlockKind::Linear => Manifold::Stiefel,
            BlockKind::Node { degree, node } => {
                if self.model.tensors[degree].is_orthonormal_node(node) {
                    Manifold::Stiefel
                } else {
                    Manifold::Euclidean
                }
            }
            BlockKind::Map => Manifold::Euclidean,
        }
    }

    fn point(&self, b: usize) -> DMatrix<f64> {
        match self.blocks[b] {
            BlockKind::Linear => self.model.u1.transpose(),
            BlockKind::Node { degree, node } => self.model.tensors[degree].mats[node].clone(),
            BlockKind::Map => self.model.s.coeffs.clone(),
        }
    }

    fn set_point(&mut self, b: usize, p: DMatrix<f64>) {
        match self.blocks[b] {
            BlockKind::Linear => self.model.u1 = p.transpose(),
            BlockKind::Node { degree, node } => self.model.tensors[degree].mats[node] = p,
            BlockKind::Map => self.model.s.coeffs = p,
        }
    }

    fn value(&self) -> f64 {
        self.model.residual(self.ds).0
    }

    fn block_gradients(&self, blocks: &[usize]) -> Vec<DMatrix<f64>> {
        let degree = match self.blocks[blocks[0]] {
            BlockKind::Node { degree, .. } if blocks.len() > 1 => degree,
            _ => return blocks.iter().map(|&b| self.block_objective(b).gradient(&self.point(b)).1).collect(),
        };
        // one backward sweep gives the gradients of all frames of a tensor
        let m = &self.model;
        let ds = self.ds;
        let ux = m.encode_batch(&ds.xs);
        let r = m.s.eval_batch(&ux) - m.encode_batch(&ds.ys);
        let mut gx = DMatrix::zeros(m.nu, r.ncols());
        for s in 0..r.ncols() {
            let w = 2.0 * ds.weights[s];
            gx.set_column(s, &(m.s.jacobian(ux.column(s).as_slice()).tr_mul(&r.column(s)) * w));
        }
        let mut gy = r;
        for (s, mut c) in gy.column_iter_mut().enumerate() {
            c *= -2.0 * ds.weights[s];
        }
        let t = &m.tensors[degree];
        let mut total: Vec<DMatrix<f64>> = t.mats.iter().map(|x| DMatrix::zeros(x.nrows(), x.ncols())).collect();
        for (data, g) in [(&ds.xs, &gx), (&ds.ys, &gy)] {
            let args = m.arguments(data);
            for (acc, gr) in total.iter_mut().zip(t.grad_nodes(&args.0, g)) {
                *acc += gr;
            }
            if let Some(p) = &args.1 {
                for (acc, gr) in total.iter_mut().zip(t.grad_nodes(p, g)) {
                    *acc -= gr;
                }
            }
        }
        blocks
            .iter()
            .map(|&b| match self.blocks[b] {
                BlockKind::Node { degree: d, node } if d == degree => total[node].clone(),
                _ => self.block_objective(b).gradient(&self.point(b)).1,
            })
            .collect()
    }

    fn block_objective<'b>(&'b self, b: usize) -> Box<dyn Objective + 'b> {
        let ds = self.ds;
        match self.blocks[b] {
            BlockKind::Linear => Box::new(EncoderBlock {
                s: &self.model.s,
                weights: &ds.weights,
                x: self.linear_side(&ds.xs),
                y: self.linear_side(&ds.ys),
                shape: (self.model.n, self.model.nu),
                cache: RefCell::new(None),
            }),
            BlockKind::Node { degree, node } => Box::new(EncoderBlock {
                s: &self.model.s,
                weights: &ds.weights,
                x: self.node_side(&ds.xs, degree, node),
                y: self.node_side(&ds.ys, degree, node),
                shape: self.model.tensors[degree].mats[node].shape(),
                cache: RefCell::new(None),
            }),
            BlockKind::Map => {
                let ux = self.model.encode_batch(&ds.xs);
                Box::new(MapBlock {
                    phi: self.model.s.basis.eval_batch(&ux),
                    b: self.model.encode_batch(&ds.ys),
                    weights: &ds.weights,
                })
            }
        }
    }
}

/// Initial model from the linear part of the data.
pub fn initial_model(ds: &TrajectoryDataset, cfg: &FoliationConfig) -> Result<FoliationModel> {
    if cfg.encoder_order < 1 || cfg.map_order < 1 {
        return Err(Error::InvalidInput("orders must be at least one".into()));
    }
    let near = ds.restrict_ball(cfg.linear_radius.unwrap_or_else(|| ds.default_radius()))?;
    let a = fit_linear_map(&near)?;
    let init = linear_init(&a, &cfg.select, cfg.encoder_order.max(2))?;
    let n = ds.dim();
    let nu = init.u1.nrows();
    let m = match cfg.argument {
        NonlinearArgument::Complement => n - nu,
        NonlinearArgument::FullDifference => n,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors = (2..=cfg.encoder_order).map(|d| HtTensor::random(&mut rng, d, m, nu, cfg.rank)).collect();
    let q = if cfg.koopman { 1 } else { cfg.map_order };
    let mut s = PolyMap::zeros(nu, nu, 1, q);
    s.set_linear(&init.s1);
    Ok(FoliationModel {
        n,
        nu,
        u1: init.u1,
        w1: init.w1,
        u1perp: init.u1perp,
        b1: init.b1,
        argument: cfg.argument,
        tensors,
        s,
        koopman: cfg.koopman,
        spectral: init.report,
    })
}

/// Fits an invariant foliation by Gauss-Southwell block descent.
pub fn fit_foliation(ds: &TrajectoryDataset, cfg: &FoliationConfig) -> Result<(FoliationModel, GsReport)> {
    let model = initial_model(ds, cfg)?;
    // the full list stays in the spectral report of the model
    let res = &model.spectral.resonances;
    if let Some(r) = res.iter().min_by(|a, b| a.distance.total_cmp(&b.distance)) {
        log::warn!(
            "{} near resonances; closest {:?}: exponents {:?} target {} (distance {:.3e})",
            res.len(),
            r.kind,
            r.exponents,
            r.target,
            r.distance
        );
    }
    for r in res {
        log::debug!("near resonance {:?}: exponents {:?} target {} (distance {:.3e})", r.kind, r.exponents, r.target, r.distance);
    }
    let mut problem = FoliationProblem::new(model, ds);
    let report = gauss_southwell(&mut problem, &cfg.gs)?;
    Ok((problem.model, report))
}

/// Mean and maximum of a list of relative errors.
pub fn error_stats(erel: &[f64]) -> (f64, f64) {
    let mean = erel.iter().sum::<f64>() / erel.len().max(1) as f64;
    (mean, erel.iter().cloned().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_linear_init() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.8]);
        let li = linear_init(&a, &Select::Indices(vec![0]), 3).unwrap();
        assert!((li.u1.abs() - DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).amax() < 1e-12);
        assert!((li.w1.abs() - DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).amax() < 1e-12);
        assert!((li.s1[(0, 0)] - 0.9).abs() < 1e-12 && (li.b1[(0, 0)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn frequency_selection_takes_the_pair() {
        let mut a = DMatrix::zeros(4, 4);
        let (r1, t1, r2, t2): (f64, f64, f64, f64) = (0.95, 0.3, 0.8, 1.1);
        a[(0, 0)] = r1 * t1.cos();
        a[(0, 1)] = -r1 * t1.sin();
        a[(1, 0)] = r1 * t1.sin();
        a[(1, 1)] = r1 * t1.cos();
        a[(2, 2)] = r2 * t2.cos();
        a[(2, 3)] = -r2 * t2.sin();
        a[(3, 2)] = r2 * t2.sin();
        a[(3, 3)] = r2 * t2.cos();
        let li = linear_init(&a, &Select::Frequency(1.0), 3).unwrap();
        assert_eq!(li.u1.nrows(), 2);
        let ev = li.s1.complex_eigenvalues();
        assert!((ev[0].norm() - 0.8).abs() < 1e-10 && (ev[0].arg().abs() - 1.1).abs() < 1e-10);
    }

    #[test]
    fn exact_resonance_is_flagged() {
        let ev = [Complex::new(0.9, 0.0), Complex::new(0.81, 0.0)];
        let res = resonance_check(&ev, &[0], 3);
        assert!(res.iter().any(|r| r.kind == ResonanceKind::Manifold && r.exponents == vec![2, 0] && r.distance < 1e-12));
        assert!(resonance_check(&[Complex::new(0.5, 0.0)], &[0], 5).iter().all(|r| r.kind != ResonanceKind::Foliation));
    }

    #[test]
    fn slow_pair_has_internal_near_resonances() {
        let dt: f64 = 0.1;
        let mu = Complex::from_polar((-0.002 * dt).exp(), dt);
        let ev = [mu, mu.conj(), Complex::from_polar((-0.002 * std::f64::consts::E * dt).exp(), std::f64::consts::E * dt)];
        let res = resonance_check(&ev, &[0, 1], 4);
        assert!(res.iter().any(|r| r.kind == ResonanceKind::Internal && r.exponents[..2] == [2, 1]));
    }

    fn random_stable(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = linalg::random_normal(&mut rng, n, n);
        let rho = m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        m * (0.9 / rho)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_init_is_invariant(seed in 0u64..1000, k in 0usize..4) {
            let a = random_stable(seed, 5);
            let li = linear_init(&a, &Select::Indices(vec![k]), 3).unwrap();
            let an = a.norm();
            prop_assert!((&li.u1 * &a - &li.s1 * &li.u1).norm() <= 1e-8 * an);
            prop_assert!((&li.u1perp * &li.w1).amax() < 1e-12);
            prop_assert!((&li.u1 * li.u1.transpose() - DMatrix::identity(li.u1.nrows(), li.u1.nrows())).amax() < 1e-10);
        }
    }

    fn tiny_model(argument: NonlinearArgument) -> FoliationModel {
        let a = random_stable(7, 4);
        let ds = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let xs = linalg::random_normal(&mut rng, 4, 50);
            let ys = &a * &xs;
            TrajectoryDataset::new(xs, ys).unwrap()
        };
        let cfg = FoliationConfig { encoder_order: 3, map_order: 3, rank: 2, argument, ..Default::default() };
        let mut m = initial_model(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in &mut m.tensors {
            t.mats[0] = linalg::random_normal(&mut rng, t.mats[0].nrows(), t.mats[0].ncols());
        }
        m
    }

    #[test]
    fn encoder_is_linear_on_the_invariant_subspace() {
        for arg in [NonlinearArgument::Complement, NonlinearArgument::FullDifference] {
            let m = tiny_model(arg);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let z = linalg::random_normal(&mut rng, m.nu, 20);
            let x = &m.w1 * &z;
            let dev = (m.encode_batch(&x) - &m.u1 * &x).amax();
            assert!(dev < 1e-12, "{arg:?}: {dev}");
        }
    }

    #[test]
    fn exact_linear_data_has_zero_residual() {
        let a = random_stable(9, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = linalg::random_normal(&mut rng, 4, 40);
        let ds = TrajectoryDataset::new(xs.clone(), &a * xs).unwrap();
        let cfg = FoliationConfig { encoder_order: 1, map_order: 1, ..Default::default() };
        let m = initial_model(&ds, &cfg).unwrap();
        let (v, _) = m.residual(&ds);
        assert!(v < 1e-20, "{v}");
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let m = tiny_model(NonlinearArgument::FullDifference);
        let a = random_stable(7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = linalg::random_normal(&mut rng, 4, 30) * 0.3;
        let ds = TrajectoryDataset::new(xs.clone(), &a * &xs + xs.map(|v| 0.1 * v * v)).unwrap();
        let mut m = m;
        for c in m.s.coeffs.iter_mut().skip(4) {
            *c = 0.05;
        }
        let p = FoliationProblem::new(m, &ds);
        for b in 0..p.num_blocks() {
            let obj = p.block_objective(b);
            let x0 = p.point(b);
            let (f0, g) = obj.gradient(&x0);
            assert!((f0 - p.value()).abs() <= 1e-10 * f0.abs().max(1e-300), "block {}", p.name(b));
            let dir = linalg::random_normal(&mut rng, x0.nrows(), x0.ncols());
            let h = 1e-6;
            let fd = (obj.value(&(&x0 + &dir * h)) - obj.value(&(&x0 - &dir * h))) / (2.0 * h);
            let an = g.dot(&dir);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-8), "block {}: {fd} vs {an}", p.name(b));
            let hv = obj.hess_vec(&x0, &dir).unwrap();
            let (_, gp) = obj.gradient(&(&x0 + &dir * h));
            let (_, gm) = obj.gradient(&(&x0 - &dir * h));
            let fdh = (gp - gm) / (2.0 * h);
            assert!((&fdh - &hv).amax() <= 1e-5 * hv.amax().max(1e-8), "block {} hessian", p.name(b));
        }
        let nodes: Vec<usize> = (0..p.num_blocks()).filter(|&b| p.group(b) == 2).collect();
        let grouped = p.block_gradients(&nodes);
        for (g, &b) in grouped.iter().zip(&nodes) {
            let single = p.block_objective(b).gradient(&p.point(b)).1;
            assert!((g - &single).amax() <= 1e-10 * single.amax().max(1e-12), "block {}", p.name(b));
        }
    }

    #[test]
    fn serialisation_round_trip() {
        let m = tiny_model(NonlinearArgument::Complement);
        let text = serde_json::to_string(&m.to_data()).unwrap();
        let back = FoliationModel::from_data(&serde_json::from_str(&text).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = linalg::random_normal(&mut rng, 4, 5);
        assert_eq!(m.encode_batch(&x), back.encode_batch(&x));
    }
}
