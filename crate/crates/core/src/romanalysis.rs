//! Analysis of two dimensional reduced order models: the real normal form of
//! an oscillatory map, its polar form `r ↦ R(r)`, `θ ↦ θ + T(r)`, and the
//! instantaneous frequency and damping ratio of the invariant manifold after
//! correcting for the nonlinear parametrisation of the decoder.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector, Matrix2, Vector2};

use crate::data::AmplitudeMap;
use crate::error::{Error, Result};
use crate::polynomial::PolyMap;

type C64 = Complex<f64>;

/// Dense complex polynomial in two variables, truncated at total degree `deg`.
/// Coefficient `(p, q)` multiplies `a^p b^q`.
#[derive(Debug, Clone, PartialEq)]
struct CPoly {
    deg: usize,
    c: Vec<C64>,
}

impl CPoly {
    fn zeros(deg: usize) -> Self {
        CPoly { deg, c: vec![C64::new(0.0, 0.0); (deg + 1) * (deg + 1)] }
    }

    fn one(deg: usize) -> Self {
        let mut p = CPoly::zeros(deg);
        p.c[0] = C64::new(1.0, 0.0);
        p
    }

    fn linear(deg: usize, ca: C64, cb: C64) -> Self {
        let mut p = CPoly::zeros(deg);
        if deg >= 1 {
            p.set(1, 0, ca);
            p.set(0, 1, cb);
        }
        p
    }

    fn get(&self, p: usize, q: usize) -> C64 {
        self.c[p * (self.deg + 1) + q]
    }

    fn set(&mut self, p: usize, q: usize, v: C64) {
        self.c[p * (self.deg + 1) + q] = v;
    }

    fn terms(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..=self.deg).flat_map(move |k| (0..=k).map(move |q| (k - q, q)))
    }

    fn add_scaled(&mut self, other: &CPoly, s: C64) {
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += b * s;
        }
    }

    fn mul(&self, other: &CPoly) -> CPoly {
        let mut out = CPoly::zeros(self.deg);
        for (p1, q1) in self.terms() {
            let a = self.get(p1, q1);
            if a == C64::new(0.0, 0.0) {
                continue;
            }
            for p2 in 0..=(self.deg - p1 - q1) {
                for q2 in 0..=(self.deg - p1 - q1 - p2) {
                    let b = other.get(p2, q2);
                    let v = out.get(p1 + p2, q1 + q2) + a * b;
                    out.set(p1 + p2, q1 + q2, v);
                }
            }
        }
        out
    }

    /// Terms of total degree exactly `k`.
    fn degree_part(&self, k: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..=k).map(move |q| (k - q, q))
    }

    /// `Σ c_pq A^p B^q`, truncated at `self.deg`.
    fn compose(&self, a: &CPoly, b: &CPoly) -> CPoly {
        let deg = self.deg;
        let mut apow = vec![CPoly::one(deg)];
        let mut bpow = vec![CPoly::one(deg)];
        for k in 1..=deg {
            apow.push(apow[k - 1].mul(a));
            bpow.push(bpow[k - 1].mul(b));
        }
        let mut out = CPoly::zeros(deg);
        for (p, q) in self.terms() {
            let c = self.get(p, q);
            if c != C64::new(0.0, 0.0) {
                out.add_scaled(&apow[p].mul(&bpow[q]), c);
            }
        }
        out
    }

    /// For a polynomial in a conjugate pair `(ζ, ζ̄)`, the polynomial of the
    /// complex conjugate value.
    fn conj_pair(&self) -> CPoly {
        let mut out = CPoly::zeros(self.deg);
        for (p, q) in self.terms() {
            out.set(q, p, self.get(p, q).conj());
        }
        out
    }

    /// Component `k` of a real polynomial map as a polynomial in two real variables.
    fn from_real(map: &PolyMap, k: usize, deg: usize) -> CPoly {
        let mut out = CPoly::zeros(deg);
        for i in 0..map.basis.len() {
            let e = map.basis.exponent(i);
            if (e[0] + e[1]) as usize <= deg {
                let v = out.get(e[0] as usize, e[1] as usize) + C64::new(map.coeffs[(k, i)], 0.0);
                out.set(e[0] as usize, e[1] as usize, v);
            }
        }
        out
    }

    /// Writes the real and imaginary parts of `self` (a polynomial in real
    /// variables) as two rows of a real polynomial map.
    fn to_real_rows(&self, deg: usize) -> PolyMap {
        let mut map = PolyMap::zeros(2, 2, 0, deg);
        for (p, q) in self.terms() {
            let i = map.basis.index_of(&[p as u32, q as u32]).expect("monomial in basis");
            let v = self.get(p, q);
            map.coeffs[(0, i)] = v.re;
            map.coeffs[(1, i)] = v.im;
        }
        map
    }
}

/// Which invariance equation the normal form transformation satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalFormStyle {
    /// `U_n ∘ S = S_n ∘ U_n` with `U_n` mapping model coordinates to normal
    /// form coordinates (used with foliations).
    Encoder,
    /// `S ∘ W_n = W_n ∘ S_n` with `W_n` mapping normal form coordinates to
    /// model coordinates (used with autoencoders).
    Decoder,
}

/// Real normal form `η ↦ η f(|η|²)` of a planar map with a complex pair of
/// eigenvalues, written in the real coordinates `η = η₁ + iη₂`.
#[derive(Debug, Clone)]
pub struct NormalForm {
    pub style: NormalFormStyle,
    pub order: usize,
    /// Eigenvalue with positive imaginary part.
    pub mu: C64,
    /// Coefficients of `f(ρ) = Σ f_k ρ^k`, `f_0 = μ`.
    pub f: Vec<C64>,
    /// `U_n` (encoder style) or `W_n` (decoder style), `2 → 2`.
    pub transform: PolyMap,
    /// `S_n`, the real normal form map.
    pub map: PolyMap,
}

/// Radius of `|μ^p μ̄^q − μ|` below which a term is treated as resonant and
/// the transformation refuses to divide.
pub const SMALL_DIVISOR: f64 = 1e-8;

/// Normal form of a planar polynomial map up to its degree.
pub fn normal_form_2d(s: &PolyMap, style: NormalFormStyle) -> Result<NormalForm> {
    if s.nvars() != 2 || s.outdim() != 2 {
        return Err(Error::InvalidInput(format!("normal form needs a planar map, got {}→{}", s.nvars(), s.outdim())));
    }
    let deg = s.basis.max_deg();
    if s.basis.min_deg() == 0 && s.coeffs.column(0).amax() > 1e-12 {
        return Err(Error::InvalidInput("map has a nonzero constant term".into()));
    }
    let a = s.linear_part();
    let tr = a.trace();
    let det = a.determinant();
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        return Err(Error::InvalidInput(format!(
            "linear part has real eigenvalues {} and {}",
            tr / 2.0 + disc.sqrt(),
            tr / 2.0 - disc.sqrt()
        )));
    }
    let mu = C64::new(tr / 2.0, (-disc).sqrt());
    // right and left eigenvectors for μ with l·v = 1
    let a11 = C64::new(a[(0, 0)], 0.0);
    let a12 = C64::new(a[(0, 1)], 0.0);
    let a21 = C64::new(a[(1, 0)], 0.0);
    let a22 = C64::new(a[(1, 1)], 0.0);
    let mut v = if a12.norm() >= a21.norm() { [a12, mu - a11] } else { [mu - a22, a21] };
    // scale so that ζ = z₁ + i z₂ whenever the linear part is a rotation-scaling
    let pivot = if v[0].norm() > 1e-12 { v[0] } else { v[1] * C64::new(0.0, 1.0) };
    let scale = (pivot / pivot.norm()) * (2.0 * (v[0].norm_sqr() + v[1].norm_sqr())).sqrt();
    v = [v[0] / scale, v[1] / scale];
    let mut l = if a21.norm() >= a12.norm() { [a21, mu - a11] } else { [mu - a22, a12] };
    let lv = l[0] * v[0] + l[1] * v[1];
    l = [l[0] / lv, l[1] / lv];

    // the map in the complex coordinate ζ = l·z, z = vζ + v̄ζ̄
    let z1 = CPoly::linear(deg, v[0], v[0].conj());
    let z2 = CPoly::linear(deg, v[1], v[1].conj());
    let s1 = CPoly::from_real(s, 0, deg).compose(&z1, &z2);
    let s2 = CPoly::from_real(s, 1, deg).compose(&z1, &z2);
    let mut sz = s1.clone();
    sz.c.iter_mut().zip(&s2.c).for_each(|(x, y)| *x = *x * l[0] + y * l[1]);
    let szb = sz.conj_pair();

    // transformation t (U_n or W_n) and normal form n, both starting at ζ
    let mut t = CPoly::linear(deg, C64::new(1.0, 0.0), C64::new(0.0, 0.0));
    let mut n = CPoly::linear(deg, mu, C64::new(0.0, 0.0));
    for k in 2..=deg {
        let resid = match style {
            NormalFormStyle::Encoder => {
                let mut r = t.compose(&sz, &szb);
                r.add_scaled(&n.compose(&t, &t.conj_pair()), C64::new(-1.0, 0.0));
                r
            }
            NormalFormStyle::Decoder => {
                let mut r = sz.compose(&t, &t.conj_pair());
                r.add_scaled(&t.compose(&n, &n.conj_pair()), C64::new(-1.0, 0.0));
                r
            }
        };
        for (p, q) in resid.degree_part(k) {
            let e = resid.get(p, q);
            if p == q + 1 {
                // resonant for |μ| = 1; kept in the normal form
                n.set(p, q, e);
                continue;
            }
            let div = mu.powu(p as u32) * mu.conj().powu(q as u32) - mu;
            if div.norm() < SMALL_DIVISOR {
                return Err(Error::InvalidInput(format!(
                    "near resonance for the term ζ^{p} ζ̄^{q}: divisor {:.3e}",
                    div.norm()
                )));
            }
            match style {
                NormalFormStyle::Encoder => t.set(p, q, -e / div),
                NormalFormStyle::Decoder => t.set(p, q, e / div),
            }
        }
    }
    let f: Vec<C64> = (0..=(deg - 1) / 2).map(|j| n.get(j + 1, j)).collect();

    // real forms
    let transform = match style {
        NormalFormStyle::Encoder => {
            let zeta = CPoly::linear(deg, l[0], l[1]);
            let zetab = CPoly::linear(deg, l[0].conj(), l[1].conj());
            t.compose(&zeta, &zetab).to_real_rows(deg)
        }
        NormalFormStyle::Decoder => {
            let eta = CPoly::linear(deg, C64::new(1.0, 0.0), C64::new(0.0, 1.0));
            let etab = CPoly::linear(deg, C64::new(1.0, 0.0), C64::new(0.0, -1.0));
            let w = t.compose(&eta, &etab);
            // z = v w + conj(v w) = 2 Re(v w)
            let mut out = PolyMap::zeros(2, 2, 0, deg);
            for (p, q) in w.terms() {
                let i = out.basis.index_of(&[p as u32, q as u32]).expect("monomial in basis");
                for j in 0..2 {
                    out.coeffs[(j, i)] = 2.0 * (v[j] * w.get(p, q)).re;
                }
            }
            out
        }
    };
    let eta = CPoly::linear(deg, C64::new(1.0, 0.0), C64::new(0.0, 1.0));
    let etab = CPoly::linear(deg, C64::new(1.0, 0.0), C64::new(0.0, -1.0));
    let map = n.compose(&eta, &etab).to_real_rows(deg);
    Ok(NormalForm { style, order: deg, mu, f, transform: trim_constant(transform), map: trim_constant(map) })
}

fn trim_constant(p: PolyMap) -> PolyMap {
    let deg = p.basis.max_deg();
    let mut out = PolyMap::zeros(p.outdim(), p.nvars(), 1, deg);
    for i in 0..out.basis.len() {
        let j = p.basis.index_of(out.basis.exponent(i)).expect("monomial in basis");
        out.coeffs.set_column(i, &p.coeffs.column(j));
    }
    out
}

impl NormalForm {
    /// `f(ρ)` at `ρ = r²`.
    pub fn f_at(&self, rho: f64) -> C64 {
        self.f.iter().rev().fold(C64::new(0.0, 0.0), |acc, c| acc * rho + c)
    }

    /// Polar radial map `R(r) = r |f(r²)|`.
    pub fn radial(&self, r: f64) -> f64 {
        r * self.f_at(r * r).norm()
    }

    /// Polar angular increment `T(r) = arg f(r²)`.
    pub fn angular(&self, r: f64) -> f64 {
        self.f_at(r * r).arg()
    }

    /// Real and imaginary parts `(f_r, f_i)` as coefficient lists in `r²`.
    pub fn real_coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        (self.f.iter().map(|c| c.re).collect(), self.f.iter().map(|c| c.im).collect())
    }

    /// Maximum invariance residual over a circle of radius `radius` in the
    /// model coordinates (encoder style) or normal form coordinates (decoder style).
    pub fn invariance_residual(&self, s: &PolyMap, radius: f64) -> f64 {
        (0..64)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / 64.0;
                let z = [radius * th.cos(), radius * th.sin()];
                let d = match self.style {
                    NormalFormStyle::Encoder => {
                        self.transform.eval(s.eval(&z).as_slice()) - self.map.eval(self.transform.eval(&z).as_slice())
                    }
                    NormalFormStyle::Decoder => {
                        s.eval(self.transform.eval(&z).as_slice()) - self.transform.eval(self.map.eval(&z).as_slice())
                    }
                };
                d.norm()
            })
            .fold(0.0, f64::max)
    }

    /// Normal form coordinates `η` of the model point `z`.
    pub fn from_model(&self, z: &Vector2<f64>) -> Result<Vector2<f64>> {
        match self.style {
            NormalFormStyle::Encoder => {
                let e = self.transform.eval(z.as_slice());
                Ok(Vector2::new(e[0], e[1]))
            }
            NormalFormStyle::Decoder => {
                let lin = self.transform.linear_part();
                let lin = Matrix2::new(lin[(0, 0)], lin[(0, 1)], lin[(1, 0)], lin[(1, 1)]);
                let mut eta = lin.try_inverse().ok_or(Error::Singular { rank: 1, dim: 2 })? * z;
                for _ in 0..60 {
                    let (w, j) = self.to_model(&eta)?;
                    let r = w - z;
                    if r.norm() <= 1e-14 * (1.0 + z.norm()) {
                        return Ok(eta);
                    }
                    eta -= j.try_inverse().ok_or(Error::Newton { residual: r.norm() })? * r;
                    if !eta.iter().all(|v| v.is_finite()) {
                        break;
                    }
                }
                Err(Error::Newton { residual: f64::NAN })
            }
        }
    }

    /// Model coordinates of the normal form point `η` together with `dz/dη`.
    pub fn to_model(&self, eta: &Vector2<f64>) -> Result<(Vector2<f64>, Matrix2<f64>)> {
        match self.style {
            NormalFormStyle::Decoder => {
                let z = self.transform.eval(eta.as_slice());
                let j = self.transform.jacobian(eta.as_slice());
                Ok((Vector2::new(z[0], z[1]), Matrix2::new(j[(0, 0)], j[(0, 1)], j[(1, 0)], j[(1, 1)])))
            }
            NormalFormStyle::Encoder => {
                let lin = self.transform.linear_part();
                let lin = Matrix2::new(lin[(0, 0)], lin[(0, 1)], lin[(1, 0)], lin[(1, 1)]);
                let mut z = lin.try_inverse().ok_or(Error::Singular { rank: 1, dim: 2 })? * eta;
                for _ in 0..60 {
                    let u = self.transform.eval(z.as_slice());
                    let r = Vector2::new(u[0], u[1]) - eta;
                    let j = self.transform.jacobian(z.as_slice());
                    let j = Matrix2::new(j[(0, 0)], j[(0, 1)], j[(1, 0)], j[(1, 1)]);
                    let ji = j.try_inverse().ok_or(Error::Newton { residual: r.norm() })?;
                    if r.norm() <= 1e-14 * (1.0 + eta.norm()) {
                        return Ok((z, ji));
                    }
                    z -= ji * r;
                    if !z.iter().all(|v| v.is_finite()) {
                        break;
                    }
                }
                Err(Error::Newton { residual: f64::NAN })
            }
        }
    }
}

/// Decoder of a two dimensional invariant manifold in polar coordinates.
pub trait PolarDecoder: Sync {
    /// `(W, ∂W/∂r, ∂W/∂θ)` at `(r, θ)`.
    fn eval(&self, r: f64, theta: f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)>;
}

/// Polar decoder given by a closure.
pub struct FnDecoder<F>(pub F);

impl<F> PolarDecoder for FnDecoder<F>
where
    F: Fn(f64, f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> + Sync,
{
    fn eval(&self, r: f64, theta: f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        (self.0)(r, theta)
    }
}

/// Manifold decoder `W` (`2 → n`) expressed in the polar coordinates of a
/// normal form, `W(z(η))` with `η = (r cos θ, r sin θ)`.
pub struct NormalFormDecoder<'a> {
    pub decoder: &'a PolyMap,
    pub normal_form: &'a NormalForm,
}

impl PolarDecoder for NormalFormDecoder<'_> {
    fn eval(&self, r: f64, theta: f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let (c, s) = (theta.cos(), theta.sin());
        let (z, dz) = self.normal_form.to_model(&Vector2::new(r * c, r * s))?;
        let w = self.decoder.eval(z.as_slice());
        let dw = self.decoder.jacobian(z.as_slice());
        let dz = DMatrix::from_column_slice(2, 2, dz.as_slice());
        let j = dw * dz;
        let wr = &j * DVector::from_vec(vec![c, s]);
        let wt = &j * DVector::from_vec(vec![-r * s, r * c]);
        Ok((w, wr, wt))
    }
}

const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_86),
    (-0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_86),
];

/// Angular averages of the decoder at one radius.
#[derive(Debug, Clone, Copy)]
struct Moments {
    /// mean ⟨W, W⟩
    ww: f64,
    /// mean ⟨W, ∂_r W⟩
    wr: f64,
    /// mean ⟨∂_r W, ∂_θ W⟩
    rt: f64,
    /// mean ⟨∂_θ W, ∂_θ W⟩
    tt: f64,
}

/// The phase shift `γ` and amplitude `κ` that reparametrise a decoder so that
/// `‖W(r, ·)‖ = r` and consecutive closed curves have no relative phase.
///
/// When an amplitude map is given, inner products are taken after projecting
/// the decoder by it, and `r` then measures that amplitude.
pub struct Corrections<'a> {
    decoder: &'a dyn PolarDecoder,
    w_star: Option<DVector<f64>>,
    n_theta: usize,
    nodes: Vec<f64>,
    gamma_nodes: Vec<f64>,
    kappa_nodes: Vec<f64>,
    /// Largest parameter on which `κ` is increasing.
    t_max: f64,
}

/// Tabulated correction functions.
#[derive(Debug, Clone)]
pub struct CorrectionTable {
    pub r: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl<'a> Corrections<'a> {
    /// Tabulates on `n_r + 1` equispaced radii in `[0, r_max]` using `n_theta`
    /// angular points (trapezoid rule) and four point Gauss-Legendre in `r`.
    pub fn new(
        decoder: &'a dyn PolarDecoder,
        w_star: Option<&AmplitudeMap>,
        r_max: f64,
        n_r: usize,
        n_theta: usize,
    ) -> Result<Self> {
        if !(r_max > 0.0) || n_r == 0 || n_theta < 4 {
            return Err(Error::InvalidInput("correction grid needs r_max > 0, n_r ≥ 1, n_theta ≥ 4".into()));
        }
        let mut c = Corrections {
            decoder,
            w_star: w_star.map(|w| w.w_star.clone()),
            n_theta,
            nodes: (0..=n_r).map(|i| r_max * i as f64 / n_r as f64).collect(),
            gamma_nodes: vec![0.0],
            kappa_nodes: vec![0.0],
            t_max: r_max,
        };
        for i in 1..=n_r {
            let (a, b) = (c.nodes[i - 1], c.nodes[i]);
            let g = c.gamma_nodes[i - 1] + c.integrate_gamma_dot(a, b)?;
            c.gamma_nodes.push(g);
            let k = c.kappa(b)?;
            if k <= c.kappa_nodes[i - 1] && c.t_max == r_max {
                log::warn!("κ stops increasing at r = {b:.4}; curves are truncated there");
                c.t_max = a;
            }
            c.kappa_nodes.push(k);
        }
        if c.t_max <= 0.0 {
            return Err(Error::InvalidInput("κ is not increasing near the origin".into()));
        }
        Ok(c)
    }

    fn project(&self, v: DVector<f64>) -> DVector<f64> {
        match &self.w_star {
            Some(w) => DVector::from_element(1, w.dot(&v)),
            None => v,
        }
    }

    fn moments(&self, r: f64) -> Result<Moments> {
        let mut m = Moments { ww: 0.0, wr: 0.0, rt: 0.0, tt: 0.0 };
        for i in 0..self.n_theta {
            let th = 2.0 * PI * i as f64 / self.n_theta as f64;
            let (w, wr, wt) = self.decoder.eval(r, th)?;
            let (w, wr, wt) = (self.project(w), self.project(wr), self.project(wt));
            m.ww += w.dot(&w);
            m.wr += w.dot(&wr);
            m.rt += wr.dot(&wt);
            m.tt += wt.dot(&wt);
        }
        let n = self.n_theta as f64;
        Ok(Moments { ww: m.ww / n, wr: m.wr / n, rt: m.rt / n, tt: m.tt / n })
    }

    /// `γ'(r)`
    pub fn gamma_dot(&self, r: f64) -> Result<f64> {
        let m = self.moments(r)?;
        if m.tt <= 0.0 {
            return Err(Error::InvalidInput(format!("∂W/∂θ vanishes at r = {r}")));
        }
        Ok(-m.rt / m.tt)
    }

    /// `κ(r)`
    pub fn kappa(&self, r: f64) -> Result<f64> {
        if r == 0.0 {
            return Ok(0.0);
        }
        Ok(self.moments(r)?.ww.sqrt())
    }

    /// `κ'(r)`
    pub fn kappa_dot(&self, r: f64) -> Result<f64> {
        if r == 0.0 {
            // κ(r) / r at a tiny radius
            let h = 1e-6 * self.nodes[self.nodes.len() - 1];
            return Ok(self.kappa(h)? / h);
        }
        let m = self.moments(r)?;
        Ok(m.wr / m.ww.sqrt())
    }

    fn integrate_gamma_dot(&self, a: f64, b: f64) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let mut s = 0.0;
        for (x, w) in GAUSS4 {
            s += w * self.gamma_dot(mid + half * x)?;
        }
        Ok(s * half)
    }

    fn node_below(&self, t: f64) -> usize {
        let h = self.nodes[1];
        ((t / h).floor() as usize).min(self.nodes.len() - 2)
    }

    /// `γ(t)`
    pub fn gamma(&self, t: f64) -> Result<f64> {
        let i = self.node_below(t);
        Ok(self.gamma_nodes[i] + self.integrate_gamma_dot(self.nodes[i], t)?)
    }

    /// Largest `r` for which `κ⁻¹(r)` is available.
    pub fn r_max(&self) -> f64 {
        self.kappa_nodes[self.top_node()]
    }

    fn top_node(&self) -> usize {
        self.nodes.iter().position(|&x| x >= self.t_max).unwrap_or(self.nodes.len() - 1)
    }

    /// `κ⁻¹(r)` by safeguarded Newton iteration on the tabulated bracket.
    pub fn kappa_inv(&self, r: f64) -> Result<f64> {
        if r <= 0.0 {
            return Ok(0.0);
        }
        let top = self.top_node();
        if r > self.kappa_nodes[top] {
            return Err(Error::InvalidInput(format!(
                "amplitude {r} beyond the range of κ (max {})",
                self.kappa_nodes[top]
            )));
        }
        let j = (1..=top).find(|&j| self.kappa_nodes[j] >= r).unwrap_or(top);
        let (mut lo, mut hi) = (self.nodes[j - 1], self.nodes[j]);
        let mut t = lo + (hi - lo) * (r - self.kappa_nodes[j - 1]) / (self.kappa_nodes[j] - self.kappa_nodes[j - 1]);
        for _ in 0..100 {
            let f = self.kappa(t)? - r;
            if f.abs() <= 1e-15 * r.max(1e-300) {
                break;
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let d = self.kappa_dot(t)?;
            let mut next = t - f / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-16 * t.max(1e-300) {
                t = next;
                break;
            }
            t = next;
        }
        Ok(t)
    }

    pub fn table(&self) -> CorrectionTable {
        CorrectionTable { r: self.nodes.clone(), gamma: self.gamma_nodes.clone(), kappa: self.kappa_nodes.clone() }
    }
}

/// Instantaneous frequency and damping along the invariant manifold.
#[derive(Debug, Clone, Default)]
pub struct FreqDampCurve {
    /// Amplitude (the corrected radius, `‖W̃(r, ·)‖ = r`).
    pub amplitude: Vec<f64>,
    /// Original decoder parameter `t = κ⁻¹(r)`.
    pub t: Vec<f64>,
    pub omega: Vec<f64>,
    pub zeta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl FreqDampCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "r,A,omega,zeta,gamma,kappa")?;
        for i in 0..self.amplitude.len() {
            writeln!(
                f,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.t[i], self.amplitude[i], self.omega[i], self.zeta[i], self.gamma[i], self.kappa[i]
            )?;
        }
        Ok(())
    }

    /// Linear interpolation of `(ω, ζ)` at amplitude `a`.
    pub fn at_amplitude(&self, a: f64) -> Option<(f64, f64)> {
        let n = self.amplitude.len();
        if n == 0 || a < self.amplitude[0] || a > self.amplitude[n - 1] {
            return None;
        }
        let j = self.amplitude.partition_point(|&x| x < a).clamp(1, n - 1);
        let (a0, a1) = (self.amplitude[j - 1], self.amplitude[j]);
        let s = if a1 > a0 { (a - a0) / (a1 - a0) } else { 0.0 };
        Some((
            self.omega[j - 1] + s * (self.omega[j] - self.omega[j - 1]),
            self.zeta[j - 1] + s * (self.zeta[j] - self.zeta[j - 1]),
        ))
    }
}

/// Corrected curves of a map in polar form `(R, T)`; `ω` in rad/step, or per
/// unit time when `dt` is given.
pub fn freq_damp_map<R, T>(radial: R, angular: T, corr: &Corrections, amplitudes: &[f64], dt: Option<f64>) -> Result<FreqDampCurve>
where
    R: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let mut c = FreqDampCurve::default();
    for &r in amplitudes {
        if r <= 0.0 || r > corr.r_max() {
            log::warn!("amplitude {r} outside (0, {}]; skipped", corr.r_max());
            continue;
        }
        let t = corr.kappa_inv(r)?;
        let rt = radial(t);
        let g_t = corr.gamma(t)?;
        let omega = angular(t) + g_t - corr.gamma(rt)?;
        let zeta = -(corr.kappa(rt)? / r).ln() / omega;
        c.amplitude.push(r);
        c.t.push(t);
        c.omega.push(omega / dt.unwrap_or(1.0));
        c.zeta.push(zeta);
        c.gamma.push(g_t);
        c.kappa.push(corr.kappa(t)?);
    }
    Ok(c)
}

/// Corrected curves of a vector field in polar form `ṙ = R(r)`, `θ̇ = T(r)`.
pub fn freq_damp_map_vf<R, T>(radial: R, angular: T, corr: &Corrections, amplitudes: &[f64]) -> Result<FreqDampCurve>
where
    R: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let mut c = FreqDampCurve::default();
    for &r in amplitudes {
        if r <= 0.0 || r > corr.r_max() {
            log::warn!("amplitude {r} outside (0, {}]; skipped", corr.r_max());
            continue;
        }
        let t = corr.kappa_inv(r)?;
        let rt = radial(t);
        let omega = angular(t) - corr.gamma_dot(t)? * rt;
        let zeta = -corr.kappa_dot(t)? * rt / (r * omega);
        c.amplitude.push(r);
        c.t.push(t);
        c.omega.push(omega);
        c.zeta.push(zeta);
        c.gamma.push(corr.gamma(t)?);
        c.kappa.push(corr.kappa(t)?);
    }
    Ok(c)
}

/// Uncorrected curves of a map: `ω = T(r)`, `ζ = −log(R(r)/r)/T(r)`.
pub fn naive_freq_damp_map<R, T>(radial: R, angular: T, radii: &[f64], dt: Option<f64>) -> FreqDampCurve
where
    R: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let mut c = FreqDampCurve::default();
    for &r in radii {
        let om = angular(r);
        c.amplitude.push(r);
        c.t.push(r);
        c.omega.push(om / dt.unwrap_or(1.0));
        c.zeta.push(-(radial(r) / r).ln() / om);
        c.gamma.push(0.0);
        c.kappa.push(r);
    }
    c
}

/// Amplitude `sqrt(mean_θ (w*·W(r, θ))²)` of a closed curve of the decoder.
pub fn amplitude_of(decoder: &dyn PolarDecoder, w_star: &AmplitudeMap, r: f64, n_theta: usize) -> Result<f64> {
    let mut s = 0.0;
    for i in 0..n_theta {
        let th = 2.0 * PI * i as f64 / n_theta as f64;
        let v = w_star.apply(&decoder.eval(r, th)?.0);
        s += v * v;
    }
    Ok((s / n_theta as f64).sqrt())
}

/// Default amplitude grid: `n` points in `(0, r_max]` with denser spacing near
/// zero (half geometric, half linear).
pub fn amplitude_grid(r_max: f64, n: usize) -> Vec<f64> {
    let ng = n / 2;
    let lo = r_max * 1e-3;
    let split = r_max * 0.1;
    let mut g: Vec<f64> = (0..ng).map(|i| lo * (split / lo).powf(i as f64 / ng.max(1) as f64)).collect();
    let nl = n - ng;
    g.extend((1..=nl).map(|i| split + (r_max - split) * i as f64 / nl as f64));
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_decoder() -> FnDecoder<impl Fn(f64, f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> + Sync> {
        FnDecoder(|r: f64, th: f64| {
            let (c, s) = (th.cos(), th.sin());
            let c3 = c.powi(3);
            Ok((
                DVector::from_vec(vec![r * c - 0.25 * r.powi(3) * c3, r * s + 0.5 * r.powi(3) * c3]),
                DVector::from_vec(vec![c - 0.75 * r * r * c3, s + 1.5 * r * r * c3]),
                DVector::from_vec(vec![-r * s + 0.75 * r.powi(3) * c * c * s, r * c - 1.5 * r.powi(3) * c * c * s]),
            ))
        })
    }

    fn circular() -> FnDecoder<impl Fn(f64, f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> + Sync> {
        FnDecoder(|r: f64, th: f64| {
            let (c, s) = (th.cos(), th.sin());
            Ok((
                DVector::from_vec(vec![r * c, r * s]),
                DVector::from_vec(vec![c, s]),
                DVector::from_vec(vec![-r * s, r * c]),
            ))
        })
    }

    #[test]
    fn circular_decoder_needs_no_correction() {
        let d = circular();
        let c = Corrections::new(&d, None, 1.0, 16, 64).unwrap();
        for &r in &[0.1, 0.5, 1.0] {
            assert!(c.gamma(r).unwrap().abs() < 1e-14);
            assert!((c.kappa(r).unwrap() - r).abs() < 1e-14);
            assert!((c.kappa_inv(r).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn example_gamma_matches_closed_form() {
        let d = example_decoder();
        let c = Corrections::new(&d, None, 1.0, 64, 256).unwrap();
        let s19 = 19f64.sqrt();
        for i in 0..=20 {
            let r = i as f64 / 20.0;
            let exact = -(2.0 / s19) * (((15.0 * r * r - 8.0) / (8.0 * s19)).atan() + (1.0 / s19).atan());
            assert!((c.gamma(r).unwrap() - exact).abs() < 1e-6, "r = {r}");
        }
    }

    #[test]
    fn example_kappa_matches_quadrature() {
        let d = example_decoder();
        let c = Corrections::new(&d, None, 1.0, 8, 256).unwrap();
        for &r in &[0.25, 0.5, 0.75, 1.0] {
            // composite Simpson on a fine grid
            let n = 4000;
            let h = 2.0 * PI / n as f64;
            let f = |th: f64| {
                let (cc, s) = (th.cos(), th.sin());
                let a = r * cc - 0.25 * r.powi(3) * cc.powi(3);
                let b = r * s + 0.5 * r.powi(3) * cc.powi(3);
                a * a + b * b
            };
            let mut sum = f(0.0) + f(2.0 * PI);
            for k in 1..n {
                sum += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
            }
            let oracle = (sum * h / 3.0 / (2.0 * PI)).sqrt();
            assert!((c.kappa(r).unwrap() - oracle).abs() < 1e-8);
        }
        // the value printed alongside the example is κ², not κ
        let k = c.kappa(0.5).unwrap();
        let printed = 0.25 - 3.0 * 0.5f64.powi(4) / 16.0 + 25.0 * 0.5f64.powi(6) / 256.0;
        assert!((k * k - printed).abs() < 1e-3);
    }

    #[test]
    fn example_corrected_curves_vary() {
        let (om0, ze0): (f64, f64) = (0.3, 0.05);
        let d = example_decoder();
        let c = Corrections::new(&d, None, 1.0, 64, 256).unwrap();
        let radial = |r: f64| (-ze0 * om0).exp() * r;
        let angular = |_r: f64| om0;
        let grid = [0.02, 0.3, 0.6];
        let curve = freq_damp_map(radial, angular, &c, &grid, None).unwrap();
        let naive = naive_freq_damp_map(radial, angular, &grid, None);
        assert!(naive.omega.iter().all(|&w| (w - om0).abs() < 1e-15));
        assert!(naive.zeta.iter().all(|&z| (z - ze0).abs() < 1e-12));
        assert!((curve.omega[0] - om0).abs() < 1e-3 && (curve.zeta[0] - ze0).abs() < 1e-3);
        assert!((curve.omega[2] - om0).abs() > 1e-3);
        assert!(curve.zeta.iter().all(|&z| z > 0.0));
    }

    #[test]
    fn linear_map_gives_constant_curves() {
        let mu = C64::from_polar(0.95, 0.4);
        let a = DMatrix::from_row_slice(2, 2, &[mu.re, -mu.im, mu.im, mu.re]);
        let s = PolyMap::from_linear(&a, 3);
        let nf = normal_form_2d(&s, NormalFormStyle::Encoder).unwrap();
        let d = circular();
        let c = Corrections::new(&d, None, 1.0, 16, 64).unwrap();
        let curve = freq_damp_map(|r| nf.radial(r), |r| nf.angular(r), &c, &[0.1, 0.9], None).unwrap();
        for i in 0..2 {
            assert!((curve.omega[i] - 0.4).abs() < 1e-12);
            assert!((curve.zeta[i] + 0.95f64.ln() / 0.4).abs() < 1e-10);
        }
    }

    #[test]
    fn isometries_do_not_change_the_curves() {
        let q = nalgebra::Rotation2::new(0.7).into_inner();
        let q = DMatrix::from_column_slice(2, 2, q.as_slice());
        let base = example_decoder();
        let rotated = FnDecoder(|r: f64, th: f64| {
            let (w, wr, wt) = base.eval(r, th)?;
            Ok((&q * w, &q * wr, &q * wt))
        });
        let c1 = Corrections::new(&base, None, 0.8, 32, 128).unwrap();
        let c2 = Corrections::new(&rotated, None, 0.8, 32, 128).unwrap();
        let radial = |r: f64| 0.97 * r - 0.01 * r * r * r;
        let angular = |r: f64| 0.5 + 0.1 * r * r;
        let a = freq_damp_map(radial, angular, &c1, &[0.2, 0.5], None).unwrap();
        let b = freq_damp_map(radial, angular, &c2, &[0.2, 0.5], None).unwrap();
        for i in 0..2 {
            assert!((a.omega[i] - b.omega[i]).abs() < 1e-12 && (a.zeta[i] - b.zeta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reparametrised_decoder_is_already_corrected() {
        let base = example_decoder();
        let c = Corrections::new(&base, None, 0.9, 64, 256).unwrap();
        let radial = |r: f64| 0.96 * r - 0.02 * r.powi(3);
        let angular = |r: f64| 0.6 - 0.05 * r * r;
        let grid = [0.1, 0.3, 0.5];
        let corrected = freq_damp_map(radial, angular, &c, &grid, None).unwrap();
        // W̃(r, θ) = W(t, θ + γ(t)), t = κ⁻¹(r), with R̃, T̃ conjugated accordingly
        let tilde = FnDecoder(|r: f64, th: f64| {
            let t = c.kappa_inv(r)?;
            let g = c.gamma(t)?;
            let (w, wr, wt) = base.eval(t, th + g)?;
            let dt = 1.0 / c.kappa_dot(t)?;
            let wr_new = (wr + &wt * c.gamma_dot(t)?) * dt;
            Ok((w, wr_new, wt))
        });
        let ct = Corrections::new(&tilde, None, 0.8, 32, 256).unwrap();
        for &r in &[0.2, 0.6] {
            assert!((ct.kappa(r).unwrap() - r).abs() < 1e-10);
            assert!(ct.gamma_dot(r).unwrap().abs() < 1e-8);
        }
        let rt = |r: f64| c.kappa(radial(c.kappa_inv(r).unwrap())).unwrap();
        let tt = |r: f64| {
            let t = c.kappa_inv(r).unwrap();
            angular(t) + c.gamma(t).unwrap() - c.gamma(radial(t)).unwrap()
        };
        let naive = naive_freq_damp_map(rt, tt, &grid, None);
        for i in 0..grid.len() {
            assert!((naive.omega[i] - corrected.omega[i]).abs() < 1e-10);
            assert!((naive.zeta[i] - corrected.zeta[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn vector_field_identity_decoder_is_naive() {
        let d = circular();
        let c = Corrections::new(&d, None, 1.0, 32, 64).unwrap();
        let radial = |r: f64| -r / 500.0 + r.powi(3) / 100.0 - r.powi(5) / 10.0;
        let angular = |r: f64| 1.0 + r * r / 4.0 - 3.0 * r.powi(4) / 10.0;
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let curve = freq_damp_map_vf(radial, angular, &c, &grid).unwrap();
        for (i, &r) in grid.iter().enumerate() {
            let om = angular(r);
            assert!((curve.omega[i] - om).abs() < 1e-10);
            assert!((curve.zeta[i] + radial(r) / (r * om)).abs() < 1e-10);
        }
    }

    #[test]
    fn amplitude_of_circle() {
        let d = circular();
        let a = amplitude_of(&d, &AmplitudeMap { w_star: DVector::from_vec(vec![1.0, 0.0]) }, 0.6, 64).unwrap();
        assert!((a - 0.6 / 2f64.sqrt()).abs() < 1e-14);
        let z = amplitude_of(&d, &AmplitudeMap { w_star: DVector::zeros(2) }, 0.6, 64).unwrap();
        assert_eq!(z, 0.0);
    }

    fn random_cubic() -> PolyMap {
        let mu = C64::from_polar(0.9, 0.7);
        let mut s = PolyMap::zeros(2, 2, 1, 3);
        s.set_linear(&DMatrix::from_row_slice(2, 2, &[mu.re, -mu.im * 1.3, mu.im / 1.3, mu.re]));
        for i in 2..s.basis.len() {
            s.coeffs[(0, i)] = 0.3 * ((i * 7) as f64).sin();
            s.coeffs[(1, i)] = 0.2 * ((i * 3) as f64).cos();
        }
        s
    }

    #[test]
    fn normal_form_residual_has_truncation_order() {
        for style in [NormalFormStyle::Encoder, NormalFormStyle::Decoder] {
            let s = random_cubic();
            let nf = normal_form_2d(&s, style).unwrap();
            let e1 = nf.invariance_residual(&s, 1e-1);
            let e2 = nf.invariance_residual(&s, 1e-2);
            let slope = (e1 / e2).log10();
            assert!(slope > 3.8, "{style:?}: slope {slope}");
            // only the resonant structure survives in S_n
            let r = 0.3;
            for i in 0..8 {
                let th = i as f64;
                let eta = [r * th.cos(), r * th.sin()];
                let out = nf.map.eval(&eta);
                let expect = C64::new(eta[0], eta[1]) * nf.f_at(r * r);
                assert!((out[0] - expect.re).abs() < 1e-12 && (out[1] - expect.im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normal_form_of_normal_form_is_identity() {
        let mu = C64::from_polar(0.9, 0.7);
        let f1 = C64::new(0.1, -0.2);
        let mut s = PolyMap::zeros(2, 2, 1, 3);
        s.set_linear(&DMatrix::from_row_slice(2, 2, &[mu.re, -mu.im, mu.im, mu.re]));
        // η |η|² f1 in real form
        for (e, re, im) in [([3u32, 0u32], 1.0, 0.0), ([1, 2], 1.0, 0.0), ([2, 1], 0.0, 1.0), ([0, 3], 0.0, 1.0)] {
            let i = s.basis.index_of(&e).unwrap();
            s.coeffs[(0, i)] = f1.re * re - f1.im * im;
            s.coeffs[(1, i)] = f1.im * re + f1.re * im;
        }
        let nf = normal_form_2d(&s, NormalFormStyle::Encoder).unwrap();
        assert!((nf.f[1] - f1).norm() < 1e-12);
        let lin = nf.transform.linear_part();
        let nonlin = nf.transform.coeffs.columns(2, nf.transform.basis.len() - 2).amax();
        assert!(nonlin < 1e-12, "{nonlin}");
        assert!((lin.clone() * lin.transpose() - DMatrix::identity(2, 2) * lin[(0, 0)].hypot(lin[(0, 1)]).powi(2)).amax() < 1e-12);
    }

    #[test]
    fn real_eigenvalues_are_refused() {
        let s = PolyMap::from_linear(&DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.8]), 3);
        assert!(normal_form_2d(&s, NormalFormStyle::Encoder).is_err());
    }
}
