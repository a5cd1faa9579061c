//! Riemannian optimisation on matrix manifolds: a trust-region method with
//! truncated conjugate gradient inner solves, a Gauss-Southwell block
//! coordinate descent driver built on it, and a limited-memory Riemannian
//! BFGS method with Armijo backtracking.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matmanifold::Manifold;

/// Smooth objective on matrices with Euclidean derivatives.
pub trait Objective {
    fn value(&self, x: &DMatrix<f64>) -> f64;

    /// Value and Euclidean gradient.
    fn gradient(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>);

    /// Euclidean Hessian applied to `v`, when available.
    fn hess_vec(&self, _x: &DMatrix<f64>, _v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct TrOptions {
    pub max_iter: usize,
    pub max_radius: f64,
    /// Gradient tolerance relative to `1 + |f|`.
    pub grad_tol: f64,
    pub min_radius: f64,
    /// Minimal ratio of actual to predicted decrease to accept a step.
    pub accept: f64,
    pub cg_max: Option<usize>,
    /// Step for gradient differencing when no Hessian is available.
    pub fd_step: f64,
}

impl Default for TrOptions {
    fn default() -> Self {
        TrOptions {
            max_iter: 1000,
            max_radius: 1e3,
            grad_tol: 1e-8,
            min_radius: 1e-14,
            accept: 0.1,
            cg_max: None,
            fd_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrStatus {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct TrStats {
    pub iterations: usize,
    pub f_initial: f64,
    pub f_final: f64,
    pub grad_norm: f64,
    pub radius: f64,
    pub status: TrStatus,
    /// Whether Hessian-vector products were approximated by gradient differences.
    pub hvp_fd: bool,
    pub hvp_count: usize,
}

struct HessOp<'a> {
    m: &'a Manifold,
    obj: &'a dyn Objective,
    x: &'a DMatrix<f64>,
    egrad: &'a DMatrix<f64>,
    rgrad: &'a DMatrix<f64>,
    fd_step: f64,
}

impl HessOp<'_> {
    /// Returns the Hessian applied to `v` and whether differencing was used.
    fn apply(&self, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
        if let Some(ehv) = self.obj.hess_vec(self.x, v) {
            if let Some(h) = self.m.riemannian_hessian(self.x, self.egrad, &ehv, v) {
                return Ok((h, false));
            }
        }
        let nv = v.norm();
        if nv == 0.0 {
            return Ok((DMatrix::zeros(v.nrows(), v.ncols()), true));
        }
        let h = self.fd_step / nv;
        let xp = self.m.retract(self.x, &(v * h))?;
        let (_, gp) = self.obj.gradient(&xp);
        let rp = self.m.transport(self.x, &self.m.riemannian_gradient(&xp, &gp));
        Ok(((rp - self.rgrad) / h, true))
    }
}

/// Steihaug-Toint truncated CG for `min ⟨g, η⟩ + ½⟨η, H η⟩`, `‖η‖ ≤ Δ`.
fn truncated_cg(op: &HessOp, g: &DMatrix<f64>, radius: f64, max_iter: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, bool, usize)> {
    let mut eta = DMatrix::zeros(g.nrows(), g.ncols());
    let mut heta = eta.clone();
    let mut r = g.clone();
    let r0 = r.norm();
    let mut d = -&r;
    let mut rr = r.norm_squared();
    let mut fd = false;
    let mut count = 0;
    for _ in 0..max_iter {
        let (hd, f) = op.apply(&d)?;
        fd |= f;
        count += 1;
        let dhd = d.dot(&hd);
        // boundary intersection
        let to_boundary = |eta: &DMatrix<f64>, d: &DMatrix<f64>| {
            let a = d.norm_squared();
            let b = 2.0 * eta.dot(d);
            let c = eta.norm_squared() - radius * radius;
            (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
        };
        if dhd <= 0.0 {
            let tau = to_boundary(&eta, &d);
            eta += &d * tau;
            heta += &hd * tau;
            return Ok((eta, heta, fd, count));
        }
        let alpha = rr / dhd;
        let eta_new = &eta + &d * alpha;
        if eta_new.norm() >= radius {
            let tau = to_boundary(&eta, &d);
            eta += &d * tau;
            heta += &hd * tau;
            return Ok((eta, heta, fd, count));
        }
        eta = eta_new;
        heta += &hd * alpha;
        r += &hd * alpha;
        let rr_new = r.norm_squared();
        let rn = rr_new.sqrt();
        if rn <= r0 * r0.min(0.1) {
            break;
        }
        d = -&r + d * (rr_new / rr);
        rr = rr_new;
    }
    Ok((eta, heta, fd, count))
}

/// Riemannian trust-region minimisation starting at `x0` with initial radius
/// `radius`. Returns the final point; the objective never increases.
pub fn trust_region(
    m: &Manifold,
    obj: &dyn Objective,
    x0: &DMatrix<f64>,
    radius: f64,
    opts: &TrOptions,
) -> Result<(DMatrix<f64>, TrStats)> {
    let mut x = x0.clone();
    let (mut f, mut eg) = obj.gradient(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let f_initial = f;
    let mut rg = m.riemannian_gradient(&x, &eg);
    let mut radius = radius.min(opts.max_radius);
    let dim = m.dim(x.shape());
    let cg_max = opts.cg_max.unwrap_or(dim).max(1);
    let mut hvp_fd = false;
    let mut hvp_count = 0;
    let mut status = TrStatus::MaxIterations;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let gn = rg.norm();
        if gn <= opts.grad_tol * (1.0 + f.abs()) {
            status = TrStatus::Converged;
            break;
        }
        if radius < opts.min_radius {
            status = TrStatus::Stalled;
            break;
        }
        iterations += 1;
        let op = HessOp { m, obj, x: &x, egrad: &eg, rgrad: &rg, fd_step: opts.fd_step };
        let (eta, heta, fd, cnt) = truncated_cg(&op, &rg, radius, cg_max)?;
        hvp_fd |= fd;
        hvp_count += cnt;
        let model_dec = -(rg.dot(&eta) + 0.5 * eta.dot(&heta));
        let candidate = m.retract(&x, &eta);
        let (accepted, rho) = match candidate {
            Ok(xn) => {
                let fnew = obj.value(&xn);
                let rho = if model_dec > 0.0 { (f - fnew) / model_dec } else { -1.0 };
                if fnew.is_finite() && fnew < f && rho > opts.accept {
                    (Some((xn, fnew)), rho)
                } else {
                    (None, rho)
                }
            }
            Err(_) => (None, -1.0),
        };
        if rho < 0.25 {
            radius *= 0.25;
        } else if rho > 0.75 {
            radius = (2.0 * radius).min(opts.max_radius);
        }
        if let Some((xn, _)) = accepted {
            x = xn;
            let (fv, g) = obj.gradient(&x);
            f = fv;
            eg = g;
            rg = m.riemannian_gradient(&x, &eg);
        }
    }
    let grad_norm = rg.norm();
    if status == TrStatus::MaxIterations && grad_norm <= opts.grad_tol * (1.0 + f.abs()) {
        status = TrStatus::Converged;
    }
    Ok((x, TrStats { iterations, f_initial, f_final: f, grad_norm, radius, status, hvp_fd, hvp_count }))
}

/// A problem whose variables are split into blocks, each living on a manifold.
/// Blocks belong to groups; the driver visits groups in increasing order.
pub trait BlockProblem {
    fn num_blocks(&self) -> usize;
    fn group(&self, b: usize) -> usize;
    fn name(&self, b: usize) -> String;
    fn manifold(&self, b: usize) -> Manifold;
    fn point(&self, b: usize) -> DMatrix<f64>;
    fn set_point(&mut self, b: usize, p: DMatrix<f64>);
    /// Objective value at the current point.
    fn value(&self) -> f64;
    /// The objective as a function of block `b` with the others held fixed.
    fn block_objective<'a>(&'a self, b: usize) -> Box<dyn Objective + 'a>;
    /// Euclidean gradients of the given blocks at the current point.
    fn block_gradients(&self, blocks: &[usize]) -> Vec<DMatrix<f64>> {
        blocks.iter().map(|&b| self.block_objective(b).gradient(&self.point(b)).1).collect()
    }
    /// Called once at the start of every sweep.
    fn begin_sweep(&mut self, _sweep: usize) {}
}

#[derive(Debug, Clone)]
pub struct GsOptions {
    pub max_sweeps: usize,
    pub inner_steps: usize,
    /// Relative improvement per sweep below which a sweep counts as stalled.
    pub rel_tol: f64,
    /// Number of consecutive stalled sweeps that ends the run.
    pub patience: usize,
    pub initial_radius: f64,
    pub tr: TrOptions,
}

impl Default for GsOptions {
    fn default() -> Self {
        GsOptions {
            max_sweeps: 100,
            inner_steps: 5,
            rel_tol: 1e-9,
            patience: 3,
            initial_radius: 0.1,
            tr: TrOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub sweep: usize,
    pub block: String,
    pub f: f64,
    pub grad_norm: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GsReport {
    pub trace: Vec<TraceRow>,
    pub sweeps: usize,
    pub converged: bool,
    pub hvp_fd: bool,
}

impl GsReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "sweep,block,f,grad_norm,radius")?;
        for r in &self.trace {
            writeln!(f, "{},{},{:?},{:?},{:?}", r.sweep, r.block, r.f, r.grad_norm, r.radius)?;
        }
        Ok(())
    }

    /// Largest increase of the objective between consecutive trace rows,
    /// relative to the larger of the two values.
    pub fn max_increase(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| (w[1].f - w[0].f) / w[0].f.abs().max(w[1].f.abs()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Gauss-Southwell block coordinate descent. Within each group the block with
/// the largest Riemannian gradient norm is optimised by a few trust-region steps.
pub fn gauss_southwell<P: BlockProblem + ?Sized>(problem: &mut P, opts: &GsOptions) -> Result<GsReport> {
    let nb = problem.num_blocks();
    let mut groups: Vec<usize> = (0..nb).map(|b| problem.group(b)).collect();
    groups.sort();
    groups.dedup();
    let mut radii = vec![opts.initial_radius; nb];
    let mut report = GsReport::default();
    let mut f = problem.value();
    let mut stalled = 0;
    let tr = TrOptions { max_iter: opts.inner_steps, ..opts.tr.clone() };
    for sweep in 0..opts.max_sweeps {
        problem.begin_sweep(sweep);
        let f_start = problem.value();
        f = f_start;
        for &g in &groups {
            let members: Vec<usize> = (0..nb).filter(|&b| problem.group(b) == g).collect();
            let grads = problem.block_gradients(&members);
            let mut best = 0;
            let mut best_norm = -1.0;
            for (i, &b) in members.iter().enumerate() {
                let p = problem.point(b);
                let gn = problem.manifold(b).riemannian_gradient(&p, &grads[i]).norm();
                if gn > best_norm {
                    best_norm = gn;
                    best = i;
                }
            }
            let b = members[best];
            let man = problem.manifold(b);
            if man.dim(problem.point(b).shape()) == 0 {
                continue;
            }
            let (xnew, stats) = {
                let obj = problem.block_objective(b);
                trust_region(&man, obj.as_ref(), &problem.point(b), radii[b], &tr)?
            };
            report.hvp_fd |= stats.hvp_fd;
            radii[b] = stats.radius.max(opts.tr.min_radius * 1e3);
            if stats.f_final < stats.f_initial {
                problem.set_point(b, xnew);
            }
            let fv = problem.value();
            f = fv;
            report.trace.push(TraceRow { sweep, block: problem.name(b), f: fv, grad_norm: stats.grad_norm, radius: stats.radius });
        }
        report.sweeps = sweep + 1;
        let improvement = (f_start - f) / f_start.abs().max(f64::MIN_POSITIVE);
        if improvement < opts.rel_tol {
            stalled += 1;
            if stalled >= opts.patience {
                report.converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
        log::debug!("sweep {sweep}: f = {f:e}");
    }
    let _ = f;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 500, memory: 10, grad_tol: 1e-10, armijo: 1e-4, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsStats {
    pub iterations: usize,
    pub f_final: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub steepest_fallbacks: usize,
}

/// Limited-memory Riemannian BFGS with projection transport and Armijo
/// backtracking. Falls back to steepest descent when the quasi-Newton
/// direction is not a descent direction.
pub fn rbfgs(m: &Manifold, obj: &dyn Objective, x0: &DMatrix<f64>, opts: &BfgsOptions) -> Result<(DMatrix<f64>, BfgsStats)> {
    let mut x = x0.clone();
    let (mut f, eg) = obj.gradient(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let mut g = m.riemannian_gradient(&x, &eg);
    let mut hist: Vec<(DMatrix<f64>, DMatrix<f64>, f64)> = Vec::new();
    let mut fallbacks = 0;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        if g.norm() <= opts.grad_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            q *= s.dot(y) / y.norm_squared();
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q += s * (a - b);
        }
        let mut d = m.project(&x, &(-q));
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            d = -&g;
            slope = -g.norm_squared();
            hist.clear();
            fallbacks += 1;
        }
        let mut t = if hist.is_empty() { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let mut next = None;
        for _ in 0..opts.max_backtracks {
            if let Ok(xn) = m.retract(&x, &(&d * t)) {
                let fnew = obj.value(&xn);
                if fnew.is_finite() && fnew <= f + opts.armijo * t * slope {
                    next = Some((xn, fnew));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, _)) = next else {
            break;
        };
        let (fnew, egn) = obj.gradient(&xn);
        let gn = m.riemannian_gradient(&xn, &egn);
        let s = m.transport(&xn, &(&d * t));
        let y = &gn - m.transport(&xn, &g);
        for h in hist.iter_mut() {
            h.0 = m.transport(&xn, &h.0);
            h.1 = m.transport(&xn, &h.1);
        }
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > opts.memory {
                hist.remove(0);
            }
        }
        x = xn;
        f = fnew;
        g = gn;
    }
    let grad_norm = g.norm();
    Ok((x, BfgsStats { iterations, f_final: f, grad_norm, converged: converged || grad_norm <= opts.grad_tol * (1.0 + f.abs()), steepest_fallbacks: fallbacks }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Rosenbrock;
    impl Objective for Rosenbrock {
        fn value(&self, x: &DMatrix<f64>) -> f64 {
            let (a, b) = (x[0], x[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        }
        fn gradient(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
            let (a, b) = (x[0], x[1]);
            let g = DMatrix::from_column_slice(2, 1, &[-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            (self.value(x), g)
        }
    }

    #[test]
    fn rbfgs_solves_rosenbrock() {
        let x0 = DMatrix::from_column_slice(2, 1, &[-1.2, 1.0]);
        let opts = BfgsOptions { max_iter: 200, ..Default::default() };
        let (_, st) = rbfgs(&Manifold::Euclidean, &Rosenbrock, &x0, &opts).unwrap();
        assert!(st.f_final < 1e-8, "f = {}", st.f_final);
    }

    /// `f(x) = xᵀ A x` on the unit sphere.
    struct Rayleigh(DMatrix<f64>);
    impl Objective for Rayleigh {
        fn value(&self, x: &DMatrix<f64>) -> f64 {
            (x.transpose() * &self.0 * x)[0]
        }
        fn gradient(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
            (self.value(x), &self.0 * x * 2.0)
        }
        fn hess_vec(&self, _x: &DMatrix<f64>, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
            Some(&self.0 * v * 2.0)
        }
    }

    #[test]
    fn trust_region_minimises_rayleigh_quotient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = linalg::random_normal(&mut rng, 5, 5);
        let a = &b + b.transpose();
        let x0 = linalg::random_stiefel(&mut rng, 5, 1);
        let (x, st) = trust_region(&Manifold::Stiefel, &Rayleigh(a.clone()), &x0, 1.0, &TrOptions::default()).unwrap();
        let lmin = a.clone().symmetric_eigen().eigenvalues.min();
        assert!((st.f_final - lmin).abs() < 1e-8);
        let res = (&a * &x - &x * lmin).norm();
        assert!(res < 1e-8, "residual {res}");
    }
}
