//! Synthetic benchmark systems.
//!
//! * A two dimensional map `F = V ∘ A ∘ V⁻¹` with `A = diag(9/10, 4/5)` and a
//!   cubic near-identity transformation `V`. Its invariant manifold for the
//!   eigenvalue 9/10 is `V(z, 0)` and the leaves of the matching invariant
//!   foliation are `V(z, s)`, `s ∈ R`.
//! * A ten dimensional vector field obtained from five decoupled nonlinear
//!   oscillators in polar form through a polar-to-Cartesian map `g` and a
//!   quadratic coupling `h`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{AmplitudeMap, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::romanalysis::{freq_damp_map_vf, Corrections, FnDecoder, FreqDampCurve, PolarDecoder};

/// The cubic transformation `V`.
pub fn caricature_v(x: &Vector2<f64>) -> Vector2<f64> {
    let (a, b) = (x[0], x[1]);
    Vector2::new(
        a + 0.25 * (a.powi(3) - 3.0 * (a - 1.0) * b * a + 2.0 * b.powi(3) + (5.0 * a - 2.0) * b * b),
        b + 0.25 * (2.0 * b.powi(3) + (2.0 * a - 1.0) * b * b - a * a * (a + 2.0)),
    )
}

/// Jacobian of `V`.
pub fn caricature_dv(x: &Vector2<f64>) -> Matrix2<f64> {
    let (a, b) = (x[0], x[1]);
    Matrix2::new(
        1.0 + 0.25 * (3.0 * a * a - 6.0 * a * b + 3.0 * b + 5.0 * b * b),
        0.25 * (-3.0 * a * a + 3.0 * a + 6.0 * b * b + 10.0 * a * b - 4.0 * b),
        0.25 * (2.0 * b * b - 3.0 * a * a - 4.0 * a),
        1.0 + 0.25 * (6.0 * b * b + 4.0 * a * b - 2.0 * b),
    )
}

/// `V⁻¹(y)` by Newton's method seeded at `y`.
pub fn caricature_v_inv(y: &Vector2<f64>) -> Result<Vector2<f64>> {
    let mut x = *y;
    for _ in 0..50 {
        let r = caricature_v(&x) - y;
        if r.norm() <= 1e-13 * (1.0 + y.norm()) {
            return Ok(x);
        }
        let j = caricature_dv(&x);
        let step = j.lu().solve(&r).ok_or(Error::Newton { residual: r.norm() })?;
        x -= step;
        if !x[0].is_finite() || !x[1].is_finite() {
            return Err(Error::Newton { residual: f64::INFINITY });
        }
    }
    let r = (caricature_v(&x) - y).norm();
    if r <= 1e-12 * (1.0 + y.norm()) {
        Ok(x)
    } else {
        Err(Error::Newton { residual: r })
    }
}

pub const CARICATURE_A: [f64; 2] = [0.9, 0.8];

/// One step of the map `F = V ∘ A ∘ V⁻¹`.
pub fn caricature_step(x: &Vector2<f64>) -> Result<Vector2<f64>> {
    let u = caricature_v_inv(x)?;
    Ok(caricature_v(&Vector2::new(CARICATURE_A[0] * u[0], CARICATURE_A[1] * u[1])))
}

/// Point `V(z, 0)` of the invariant manifold belonging to the eigenvalue 9/10.
pub fn caricature_manifold(z: f64) -> Vector2<f64> {
    caricature_v(&Vector2::new(z, 0.0))
}

/// Point `V(z, s)` of the leaf with parameter `z` of the invariant foliation
/// belonging to the eigenvalue 9/10.
pub fn caricature_leaf(z: f64, s: f64) -> Vector2<f64> {
    caricature_v(&Vector2::new(z, s))
}

/// Sampling box `[-4/5, 4/5] × [-1/4, 1/4]`.
pub const CARICATURE_BOX: [[f64; 2]; 2] = [[-0.8, 0.8], [-0.25, 0.25]];

/// Trajectories of the caricature map with uniform initial conditions in the box.
pub fn caricature_trajectories(n_traj: usize, len: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let mut x = Vector2::new(
                rng.random_range(CARICATURE_BOX[0][0]..CARICATURE_BOX[0][1]),
                rng.random_range(CARICATURE_BOX[1][0]..CARICATURE_BOX[1][1]),
            );
            let mut t = DMatrix::zeros(2, len);
            for k in 0..len {
                t.set_column(k, &x);
                if k + 1 < len {
                    x = caricature_step(&x)?;
                }
            }
            Ok(t)
        })
        .collect()
}

pub fn caricature_dataset(n_traj: usize, len: usize, seed: u64) -> Result<TrajectoryDataset> {
    TrajectoryDataset::from_trajectories(&caricature_trajectories(n_traj, len, seed)?)
}

/// Independent random stream for trajectory `i`.
pub fn stream_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Radial rate `ṙ/r` and angular velocity `θ̇` of oscillator `k` (0-based) at
/// radius `r`. Both are polynomials in `r²`.
pub fn tendim_rates(k: usize, r: f64) -> (f64, f64) {
    let e = std::f64::consts::E;
    let pi2 = std::f64::consts::PI.powi(2);
    let r2 = r * r;
    let r4 = r2 * r2;
    match k {
        0 => (-1.0 / 500.0 + r2 / 100.0 - r4 / 10.0, 1.0 + r2 / 4.0 - 3.0 * r4 / 10.0),
        1 => (-e / 500.0 - r4 / 10.0, e + 3.0 * r2 / 20.0 - r4 / 5.0),
        2 => (-(0.3f64).sqrt() / 50.0 + r2 / 100.0 - r4 / 10.0, 30f64.sqrt() + 9.0 * r2 / 50.0 - 19.0 * r4 / 100.0),
        3 => (-pi2 / 500.0 + r2 / 100.0 - r4 / 10.0, pi2 + 4.0 * r2 / 25.0 - 17.0 * r4 / 100.0),
        4 => (-13.0 / 500.0 + r2 / 100.0, 13.0 + 4.0 * r2 / 25.0 - 9.0 * r4 / 50.0),
        _ => panic!("oscillator index out of range"),
    }
}

/// `(ṙ, θ̇)` of oscillator `k` at radius `r`.
pub fn tendim_polar(k: usize, r: f64) -> (f64, f64) {
    let (rate, th) = tendim_rates(k, r);
    (rate * r, th)
}

/// Decoupled field in Cartesian coordinates `y = g(r, θ)`.
pub fn tendim_cartesian_field(y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(10);
    for k in 0..5 {
        let (a, b) = (y[2 * k], y[2 * k + 1]);
        let (rate, th) = tendim_rates(k, a.hypot(b));
        out[2 * k] = rate * a - th * b;
        out[2 * k + 1] = rate * b + th * a;
    }
    out
}

/// Coupling transformation `y = h(z)`.
pub fn tendim_h(z: &DVector<f64>) -> DVector<f64> {
    let c = 1.0 / 12.0;
    DVector::from_vec(vec![
        z[0] + z[2] - c * z[2] * z[4],
        z[1] - z[2],
        z[2] + z[4] - c * z[4] * z[6],
        z[3] - z[4],
        z[4] + z[6] + c * z[6] * z[8],
        z[5] - z[6],
        z[6] + z[8] - c * z[0] * z[8],
        z[7] - z[8],
        z[8] + z[0] - c * z[2] * z[0],
        z[9] - z[0],
    ])
}

/// Jacobian of `h`.
pub fn tendim_dh(z: &DVector<f64>) -> DMatrix<f64> {
    let c = 1.0 / 12.0;
    let mut j = DMatrix::identity(10, 10);
    j[(0, 2)] += 1.0 - c * z[4];
    j[(0, 4)] -= c * z[2];
    j[(1, 2)] -= 1.0;
    j[(2, 4)] += 1.0 - c * z[6];
    j[(2, 6)] -= c * z[4];
    j[(3, 4)] -= 1.0;
    j[(4, 6)] += 1.0 + c * z[8];
    j[(4, 8)] += c * z[6];
    j[(5, 6)] -= 1.0;
    j[(6, 8)] += 1.0 - c * z[0];
    j[(6, 0)] -= c * z[8];
    j[(7, 8)] -= 1.0;
    j[(8, 0)] += 1.0 - c * z[2];
    j[(8, 2)] -= c * z[0];
    j[(9, 0)] -= 1.0;
    j
}

/// `h⁻¹(y)` by Newton's method seeded with the inverse of the linear part.
pub fn tendim_h_inv(y: &DVector<f64>) -> Result<DVector<f64>> {
    let lin = tendim_dh(&DVector::zeros(10)).lu();
    let mut z = lin.solve(y).expect("linear part of h is invertible");
    for _ in 0..50 {
        let r = tendim_h(&z) - y;
        if r.norm() <= 1e-14 * (1.0 + y.norm()) {
            return Ok(z);
        }
        let step = tendim_dh(&z).lu().solve(&r).ok_or(Error::Newton { residual: r.norm() })?;
        z -= step;
    }
    let r = (tendim_h(&z) - y).norm();
    if r <= 1e-12 * (1.0 + y.norm()) {
        Ok(z)
    } else {
        Err(Error::Newton { residual: r })
    }
}

/// The coupled ten dimensional field `ż = Dh(z)⁻¹ ẏ(h(z))`.
pub fn tendim_field(z: &DVector<f64>) -> Result<DVector<f64>> {
    let y = tendim_h(z);
    let ydot = tendim_cartesian_field(&y);
    tendim_dh(z)
        .lu()
        .solve(&ydot)
        .ok_or_else(|| Error::InvalidInput(format!("coupling Jacobian singular at z = {:?}", z.as_slice())))
}

/// Classic fourth order Runge-Kutta step.
pub fn rk4_step<F>(f: &F, z: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(z)?;
    let k2 = f(&(z + &k1 * (h / 2.0)))?;
    let k3 = f(&(z + &k2 * (h / 2.0)))?;
    let k4 = f(&(z + &k3 * h))?;
    Ok(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Flow of the ten dimensional field over time `dt` using `substeps` RK4 steps.
pub fn tendim_flow(z: &DVector<f64>, dt: f64, substeps: usize) -> Result<DVector<f64>> {
    let h = dt / substeps as f64;
    let mut x = z.clone();
    for _ in 0..substeps {
        x = rk4_step(&tendim_field, &x, h)?;
    }
    Ok(x)
}

/// Initial condition with norm uniform in `(0, radius)` and uniform direction.
pub fn ball_sample<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> DVector<f64> {
    let mut d = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    while d.norm() == 0.0 {
        d = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    }
    let r: f64 = rng.random_range(0.0..radius);
    let s = r / d.norm();
    d * s
}

/// Full state trajectories (`10 × len`) of the ten dimensional system.
pub fn tendim_trajectories(n_traj: usize, len: usize, dt: f64, radius: f64, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    tendim_trajectories_from(0, n_traj, len, dt, radius, seed)
}

fn tendim_trajectories_from(
    first: usize,
    n_traj: usize,
    len: usize,
    dt: f64,
    radius: f64,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    (first..first + n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let mut z = ball_sample(&mut rng, 10, radius);
            let mut t = DMatrix::zeros(10, len);
            for k in 0..len {
                t.set_column(k, &z);
                if k + 1 < len {
                    z = tendim_flow(&z, dt, 10)?;
                }
            }
            Ok(t)
        })
        .collect()
}

/// Scalar signal `ξ = mean(z)` along each trajectory.
pub fn tendim_scalar_signals(trajs: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    trajs.iter().map(|t| t.column_iter().map(|c| c.mean()).collect()).collect()
}

/// What the ten dimensional generator records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TendimOutput {
    /// Full ten dimensional state.
    State,
    /// Scalar signal `ξ = mean(z)`, one row per trajectory.
    Scalar,
}

/// Trajectories of the ten dimensional system, split evenly between the given
/// ball radii. In scalar mode each returned matrix has a single row.
pub fn tendim_dataset(
    output: TendimOutput,
    radii: &[f64],
    n_traj: usize,
    len: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    if radii.is_empty() {
        return Err(Error::InvalidInput("no sampling radius given".into()));
    }
    let mut all = Vec::with_capacity(n_traj);
    let mut offset = 0;
    for (j, &radius) in radii.iter().enumerate() {
        let count = n_traj / radii.len() + usize::from(j < n_traj % radii.len());
        let trajs = tendim_trajectories_from(offset, count, len, dt, radius, seed)?;
        offset += count;
        all.extend(trajs);
    }
    Ok(match output {
        TendimOutput::State => all,
        TendimOutput::Scalar => tendim_scalar_signals(&all)
            .into_iter()
            .map(|s| DMatrix::from_row_slice(1, s.len(), &s))
            .collect(),
    })
}

/// Decoder of the invariant manifold of oscillator `mode` in `z` coordinates:
/// `W(r, θ) = h⁻¹(g(r, θ))` with all other oscillators at rest.
pub fn tendim_mode_decoder(mode: usize, r: f64, theta: f64) -> Result<DVector<f64>> {
    let mut y = DVector::zeros(10);
    y[2 * mode] = r * theta.cos();
    y[2 * mode + 1] = r * theta.sin();
    tendim_h_inv(&y)
}

/// `(W, ∂W/∂r, ∂W/∂θ)` of [`tendim_mode_decoder`].
pub fn tendim_mode_decoder_derivs(mode: usize, r: f64, theta: f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let w = tendim_mode_decoder(mode, r, theta)?;
    let lu = tendim_dh(&w).lu();
    let (c, s) = (theta.cos(), theta.sin());
    let mut dr = DVector::zeros(10);
    let mut dt = DVector::zeros(10);
    dr[2 * mode] = c;
    dr[2 * mode + 1] = s;
    dt[2 * mode] = -r * s;
    dt[2 * mode + 1] = r * c;
    let singular = || Error::InvalidInput(format!("coupling Jacobian singular at r = {r}"));
    let wr = lu.solve(&dr).ok_or_else(singular)?;
    let wt = lu.solve(&dt).ok_or_else(singular)?;
    Ok((w, wr, wt))
}

/// Amplitude map used for the ten dimensional system: the mean of the states.
pub fn tendim_amplitude_map() -> AmplitudeMap {
    AmplitudeMap { w_star: DVector::from_element(10, 0.1) }
}

/// Frequency and damping of oscillator `mode` as seen through the coupling,
/// at the given amplitudes of [`tendim_amplitude_map`].
pub fn tendim_reference_curves(mode: usize, amplitudes: &[f64]) -> Result<FreqDampCurve> {
    let dec = FnDecoder(move |r: f64, th: f64| tendim_mode_decoder_derivs(mode, r, th));
    let w_star = tendim_amplitude_map();
    let corr = Corrections::new(&dec as &dyn PolarDecoder, Some(&w_star), 1.0, 200, 64)?;
    freq_damp_map_vf(|r| tendim_polar(mode, r).0, |r| tendim_polar(mode, r).1, &corr, amplitudes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v_inverse_round_trip() {
        for i in 0..21 {
            for j in 0..11 {
                let x = Vector2::new(-0.8 + 0.08 * i as f64, -0.25 + 0.05 * j as f64);
                let back = caricature_v_inv(&caricature_v(&x)).unwrap();
                assert!((back - x).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn leaves_are_mapped_to_leaves() {
        for &z in &[-0.5, 0.0, 0.3] {
            for &s in &[-0.2, 0.1] {
                let img = caricature_step(&caricature_leaf(z, s)).unwrap();
                let pre = caricature_v_inv(&img).unwrap();
                assert!((pre[0] - 0.9 * z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn linearisation_at_origin() {
        let h = 1e-6;
        let mut j = Matrix2::zeros();
        for c in 0..2 {
            let mut e = Vector2::zeros();
            e[c] = h;
            let d = (caricature_step(&e).unwrap() - caricature_step(&(-e)).unwrap()) / (2.0 * h);
            j.set_column(c, &d);
        }
        let ev = j.complex_eigenvalues();
        let mut re: Vec<f64> = ev.iter().map(|c| c.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((re[0] - 0.8).abs() < 1e-8 && (re[1] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn tendim_linear_spectrum() {
        let h = 1e-6;
        let mut j = DMatrix::zeros(10, 10);
        for c in 0..10 {
            let mut e = DVector::zeros(10);
            e[c] = h;
            let d = (tendim_field(&e).unwrap() - tendim_field(&(-e.clone())).unwrap()) / (2.0 * h);
            j.set_column(c, &d);
        }
        let mut ev: Vec<(f64, f64)> = j.complex_eigenvalues().iter().filter(|c| c.im > 0.0).map(|c| (c.re, c.im)).collect();
        ev.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let om = [1.0, std::f64::consts::E, 30f64.sqrt(), std::f64::consts::PI.powi(2), 13.0];
        for (k, (re, im)) in ev.iter().enumerate() {
            assert!((im - om[k]).abs() < 1e-8, "{im} vs {}", om[k]);
            assert!((-re / im - 0.002).abs() < 1e-8);
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let z0 = DVector::from_fn(10, |i, _| 0.05 * ((i as f64) * 0.7).sin());
        let reference = tendim_flow(&z0, 1.0, 400).unwrap();
        let e1 = (tendim_flow(&z0, 1.0, 20).unwrap() - &reference).norm();
        let e2 = (tendim_flow(&z0, 1.0, 40).unwrap() - &reference).norm();
        let slope = (e1 / e2).log2();
        assert!(slope >= 3.7, "slope {slope}");
    }

    #[test]
    fn datasets_are_reproducible() {
        let a = caricature_dataset(5, 6, 3).unwrap();
        let b = caricature_dataset(5, 6, 3).unwrap();
        assert_eq!(a.len(), 25);
        assert_eq!(a.xs, b.xs);
    }

    #[test]
    fn reference_curves_start_at_the_linear_values() {
        let c = tendim_reference_curves(0, &[1e-4, 0.02, 0.05]).unwrap();
        assert!((c.omega[0] - 1.0).abs() < 1e-6, "{}", c.omega[0]);
        assert!((c.zeta[0] - 0.002).abs() < 1e-6, "{}", c.zeta[0]);
        assert!(c.omega.iter().chain(&c.zeta).all(|v| v.is_finite()));
    }

    #[test]
    fn coupling_changes_the_curves() {
        // the naive curves read the polar rates directly at the decoder radius
        let c = tendim_reference_curves(0, &[0.1]).unwrap();
        let (rdot, thdot) = tendim_polar(0, c.t[0]);
        let naive_zeta = -rdot / (c.t[0] * thdot);
        assert!((c.omega[0] - thdot).abs() > 1e-5 && (c.zeta[0] - naive_zeta).abs() > 1e-5);
    }

    #[test]
    fn mode_decoder_derivatives_match_differences() {
        let (_, wr, wt) = tendim_mode_decoder_derivs(0, 0.4, 0.7).unwrap();
        let h = 1e-6;
        let fr = (tendim_mode_decoder(0, 0.4 + h, 0.7).unwrap() - tendim_mode_decoder(0, 0.4 - h, 0.7).unwrap()) / (2.0 * h);
        let ft = (tendim_mode_decoder(0, 0.4, 0.7 + h).unwrap() - tendim_mode_decoder(0, 0.4, 0.7 - h).unwrap()) / (2.0 * h);
        assert!((fr - wr).amax() < 1e-8 && (ft - wt).amax() < 1e-8);
    }
}
