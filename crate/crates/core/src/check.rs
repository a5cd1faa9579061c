//! Invariant checks on stored models.

use nalgebra::{DMatrix, DVector};

use crate::autoencoder::AutoencoderModel;
use crate::data::TrajectoryDataset;
use crate::error::Result;
use crate::foliation::{error_stats, FoliationModel};
use crate::localfoliation::LocalFoliationModel;
use crate::model::ModelFile;
use crate::polynomial::PolyMap;

/// Tolerance on orthonormality and linear constraints.
pub const CONSTRAINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckOutcome { name: name.into(), value, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value <= self.tolerance
    }
}

/// `max |A Aᵀ − I|` for a matrix with (supposedly) orthonormal rows.
pub fn row_orthonormality(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    (a * a.transpose() - DMatrix::identity(a.nrows(), a.nrows())).amax()
}


fn foliation_checks(m: &FoliationModel, out: &mut Vec<CheckOutcome>) {
    out.push(CheckOutcome::new("U1 orthonormal rows", row_orthonormality(&m.u1), CONSTRAINT_TOL));
    out.push(CheckOutcome::new("U1perp orthonormal rows", row_orthonormality(&m.u1perp), CONSTRAINT_TOL));
    out.push(CheckOutcome::new("U1perp annihilates W1", (&m.u1perp * &m.w1).amax(), CONSTRAINT_TOL));
    for (d, t) in m.tensors.iter().enumerate() {
        let worst = (0..t.num_nodes())
            .filter(|&k| t.is_orthonormal_node(k))
            .map(|k| {
                let a = &t.mats[k];
                (a.tr_mul(a) - DMatrix::identity(a.ncols(), a.ncols())).amax()
            })
            .fold(0.0, f64::max);
        out.push(CheckOutcome::new(format!("HT frames orthonormal (degree {})", d + 2), worst, CONSTRAINT_TOL));
    }
    let coeffs = m.tensors.iter().flat_map(|t| t.mats.iter().flat_map(|a| a.iter().cloned()));
    let mut coeffs = coeffs.chain(m.s.coeffs.iter().cloned()).chain(m.u1.iter().cloned());
    let finite = coeffs.all(f64::is_finite);
    out.push(CheckOutcome::new("foliation coefficients finite", if finite { 0.0 } else { f64::INFINITY }, 0.0));
}

/// Largest `|U(W(z)) − z|` over a ring of latent points inside `radius`.
fn decoder_consistency(fol: &FoliationModel, w: &PolyMap, radius: f64) -> f64 {
    let nu = fol.nu;
    let mut worst = 0.0f64;
    for k in 1..=8 {
        for j in 0..16 {
            let r = radius * k as f64 / 8.0;
            let th = std::f64::consts::TAU * j as f64 / 16.0;
            let mut z = DVector::zeros(nu);
            z[0] = r * th.cos();
            if nu > 1 {
                z[1] = r * th.sin();
            }
            let x = w.eval(z.as_slice());
            let e = fol.encode(&x) - &z;
            worst = worst.max(e.amax());
        }
    }
    worst
}

fn local_checks(fol: Option<&FoliationModel>, lf: &LocalFoliationModel, dec: Option<(&PolyMap, f64)>, out: &mut Vec<CheckOutcome>) {
    out.push(CheckOutcome::new("local Uperp orthonormal rows", row_orthonormality(&lf.uperp), CONSTRAINT_TOL));
    out.push(CheckOutcome::new("bump width positive", if lf.kappa > 0.0 { 0.0 } else { f64::INFINITY }, 0.0));
    if let (Some(fol), Some((w, radius))) = (fol, dec) {
        // The decoder is a polynomial fit of the exact solution; allow for the fit error.
        out.push(CheckOutcome::new("decoder consistent with encoder", decoder_consistency(fol, w, radius), 0.05 * radius));
    }
}

/// Runs every check that applies to the sections present in `file`. With
/// data, mean fitting errors are compared against `max_error`.
pub fn check_model(file: &ModelFile, data: Option<&TrajectoryDataset>, max_error: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let fol = file.foliation.as_ref().map(FoliationModel::from_data).transpose()?;
    if let Some(m) = &fol {
        foliation_checks(m, &mut out);
        if let Some(ds) = data {
            let (_, e) = m.residual(ds);
            out.push(CheckOutcome::new("foliation mean E_rel", error_stats(&e).0, max_error));
        }
    }
    if let Some(d) = &file.local_foliation {
        let lf = LocalFoliationModel::from_data(d)?;
        let w = d.decoder.as_ref().map(PolyMap::from_data).transpose()?;
        let dec = w.as_ref().zip(d.decoder_radius);
        local_checks(fol.as_ref(), &lf, dec, &mut out);
    }
    if let Some(d) = &file.autoencoder {
        let m = AutoencoderModel::from_data(d)?;
        out.push(CheckOutcome::new("autoencoder manifold constraints", m.constraint_residual(), CONSTRAINT_TOL));
        if let Some(ds) = data {
            let e = m.prediction_errors(ds);
            out.push(CheckOutcome::new("autoencoder mean prediction error", e.iter().sum::<f64>() / e.len().max(1) as f64, max_error));
        }
    }
    Ok(out)
}
