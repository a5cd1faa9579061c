//! Frequency and damping curves of a fitted two dimensional reduced model.

use nalgebra::{DMatrix, Vector2};

use crate::data::AmplitudeMap;
use crate::error::{Error, Result};
use crate::polynomial::PolyMap;
use crate::romanalysis::{
    amplitude_grid, freq_damp_map, naive_freq_damp_map, normal_form_2d, Corrections, FreqDampCurve, NormalForm,
    NormalFormDecoder, NormalFormStyle,
};

/// Grid sizes of the correction tables.
pub const CORRECTION_RADII: usize = 100;
pub const CORRECTION_ANGLES: usize = 64;

#[derive(Debug, Clone)]
pub struct RomAnalysis {
    pub normal_form: NormalForm,
    pub curve: FreqDampCurve,
    pub naive: FreqDampCurve,
    /// Amplitude of every latent data point.
    pub data_amplitudes: Vec<f64>,
    /// Largest normal form radius covered.
    pub radius: f64,
}

/// Normal form of the latent map `s`, corrected curves of the decoder
/// `decoder` (latent → state) and the amplitudes of the latent data
/// `latent` (`2 × N`). Latent points farther than `valid_radius` from the
/// origin are outside the region where the decoder is trusted; they only
/// receive the largest covered amplitude.
pub fn analyse(
    s: &PolyMap,
    style: NormalFormStyle,
    decoder: &PolyMap,
    latent: &DMatrix<f64>,
    valid_radius: Option<f64>,
    w_star: &AmplitudeMap,
    dt: Option<f64>,
    n_amp: usize,
) -> Result<RomAnalysis> {
    if latent.nrows() != 2 || decoder.nvars() != 2 {
        return Err(Error::InvalidInput("frequency and damping need a two dimensional reduced model".into()));
    }
    let nf = normal_form_2d(s, style)?;
    let cap = valid_radius.unwrap_or(f64::INFINITY);
    let mut rho = Vec::with_capacity(latent.ncols());
    let mut radius = 0.0f64;
    for z in latent.column_iter() {
        let inside = z.norm() <= cap;
        let r = if inside { nf.from_model(&Vector2::new(z[0], z[1]))?.norm() } else { f64::INFINITY };
        if inside {
            radius = radius.max(r);
        }
        rho.push(r);
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidInput("latent data are all at the origin".into()));
    }
    let dec = NormalFormDecoder { decoder, normal_form: &nf };
    let corr = Corrections::new(&dec, Some(w_star), radius, CORRECTION_RADII, CORRECTION_ANGLES)?;
    let top = corr.r_max();
    let data_amplitudes = rho
        .iter()
        .map(|&r| if r >= radius { Ok(top) } else { corr.kappa(r) })
        .collect::<Result<Vec<f64>>>()?;
    let amps = amplitude_grid(top, n_amp);
    let curve = freq_damp_map(|r| nf.radial(r), |r| nf.angular(r), &corr, &amps, dt)?;
    let radii: Vec<f64> = curve.t.clone();
    let naive = naive_freq_damp_map(|r| nf.radial(r), |r| nf.angular(r), &radii, dt);
    Ok(RomAnalysis { normal_form: nf, curve, naive, data_amplitudes, radius })
}

/// The `p`-quantile (`0 ≤ p ≤ 1`) by linear interpolation.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (pos - i as f64) * (v[j] - v[i])
}
