//! State-space reconstruction from scalar signals.
//!
//! A signal is cut into overlapping windows `u_p` of odd length `L = 2w + 1`
//! taken every `s` samples. A linear operator `T` (`d × L`) maps each window to
//! a state `x_p = T u_p` and a vector `v` recovers the reference sample
//! `z_{ps+ℓ} ≈ v·x_p`. Two operators are provided: principal components of the
//! windows, and a filter bank assembled from a real discrete Fourier transform
//! that reproduces the reference sample exactly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{AmplitudeMap, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::model::MatrixData;

/// One or more records of a scalar signal sharing a sampling frequency and
/// window geometry.
#[derive(Debug, Clone)]
pub struct WindowedSignal {
    pub segments: Vec<Vec<f64>>,
    pub f_s: f64,
    pub window_len: usize,
    pub hop: usize,
}

impl WindowedSignal {
    /// Window of length `2w + 1` with `w = floor(f_s / f1)`, `f1` being the
    /// lowest frequency of interest.
    pub fn new(segments: Vec<Vec<f64>>, f_s: f64, f1: f64, hop: usize) -> Result<Self> {
        if !(f1 > 0.0) || !(f_s > 0.0) {
            return Err(Error::InvalidInput(format!("need positive frequencies, got f_s = {f_s}, f1 = {f1}")));
        }
        let w = (f_s / f1).floor() as usize;
        Self::with_window(segments, f_s, 2 * w + 1, hop)
    }

    pub fn with_window(segments: Vec<Vec<f64>>, f_s: f64, window_len: usize, hop: usize) -> Result<Self> {
        if window_len == 0 || window_len % 2 == 0 {
            return Err(Error::InvalidInput(format!("window length must be odd, got {window_len}")));
        }
        if hop == 0 {
            return Err(Error::InvalidInput("hop must be positive".into()));
        }
        if segments.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal".into()));
        }
        let sig = WindowedSignal { segments, f_s, window_len, hop };
        if sig.num_windows() == 0 {
            return Err(Error::InvalidInput(format!("signal shorter than the window length {window_len}")));
        }
        Ok(sig)
    }

    pub fn half_width(&self) -> usize {
        (self.window_len - 1) / 2
    }

    /// Window count of one record.
    pub fn windows_in(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    pub fn num_windows(&self) -> usize {
        self.segments.iter().map(|s| self.windows_in(s.len())).sum()
    }

    /// Windows of one record as the columns of an `L × P` matrix.
    pub fn window_matrix(&self, segment: usize) -> DMatrix<f64> {
        let z = &self.segments[segment];
        let np = self.windows_in(z.len());
        DMatrix::from_fn(self.window_len, np, |i, p| z[p * self.hop + i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingKind {
    Pca,
    DftBank,
}

/// Linear map from windows to states and back to the reference sample.
#[derive(Debug, Clone)]
pub struct EmbeddingOperator {
    pub kind: EmbeddingKind,
    /// `d × L`
    pub t: DMatrix<f64>,
    /// Reconstruction vector, `z_{ps+ℓ} ≈ v·x_p`.
    pub v: DVector<f64>,
    /// Reference column, 0-based.
    pub ell: usize,
    pub f_s: f64,
    pub hop: usize,
    pub freqs: Vec<f64>,
    /// Bin boundaries `b_0 .. b_m` of the filter bank.
    pub bins: Vec<f64>,
    /// Eigenvalues of `V Vᵀ` in decreasing order (principal components only).
    pub eigenvalues: Vec<f64>,
}

impl EmbeddingOperator {
    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.t.ncols()
    }

    pub fn embed_window(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.t * u
    }

    /// Scalar recovered from a state.
    pub fn reconstruct(&self, x: &DVector<f64>) -> f64 {
        self.v.dot(x)
    }

    /// Amplitude measurement matching [`Self::reconstruct`].
    pub fn amplitude_map(&self) -> AmplitudeMap {
        AmplitudeMap { w_star: self.v.clone() }
    }

    /// Embedded trajectories, one `d × P` matrix per record.
    pub fn apply(&self, sig: &WindowedSignal) -> Result<Vec<DMatrix<f64>>> {
        if sig.window_len != self.window_len() {
            return Err(Error::InvalidInput(format!(
                "operator window {} does not match signal window {}",
                self.window_len(),
                sig.window_len
            )));
        }
        Ok((0..sig.segments.len())
            .into_par_iter()
            .map(|k| &self.t * sig.window_matrix(k))
            .filter(|m| m.ncols() > 0)
            .collect())
    }

    /// Dataset of consecutive embedded states.
    pub fn dataset(&self, sig: &WindowedSignal) -> Result<TrajectoryDataset> {
        TrajectoryDataset::from_trajectories(&self.apply(sig)?)
    }

    /// Discarded eigenvalue energy, the sum of eigenvalues beyond `d`.
    pub fn discarded_energy(&self) -> f64 {
        self.eigenvalues.iter().skip(self.dim()).sum()
    }

    pub fn to_data(&self) -> EmbeddingData {
        EmbeddingData {
            kind: self.kind,
            t: MatrixData::from_matrix(&self.t),
            v: self.v.iter().cloned().collect(),
            ell: self.ell,
            f_s: self.f_s,
            hop: self.hop,
            freqs: self.freqs.clone(),
            bins: self.bins.clone(),
            eigenvalues: self.eigenvalues.clone(),
        }
    }

    pub fn from_data(d: &EmbeddingData) -> Result<Self> {
        let t = d.t.to_matrix()?;
        if d.v.len() != t.nrows() {
            return Err(Error::InvalidInput("reconstruction vector length does not match operator".into()));
        }
        Ok(EmbeddingOperator {
            kind: d.kind,
            t,
            v: DVector::from_vec(d.v.clone()),
            ell: d.ell,
            f_s: d.f_s,
            hop: d.hop,
            freqs: d.freqs.clone(),
            bins: d.bins.clone(),
            eigenvalues: d.eigenvalues.clone(),
        })
    }
}

/// Serialised operator (the sidecar written next to embedded data).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingData {
    pub kind: EmbeddingKind,
    pub t: MatrixData,
    pub v: Vec<f64>,
    pub ell: usize,
    pub f_s: f64,
    pub hop: usize,
    pub freqs: Vec<f64>,
    pub bins: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

fn check_ell(sig: &WindowedSignal, ell: Option<usize>) -> Result<usize> {
    let ell = ell.unwrap_or(sig.half_width());
    if ell >= sig.window_len {
        return Err(Error::InvalidInput(format!("reference column {ell} outside window of length {}", sig.window_len)));
    }
    Ok(ell)
}

/// Principal component embedding into `d` dimensions. `ell` is the 0-based
/// reference column and defaults to the window centre.
pub fn embed_pca(sig: &WindowedSignal, d: usize, ell: Option<usize>) -> Result<(EmbeddingOperator, TrajectoryDataset)> {
    let l = sig.window_len;
    if d == 0 || d > l {
        return Err(Error::InvalidInput(format!("embedding dimension {d} must be in 1..={l}")));
    }
    if sig.num_windows() < l {
        return Err(Error::InvalidInput(format!("{} windows are fewer than the window length {l}", sig.num_windows())));
    }
    let ell = check_ell(sig, ell)?;
    let gram = (0..sig.segments.len())
        .into_par_iter()
        .map(|k| {
            let v = sig.window_matrix(k);
            &v * v.transpose()
        })
        // summed in order so the result does not depend on scheduling
        .collect::<Vec<_>>()
        .into_iter()
        .fold(DMatrix::zeros(l, l), |a, b| a + b);
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let tol = 1e-12 * eigenvalues[0].max(f64::MIN_POSITIVE) * l as f64;
    let rank = eigenvalues.iter().filter(|&&e| e > tol).count();
    if rank < d {
        return Err(Error::Singular { rank, dim: d });
    }
    let mut t = DMatrix::zeros(d, l);
    for (row, &i) in order.iter().take(d).enumerate() {
        let mut c = eig.eigenvectors.column(i).into_owned();
        // fix the sign so the operator is reproducible
        let imax = c.iamax();
        if c[imax] < 0.0 {
            c = -c;
        }
        t.set_row(row, &c.transpose());
    }
    let v = t.column(ell).into_owned();
    let op = EmbeddingOperator {
        kind: EmbeddingKind::Pca,
        t,
        v,
        ell,
        f_s: sig.f_s,
        hop: sig.hop,
        freqs: Vec::new(),
        bins: Vec::new(),
        eigenvalues,
    };
    let data = op.dataset(sig)?;
    Ok((op, data))
}

/// Mean squared full-window reconstruction error `Σ_p ‖u_p − TᵀT u_p‖² / P`.
pub fn pca_window_mse(op: &EmbeddingOperator, sig: &WindowedSignal) -> f64 {
    let tt = op.t.transpose() * &op.t;
    let total: f64 = (0..sig.segments.len())
        .into_par_iter()
        .map(|k| {
            let u = sig.window_matrix(k);
            let r = &u - &tt * &u;
            r.norm_squared()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    total / sig.num_windows() as f64
}

/// Real DFT matrix of size `2w + 1`: a constant row `√2/2` followed by cosine
/// and sine rows for each frequency `1..=w`. Satisfies `KᵀK = I (2w+1)/2`.
pub fn dft_matrix(w: usize) -> DMatrix<f64> {
    let n = 2 * w + 1;
    let nf = n as f64;
    DMatrix::from_fn(n, n, |row, q| {
        if row == 0 {
            std::f64::consts::FRAC_1_SQRT_2
        } else {
            let p = (row + 1) / 2;
            let a = 2.0 * std::f64::consts::PI * (p * q) as f64 / nf;
            if row % 2 == 1 {
                a.cos()
            } else {
                a.sin()
            }
        }
    })
}

/// Filter bank split of the reference column of the DFT matrix.
///
/// Returns the vectors `v_1 .. v_{2m}` (columns) with `Σ v_k = c_ℓ` and the bin
/// boundaries.
pub fn dft_bank_split(w: usize, f_s: f64, freqs: &[f64], ell: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = freqs.len();
    if m == 0 {
        return Err(Error::InvalidInput("no frequencies given".into()));
    }
    if freqs.windows(2).any(|p| p[0] > p[1]) || freqs[0] <= 0.0 || freqs[m - 1] >= f_s / 2.0 {
        return Err(Error::InvalidInput(format!(
            "frequencies must be increasing, positive and below f_s/2 = {}: {freqs:?}",
            f_s / 2.0
        )));
    }
    let n = 2 * w + 1;
    let k = dft_matrix(w);
    let c = k.column(ell);
    let line = |l: usize| l as f64 * f_s / n as f64;
    let mut bins = vec![0.0];
    for j in 0..m - 1 {
        bins.push(0.5 * (freqs[j] + freqs[j + 1]));
    }
    bins.push(line(w));
    let mut v = DMatrix::zeros(n, 2 * m);
    v[(0, 0)] = c[0];
    for bin in 0..m {
        let members: Vec<usize> = (1..=w).filter(|&l| bins[bin] < line(l) && line(l) <= bins[bin + 1]).collect();
        if members.is_empty() {
            return Err(Error::EmptyBin { bin: bin + 1 });
        }
        for l in members {
            v[(2 * l - 1, 2 * bin)] = c[2 * l - 1];
            v[(2 * l, 2 * bin + 1)] = c[2 * l];
        }
    }
    Ok((v, bins))
}

/// Perfect reproducing DFT filter bank embedding with `d = 2m` channels.
pub fn embed_dft(sig: &WindowedSignal, freqs: &[f64], ell: Option<usize>) -> Result<(EmbeddingOperator, TrajectoryDataset)> {
    let ell = check_ell(sig, ell)?;
    let w = sig.half_width();
    let n = sig.window_len;
    let (vs, bins) = dft_bank_split(w, sig.f_s, freqs, ell)?;
    let k = dft_matrix(w);
    let norms: Vec<f64> = vs.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&x| x <= 1e-14) {
        return Err(Error::InvalidInput(format!(
            "channel {} vanishes at reference column {ell}; choose another column",
            j + 1
        )));
    }
    let scale = 2.0 / n as f64;
    let mut h = vs.transpose();
    for (j, mut row) in h.row_iter_mut().enumerate() {
        row *= scale / norms[j];
    }
    let op = EmbeddingOperator {
        kind: EmbeddingKind::DftBank,
        t: h * k,
        v: DVector::from_vec(norms),
        ell,
        f_s: sig.f_s,
        hop: sig.hop,
        freqs: freqs.to_vec(),
        bins,
        eigenvalues: Vec::new(),
    };
    let data = op.dataset(sig)?;
    Ok((op, data))
}

/// Averaged periodogram of the records (each truncated to the shortest one).
/// Returns `(frequencies, power)` for the non-negative frequencies.
pub fn periodogram(segments: &[Vec<f64>], f_s: f64) -> (Vec<f64>, Vec<f64>) {
    let n = segments.iter().map(|s| s.len()).min().unwrap_or(0);
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    let half = n / 2 + 1;
    let power = segments
        .par_iter()
        .map(|s| {
            let mean = s[..n].iter().sum::<f64>() / n as f64;
            let mut buf: Vec<Complex<f64>> = s[..n].iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
            fft.process(&mut buf);
            buf[..half].iter().map(|c| c.norm_sqr()).collect::<Vec<f64>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(vec![0.0; half], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let freqs = (0..half).map(|k| k as f64 * f_s / n as f64).collect();
    (freqs, power)
}

/// The `m` strongest periodogram peaks (local maxima over three bins) in
/// increasing frequency order.
pub fn detect_frequencies(segments: &[Vec<f64>], f_s: f64, m: usize) -> Result<Vec<f64>> {
    let (freqs, power) = periodogram(segments, f_s);
    let mut peaks: Vec<usize> = (1..power.len().saturating_sub(1))
        .filter(|&k| power[k] > power[k - 1] && power[k] >= power[k + 1])
        .collect();
    peaks.sort_by(|&a, &b| power[b].total_cmp(&power[a]));
    if peaks.len() < m {
        return Err(Error::InvalidInput(format!("found {} spectral peaks, need {m}", peaks.len())));
    }
    let mut out: Vec<f64> = peaks[..m].iter().map(|&k| freqs[k]).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_tone(len: usize, f_s: f64) -> Vec<f64> {
        let tau = 2.0 * std::f64::consts::PI;
        (0..len)
            .map(|i| {
                let t = i as f64 / f_s;
                (tau * 3.0 * t).sin() + 0.4 * (tau * 11.0 * t + 0.3).cos() + 0.05
            })
            .collect()
    }

    #[test]
    fn dft_matrix_identity_small() {
        let k = dft_matrix(2);
        let e = k.transpose() * &k - DMatrix::identity(5, 5) * 2.5;
        assert!(e.amax() < 1e-12);
    }

    #[test]
    fn bank_split_sums_to_column() {
        let (v, bins) = dft_bank_split(66, 200.0, &[3.0, 11.0], 66).unwrap();
        let c = dft_matrix(66).column(66).into_owned();
        let s: DVector<f64> = v.column_iter().fold(DVector::zeros(133), |a, b| a + b);
        assert_eq!(s, c);
        assert_eq!(bins.len(), 3);
        assert!((bins[1] - 7.0).abs() < 1e-15);
    }

    #[test]
    fn two_tone_is_reproduced_exactly() {
        let z = two_tone(1000, 200.0);
        let sig = WindowedSignal::new(vec![z.clone()], 200.0, 3.0, 1).unwrap();
        assert_eq!(sig.window_len, 133);
        let (op, _) = embed_dft(&sig, &[3.0, 11.0], None).unwrap();
        let xs = &op.apply(&sig).unwrap()[0];
        for p in 0..xs.ncols() {
            let r = op.reconstruct(&xs.column(p).into_owned());
            assert!((r - z[p + op.ell]).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_bin_is_named() {
        let sig = WindowedSignal::with_window(vec![two_tone(200, 200.0)], 200.0, 5, 1).unwrap();
        match embed_dft(&sig, &[3.0, 11.0], None) {
            Err(Error::EmptyBin { bin }) => assert_eq!(bin, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pca_full_dimension_is_exact() {
        let z: Vec<f64> = (0..200).map(|i| ((i * i) as f64 * 0.37).sin() + ((i as f64) * 1.3).cos()).collect();
        let sig = WindowedSignal::with_window(vec![z.clone()], 1.0, 7, 1).unwrap();
        let (op, _) = embed_pca(&sig, 7, None).unwrap();
        let xs = &op.apply(&sig).unwrap()[0];
        for p in 0..xs.ncols() {
            assert!((op.reconstruct(&xs.column(p).into_owned()) - z[p + 3]).abs() < 1e-10);
        }
        assert!(pca_window_mse(&op, &sig) < 1e-20);
    }

    #[test]
    fn pure_sinusoid_has_two_components() {
        let z: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.21).sin()).collect();
        let sig = WindowedSignal::with_window(vec![z], 1.0, 31, 1).unwrap();
        let (op, _) = embed_pca(&sig, 2, None).unwrap();
        let total: f64 = op.eigenvalues.iter().sum();
        assert!(op.eigenvalues[..2].iter().sum::<f64>() / total > 0.9999);
        let tt = &op.t * op.t.transpose();
        assert!((tt - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn constant_signal_is_rank_one() {
        let sig = WindowedSignal::with_window(vec![vec![1.5; 100]], 1.0, 5, 1).unwrap();
        assert!(embed_pca(&sig, 1, None).is_ok());
        assert!(matches!(embed_pca(&sig, 2, None), Err(Error::Singular { rank: 1, dim: 2 })));
    }

    #[test]
    fn peaks_are_found() {
        let z = two_tone(4000, 200.0);
        let f = detect_frequencies(&[z], 200.0, 2).unwrap();
        assert!((f[0] - 3.0).abs() < 0.1 && (f[1] - 11.0).abs() < 0.1, "{f:?}");
    }

    proptest! {
        #[test]
        fn embedding_is_linear(a in prop::collection::vec(-1.0f64..1.0, 60), b in prop::collection::vec(-1.0f64..1.0, 60)) {
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let sig = WindowedSignal::with_window(vec![a.clone(), b.clone(), sum], 20.0, 11, 1).unwrap();
            let (op, _) = embed_dft(&sig, &[3.0, 6.0], None).unwrap();
            let e = op.apply(&sig).unwrap();
            prop_assert!((&e[0] + &e[1] - &e[2]).amax() < 1e-12);
        }
    }
}
