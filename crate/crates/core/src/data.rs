//! Trajectory data: pairs `(x_k, y_k)` with `y_k` the image of `x_k` after one
//! sampling step, together with the amplitude weights `1/‖x_k‖²`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Layout of a data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Each row holds `x` followed by `y` (2n columns).
    Pairs,
    /// Each row is a state; consecutive rows of a block form a trajectory and
    /// blank lines separate trajectories.
    Trajectories,
}

/// Snapshot pairs with weights. Columns of `xs` and `ys` are samples.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub xs: DMatrix<f64>,
    pub ys: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// Radius of the ball the data was restricted to, if any.
    pub origin_radius: Option<f64>,
}

/// Scalar measurement used to express amplitudes.
#[derive(Debug, Clone)]
pub struct AmplitudeMap {
    pub w_star: DVector<f64>,
}

impl AmplitudeMap {
    pub fn apply(&self, x: &DVector<f64>) -> f64 {
        self.w_star.dot(x)
    }
}

impl TrajectoryDataset {
    /// Builds a dataset, dropping samples at (numerically) zero norm.
    pub fn new(xs: DMatrix<f64>, ys: DMatrix<f64>) -> Result<Self> {
        if xs.shape() != ys.shape() {
            return Err(Error::InvalidInput(format!(
                "x and y shapes differ: {:?} vs {:?}",
                xs.shape(),
                ys.shape()
            )));
        }
        if xs.ncols() == 0 || xs.nrows() == 0 {
            return Err(Error::EmptyDataset("no samples".into()));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        let norms: Vec<f64> = xs.column_iter().map(|c| c.norm()).collect();
        let rms = (norms.iter().map(|v| v * v).sum::<f64>() / norms.len() as f64).sqrt();
        let eps = 1e-12 * rms;
        let keep: Vec<usize> = (0..norms.len()).filter(|&k| norms[k] > eps).collect();
        if keep.is_empty() {
            return Err(Error::EmptyDataset("all samples at the origin".into()));
        }
        let xs = xs.select_columns(&keep);
        let ys = ys.select_columns(&keep);
        let weights = keep.iter().map(|&k| 1.0 / (norms[k] * norms[k])).collect();
        Ok(TrajectoryDataset { xs, ys, weights, origin_radius: None })
    }

    /// Builds a dataset from trajectories, chaining consecutive states.
    pub fn from_trajectories(trajs: &[DMatrix<f64>]) -> Result<Self> {
        let dim = trajs.first().map(|t| t.nrows()).unwrap_or(0);
        let npairs: usize = trajs.iter().map(|t| t.ncols().saturating_sub(1)).sum();
        let mut xs = DMatrix::zeros(dim, npairs);
        let mut ys = DMatrix::zeros(dim, npairs);
        let mut k = 0;
        for t in trajs {
            if t.nrows() != dim {
                return Err(Error::InvalidInput("trajectories of different dimension".into()));
            }
            for j in 1..t.ncols() {
                xs.set_column(k, &t.column(j - 1));
                ys.set_column(k, &t.column(j));
                k += 1;
            }
        }
        TrajectoryDataset::new(xs, ys)
    }

    pub fn dim(&self) -> usize {
        self.xs.nrows()
    }

    pub fn len(&self) -> usize {
        self.xs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.ncols() == 0
    }

    /// Keeps the samples with `‖x‖ < rho`.
    pub fn restrict_ball(&self, rho: f64) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| self.xs.column(k).norm() < rho).collect();
        if keep.is_empty() {
            return Err(Error::EmptyDataset(format!("no samples within radius {rho}; rho too small")));
        }
        Ok(TrajectoryDataset {
            xs: self.xs.select_columns(&keep),
            ys: self.ys.select_columns(&keep),
            weights: keep.iter().map(|&k| self.weights[k]).collect(),
            origin_radius: Some(self.origin_radius.map_or(rho, |r| r.min(rho))),
        })
    }

    /// Default restriction radius: the 20th percentile of `‖x‖`.
    pub fn default_radius(&self) -> f64 {
        let mut n: Vec<f64> = self.xs.column_iter().map(|c| c.norm()).collect();
        n.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((n.len() as f64) * 0.2).ceil() as usize;
        // just above the percentile so that the sample itself is kept
        n[idx.min(n.len() - 1)] * (1.0 + 1e-12)
    }

    /// Writes the pairs in the `Pairs` layout.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "# pairs: x[0..{}], y[0..{}]", self.dim(), self.dim())?;
        for k in 0..self.len() {
            let row: Vec<String> = self
                .xs
                .column(k)
                .iter()
                .chain(self.ys.column(k).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Parses a comma separated file. Lines starting with `#` are comments; in
/// the `Trajectories` layout blank lines end a trajectory.
pub fn parse_csv(text: &str, layout: Layout) -> Result<TrajectoryDataset> {
    let (blocks, width) = parse_blocks(text)?;
    match layout {
        Layout::Pairs => {
            if width % 2 != 0 {
                return Err(Error::Csv { line: 0, msg: format!("pairs layout needs an even column count, got {width}") });
            }
            let n = width / 2;
            let rows: Vec<&Vec<f64>> = blocks.iter().flatten().collect();
            let xs = DMatrix::from_fn(n, rows.len(), |i, k| rows[k][i]);
            let ys = DMatrix::from_fn(n, rows.len(), |i, k| rows[k][n + i]);
            TrajectoryDataset::new(xs, ys)
        }
        Layout::Trajectories => TrajectoryDataset::from_trajectories(&blocks_to_trajectories(&blocks, width)),
    }
}

/// Rows grouped into blank-line separated blocks, and the common row width.
fn parse_blocks(text: &str) -> Result<(Vec<Vec<Vec<f64>>>, usize)> {
    let mut blocks: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    let mut width: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('#') {
            continue;
        }
        if t.is_empty() {
            if !blocks.last().unwrap().is_empty() {
                blocks.push(Vec::new());
            }
            continue;
        }
        let row: Vec<f64> = t
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| Error::Csv {
                    line: lineno + 1,
                    msg: format!("non-numeric cell {:?}", c.trim()),
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Csv {
                    line: lineno + 1,
                    msg: format!("ragged row: {} columns, expected {w}", row.len()),
                })
            }
            _ => {}
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Csv { line: lineno + 1, msg: "non-finite value".into() });
        }
        blocks.last_mut().unwrap().push(row);
    }
    let width = width.ok_or_else(|| Error::EmptyDataset("file contains no data rows".into()))?;
    Ok((blocks, width))
}

fn blocks_to_trajectories(blocks: &[Vec<Vec<f64>>], width: usize) -> Vec<DMatrix<f64>> {
    blocks
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| DMatrix::from_fn(width, b.len(), |i, k| b[k][i]))
        .collect()
}

/// Trajectories of a `Trajectories` layout file, columns are states.
pub fn parse_trajectories(text: &str) -> Result<Vec<DMatrix<f64>>> {
    let (blocks, width) = parse_blocks(text)?;
    Ok(blocks_to_trajectories(&blocks, width))
}

pub fn load_csv(path: &Path, layout: Layout) -> Result<TrajectoryDataset> {
    parse_csv(&fs::read_to_string(path)?, layout)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<DMatrix<f64>>> {
    parse_trajectories(&fs::read_to_string(path)?)
}

/// Writes trajectories (columns are states) separated by blank lines.
pub fn write_trajectories(path: &Path, trajs: &[DMatrix<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, t) in trajs.iter().enumerate() {
        if i > 0 {
            writeln!(f)?;
        }
        for c in t.column_iter() {
            let row: Vec<String> = c.iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Weighted least squares linear map `A = L K⁻¹`, `K = Σ w x xᵀ`, `L = Σ w y xᵀ`.
pub fn fit_linear_map(ds: &TrajectoryDataset) -> Result<DMatrix<f64>> {
    let n = ds.dim();
    let mut xw = ds.xs.clone();
    for (k, mut c) in xw.column_iter_mut().enumerate() {
        c *= ds.weights[k];
    }
    let kmat = &xw * ds.xs.transpose();
    let lmat = &ds.ys * xw.transpose();
    let r = crate::linalg::rank(&kmat, 1e-13);
    if r < n {
        return Err(Error::Singular { rank: r, dim: n });
    }
    let chol = kmat.cholesky().ok_or(Error::Singular { rank: r, dim: n })?;
    // A K = L  ⇔  K Aᵀ = Lᵀ
    Ok(chol.solve(&lmat.transpose()).transpose())
}
