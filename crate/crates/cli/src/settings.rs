//! Run settings: defaults, overridden by a TOML config table, overridden by
//! command line flags. The resolved settings are what gets hashed.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

const SECTIONS: [&str; 5] = ["generate", "embed", "fit", "manifold", "freqdamp"];

/// The `[section]` table of a TOML config file as JSON.
pub fn config_section(path: Option<&Path>, section: &str) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        bail!("unknown config section [{k}]; expected one of {SECTIONS:?}");
    }
    match table.get(section) {
        Some(v) => Ok(serde_json::to_value(v)?),
        None => Ok(Value::Object(Default::default())),
    }
}

/// `defaults ← file ← flags`, field by field.
pub fn resolve<S, O>(file: Value, flags: &O) -> Result<S>
where
    S: Serialize + DeserializeOwned + Default,
    O: Serialize,
{
    let mut merged = serde_json::to_value(S::default())?;
    for layer in [file, serde_json::to_value(flags)?] {
        let Value::Object(map) = layer else { bail!("settings must be a table") };
        for (k, v) in map {
            if !v.is_null() {
                merged[&k] = v;
            }
        }
    }
    serde_json::from_value(merged).context("invalid settings")
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Blank-line separated trajectories, one state per row.
    #[default]
    Trajectories,
    /// One `x, y` pair per row.
    Pairs,
}

impl From<Layout> for foliage::Layout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Trajectories => foliage::Layout::Trajectories,
            Layout::Pairs => foliage::Layout::Pairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Argument {
    #[default]
    FullDifference,
    Complement,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub trajectories: Option<usize>,
    pub length: Option<usize>,
    pub seed: u64,
    pub dt: Option<f64>,
    pub radius: Option<Vec<f64>>,
    pub scalar: bool,
    pub noise: f64,
}

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct GenerateFlags {
    /// Number of trajectories.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<usize>,
    /// Points per trajectory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Sampling period of the ten dimensional system.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Radii of the balls initial conditions are drawn from.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<Vec<f64>>,
    /// Record the scalar signal instead of the full state.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub scalar: bool,
    /// Standard deviation of i.i.d. Gaussian noise added to the output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    pub fs: Option<f64>,
    pub freqs: Vec<f64>,
    pub modes: usize,
    pub dim: usize,
    pub f1: Option<f64>,
    pub window: Option<usize>,
    pub hop: usize,
    pub reference: Option<usize>,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        EmbedSettings { fs: None, freqs: Vec::new(), modes: 2, dim: 4, f1: None, window: None, hop: 1, reference: None }
    }
}

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct EmbedFlags {
    /// Sampling frequency in Hz.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fs: Option<f64>,
    /// Frequencies of interest in Hz; detected from the spectrum when absent.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freqs: Option<Vec<f64>>,
    /// Number of spectral peaks to detect.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    /// Embedding dimension of the principal component embedding.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Lowest frequency of interest, sets the window length.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    /// Window length (odd), overrides `--f1`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hop: Option<usize>,
    /// 0-based reference column of the window.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub layout: Layout,
    pub select_freq: Option<f64>,
    pub select_index: Vec<usize>,
    pub order_encoder: Option<usize>,
    pub order_map: Option<usize>,
    pub ht_rank: usize,
    pub sweeps: usize,
    pub iterations: usize,
    pub seed: u64,
    pub argument: Argument,
    pub linear_radius: Option<f64>,
    pub bins: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            layout: Layout::Trajectories,
            select_freq: None,
            select_index: vec![0],
            order_encoder: None,
            order_map: None,
            ht_rank: 4,
            sweeps: 100,
            iterations: 500,
            seed: 1,
            argument: Argument::FullDifference,
            linear_radius: None,
            bins: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct FitFlags {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    /// Select the eigenvalues closest to this frequency (rad/step).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_freq: Option<f64>,
    /// Select eigenvalues by index in order of decreasing modulus.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_index: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_encoder: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_map: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ht_rank: Option<usize>,
    /// Maximum Gauss-Southwell sweeps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweeps: Option<usize>,
    /// Maximum BFGS iterations per autoencoder stage.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Nonlinear encoder argument.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub argument: Option<Argument>,
    /// Radius of the ball used to estimate the linear part.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_radius: Option<f64>,
    /// Bins of the fitting error histogram.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSettings {
    pub layout: Layout,
    pub kappa: f64,
    pub order: usize,
    pub rounds: usize,
    pub sweeps: usize,
    pub radius: Option<f64>,
    pub quantile: f64,
}

impl Default for ManifoldSettings {
    fn default() -> Self {
        ManifoldSettings { layout: Layout::Trajectories, kappa: 0.2, order: 7, rounds: 4, sweeps: 100, radius: None, quantile: 0.95 }
    }
}

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct ManifoldFlags {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    /// Width of the bump function.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Order of the local foliation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    /// Number of bump weight updates.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweeps: Option<usize>,
    /// Decoder radius; by default a quantile of the latent data radii.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantile: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreqdampSettings {
    pub layout: Layout,
    pub dt: Option<f64>,
    pub amplitudes: usize,
}

impl Default for FreqdampSettings {
    fn default() -> Self {
        FreqdampSettings { layout: Layout::Trajectories, dt: None, amplitudes: 60 }
    }
}

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct FreqdampFlags {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    /// Sampling period; frequencies are in rad/step without it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Number of amplitudes on the output curve.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let flags = FitFlags {
            layout: None,
            select_freq: None,
            select_index: None,
            order_encoder: Some(3),
            order_map: None,
            ht_rank: None,
            sweeps: None,
            iterations: None,
            seed: Some(7),
            argument: None,
            linear_radius: None,
            bins: None,
        };
        let s: FitSettings = resolve(json!({"seed": 2, "sweeps": 11}), &flags).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.sweeps, 11);
        assert_eq!(s.order_encoder, Some(3));
        assert_eq!(s.ht_rank, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let flags = FreqdampFlags { layout: None, dt: None, amplitudes: None };
        assert!(resolve::<FreqdampSettings, _>(json!({"bogus": 1}), &flags).is_err());
    }
}
