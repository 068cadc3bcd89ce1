//! Declarative experiment configuration: a TOML file selects a pipeline mode,
//! a data source, method parameters, and output settings. Unknown keys are
//! rejected so that configs stay exact provenance records.

use crate::datagen::SyntheticSpec;
use crate::error::{McuosError, Result};
use crate::kernel::KernelSpec;
use crate::kernel_learning::MckusalParams;
use crate::linear::{AmicusalParams, MicusalParams};
use crate::missing::RmicusalParams;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Pipeline selected by a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Ambient-space learning on synthetic complete data, scored by subspace recovery.
    SynthMcuos,
    /// Ambient-space learning on synthetic partially observed data.
    SynthRmcuos,
    /// Feature-space learning on complete data.
    Mckuos,
    /// Feature-space learning on partially observed data.
    Rmckuos,
    /// Train a model and reconstruct noisy test signals.
    Denoise,
    /// Train a feature-space model and score clustering against labels.
    Cluster,
    /// Monte Carlo verification of the missing-data estimation bounds.
    BoundsCheck,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SynthMcuos => "synth-mcuos",
            Mode::SynthRmcuos => "synth-rmcuos",
            Mode::Mckuos => "mckuos",
            Mode::Rmckuos => "rmckuos",
            Mode::Denoise => "denoise",
            Mode::Cluster => "cluster",
            Mode::BoundsCheck => "bounds-check",
        }
    }
}

/// Data source: either a synthetic generator spec or CSV files on disk.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub synthetic: Option<SyntheticSpec>,
    /// Headerless numeric CSV; signals are columns unless `transpose` is set.
    pub data_csv: Option<PathBuf>,
    /// One integer label per signal.
    pub labels_csv: Option<PathBuf>,
    /// Interpret CSV rows as signals instead of columns.
    #[serde(default)]
    pub transpose: bool,
}

/// Settings for the bound-verification mode.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default = "default_bounds_m")]
    pub m: usize,
    #[serde(default = "default_omega_sizes")]
    pub omega_sizes: Vec<usize>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_gaussian_c")]
    pub gaussian_c: f64,
    #[serde(default = "default_poly_c")]
    pub poly_c: f64,
    #[serde(default = "default_poly_d")]
    pub poly_d: u32,
}

fn default_bounds_m() -> usize {
    100
}
fn default_omega_sizes() -> Vec<usize> {
    vec![25, 50]
}
fn default_deltas() -> Vec<f64> {
    vec![0.05, 0.1]
}
fn default_gaussian_c() -> f64 {
    1.0
}
fn default_poly_c() -> f64 {
    1.0
}
fn default_poly_d() -> u32 {
    3
}

/// A fully described experiment. Method sections are optional; each mode
/// requires the sections noted on its variant.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub out: Option<PathBuf>,
    pub dataset: Option<DatasetConfig>,
    pub micusal: Option<MicusalParams>,
    pub amicusal: Option<AmicusalParams>,
    pub rmicusal: Option<RmicusalParams>,
    pub mckusal: Option<MckusalParams>,
    pub kernel: Option<KernelSpec>,
    /// Fraction of entries hidden per signal for missing-data modes.
    pub missing_frac: Option<f64>,
    /// Test-noise variance grid for denoising.
    pub sigma_te_sq: Option<Vec<f64>>,
    /// Eigenvalue floor used when repairing estimated Gram matrices.
    pub delta_min: Option<f64>,
    pub bounds: Option<BoundsConfig>,
}

fn default_trials() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| McuosError::ParseError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| McuosError::ParseError(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(McuosError::ParseError("trials must be positive".into()));
        }
        if let Some(f) = self.missing_frac {
            if !(0.0..1.0).contains(&f) {
                return Err(McuosError::ParseError(
                    "missing_frac must be in [0, 1)".into(),
                ));
            }
        }
        if let Some(spec) = &self.kernel {
            spec.validate()?;
        }
        if let Some(ds) = &self.dataset {
            if let Some(spec) = &ds.synthetic {
                spec.validate()?;
            }
            if ds.synthetic.is_some() && ds.data_csv.is_some() {
                return Err(McuosError::ParseError(
                    "dataset: choose either synthetic or data_csv, not both".into(),
                ));
            }
        }
        let missing = |field: &str| -> Result<()> {
            Err(McuosError::ParseError(format!(
                "mode {} requires the `{field}` section",
                self.mode.as_str()
            )))
        };
        match self.mode {
            Mode::SynthMcuos => {
                if self.dataset.as_ref().and_then(|d| d.synthetic.as_ref()).is_none() {
                    return missing("dataset.synthetic");
                }
                if self.micusal.is_none() && self.amicusal.is_none() {
                    return missing("micusal");
                }
            }
            Mode::SynthRmcuos => {
                if self.dataset.as_ref().and_then(|d| d.synthetic.as_ref()).is_none() {
                    return missing("dataset.synthetic");
                }
                if self.rmicusal.is_none() {
                    return missing("rmicusal");
                }
                if self.missing_frac.is_none() {
                    return missing("missing_frac");
                }
            }
            Mode::Mckuos | Mode::Cluster => {
                if self.dataset.is_none() {
                    return missing("dataset");
                }
                if self.mckusal.is_none() {
                    return missing("mckusal");
                }
                if self.kernel.is_none() {
                    return missing("kernel");
                }
            }
            Mode::Rmckuos => {
                if self.dataset.is_none() {
                    return missing("dataset");
                }
                if self.mckusal.is_none() {
                    return missing("mckusal");
                }
                if self.kernel.is_none() {
                    return missing("kernel");
                }
                if self.missing_frac.is_none() {
                    return missing("missing_frac");
                }
            }
            Mode::Denoise => {
                if self.dataset.is_none() {
                    return missing("dataset");
                }
                if self.sigma_te_sq.is_none() {
                    return missing("sigma_te_sq");
                }
                let linear = self.micusal.is_some() || self.rmicusal.is_some();
                let kernelized = self.mckusal.is_some();
                if !linear && !kernelized {
                    return missing("micusal (or rmicusal, or mckusal with kernel)");
                }
                if kernelized && self.kernel.is_none() {
                    return missing("kernel");
                }
            }
            Mode::BoundsCheck => {
                if self.bounds.is_none() {
                    return missing("bounds");
                }
            }
        }
        Ok(())
    }

    /// The config rendered back to TOML, prefixed as CSV comment lines.
    pub fn comment_header(&self) -> Vec<String> {
        let rendered = toml::to_string_pretty(self).unwrap_or_default();
        rendered
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| format!("# {l}"))
            .collect()
    }
}
