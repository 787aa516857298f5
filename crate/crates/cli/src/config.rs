//! Run configuration: TOML file, command-line overrides, built-in defaults.
//!
//! Precedence is flag > file > default for every key. Paths are taken
//! relative to the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use confgen::dynamics::DynamicsConfig;
use confgen::etm::EtmConfig;
use confgen::flow::FlowSettings;
use confgen::metrics::MmdConfig;
use confgen::sampler::SamplerConfig;
use confgen::synth::{Family, ToySpec};
use confgen::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub flow_checkpoint: Option<PathBuf>,
    pub etm_checkpoint: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub edge_csv: Option<PathBuf>,
}

/// Toy dataset settings. The generator seed is the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub family: Family,
    pub num_molecules: usize,
    pub atoms_min: usize,
    pub atoms_max: usize,
    pub mode_separation: f64,
    pub conformers_per_molecule: usize,
    pub noise: f64,
    pub hetero_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = ToySpec::default();
        SynthSection {
            family: s.family,
            num_molecules: s.num_molecules,
            atoms_min: s.atoms_min,
            atoms_max: s.atoms_max,
            mode_separation: s.mode_separation,
            conformers_per_molecule: s.conformers_per_molecule,
            noise: s.noise,
            hetero_fraction: s.hetero_fraction,
        }
    }
}

impl SynthSection {
    pub fn spec(&self, seed: u64) -> ToySpec {
        ToySpec {
            family: self.family,
            num_molecules: self.num_molecules,
            atoms_min: self.atoms_min,
            atoms_max: self.atoms_max,
            mode_separation: self.mode_separation,
            conformers_per_molecule: self.conformers_per_molecule,
            noise: self.noise,
            hetero_fraction: self.hetero_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Write an intermediate checkpoint every this many steps; 0 keeps only
    /// the final one.
    pub checkpoint_every: usize,
}

impl Default for FlowTrainSection {
    fn default() -> Self {
        FlowTrainSection {
            batch_size: 128,
            lr: 1e-3,
            max_steps: 1000,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtmTrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    /// Flow samples per data conformation.
    pub noise_per_data: usize,
}

impl Default for EtmTrainSection {
    fn default() -> Self {
        EtmTrainSection {
            batch_size: 384,
            lr: 1e-3,
            max_steps: 1000,
            checkpoint_every: 0,
            noise_per_data: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Molecules to sample; empty means every molecule in the dataset.
    pub ids: Vec<String>,
    /// Samples per molecule; unset means twice the reference conformer count.
    pub n_per_molecule: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// RMSD threshold in Å for coverage and junk.
    pub delta: f64,
    /// Extra thresholds reported alongside `delta`.
    pub delta_sweep: Vec<f64>,
    pub mmd: MmdConfig,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            delta: 0.5,
            delta_sweep: Vec::new(),
            mmd: MmdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Required, from the file or `--seed`.
    pub seed: Option<u64>,
    /// Worker threads for molecule-level parallelism.
    pub jobs: usize,
    pub paths: Paths,
    pub synth: SynthSection,
    pub dynamics: DynamicsConfig,
    pub flow: FlowSettings,
    pub flow_train: FlowTrainSection,
    pub etm: EtmConfig,
    pub etm_train: EtmTrainSection,
    pub sampler: SamplerConfig,
    pub sample: SampleSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            jobs: 1,
            paths: Paths::default(),
            synth: SynthSection::default(),
            dynamics: DynamicsConfig::default(),
            flow: FlowSettings::default(),
            flow_train: FlowTrainSection::default(),
            etm: EtmConfig::default(),
            etm_train: EtmTrainSection::default(),
            sampler: SamplerConfig::default(),
            sample: SampleSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a master seed is required: set `seed` in the config file or pass --seed".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.master_seed()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.synth.spec(0).validate()?;
        self.flow.validate()?;
        self.etm.validate()?;
        self.sampler.validate()?;
        let f = &self.flow_train;
        let e = &self.etm_train;
        if f.batch_size == 0 || e.batch_size == 0 || e.noise_per_data == 0 || !(f.lr > 0.0) || !(e.lr > 0.0) {
            return Err(Error::Config(
                "training sections need batch_size and noise_per_data of at least 1 and a positive lr".into(),
            ));
        }
        let deltas = std::iter::once(self.metrics.delta).chain(self.metrics.delta_sweep.iter().copied());
        for d in deltas {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Config(format!("RMSD thresholds must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

/// Returns the path or a config error naming the missing key.
pub fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing path: set paths.{key} or pass the matching flag")))
}

/// Like [`required`] but the file must also exist.
pub fn existing<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let path = required(p, key)?;
    if !path.is_file() {
        return Err(Error::Config(format!("paths.{key}: {} does not exist", path.display())));
    }
    Ok(path)
}
