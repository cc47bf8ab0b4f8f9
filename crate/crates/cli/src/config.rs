//! Run configuration: a TOML document with a `[network]` section plus training,
//! data and per-command settings. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trevsnn_core::engine::{BackwardOptions, Mode};
use trevsnn_core::network::NetworkConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Drives weight init, shuffling and synthetic data; overrides `network.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub gradcheck: GradcheckConfig,
    pub memcheck: MemcheckConfig,
    pub energy: EnergyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Reversible,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            gradcheck: GradcheckConfig::default(),
            memcheck: MemcheckConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    /// `momentum` is used as the first-moment decay.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    /// Second-moment decay of Adam.
    pub beta2: f64,
    pub schedule: LrSchedule,
    pub label_smoothing: f64,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
    /// Recompute a reversible batch with STBP when reconstruction fails
    /// instead of aborting the run.
    pub reconstruction_fallback: bool,
    /// Largest random translation in pixels applied to training samples.
    pub augment_shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            beta2: 0.999,
            schedule: LrSchedule::Constant,
            label_smoothing: 0.0,
            eval_each_epoch: true,
            reconstruction_fallback: true,
            augment_shift: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    MnistIdx,
    Csv,
    Synthetic,
    EventFrames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// MNIST directory; empty means `$TREVSNN_MNIST_DIR` or `data/mnist`.
    pub dir: PathBuf,
    /// Training file for `csv` and `event-frames`.
    pub train: PathBuf,
    /// Test file for `csv` and `event-frames`.
    pub test: PathBuf,
    /// Keep only the first N samples of a split (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
    /// Inputs become `(x - mean) / std` after scaling to [0, 1].
    pub mean: f64,
    pub std: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::MnistIdx,
            dir: PathBuf::new(),
            train: PathBuf::new(),
            test: PathBuf::new(),
            train_limit: 0,
            test_limit: 0,
            mean: 0.0,
            std: 1.0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_samples: usize,
    pub test_samples: usize,
    /// Per-pixel standard deviation of the class centres.
    pub separation: f64,
    /// Per-pixel standard deviation around a centre.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_samples: 256,
            test_samples: 64,
            separation: 1.0,
            noise: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub batch: usize,
    /// Relative step of the four-point central difference.
    pub step: f64,
    /// Entries probed per parameter tensor (0 probes all of them).
    pub samples_per_tensor: usize,
    /// Multiplies the surrogate derivative in the analytic gradients.
    pub surrogate_scale: f64,
    pub equivalence_tol: f64,
    pub fd_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            batch: 2,
            step: 1e-3,
            samples_per_tensor: 0,
            surrogate_scale: 1.0,
            equivalence_tol: 1e-4,
            fd_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemcheckConfig {
    pub timesteps: Vec<usize>,
    pub batch: usize,
}

impl Default for MemcheckConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![2, 4, 8],
            batch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    /// Test samples used to measure firing rates.
    pub calibration: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { calibration: 64 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks everything that can fail before a tensor is allocated.
    pub fn validate(&self) -> Result<()> {
        self.mode.validate(&self.network())?;
        let t = &self.train;
        if t.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            bail!("train.lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&t.momentum) {
            bail!("train.momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&t.beta2) {
            bail!("train.beta2 must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            bail!("train.label_smoothing must lie in [0, 1)");
        }
        if !(self.data.std > 0.0 && self.data.std.is_finite() && self.data.mean.is_finite()) {
            bail!("data.std must be positive and data.mean finite");
        }
        if self.gradcheck.seeds == 0
            || self.gradcheck.batch == 0
            || self.gradcheck.step.is_nan()
            || self.gradcheck.step <= 0.0
        {
            bail!("gradcheck needs seeds >= 1, batch >= 1 and step > 0");
        }
        if self.memcheck.timesteps.len() < 2
            || self.memcheck.timesteps.contains(&0)
            || self.memcheck.batch == 0
        {
            bail!("memcheck needs at least two positive timestep counts and batch >= 1");
        }
        if self.energy.calibration == 0 {
            bail!("energy.calibration must be >= 1");
        }
        Ok(())
    }

    /// Network configuration with the run seed applied.
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.seed,
            ..self.network.clone()
        }
    }

    pub fn backward_options(&self) -> BackwardOptions {
        BackwardOptions {
            label_smoothing: self.train.label_smoothing,
            ..BackwardOptions::default()
        }
    }
}

/// SHA-256 of the architecture: the network section with its seed cleared.
pub fn architecture_digest(config: &NetworkConfig) -> [u8; 32] {
    let canonical = NetworkConfig {
        seed: 0,
        ..config.clone()
    };
    let text = toml::to_string(&canonical).expect("network config always serializes");
    Sha256::digest(text.as_bytes()).into()
}
