//! Run configuration: a sectioned TOML file with a default for every key.
//!
//! ```toml
//! [run]
//! seed = 0
//!
//! [schedule]
//! sigma_min = 0.01
//! sigma_max = 50.0
//! num_steps = 1000
//!
//! [network]
//! kind = "unet"            # or "dense"
//! channels = [16, 32, 64]  # unet widths per resolution level
//! hidden = [64, 64]        # dense hidden widths
//! use_guide = true
//! sigma_data = 0.5         # 0 disables preconditioning
//!
//! [training]               # see TrainConfig
//! [sampler]                # denoise_final, clamp_lo, clamp_hi
//! [sampler.corrector]      # snr, alpha, corrector_steps, step_size_convention
//! [data]                   # kind = "synthetic_pairs" | "gaussian_1d"
//! [data.phantom]           # see SyntheticPhantomSpec
//! [oracle]                 # analytic-score verification suite
//! ```
//!
//! Unknown keys are rejected. All randomness comes from `run.seed` through
//! [`RunConfig::seed_for`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{generate_gaussian_pairs, generate_pairs, PairedDataset, SyntheticPhantomSpec};
use crate::error::{Error, Result};
use crate::network::{Activation, ArchKind, ArchSpec, SigmaEmbedding};
use crate::oracles::{GaussianMixture, JointGaussian};
use crate::sampler::{CorrectorConfig, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::seeding;
use crate::training::TrainConfig;

pub const SEED_DATA: &str = "data";
pub const SEED_INIT: &str = "init";
pub const SEED_TRAINING: &str = "training";
pub const SEED_SAMPLING: &str = "sampling";
pub const SEED_ORACLE: &str = "oracle";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Root seed; every other seed is derived from it by label.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Sampler discretization steps `N`.
    pub num_steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            sigma_min: 0.01,
            sigma_max: 50.0,
            num_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub kind: ArchKind,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub use_guide: bool,
    pub sigma_data: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            kind: ArchKind::Unet,
            hidden: vec![64, 64],
            channels: vec![16, 32, 64],
            use_guide: true,
            sigma_data: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub denoise_final: bool,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub corrector: CorrectorConfig,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            denoise_final: true,
            clamp_lo: -1.0,
            clamp_hi: 1.0,
            corrector: CorrectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    SyntheticPairs,
    #[serde(rename = "gaussian_1d")]
    Gaussian1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Total pairs, held-out ones included.
    pub count: usize,
    /// The last `heldout` pairs are kept out of training.
    pub heldout: usize,
    /// Image side length (`synthetic_pairs`).
    pub size: usize,
    /// `gaussian_1d` parameters.
    pub mean: f64,
    pub std: f64,
    pub phantom: SyntheticPhantomSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::SyntheticPairs,
            count: 288,
            heldout: 32,
            size: 32,
            mean: 0.0,
            std: 1.0,
            phantom: SyntheticPhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSection {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Default for MixtureSection {
    fn default() -> Self {
        MixtureSection {
            weights: vec![0.5, 0.5],
            means: vec![-2.0, 2.0],
            variances: vec![0.25, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointSection {
    /// `[target, guide]`.
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    /// Value the guide channel is pinned to.
    pub guide: f64,
}

impl Default for JointSection {
    fn default() -> Self {
        JointSection {
            mean: [0.0, 0.0],
            cov: [[1.0, 0.8], [0.8, 1.0]],
            guide: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub trajectories: usize,
    pub num_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// KS significance level.
    pub significance: f64,
    /// Moment tolerance in standard errors.
    pub moment_tolerance_se: f64,
    /// Each entry is a separate run with that many corrector steps.
    pub corrector_sweep: Vec<usize>,
    /// Flip the sign of every oracle score.
    pub negate_score: bool,
    pub mixture: MixtureSection,
    pub joint: JointSection,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            trajectories: 10_000,
            num_steps: 1000,
            sigma_min: 0.01,
            sigma_max: 50.0,
            significance: 0.01,
            moment_tolerance_se: 3.0,
            corrector_sweep: vec![1],
            negate_score: false,
            mixture: MixtureSection::default(),
            joint: JointSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub schedule: ScheduleSection,
    pub network: NetworkSection,
    pub training: TrainConfig,
    pub sampler: SamplerSection,
    pub data: DataSection,
    pub oracle: OracleSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Full config with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.schedule().map_err(cfg)?;
        self.arch_spec().map_err(cfg)?;
        self.train_config().validate().map_err(cfg)?;
        self.sampler_config().map_err(cfg)?;
        self.data.phantom.validate().map_err(cfg)?;
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        if self.data.heldout >= self.data.count {
            return Err(Error::Config(format!(
                "data.heldout ({}) must be smaller than data.count ({})",
                self.data.heldout, self.data.count
            )));
        }
        if self.data.kind == DataKind::Gaussian1d && self.network.use_guide {
            return Err(Error::Config("gaussian_1d data has no guide; set network.use_guide = false".into()));
        }
        let o = &self.oracle;
        if o.trajectories < 2 {
            return Err(Error::Config("oracle.trajectories must be at least 2".into()));
        }
        if !(o.significance > 0.0 && o.significance < 1.0) {
            return Err(Error::Config("oracle.significance must lie in (0, 1)".into()));
        }
        if !(o.moment_tolerance_se > 0.0) {
            return Err(Error::Config("oracle.moment_tolerance_se must be positive".into()));
        }
        if o.corrector_sweep.is_empty() {
            return Err(Error::Config("oracle.corrector_sweep must list at least one value".into()));
        }
        NoiseSchedule::new(o.sigma_min, o.sigma_max, o.num_steps).map_err(cfg)?;
        self.mixture().map_err(cfg)?;
        self.joint_gaussian().map_err(cfg)?;
        Ok(())
    }

    /// Seed for one purpose (`data`, `init`, `training`, `sampling`, `oracle`).
    pub fn seed_for(&self, label: &str) -> u64 {
        seeding::derive_seed(self.run.seed, label)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::new(s.sigma_min, s.sigma_max, s.num_steps)
    }

    pub fn image_shape(&self) -> (usize, usize) {
        match self.data.kind {
            DataKind::SyntheticPairs => (self.data.size, self.data.size),
            DataKind::Gaussian1d => (1, 1),
        }
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        let (height, width) = self.image_shape();
        let n = &self.network;
        let spec = ArchSpec {
            kind: n.kind,
            height,
            width,
            hidden: n.hidden.clone(),
            channels: n.channels.clone(),
            use_guide: n.use_guide,
            activation: Activation::Silu,
            embedding: SigmaEmbedding::log_linear(self.schedule.sigma_min, self.schedule.sigma_max)?,
            sigma_data: n.sigma_data,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed_for(SEED_TRAINING),
            ..self.training.clone()
        }
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            corrector: self.sampler.corrector.clone(),
            denoise_final: self.sampler.denoise_final,
            clamp: (self.sampler.clamp_lo, self.sampler.clamp_hi),
            ..SamplerConfig::new(self.schedule()?, self.seed_for(SEED_SAMPLING))
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generate_dataset(&self) -> Result<PairedDataset> {
        let d = &self.data;
        let seed = self.seed_for(SEED_DATA);
        match d.kind {
            DataKind::SyntheticPairs => generate_pairs(&d.phantom, d.count, d.size, seed, d.heldout),
            DataKind::Gaussian1d => {
                let mut data = generate_gaussian_pairs(d.count, d.mean, d.std, seed)?;
                data.heldout = d.heldout;
                Ok(data)
            }
        }
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        let m = &self.oracle.mixture;
        GaussianMixture::one_d(m.weights.clone(), m.means.clone(), m.variances.clone())
    }

    pub fn joint_gaussian(&self) -> Result<JointGaussian> {
        JointGaussian::new(self.oracle.joint.mean, self.oracle.joint.cov)
    }
}
