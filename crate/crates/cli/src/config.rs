use std::path::{Path, PathBuf};

use attn_abft::attention::{Dims, ProtectionConfig, Site};
use attn_abft::coverage::{HConvention, Model, SectionProfile};
use attn_abft::fault::{CampaignConfig, FaultKind, StudyConfig, STUDY_KINDS, STUDY_SITES};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_SEED: &str = "ATTN_ABFT_SEED";
pub const ENV_OUT: &str = "ATTN_ABFT_OUT";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    #[default]
    Both,
}

impl Format {
    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

/// Everything a run needs, read from one JSON document. Missing fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: Format,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub dims: Dims,
    pub study: StudySettings,
    pub campaign: CampaignSettings,
    pub optimize: OptimizeSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            out_dir: PathBuf::from("out"),
            format: Format::Both,
            threads: None,
            dims: Dims {
                seq_len: 32,
                d_model: 64,
                heads: 4,
                batches: 2,
            },
            study: StudySettings::default(),
            campaign: CampaignSettings::default(),
            optimize: OptimizeSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub sites: Vec<Site>,
    pub kinds: Vec<FaultKind>,
    pub trials_per_site: usize,
    pub tolerance: f32,
    pub near_inf: f32,
}

impl Default for StudySettings {
    fn default() -> Self {
        let d = StudyConfig::default();
        Self {
            sites: STUDY_SITES.to_vec(),
            kinds: STUDY_KINDS.to_vec(),
            trials_per_site: 200,
            tolerance: d.tolerance,
            near_inf: d.near_inf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSettings {
    pub fraction: f64,
    pub sites: Vec<Site>,
    pub kinds: Vec<FaultKind>,
    pub unprotected_comparison: bool,
    /// Detection frequencies and EEC thresholds.
    pub protection: ProtectionConfig,
    /// Write one CSV row per trial.
    pub write_trials: bool,
}

impl Default for CampaignSettings {
    fn default() -> Self {
        Self {
            fraction: 0.10,
            sites: Site::ALL.to_vec(),
            kinds: FaultKind::ALL.to_vec(),
            unprotected_comparison: true,
            protection: ProtectionConfig::default(),
            write_trials: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSettings {
    pub model: Model,
    /// Error rates to solve for, in errors per 10^25 flops (all types).
    pub rates_per_1e25_flops: Vec<f64>,
    /// Tolerated failures per attention invocation, `1 - FC_target`.
    pub failure_target: f64,
    /// Multiplies the per-invocation GEMM flop counts, e.g. to stand for a
    /// whole training run.
    pub flop_scale: f64,
    pub h_convention: HConvention,
    pub mc_trials: u64,
    /// Replaces the built-in attention profiles.
    pub profiles: Option<Vec<SectionProfile>>,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        Self {
            model: Model::Bert,
            rates_per_1e25_flops: (13..=20).map(f64::from).collect(),
            failure_target: 1e-11,
            flop_scale: 1.0,
            h_convention: HConvention::Printed,
            mc_trials: 100_000,
            profiles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub reps: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { reps: 20 }
    }
}

/// Flag and environment values that override the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub format: Option<Format>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies environment variables, then flags, which win.
    pub fn apply(&mut self, flags: Overrides) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_SEED}={v:?} is not an unsigned integer")))?;
        }
        if let Some(v) = std::env::var_os(ENV_OUT) {
            self.out_dir = PathBuf::from(v);
        }
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(o) = flags.out_dir {
            self.out_dir = o;
        }
        if let Some(t) = flags.threads {
            self.threads = Some(t);
        }
        if let Some(f) = flags.format {
            self.format = f;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dims.validate()?;
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        let o = &self.optimize;
        if !(o.failure_target >= 0.0 && o.failure_target < 1.0) {
            return Err(CliError::Config(format!(
                "failure_target must be in [0, 1), got {}",
                o.failure_target
            )));
        }
        if o.rates_per_1e25_flops.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(CliError::Config("rates_per_1e25_flops must be finite and >= 0".into()));
        }
        if o.rates_per_1e25_flops.is_empty() {
            return Err(CliError::Config("rates_per_1e25_flops is empty".into()));
        }
        Ok(())
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            dims: self.dims,
            sites: self.study.sites.clone(),
            kinds: self.study.kinds.clone(),
            trials_per_site: self.study.trials_per_site,
            seed: self.seed,
            tolerance: self.study.tolerance,
            near_inf: self.study.near_inf,
        }
    }

    pub fn campaign_config(&self) -> CampaignConfig {
        CampaignConfig {
            dims: self.dims,
            fraction: self.campaign.fraction,
            seed: self.seed,
            protection: ProtectionConfig {
                seed: self.seed,
                ..self.campaign.protection
            },
            sites: self.campaign.sites.clone(),
            kinds: self.campaign.kinds.clone(),
            unprotected_comparison: self.campaign.unprotected_comparison,
        }
    }
}
