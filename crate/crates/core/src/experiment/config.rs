use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineKind, BaselineSpec};
use crate::channels::{ChannelModelConfig, Family, PathLoss};
use crate::cnn::CnnArchitecture;
use crate::error::{Error, Result};
use crate::gnn::GnnArchitecture;
use crate::model::{Architecture, Model};
use crate::training::{TestConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Multi-antenna beamforming with the gated GNN.
    GnnBeamforming,
    /// Single-antenna power control with the gated CNN.
    CnnPower,
}

/// Interference-network geometry and power budget shared by every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub k: usize,
    pub nt: usize,
    pub area_m: f64,
    pub d_min_m: f64,
    pub d_max_m: f64,
    pub noise_power_db: f64,
    pub p_max: f64,
    /// Per-pair weights; all ones when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            k: 10,
            nt: 8,
            area_m: 1000.0,
            d_min_m: 2.0,
            d_max_m: 65.0,
            noise_power_db: -10.0,
            p_max: 1.0,
            weights: None,
        }
    }
}

/// One channel family with optional overrides of its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelEntry {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_factor_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow_std_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nakagami_m: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nakagami_omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathloss: Option<PathLoss>,
}

impl ChannelEntry {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            id: None,
            k_factor_db: None,
            shadow_std_db: None,
            nakagami_m: None,
            nakagami_omega: None,
            pathloss: None,
        }
    }

    pub fn channel_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.family.name().to_string())
    }

    /// Family defaults, then the system block, then the entry's overrides.
    pub fn resolve(&self, sys: &SystemConfig, seed: u64) -> ChannelModelConfig {
        let mut c = ChannelModelConfig::new(self.family, sys.k, sys.nt);
        if self.family.uses_positions() {
            c.area_m = sys.area_m;
            c.d_min_m = sys.d_min_m;
            c.d_max_m = sys.d_max_m;
        }
        c.noise_power = crate::channels::db_to_linear(sys.noise_power_db);
        c.weights = sys.weights.clone();
        c.id = Some(self.channel_id());
        if let Some(db) = self.k_factor_db {
            c.k_factor = crate::channels::db_to_linear(db);
        }
        if let Some(s) = self.shadow_std_db {
            c.shadow_std_db = s;
        }
        if let Some(m) = self.nakagami_m {
            c.nakagami_m = m;
        }
        if let Some(o) = self.nakagami_omega {
            c.nakagami_omega = o;
        }
        if let Some(p) = self.pathloss {
            c.pathloss = Some(p);
        }
        c.seed = seed;
        c
    }
}

/// Sizes of the generated training tasks and test stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub tasks: usize,
    pub support: usize,
    pub query: usize,
    pub test_samples_per_channel: usize,
    pub test_support_frac: f64,
    pub wmmse_iters: usize,
    /// Reference rates are computed for at most this many query samples per
    /// episode; 0 means all of them.
    pub eval_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: 600,
            support: 2,
            query: 15,
            test_samples_per_channel: 500,
            test_support_frac: 0.2,
            wmmse_iters: 100,
            eval_limit: 0,
        }
    }
}

/// Axes of the sweep subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub jq: Vec<usize>,
    pub p_max: Vec<f64>,
    pub k: Vec<usize>,
    pub w_p: Vec<f64>,
    /// Methods compared in the P_max and K sweeps besides the proposed one.
    pub compare: Vec<BaselineKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            jq: vec![0, 1, 2, 5, 10, 20, 50, 100],
            p_max: vec![0.5, 1.0, 1.5, 2.0],
            k: vec![4, 6, 8, 10],
            w_p: vec![1e2, 1e4, 1e6],
            compare: vec![BaselineKind::Tl],
        }
    }
}

/// A whole experiment as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    /// Seeds of the replicate runs used by the multi-seed reports.
    #[serde(default)]
    pub replicate_seeds: Vec<u64>,
    /// Excluded from the config hash.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub system: SystemConfig,
    /// Built from the scenario and system block when absent.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub test: TestConfig,
    /// Training families; also the test stream order unless `test_channels` is set.
    pub channels: Vec<ChannelEntry>,
    #[serde(default)]
    pub test_channels: Vec<ChannelEntry>,
    #[serde(default)]
    pub baselines: Vec<BaselineSpec>,
    #[serde(default)]
    pub sweeps: SweepConfig,
}

/// 1-based line of the first `key = ...` assignment or `[key]` header in `src`.
fn locate(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let t = l.trim_start();
        let header = t.trim_start_matches('[').trim_end().trim_end_matches(']');
        header == key
            || header.ends_with(&format!(".{key}"))
            || t.strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn anchored(origin: &str, src: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    match locate(src, key) {
        Some(line) => Error::Config(format!("{origin}:{line}: {msg}")),
        None => Error::Config(format!("{origin}: {msg}")),
    }
}

impl ExperimentConfig {
    /// Parses and validates; `origin` names the source in error messages.
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
            let line = e
                .span()
                .map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1);
            let msg = e.message().to_string();
            match line {
                Some(l) => Error::Config(format!("{origin}:{l}: {msg}")),
                None => Error::Config(format!("{origin}: {msg}")),
            }
        })?;
        cfg.validate_against(src, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let src = crate::io::read_to_string(path)?;
        Self::parse(&src, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_against("", "config")
    }

    fn validate_against(&self, src: &str, origin: &str) -> Result<()> {
        let err = |key: &str, msg: String| Err(anchored(origin, src, key, msg));
        let s = &self.system;
        if s.k == 0 {
            return err("k", "system.k must be at least 1".into());
        }
        if s.nt == 0 {
            return err("nt", "system.nt must be at least 1".into());
        }
        if self.scenario == Scenario::CnnPower && s.nt != 1 {
            return err("nt", format!("scenario cnn_power requires nt = 1, got {}", s.nt));
        }
        if !(s.p_max > 0.0) {
            return err("p_max", "system.p_max must be positive".into());
        }
        if let Some(w) = &s.weights {
            if w.len() != s.k || w.iter().any(|x| !(*x > 0.0)) {
                return err("weights", format!("system.weights needs {} positive entries", s.k));
            }
        }
        if self.channels.is_empty() {
            return err("channels", "at least one channel is required".into());
        }
        let mut ids: Vec<String> = self.stream_channels().iter().map(ChannelEntry::channel_id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return err("test_channels", "test stream channel ids must be distinct".into());
        }
        for c in self.channels.iter().chain(&self.test_channels) {
            if let Err(e) = c.resolve(s, self.seed).validate() {
                return err("channels", e.to_string());
            }
        }
        let d = &self.data;
        if d.tasks == 0 || d.support == 0 || d.query == 0 {
            return err("data", "data.tasks, data.support and data.query must be positive".into());
        }
        if d.wmmse_iters == 0 {
            return err("wmmse_iters", "data.wmmse_iters must be positive".into());
        }
        let arch = self.architecture();
        if let Some(Architecture::Cnn(_)) = &self.architecture {
            if self.scenario != Scenario::CnnPower {
                return err("architecture", "a cnn architecture needs scenario cnn_power".into());
            }
        }
        if let Some(Architecture::Gnn(g)) = &self.architecture {
            if self.scenario != Scenario::GnnBeamforming {
                return err("architecture", "a gnn architecture needs scenario gnn_beamforming".into());
            }
            if g.nt != s.nt {
                return err("architecture", format!("architecture nt {} differs from system.nt {}", g.nt, s.nt));
            }
        }
        if let Architecture::Cnn(c) = &arch {
            if c.k != s.k {
                return err("architecture", format!("architecture k {} differs from system.k {}", c.k, s.k));
            }
        }
        if let Err(e) = arch.validate() {
            return err("architecture", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return err("train", e.to_string());
        }
        if let Err(e) = self.test.validate() {
            return err("test", e.to_string());
        }
        for (i, b) in self.baselines.iter().enumerate() {
            if let Err(e) = b.validate() {
                return err("baselines", e.to_string());
            }
            if self.baselines[..i].iter().any(|o| o.kind == b.kind) {
                return err("baselines", format!("baseline `{}` is listed twice", b.kind.name()));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match (&self.architecture, self.scenario) {
            (Some(a), _) => a.clone(),
            (None, Scenario::GnnBeamforming) => Architecture::Gnn(GnnArchitecture::new(self.system.nt)),
            (None, Scenario::CnnPower) => Architecture::Cnn(default_cnn(self.system.k)),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.architecture(), self.system.p_max)
    }

    pub fn stream_channels(&self) -> &[ChannelEntry] {
        if self.test_channels.is_empty() {
            &self.channels
        } else {
            &self.test_channels
        }
    }

    pub fn train_configs(&self) -> Vec<ChannelModelConfig> {
        self.channels.iter().map(|c| c.resolve(&self.system, self.seed)).collect()
    }

    pub fn stream_configs(&self) -> Vec<ChannelModelConfig> {
        self.stream_channels()
            .iter()
            .map(|c| c.resolve(&self.system, self.seed))
            .collect()
    }

    /// Copy with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c.test.seed = seed;
        c
    }

    /// Seeds from the config seed onward when no replicates are listed.
    pub fn replicates(&self, default_count: usize) -> Vec<u64> {
        if self.replicate_seeds.is_empty() {
            (0..default_count as u64).map(|i| self.seed + i).collect()
        } else {
            self.replicate_seeds.clone()
        }
    }

    /// `sha256` of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Table defaults, with padding added when the grid is too small for two
/// unpadded conv stages and a pooling step.
pub fn default_cnn(k: usize) -> CnnArchitecture {
    let arch = CnnArchitecture::new(k);
    if arch.validate().is_ok() {
        arch
    } else {
        arch.with_padding(1)
    }
}
