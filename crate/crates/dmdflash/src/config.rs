//! Run configuration: strict TOML parsing (unknown keys rejected), explicit
//! validation with field paths, and constructors for every component the
//! trainer needs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, StepGrid};
use crate::error::{Error, Result};
use crate::losses::{DiscMode, DmdGradSpec};
use crate::models::{DiscArch, NetArch};
use crate::numerics::AdamHyper;
use crate::reward::{RewardKind, RewardModel};
use crate::teacher::GmmTeacher;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    /// Number of condition groups; 0 disables conditioning.
    pub groups: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            modes: 8,
            radius: 1.0,
            sigma: 0.05,
            groups: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub taus: Vec<usize>,
    pub low_noise: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            taus: vec![999, 749, 499, 249],
            low_noise: vec![249],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    pub layers: usize,
    pub time_embed: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 128,
            layers: 3,
            time_embed: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    pub trunk_width: usize,
    pub heads: usize,
    pub mode: DiscMode,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            trunk_width: 128,
            heads: 4,
            mode: DiscMode::Logistic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Generator update period: generator steps on iterations where
    /// `iteration % ttur == 0`; the score estimator steps every iteration.
    pub ttur: u64,
    pub lambda_ema: f64,
    pub lambda_adv: f64,
    /// Per-sample normalizer inside the distillation gradient.
    pub dmd_normalize: bool,
    /// Shaping exponent that biases distillation timesteps toward the low end
    /// of the high-noise range (0 = uniform).
    pub dmd_low_bias: u32,
    pub lr_gen: f64,
    pub lr_psi: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ttur: 1,
            lambda_ema: 0.99,
            lambda_adv: 2.0,
            dmd_normalize: true,
            dmd_low_bias: 0,
            lr_gen: 2e-4,
            lr_psi: 5e-3,
            lr_disc: 1e-2,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Preference-phase update count; 0 disables the phase.
    pub updates: u64,
    /// Candidates branched per group.
    pub k: usize,
    /// High-noise grid steps eligible as branch points.
    pub branch_taus: Vec<usize>,
    /// Preference temperature.
    pub beta: f64,
    /// (rl, dm) update ratio within the preference phase.
    pub rl_ratio: [u64; 2],
    pub reward: RewardKind,
    pub bias_strength: f64,
    pub favored_modes: Vec<usize>,
    /// Keep the adversarial branch alive during preference-phase DM updates.
    pub pixelgan_on: bool,
    /// Drop the interleaved DM updates entirely (RL-only ablation).
    pub rl_only: bool,
    /// Preference groups per RL update.
    pub groups_per_update: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            updates: 0,
            k: 4,
            branch_taus: vec![999, 749],
            beta: 0.1,
            rl_ratio: [5, 1],
            reward: RewardKind::Calibrated,
            bias_strength: 0.0,
            favored_modes: Vec::new(),
            pixelgan_on: false,
            rl_only: false,
            groups_per_update: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Distillation-phase iteration count.
    pub max_iters: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub out_dir: String,
    pub teacher: TeacherConfig,
    pub schedule: ScheduleConfig,
    pub grid: GridConfig,
    pub net: NetConfig,
    pub disc: DiscConfig,
    pub train: TrainConfig,
    pub rl: RlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            max_iters: 2000,
            eval_interval: 200,
            checkpoint_interval: 1000,
            out_dir: "runs/default".into(),
            teacher: TeacherConfig::default(),
            schedule: ScheduleConfig::default(),
            grid: GridConfig::default(),
            net: NetConfig::default(),
            disc: DiscConfig::default(),
            train: TrainConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::config("<toml>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn build_teacher(&self) -> Result<GmmTeacher> {
        GmmTeacher::circle(
            self.teacher.modes,
            self.teacher.radius,
            self.teacher.sigma,
            self.teacher.groups,
        )
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule.t_max,
            self.schedule.beta_min,
            self.schedule.beta_max,
        )
    }

    pub fn build_grid(&self) -> Result<StepGrid> {
        let grid = StepGrid::new(self.grid.taus.clone(), self.grid.low_noise.clone())?;
        if let Some(top) = grid.taus().first() {
            if *top >= self.schedule.t_max {
                return Err(Error::config(
                    "grid.taus",
                    format!("step {top} outside schedule range"),
                ));
            }
        }
        Ok(grid)
    }

    pub fn net_arch(&self) -> NetArch {
        NetArch {
            data_dim: 2,
            hidden: self.net.hidden,
            layers: self.net.layers,
            time_embed: self.net.time_embed,
            num_conditions: self.teacher.groups,
            t_max: self.schedule.t_max,
        }
    }

    pub fn disc_arch(&self) -> DiscArch {
        DiscArch {
            data_dim: 2,
            trunk_width: self.disc.trunk_width,
            heads: self.disc.heads,
            trainable_trunk: false,
        }
    }

    pub fn dmd_spec(&self) -> Result<DmdGradSpec> {
        let grid = self.build_grid()?;
        let sched = self.build_schedule()?;
        let mut spec = DmdGradSpec::for_grid(&grid, &sched);
        spec.normalize = self.train.dmd_normalize;
        spec.low_bias = self.train.dmd_low_bias;
        Ok(spec)
    }

    pub fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            ..AdamHyper::default()
        }
    }

    pub fn build_reward(&self) -> Result<RewardModel> {
        RewardModel::new(
            self.rl.reward,
            self.rl.bias_strength,
            self.rl.favored_modes.clone(),
            self.build_teacher()?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.build_teacher()?;
        self.build_schedule()?;
        let grid = self.build_grid()?;
        self.net_arch()
            .validate()
            .map_err(|e| Error::config("net", e.to_string()))?;
        self.disc_arch()
            .validate()
            .map_err(|e| Error::config("disc", e.to_string()))?;
        self.dmd_spec()?.validate(&grid)?;
        self.build_reward()?;
        if self.train.ttur == 0 {
            return Err(Error::config("train.ttur", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.train.lambda_ema) {
            return Err(Error::config("train.lambda_ema", "must lie in [0, 1]"));
        }
        if self.train.lambda_adv < 0.0 || !self.train.lambda_adv.is_finite() {
            return Err(Error::config("train.lambda_adv", "must be >= 0 and finite"));
        }
        if self.train.lambda_adv > 0.0 && self.grid.low_noise.is_empty() {
            return Err(Error::config(
                "grid.low_noise",
                "the adversarial branch needs at least one low-noise step",
            ));
        }
        for (path, lr) in [
            ("train.lr_gen", self.train.lr_gen),
            ("train.lr_psi", self.train.lr_psi),
            ("train.lr_disc", self.train.lr_disc),
        ] {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::config(path, "must be positive and finite"));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be >= 1"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint_interval", "must be >= 1"));
        }
        if self.rl.updates > 0 {
            if self.rl.k < 2 {
                return Err(Error::config("rl.k", "need at least 2 candidates"));
            }
            if self.rl.beta <= 0.0 || !self.rl.beta.is_finite() {
                return Err(Error::config("rl.beta", "must be positive and finite"));
            }
            if self.rl.rl_ratio[0] == 0 || self.rl.rl_ratio[1] == 0 {
                return Err(Error::config("rl.rl_ratio", "both terms must be >= 1"));
            }
            if self.rl.branch_taus.is_empty() {
                return Err(Error::config("rl.branch_taus", "need at least one step"));
            }
            if self.rl.groups_per_update == 0 {
                return Err(Error::config("rl.groups_per_update", "must be >= 1"));
            }
            for t in &self.rl.branch_taus {
                if !grid.high_noise().contains(t) {
                    return Err(Error::config(
                        "rl.branch_taus",
                        format!("step {t} is not a high-noise grid step"),
                    ));
                }
            }
        }
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir", "must be non-empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_toml_materializes_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("bogus_key = 1").is_err());
        assert!(RunConfig::from_toml_str("[train]\nunknown = true").is_err());
    }

    #[test]
    fn validation_errors_carry_field_paths() {
        let err = RunConfig::from_toml_str("[train]\nttur = 0").unwrap_err();
        assert!(err.to_string().contains("train.ttur"), "{err}");
        let err = RunConfig::from_toml_str("[train]\nlambda_ema = 1.5").unwrap_err();
        assert!(err.to_string().contains("train.lambda_ema"), "{err}");
        let err = RunConfig::from_toml_str("[rl]\nupdates = 10\nk = 1").unwrap_err();
        assert!(err.to_string().contains("rl.k"), "{err}");
        let err =
            RunConfig::from_toml_str("[rl]\nupdates = 10\nbranch_taus = [249]").unwrap_err();
        assert!(err.to_string().contains("rl.branch_taus"), "{err}");
    }

    #[test]
    fn grid_must_fit_schedule() {
        let err = RunConfig::from_toml_str("[schedule]\nt_max = 500").unwrap_err();
        assert!(err.to_string().contains("grid.taus"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn builders_produce_consistent_components() {
        let cfg = RunConfig::default();
        let grid = cfg.build_grid().unwrap();
        assert_eq!(grid.taus(), &[999, 749, 499, 249]);
        let spec = cfg.dmd_spec().unwrap();
        assert_eq!(spec.t_min, 250);
        assert!(spec.normalize);
        let teacher = cfg.build_teacher().unwrap();
        assert_eq!(teacher.num_components(), 8);
        let arch = cfg.net_arch();
        assert_eq!(arch.num_conditions, 0);
    }
}
