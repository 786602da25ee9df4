//! Latent reward oracles: a calibrated reward equal to the true diffused
//! log-density, plus deliberately biased variants used to study reward
//! hacking. All kinds score noisy latents directly at any timestep.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::teacher::GmmTeacher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// True diffused log-density of the target distribution.
    Calibrated,
    /// Calibrated plus `bias_strength * ||z||`: rewards drift outward.
    NormBiased,
    /// Calibrated plus a bonus when the nearest mode is in the favored set:
    /// rewards diversity collapse onto those modes.
    ModeBiased,
}

impl Default for RewardKind {
    fn default() -> Self {
        RewardKind::Calibrated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub bias_strength: f64,
    /// Mode indices receiving the mode-bias bonus.
    pub favored_modes: Vec<usize>,
    teacher: GmmTeacher,
}

impl RewardModel {
    pub fn new(
        kind: RewardKind,
        bias_strength: f64,
        favored_modes: Vec<usize>,
        teacher: GmmTeacher,
    ) -> Result<Self> {
        if !bias_strength.is_finite() {
            return Err(Error::config("reward.bias_strength", "must be finite"));
        }
        if favored_modes
            .iter()
            .any(|m| *m >= teacher.num_components())
        {
            return Err(Error::config("reward.favored_modes", "index out of range"));
        }
        if kind == RewardKind::ModeBiased && favored_modes.is_empty() && bias_strength != 0.0 {
            return Err(Error::config(
                "reward.favored_modes",
                "mode-biased reward needs at least one favored mode",
            ));
        }
        Ok(RewardModel {
            kind,
            bias_strength,
            favored_modes,
            teacher,
        })
    }

    pub fn calibrated(teacher: GmmTeacher) -> Self {
        RewardModel::new(RewardKind::Calibrated, 0.0, Vec::new(), teacher)
            .expect("calibrated reward")
    }

    pub fn teacher(&self) -> &GmmTeacher {
        &self.teacher
    }

    /// Score each row of `z_t` at timestep `t`; `condition` restricts the
    /// reference density to that mode group.
    pub fn reward_score(
        &self,
        z_t: &Tensor,
        t: usize,
        sched: &NoiseSchedule,
        condition: Option<usize>,
    ) -> Result<Vec<f64>> {
        sched.check_t(t)?;
        let reference = match condition {
            None => self.teacher.clone(),
            Some(c) => self.teacher.conditional(c)?,
        };
        let mut scores = reference.logdensity(z_t, Some(t), sched)?;
        match self.kind {
            RewardKind::Calibrated => {}
            RewardKind::NormBiased => {
                for (i, s) in scores.iter_mut().enumerate() {
                    let norm: f64 = z_t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    *s += self.bias_strength * norm;
                }
            }
            RewardKind::ModeBiased => {
                // compare against diffused mode locations
                let scale = sched.sqrt_alpha_bar[t];
                for (i, s) in scores.iter_mut().enumerate() {
                    let row = z_t.row(i);
                    let mut nearest = 0;
                    let mut best = f64::INFINITY;
                    for (m, mean) in self.teacher.means().iter().enumerate() {
                        let dist: f64 = row
                            .iter()
                            .zip(mean)
                            .map(|(a, b)| (a - scale * b).powi(2))
                            .sum();
                        if dist < best {
                            best = dist;
                            nearest = m;
                        }
                    }
                    if self.favored_modes.contains(&nearest) {
                        *s += self.bias_strength;
                    }
                }
            }
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("reward score".into()));
        }
        Ok(scores)
    }
}
