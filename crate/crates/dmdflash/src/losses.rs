//! Training objectives: the score-difference distillation loss, the
//! timestep-routed adversarial pair, the score-estimator regression loss,
//! and the preference loss over win/lose sampling branches.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, score_from_x0pred, NoiseSchedule, StepGrid};
use crate::error::{Error, Result};
use crate::models::{DenoiserNet, DiscriminatorNet};
use crate::numerics::{Rng, Tape, Tensor};
use crate::teacher::GmmTeacher;

/// Configuration of the distillation gradient estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdGradSpec {
    /// Per-sample normalizer `sigma_t^2 / sqrt(abar_t) * d / ||x - x0_teacher||_1`
    /// when true, unit weighting when false.
    pub normalize: bool,
    /// Inclusive timestep range the distillation loss samples from; must sit
    /// strictly above the grid's adversarial (low-noise) steps.
    pub t_min: usize,
    pub t_max: usize,
    /// Bias the timestep sampler toward the low end of the range, where the
    /// diffused target retains the most structure. 0 keeps every draw uniform;
    /// `k > 0` applies `u^(k+1)` shaping to half the draws (the other half stay
    /// uniform so the full range keeps anchoring the match).
    pub low_bias: u32,
}

impl DmdGradSpec {
    /// Range covering every grid step above the low-noise set.
    pub fn for_grid(grid: &StepGrid, sched: &NoiseSchedule) -> Self {
        let floor = grid.low_noise().iter().max().copied().unwrap_or(0) + 1;
        DmdGradSpec {
            normalize: true,
            t_min: floor,
            t_max: sched.t_max - 1,
            low_bias: 0,
        }
    }

    pub fn validate(&self, grid: &StepGrid) -> Result<()> {
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::config("dmd.t_range", "need 1 <= t_min <= t_max"));
        }
        if let Some(max_low) = grid.low_noise().iter().max() {
            if self.t_min <= *max_low {
                return Err(Error::config(
                    "dmd.t_range",
                    "distillation range overlaps the adversarial steps",
                ));
            }
        }
        Ok(())
    }

    pub fn sample_t(&self, rng: &mut Rng) -> usize {
        let span = self.t_max - self.t_min + 1;
        if self.low_bias == 0 || rng.uniform() < 0.5 {
            return self.t_min + rng.below(span);
        }
        let u = rng.uniform().powi(self.low_bias as i32 + 1);
        self.t_min + ((span as f64 * u) as usize).min(span - 1)
    }
}

fn check_dm_routing(t: usize, grid: &StepGrid) -> Result<()> {
    let floor = grid.low_noise().iter().max().copied().unwrap_or(0);
    if grid.is_low_noise(t) || t <= floor {
        return Err(Error::Routing {
            t,
            rule: "distillation loss is restricted to high-noise timesteps".into(),
        });
    }
    Ok(())
}

/// Prediction of the clean sample from a noisy one; the distillation loss is
/// generic over it so exact estimators can stand in for a network.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Network-backed predictor with a fixed condition.
pub struct NetX0<'a> {
    pub net: &'a DenoiserNet,
    pub condition: Option<usize>,
}

impl X0Predictor for NetX0<'_> {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.net.infer(x_t, t, self.condition)
    }
}

/// Exact posterior mean for standard-normal data: `E[x0 | x_t] = sqrt(abar_t) x_t`.
pub struct GaussOptX0<'a>(pub &'a NoiseSchedule);

impl X0Predictor for GaussOptX0<'_> {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.0.check_t(t)?;
        let s = self.0.sqrt_alpha_bar[t];
        let data = x_t.data().iter().map(|v| v * s).collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

/// Predictor that always outputs the same clean point (a collapsed generator's
/// own diffused-score oracle).
pub struct ConstX0(pub Vec<f64>);

impl X0Predictor for ConstX0 {
    fn predict_x0(&self, x_t: &Tensor, _t: usize) -> Result<Tensor> {
        let d = self.0.len();
        if x_t.shape()[1] != d {
            return Err(Error::Shape("ConstX0 dimension mismatch".into()));
        }
        let n = x_t.shape()[0];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&self.0);
        }
        Tensor::new(vec![n, d], data)
    }
}

/// Distillation surrogate: `mean_i <stopgrad(w_i * (s_gen - s_teacher)(x_{t_j})), x_i>`.
///
/// The bracketed factor is evaluated at the diffused generator output and
/// held constant; differentiating the surrogate w.r.t. generator parameters
/// yields the score-difference gradient. Rejects adversarial-range timesteps.
pub fn dmd_surrogate_loss(
    tape: &mut Tape,
    x: &Tensor,
    teacher: &GmmTeacher,
    mu_psi: &dyn X0Predictor,
    t_j: usize,
    grid: &StepGrid,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    spec: &DmdGradSpec,
) -> Result<Tensor> {
    check_dm_routing(t_j, grid)?;
    sched.check_t(t_j)?;
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "dmd_surrogate_loss: expected [B, d], got {:?}",
            x.shape()
        )));
    }
    let (batch, d) = (x.shape()[0], x.shape()[1]);
    let x_det = x.detach();
    let eps = rng.standard_normal(x.shape());
    let x_t = forward_diffuse(&x_det, t_j, &eps, sched)?;
    let s_tau = teacher.score(&x_t, Some(t_j), sched)?;
    let x0_psi = mu_psi.predict_x0(&x_t, t_j)?;
    let s_gen = score_from_x0pred(&x_t, t_j, &x0_psi, sched)?;

    let sigma_sq = sched.sigma[t_j] * sched.sigma[t_j];
    let sqrt_abar = sched.sqrt_alpha_bar[t_j];
    let mut g = vec![0.0; batch * d];
    for i in 0..batch {
        let w = if spec.normalize {
            // teacher's denoised estimate via Tweedie's identity
            let mut l1 = 0.0;
            for j in 0..d {
                let idx = i * d + j;
                let x0_teacher = (x_t.data()[idx] + sigma_sq * s_tau.data()[idx]) / sqrt_abar;
                l1 += (x_det.data()[idx] - x0_teacher).abs();
            }
            sigma_sq / sqrt_abar * d as f64 / l1.max(1e-8)
        } else {
            1.0
        };
        for j in 0..d {
            let idx = i * d + j;
            g[idx] = w * (s_gen.data()[idx] - s_tau.data()[idx]);
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distillation score difference".into()));
    }
    let g = Tensor::new(vec![batch, d], g)?;
    let prod = tape.mul(&g, x);
    let total = tape.sum(&prod);
    Ok(tape.scale(&total, 1.0 / batch as f64))
}

/// Non-saturating generator loss from per-head fake logits:
/// mean over heads and batch of `softplus(-logit)`.
pub fn gen_loss_from_logits(tape: &mut Tape, fake_logits: &[Tensor]) -> Result<Tensor> {
    if fake_logits.is_empty() {
        return Err(Error::InvalidArgument("no discriminator heads".into()));
    }
    let mut acc: Option<Tensor> = None;
    for logit in fake_logits {
        let neg = tape.scale(logit, -1.0);
        let sp = tape.softplus(&neg);
        let m = tape.mean(&sp);
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(&a, &m),
        });
    }
    let total = acc.unwrap();
    Ok(tape.scale(&total, 1.0 / fake_logits.len() as f64))
}

/// Generator adversarial loss at the designated low-noise step. The input is
/// the generator's final-step output under tape (earlier trajectory steps are
/// detached upstream); rejects distillation-range timesteps.
pub fn gen_adv_loss(
    tape: &mut Tape,
    disc: &DiscriminatorNet,
    x_fake: &Tensor,
    t_hat: usize,
    grid: &StepGrid,
) -> Result<Tensor> {
    if !grid.is_low_noise(t_hat) {
        return Err(Error::Routing {
            t: t_hat,
            rule: "adversarial loss is restricted to the low-noise steps".into(),
        });
    }
    let logits = disc.forward(tape, disc.trunk_params(), disc.head_params(), x_fake)?;
    gen_loss_from_logits(tape, &logits)
}

/// Discriminator objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    Logistic,
    Hinge,
}

impl Default for DiscMode {
    fn default() -> Self {
        DiscMode::Logistic
    }
}

/// Discriminator loss from paired per-head logits.
pub fn disc_loss_from_logits(
    tape: &mut Tape,
    real_logits: &[Tensor],
    fake_logits: &[Tensor],
    mode: DiscMode,
) -> Result<Tensor> {
    if real_logits.is_empty() || real_logits.len() != fake_logits.len() {
        return Err(Error::Shape("disc_loss: head count mismatch".into()));
    }
    let heads = real_logits.len();
    let mut acc: Option<Tensor> = None;
    for (real, fake) in real_logits.iter().zip(fake_logits) {
        let head_loss = match mode {
            DiscMode::Logistic => {
                let neg_real = tape.scale(real, -1.0);
                let lr = tape.softplus(&neg_real);
                let lf = tape.softplus(fake);
                let both = tape.add(&lr, &lf);
                tape.mean(&both)
            }
            DiscMode::Hinge => {
                let ones = Tensor::full(vec![1], 1.0);
                let neg_real = tape.scale(real, -1.0);
                let one_minus = tape.bias_add(&neg_real, &ones);
                let lr = tape.relu(&one_minus);
                let one_plus = tape.bias_add(fake, &ones);
                let lf = tape.relu(&one_plus);
                let both = tape.add(&lr, &lf);
                tape.mean(&both)
            }
        };
        acc = Some(match acc {
            None => head_loss,
            Some(a) => tape.add(&a, &head_loss),
        });
    }
    let total = acc.unwrap();
    Ok(tape.scale(&total, 1.0 / heads as f64))
}

/// Discriminator update objective on a real batch and a detached fake batch.
pub fn disc_loss(
    tape: &mut Tape,
    disc: &DiscriminatorNet,
    trunk_params: &[Tensor],
    head_params: &[Tensor],
    x_real: &Tensor,
    x_fake: &Tensor,
    mode: DiscMode,
) -> Result<Tensor> {
    if x_fake.node.is_some() {
        return Err(Error::InvalidArgument(
            "disc_loss: fake batch must be detached".into(),
        ));
    }
    let real_logits = disc.forward(tape, trunk_params, head_params, x_real)?;
    let fake_logits = disc.forward(tape, trunk_params, head_params, x_fake)?;
    disc_loss_from_logits(tape, &real_logits, &fake_logits, mode)
}

/// Mean squared error between a clean-sample prediction and its target.
pub fn x0_regression_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "x0_regression_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let diff = tape.sub(pred, target);
    let sq = tape.square(&diff);
    Ok(tape.mean(&sq))
}

/// Score-estimator update objective: diffuse a detached generator batch to a
/// uniformly drawn `t` in `{1, ..., T-1}` and regress the clean batch.
pub fn diffusion_loss(
    tape: &mut Tape,
    net: &DenoiserNet,
    psi_params: &[Tensor],
    x_gen: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    condition: Option<usize>,
) -> Result<Tensor> {
    if x_gen.node.is_some() {
        return Err(Error::InvalidArgument(
            "diffusion_loss: generator batch must be detached".into(),
        ));
    }
    let t = 1 + rng.below(sched.t_max - 1);
    let eps = rng.standard_normal(x_gen.shape());
    let x_t = forward_diffuse(x_gen, t, &eps, sched)?;
    let pred = net.forward(tape, psi_params, &x_t, t, condition)?;
    x0_regression_loss(tape, &pred, x_gen)
}

/// Outcome of ranking one candidate group.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    pub win_idx: usize,
    pub lose_idx: usize,
    pub normalized_scores: Vec<f64>,
    /// Zero score spread; the trainer skips such groups.
    pub degenerate: bool,
}

/// Z-normalize scores within a group and pick the extremes. Ties resolve to
/// the lowest index; zero spread is flagged, not an error.
pub fn select_preference_pair(scores: &[f64]) -> Result<PairSelection> {
    let k = scores.len();
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("preference scores".into()));
    }
    let mean = scores.iter().sum::<f64>() / k as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(PairSelection {
            win_idx: 0,
            lose_idx: 0,
            normalized_scores: vec![0.0; k],
            degenerate: true,
        });
    }
    let normalized: Vec<f64> = scores.iter().map(|s| (s - mean) / std).collect();
    let mut win = 0;
    let mut lose = 0;
    for (i, s) in normalized.iter().enumerate() {
        if *s > normalized[win] {
            win = i;
        }
        if *s < normalized[lose] {
            lose = i;
        }
    }
    Ok(PairSelection {
        win_idx: win,
        lose_idx: lose,
        normalized_scores: normalized,
        degenerate: false,
    })
}

/// One win/lose sampling branch: a shared branch-point latent and the two
/// extreme candidates one grid step below it.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub z_t: Tensor,
    pub z_win: Tensor,
    pub z_lose: Tensor,
    pub t_from: usize,
    pub t_to: usize,
    pub condition: Option<usize>,
    pub raw_scores: Vec<f64>,
    pub normalized_scores: Vec<f64>,
    pub win_idx: usize,
    pub lose_idx: usize,
}

impl PreferencePair {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        z_t: Tensor,
        z_win: Tensor,
        z_lose: Tensor,
        t_from: usize,
        t_to: usize,
        condition: Option<usize>,
        raw_scores: Vec<f64>,
        selection: &PairSelection,
        grid: &StepGrid,
    ) -> Result<Self> {
        if selection.degenerate {
            return Err(Error::InvalidArgument(
                "cannot build a pair from a degenerate group".into(),
            ));
        }
        if !grid.high_noise().contains(&t_from) {
            return Err(Error::Routing {
                t: t_from,
                rule: "preference branch points must be high-noise grid steps".into(),
            });
        }
        let shape = z_t.shape();
        if shape.len() != 2 || shape[0] != 1 || z_win.shape() != shape || z_lose.shape() != shape {
            return Err(Error::Shape("preference pair latents must share [1, d]".into()));
        }
        if selection.normalized_scores[selection.win_idx]
            < selection.normalized_scores[selection.lose_idx]
        {
            return Err(Error::InvalidArgument(
                "win score below lose score".into(),
            ));
        }
        Ok(PreferencePair {
            z_t,
            z_win,
            z_lose,
            t_from,
            t_to,
            condition,
            raw_scores,
            normalized_scores: selection.normalized_scores.clone(),
            win_idx: selection.win_idx,
            lose_idx: selection.lose_idx,
        })
    }
}

/// Gaussian log-likelihood of a candidate under the stochastic hop, dropping
/// the normalization constant (it cancels in the pairwise difference):
/// `-||z - m||^2 / (2 sigma_tilde^2)` with `m = a x0_pred + b z_t`.
fn hop_logdensity_const(z: &Tensor, m: &[f64], inv_two_var: f64) -> f64 {
    let mut sq = 0.0;
    for (zv, mv) in z.data().iter().zip(m) {
        sq += (zv - mv) * (zv - mv);
    }
    -sq * inv_two_var
}

/// Preference objective `-log sigmoid(beta * H)` where `H` is the log-ratio
/// margin between policy and frozen reference on the win/lose candidates.
#[allow(clippy::too_many_arguments)]
pub fn preference_loss(
    tape: &mut Tape,
    gen: &DenoiserNet,
    theta_params: &[Tensor],
    reference: &DenoiserNet,
    pair: &PreferencePair,
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "preference beta must be positive and finite, got {beta}"
        )));
    }
    let sigma_tilde = sched.posterior_sigma(pair.t_from, pair.t_to)?;
    if sigma_tilde == 0.0 {
        return Err(Error::SingularTimestep(pair.t_to));
    }
    let (a, b) = sched.hop_coefficients(pair.t_from, pair.t_to, sigma_tilde)?;
    let inv_two_var = 1.0 / (2.0 * sigma_tilde * sigma_tilde);

    // policy hop mean, differentiable
    let x0_theta = gen.forward(tape, theta_params, &pair.z_t, pair.t_from, pair.condition)?;
    let scaled = tape.scale(&x0_theta, a);
    let bz = Tensor::new(
        pair.z_t.shape().to_vec(),
        pair.z_t.data().iter().map(|v| v * b).collect(),
    )?;
    let m_theta = tape.add(&scaled, &bz);

    let taped_logdensity = |tape: &mut Tape, z: &Tensor, m: &Tensor| {
        let zc = z.detach();
        let diff = tape.sub(&zc, m);
        let sq = tape.square(&diff);
        let s = tape.sum(&sq);
        tape.scale(&s, -inv_two_var)
    };
    let lp_win = taped_logdensity(tape, &pair.z_win, &m_theta);
    let lp_lose = taped_logdensity(tape, &pair.z_lose, &m_theta);

    // frozen reference hop mean, plain numbers
    let x0_ref = reference.infer(&pair.z_t, pair.t_from, pair.condition)?;
    let m_ref: Vec<f64> = x0_ref
        .data()
        .iter()
        .zip(pair.z_t.data())
        .map(|(x0, z)| a * x0 + b * z)
        .collect();
    let ref_win = hop_logdensity_const(&pair.z_win, &m_ref, inv_two_var);
    let ref_lose = hop_logdensity_const(&pair.z_lose, &m_ref, inv_two_var);

    // H = (lp_win - lp_lose) - (ref_win - ref_lose)
    let margin = tape.sub(&lp_win, &lp_lose);
    let ref_shift = Tensor::scalar(ref_lose - ref_win);
    let h = tape.add(&margin, &ref_shift);
    let neg_beta_h = tape.scale(&h, -beta);
    Ok(tape.softplus(&neg_beta_h))
}
