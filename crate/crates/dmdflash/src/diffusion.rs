//! Discrete VP noise schedule, forward diffusion, score conversions, the
//! few-step sampling grid, gradient-detached back-simulation, and the
//! stochastic ancestral step used for candidate branching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DenoiserNet;
use crate::numerics::{Rng, Tape, Tensor};

/// Discrete VP diffusion coefficients over `T` steps, linear-beta DDPM
/// discretization. `alpha_bar[t] + sigma[t]^2 == 1` by construction.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sqrt_alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::config("schedule.t", "need at least 2 timesteps"));
        }
        if !(0.0..1.0).contains(&beta_min) || !(0.0..1.0).contains(&beta_max) || beta_min > beta_max
        {
            return Err(Error::config(
                "schedule.beta",
                "need 0 < beta_min <= beta_max < 1",
            ));
        }
        let mut beta = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for t in 0..t_max {
            let b = beta_min + (beta_max - beta_min) * t as f64 / (t_max - 1) as f64;
            acc *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(acc);
        }
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(NoiseSchedule {
            t_max,
            beta,
            alpha_bar,
            sqrt_alpha_bar,
            sigma,
        })
    }

    /// Default configuration: T = 1000, beta in [1e-4, 0.02], so the usual
    /// timestep indices {999, 749, 499, 249} apply verbatim.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule")
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < self.t_max {
            Ok(())
        } else {
            Err(Error::TimestepRange { t, max: self.t_max })
        }
    }

    /// Posterior standard deviation of the stochastic hop `t_from -> t_to`
    /// under the DDPM posterior mapped onto the coarse grid:
    /// `sigma_tilde^2 = (sigma_to^2 / sigma_from^2) * (1 - abar_from / abar_to)`.
    pub fn posterior_sigma(&self, t_from: usize, t_to: usize) -> Result<f64> {
        self.check_t(t_from)?;
        if t_to >= t_from {
            return Err(Error::BadHop { t_from, t_to });
        }
        if t_to == 0 {
            return Ok(0.0);
        }
        let s_from2 = 1.0 - self.alpha_bar[t_from];
        let s_to2 = 1.0 - self.alpha_bar[t_to];
        let beta_eff = 1.0 - self.alpha_bar[t_from] / self.alpha_bar[t_to];
        Ok((s_to2 / s_from2 * beta_eff).sqrt())
    }

    /// Coefficients `(a, b)` of the hop mean `m = a * x0_pred + b * x_t` for
    /// the (possibly stochastic) reverse hop with residual noise scale
    /// `sigma_tilde`. `sigma_tilde = 0` recovers the deterministic hop.
    pub fn hop_coefficients(
        &self,
        t_from: usize,
        t_to: usize,
        sigma_tilde: f64,
    ) -> Result<(f64, f64)> {
        self.check_t(t_from)?;
        if t_to >= t_from {
            return Err(Error::BadHop { t_from, t_to });
        }
        let s_from = self.sigma[t_from];
        let s_to2 = (1.0 - self.alpha_bar[t_to]) - sigma_tilde * sigma_tilde;
        if s_to2 < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "sigma_tilde {sigma_tilde} exceeds sigma at t={t_to}"
            )));
        }
        let dir = s_to2.max(0.0).sqrt() / s_from;
        let a = self.sqrt_alpha_bar[t_to] - dir * self.sqrt_alpha_bar[t_from];
        Ok((a, dir))
    }
}

/// Ordered generator timesteps with the low/high-noise loss split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    /// Descending timesteps `tau_K > ... > tau_1`.
    taus: Vec<usize>,
    low_noise: Vec<usize>,
    high_noise: Vec<usize>,
}

impl StepGrid {
    pub fn new(taus: Vec<usize>, low_noise: Vec<usize>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::config("grid.taus", "empty grid"));
        }
        if !taus.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::config("grid.taus", "must be strictly descending"));
        }
        for t in &low_noise {
            if !taus.contains(t) {
                return Err(Error::config(
                    "grid.low_noise",
                    format!("timestep {t} not in taus"),
                ));
            }
        }
        let high_noise: Vec<usize> = taus
            .iter()
            .copied()
            .filter(|t| !low_noise.contains(t))
            .collect();
        if high_noise.is_empty() {
            return Err(Error::config("grid.low_noise", "no high-noise steps left"));
        }
        Ok(StepGrid {
            taus,
            low_noise,
            high_noise,
        })
    }

    /// 4-step default {999, 749, 499, 249}; the lowest step carries the
    /// adversarial loss.
    pub fn four_step() -> Self {
        StepGrid::new(vec![999, 749, 499, 249], vec![249]).expect("default grid")
    }

    /// 8-step default {999, 874, 749, 629, 499, 374, 249, 124}.
    pub fn eight_step() -> Self {
        StepGrid::new(vec![999, 874, 749, 629, 499, 374, 249, 124], vec![124])
            .expect("default grid")
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn low_noise(&self) -> &[usize] {
        &self.low_noise
    }

    pub fn high_noise(&self) -> &[usize] {
        &self.high_noise
    }

    pub fn contains(&self, t: usize) -> bool {
        self.taus.contains(&t)
    }

    pub fn is_low_noise(&self, t: usize) -> bool {
        self.low_noise.contains(&t)
    }

    pub fn top(&self) -> usize {
        self.taus[0]
    }

    pub fn bottom(&self) -> usize {
        *self.taus.last().unwrap()
    }

    /// The grid step directly below `t`, or 0 past the bottom.
    pub fn next_below(&self, t: usize) -> Result<usize> {
        let pos = self
            .taus
            .iter()
            .position(|x| *x == t)
            .ok_or(Error::NotInGrid(t))?;
        Ok(self.taus.get(pos + 1).copied().unwrap_or(0))
    }
}

/// Per-call sampling context: an optional class id standing in for a prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct SamplingContext {
    pub condition: Option<usize>,
}

/// Marginal forward diffusion `x_t = sqrt(abar_t) x0 + sigma_t eps`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape("forward_diffuse: x0 vs eps".into()));
    }
    let a = sched.sqrt_alpha_bar[t];
    let s = sched.sigma[t];
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + s * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Same as [`forward_diffuse`] but differentiable through `x0` under `tape`.
pub fn forward_diffuse_taped(
    tape: &mut Tape,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape("forward_diffuse: x0 vs eps".into()));
    }
    let scaled_x0 = tape.scale(x0, sched.sqrt_alpha_bar[t]);
    let scaled_eps = Tensor::new(
        eps.shape().to_vec(),
        eps.data().iter().map(|e| e * sched.sigma[t]).collect(),
    )?;
    Ok(tape.add(&scaled_x0, &scaled_eps))
}

/// Score of the diffused marginal implied by an x0 prediction:
/// `s = -(x_t - sqrt(abar_t) x0_pred) / sigma_t^2`.
pub fn score_from_x0pred(
    x_t: &Tensor,
    t: usize,
    x0_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::SingularTimestep(0));
    }
    if x_t.shape() != x0_pred.shape() {
        return Err(Error::Shape("score_from_x0pred: x_t vs x0_pred".into()));
    }
    let a = sched.sqrt_alpha_bar[t];
    let s2 = sched.sigma[t] * sched.sigma[t];
    let data = x_t
        .data()
        .iter()
        .zip(x0_pred.data())
        .map(|(x, p)| -(x - a * p) / s2)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// One guarded generator evaluation at a grid timestep, differentiable when
/// `params` are tape-bound.
pub fn generator_step(
    net: &DenoiserNet,
    tape: &mut Tape,
    params: &[Tensor],
    x_t: &Tensor,
    t: usize,
    grid: &StepGrid,
    ctx: &SamplingContext,
) -> Result<Tensor> {
    if !grid.contains(t) {
        return Err(Error::NotInGrid(t));
    }
    net.forward(tape, params, x_t, t, ctx.condition)
}

/// Deterministic reverse hop keeping the x0 prediction fixed. `t_to = 0`
/// returns `x0_pred` exactly.
pub fn ddim_hop(
    x0_pred: &Tensor,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t_from)?;
    if t_to >= t_from {
        return Err(Error::BadHop { t_from, t_to });
    }
    if x0_pred.shape() != x_t.shape() {
        return Err(Error::Shape("ddim_hop: x0_pred vs x_t".into()));
    }
    if t_to == 0 {
        return Ok(x0_pred.detach());
    }
    let (a, b) = sched.hop_coefficients(t_from, t_to, 0.0)?;
    let data = x0_pred
        .data()
        .iter()
        .zip(x_t.data())
        .map(|(p, x)| a * p + b * x)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Gradient-detached multi-step rollout along grid timesteps, with the
/// number of generator evaluations.
pub fn back_simulate_counting(
    net: &DenoiserNet,
    x: &Tensor,
    t_from: usize,
    t_to: usize,
    grid: &StepGrid,
    sched: &NoiseSchedule,
    ctx: &SamplingContext,
) -> Result<(Tensor, usize)> {
    if t_from == t_to {
        return Ok((x.detach(), 0));
    }
    if !grid.contains(t_from) {
        return Err(Error::NotInGrid(t_from));
    }
    if t_to != 0 && !grid.contains(t_to) {
        return Err(Error::NotInGrid(t_to));
    }
    if t_to > t_from {
        return Err(Error::BadHop { t_from, t_to });
    }
    let mut cur = x.detach();
    let mut t_cur = t_from;
    let mut evals = 0;
    while t_cur > t_to {
        let x0_pred = net.infer(&cur, t_cur, ctx.condition)?;
        evals += 1;
        let t_next = grid.next_below(t_cur)?.max(t_to);
        cur = ddim_hop(&x0_pred, &cur, t_cur, t_next, sched)?;
        t_cur = t_next;
    }
    Ok((cur, evals))
}

/// Gradient-detached multi-step rollout (the back-simulation operator).
pub fn back_simulate(
    net: &DenoiserNet,
    x: &Tensor,
    t_from: usize,
    t_to: usize,
    grid: &StepGrid,
    sched: &NoiseSchedule,
    ctx: &SamplingContext,
) -> Result<Tensor> {
    back_simulate_counting(net, x, t_from, t_to, grid, sched, ctx).map(|(t, _)| t)
}

/// Stochastic reverse hop: posterior mean plus `sigma_tilde` noise. With
/// `t_to = 0` the variance degenerates and the hop is deterministic.
pub fn ancestral_step(
    net: &DenoiserNet,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    ctx: &SamplingContext,
) -> Result<Tensor> {
    let sigma_tilde = sched.posterior_sigma(t_from, t_to)?;
    ancestral_step_with_sigma(net, x_t, t_from, t_to, sched, rng, ctx, sigma_tilde)
}

/// [`ancestral_step`] with an explicit residual noise scale (0 makes it
/// coincide with [`ddim_hop`]).
#[allow(clippy::too_many_arguments)]
pub fn ancestral_step_with_sigma(
    net: &DenoiserNet,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    ctx: &SamplingContext,
    sigma_tilde: f64,
) -> Result<Tensor> {
    sched.check_t(t_from)?;
    if t_to >= t_from {
        return Err(Error::BadHop { t_from, t_to });
    }
    let x0_pred = net.infer(x_t, t_from, ctx.condition)?;
    if t_to == 0 {
        return Ok(x0_pred);
    }
    let (a, b) = sched.hop_coefficients(t_from, t_to, sigma_tilde)?;
    let eps = rng.normal_vec(x_t.numel());
    let data = x0_pred
        .data()
        .iter()
        .zip(x_t.data())
        .zip(eps)
        .map(|((p, x), e)| a * p + b * x + sigma_tilde * e)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Mean pairwise distance of `n` stochastic candidates branched at grid step
/// `t` and completed to clean samples. Quantifies per-timestep sampling
/// diversity.
pub fn sampling_variance_probe(
    net: &DenoiserNet,
    grid: &StepGrid,
    sched: &NoiseSchedule,
    t: usize,
    n: usize,
    ctx: &SamplingContext,
    rng: &mut Rng,
) -> Result<f64> {
    if !grid.contains(t) {
        return Err(Error::NotInGrid(t));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("probe needs n >= 2".into()));
    }
    let d = net.arch.data_dim;
    let z = rng.standard_normal(&[1, d]);
    let x_t = back_simulate(net, &z, grid.top(), t, grid, sched, ctx)?;
    let t_next = grid.next_below(t)?;
    let mut finals = Vec::with_capacity(n);
    for _ in 0..n {
        let cand = ancestral_step(net, &x_t, t, t_next, sched, rng, ctx)?;
        let x0 = if t_next == 0 {
            cand
        } else {
            back_simulate(net, &cand, t_next, 0, grid, sched, ctx)?
        };
        finals.push(x0);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = finals[i]
                .data()
                .iter()
                .zip(finals[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += dist;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
