//! Two-phase training orchestrator: distillation with a gated generator
//! update, EMA-coupled score estimator, and data-space discriminator,
//! followed by a preference phase alternating reward-ranked updates with
//! continued distillation.

use std::time::Instant;

use crate::config::RunConfig;
use crate::diffusion::{back_simulate, NoiseSchedule, SamplingContext, StepGrid};
use crate::error::{Error, Result};
use crate::eval::{
    default_coverage_radius, disc_real_fake_gap, kl_estimate, mode_coverage, sample_moments,
    w2_gaussian, MetricsRecord, Phase,
};
use crate::losses::{
    diffusion_loss, disc_loss, dmd_surrogate_loss, gen_adv_loss, preference_loss,
    select_preference_pair, DmdGradSpec, NetX0, PreferencePair,
};
use crate::models::{ema_inject, freeze_reference, DenoiserNet, DiscriminatorNet};
use crate::numerics::{AdamState, Rng, Tape, Tensor};
use crate::reward::RewardModel;
use crate::teacher::GmmTeacher;

/// Samples drawn per evaluation point.
pub const EVAL_SAMPLES: usize = 2000;
/// Rows used for the tracking-error probe.
const TRACKING_SAMPLES: usize = 1000;
/// Timestep strata in the tracking-error probe.
const TRACKING_STRATA: usize = 8;
/// Offset separating evaluation RNG streams from the training stream.
const EVAL_STREAM_BASE: u64 = 1 << 32;
/// Offset separating sample-export streams from both of the above.
const EXPORT_STREAM_BASE: u64 = 1 << 33;

/// Immutable run components derived from the config.
pub struct Session {
    pub config: RunConfig,
    pub teacher: GmmTeacher,
    pub sched: NoiseSchedule,
    pub grid: StepGrid,
    pub dmd_spec: DmdGradSpec,
    pub reward: RewardModel,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let teacher = config.build_teacher()?;
        let sched = config.build_schedule()?;
        let grid = config.build_grid()?;
        let dmd_spec = config.dmd_spec()?;
        let reward = config.build_reward()?;
        Ok(Session {
            config,
            teacher,
            sched,
            grid,
            dmd_spec,
            reward,
        })
    }
}

/// Update-count bookkeeping, checked exactly by the schedule tests.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize,
)]
pub struct UpdateCounts {
    pub gen: u64,
    pub psi: u64,
    pub disc: u64,
    pub rl: u64,
    pub dm_phase2: u64,
    pub degenerate_groups: u64,
}

/// Complete mutable training state; everything needed to resume a run.
pub struct TrainState {
    /// Distillation iterations completed.
    pub iteration: u64,
    /// Preference-phase updates completed.
    pub rl_step: u64,
    pub phase: Phase,
    pub gen: DenoiserNet,
    pub psi: DenoiserNet,
    pub disc: DiscriminatorNet,
    /// Frozen reference policy, present once the preference phase starts.
    pub p_ref: Option<DenoiserNet>,
    pub opt_gen: AdamState,
    pub opt_psi: AdamState,
    pub opt_disc: AdamState,
    /// Separate Adam moments for the preference objective, created at the
    /// phase switch. Its gradient scale differs from the distillation loss,
    /// so sharing moments would destabilize the interleaved updates.
    pub opt_gen_rl: Option<AdamState>,
    pub rng: Rng,
    pub counts: UpdateCounts,
}

impl TrainState {
    pub fn init(session: &Session) -> Result<Self> {
        let cfg = &session.config;
        let mut rng = Rng::new(cfg.seed, 0);
        let gen = DenoiserNet::init(cfg.net_arch(), &mut rng)?;
        // the score estimator starts as a copy of the generator
        let psi = gen.clone();
        let disc = DiscriminatorNet::init(cfg.disc_arch(), &mut rng)?;
        let opt_gen = AdamState::new(cfg.adam(cfg.train.lr_gen), gen.params());
        let opt_psi = AdamState::new(cfg.adam(cfg.train.lr_psi), psi.params());
        let opt_disc = AdamState::new(cfg.adam(cfg.train.lr_disc), disc.head_params());
        Ok(TrainState {
            iteration: 0,
            rl_step: 0,
            phase: Phase::Distill,
            gen,
            psi,
            disc,
            p_ref: None,
            opt_gen,
            opt_psi,
            opt_disc,
            opt_gen_rl: None,
            rng,
            counts: UpdateCounts::default(),
        })
    }

    pub fn total_updates(&self) -> u64 {
        self.iteration + self.rl_step
    }
}

fn finite_or_abort(value: f64, iteration: u64, name: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NanAbort {
            iteration,
            loss_name: name.to_string(),
        })
    }
}

fn adam_step_from_tape(
    tape: &Tape,
    loss: &Tensor,
    bound: &[Tensor],
    opt: &mut AdamState,
    params: &mut [Tensor],
) -> Result<()> {
    let grads = tape.backward(loss)?;
    let gvecs: Vec<Vec<f64>> = bound.iter().map(|p| grads.wrt(p)).collect();
    opt.step(params, &gvecs)
}

fn first_rows(samples: &Tensor, n: usize) -> Result<Tensor> {
    let d = samples.shape()[1];
    let n = n.min(samples.shape()[0]);
    Tensor::new(vec![n, d], samples.data()[..n * d].to_vec())
}

/// One distillation iteration, in listing order: shared forward passes with
/// pre-update parameters, the gated generator update followed immediately by
/// the EMA injection, then the score-estimator and discriminator updates.
pub fn phase1_iteration(
    state: &mut TrainState,
    session: &Session,
    lambda_adv: f64,
    update_disc: bool,
) -> Result<()> {
    let cfg = &session.config;
    let b = cfg.train.batch_size;
    let d = session.teacher.dim();
    let groups = session.teacher.num_groups();
    let condition = if groups > 0 {
        Some(state.rng.below(groups))
    } else {
        None
    };
    let ctx = SamplingContext { condition };
    let teacher = match condition {
        Some(c) => session.teacher.conditional(c)?,
        None => session.teacher.clone(),
    };

    // shared forward passes, pre-update parameters
    let z = state.rng.standard_normal(&[b, d]);
    let taus = session.grid.taus();
    let tau_i = taus[state.rng.below(taus.len())];
    let x_ti = back_simulate(
        &state.gen,
        &z,
        session.grid.top(),
        tau_i,
        &session.grid,
        &session.sched,
        &ctx,
    )?;
    let x_clean_pre = state.gen.infer(&x_ti, tau_i, condition)?;
    // the discriminator's fake batch: full clean rollout, pre-update params
    let x_fake = back_simulate(
        &state.gen,
        &z,
        session.grid.top(),
        0,
        &session.grid,
        &session.sched,
        &ctx,
    )?;

    // gated generator update + EMA injection
    if state.iteration % cfg.train.ttur == 0 {
        let mut tape = Tape::new();
        let theta = state.gen.bind(&mut tape);
        let x_hi = state.gen.forward(&mut tape, &theta, &x_ti, tau_i, condition)?;
        let t_j = session.dmd_spec.sample_t(&mut state.rng);
        let estimator = NetX0 {
            net: &state.psi,
            condition,
        };
        let l_dmd = dmd_surrogate_loss(
            &mut tape,
            &x_hi,
            &teacher,
            &estimator,
            t_j,
            &session.grid,
            &session.sched,
            &mut state.rng,
            &session.dmd_spec,
        )?;
        let loss = if lambda_adv > 0.0 {
            let low = session.grid.low_noise();
            let t_hat = low[state.rng.below(low.len())];
            let x_that = back_simulate(
                &state.gen,
                &z,
                session.grid.top(),
                t_hat,
                &session.grid,
                &session.sched,
                &ctx,
            )?;
            let x_low = state.gen.forward(&mut tape, &theta, &x_that, t_hat, condition)?;
            let l_adv = gen_adv_loss(&mut tape, &state.disc, &x_low, t_hat, &session.grid)?;
            let weighted = tape.scale(&l_adv, lambda_adv);
            tape.add(&l_dmd, &weighted)
        } else {
            l_dmd
        };
        finite_or_abort(loss.value(), state.iteration, "generator")?;
        adam_step_from_tape(&tape, &loss, &theta, &mut state.opt_gen, state.gen.params_mut())?;
        state.counts.gen += 1;
        ema_inject(
            state.psi.params_mut(),
            state.gen.params(),
            cfg.train.lambda_ema,
        )?;
    }

    // score-estimator update, every iteration
    {
        let mut tape = Tape::new();
        let psi_params = state.psi.bind(&mut tape);
        let loss = diffusion_loss(
            &mut tape,
            &state.psi,
            &psi_params,
            &x_clean_pre,
            &session.sched,
            &mut state.rng,
            condition,
        )?;
        finite_or_abort(loss.value(), state.iteration, "diffusion")?;
        adam_step_from_tape(
            &tape,
            &loss,
            &psi_params,
            &mut state.opt_psi,
            state.psi.params_mut(),
        )?;
        state.counts.psi += 1;
    }

    // discriminator update on the pre-update fake batch
    if update_disc {
        let x_real = teacher.sample(b, &mut state.rng, None)?;
        let mut tape = Tape::new();
        let heads = state.disc.bind_heads(&mut tape);
        let loss = disc_loss(
            &mut tape,
            &state.disc,
            state.disc.trunk_params(),
            &heads,
            &x_real,
            &x_fake,
            cfg.disc.mode,
        )?;
        finite_or_abort(loss.value(), state.iteration, "discriminator")?;
        adam_step_from_tape(
            &tape,
            &loss,
            &heads,
            &mut state.opt_disc,
            state.disc.head_params_mut(),
        )?;
        state.counts.disc += 1;
    }

    state.iteration += 1;
    Ok(())
}

/// One reward-ranked generator update: branch candidate groups at high-noise
/// grid steps, rank them, and step the policy on the mean preference loss.
fn rl_update(state: &mut TrainState, session: &Session) -> Result<()> {
    let cfg = &session.config;
    let d = session.teacher.dim();
    let groups = session.teacher.num_groups();
    let p_ref = state
        .p_ref
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("preference phase without frozen reference".into()))?;

    let mut tape = Tape::new();
    let theta = state.gen.bind(&mut tape);
    let mut acc: Option<Tensor> = None;
    let mut built = 0usize;
    for _ in 0..cfg.rl.groups_per_update {
        let condition = if groups > 0 {
            Some(state.rng.below(groups))
        } else {
            None
        };
        let ctx = SamplingContext { condition };
        let t_from = cfg.rl.branch_taus[state.rng.below(cfg.rl.branch_taus.len())];
        let t_to = session.grid.next_below(t_from)?;
        let z = state.rng.standard_normal(&[1, d]);
        let z_t = back_simulate(
            &state.gen,
            &z,
            session.grid.top(),
            t_from,
            &session.grid,
            &session.sched,
            &ctx,
        )?;
        let mut cand_data = Vec::with_capacity(cfg.rl.k * d);
        for _ in 0..cfg.rl.k {
            let c = crate::diffusion::ancestral_step(
                &state.gen,
                &z_t,
                t_from,
                t_to,
                &session.sched,
                &mut state.rng,
                &ctx,
            )?;
            cand_data.extend_from_slice(c.data());
        }
        let candidates = Tensor::new(vec![cfg.rl.k, d], cand_data)?;
        let scores = session
            .reward
            .reward_score(&candidates, t_to, &session.sched, condition)?;
        let selection = select_preference_pair(&scores)?;
        if selection.degenerate {
            state.counts.degenerate_groups += 1;
            continue;
        }
        let row = |i: usize| Tensor::new(vec![1, d], candidates.row(i).to_vec());
        let pair = PreferencePair::new(
            z_t,
            row(selection.win_idx)?,
            row(selection.lose_idx)?,
            t_from,
            t_to,
            condition,
            scores,
            &selection,
            &session.grid,
        )?;
        let l = preference_loss(
            &mut tape,
            &state.gen,
            &theta,
            p_ref,
            &pair,
            cfg.rl.beta,
            &session.sched,
        )?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(&a, &l),
        });
        built += 1;
    }
    if built == 0 {
        return Ok(());
    }
    let loss = tape.scale(&acc.unwrap(), 1.0 / built as f64);
    finite_or_abort(loss.value(), state.rl_step, "preference")?;
    let opt = state.opt_gen_rl.as_mut().ok_or_else(|| {
        Error::InvalidArgument("preference phase without its optimizer state".into())
    })?;
    adam_step_from_tape(&tape, &loss, &theta, opt, state.gen.params_mut())?;
    Ok(())
}

/// One preference-phase update: deterministic round-robin of `r` reward
/// updates followed by one distillation update per `rl_ratio = (r, 1)` cycle.
pub fn phase2_iteration(state: &mut TrainState, session: &Session) -> Result<()> {
    if state.phase != Phase::Preference || state.p_ref.is_none() {
        return Err(Error::InvalidArgument(
            "phase2_iteration requires the preference phase with a frozen reference".into(),
        ));
    }
    let cfg = &session.config;
    let [r, s] = cfg.rl.rl_ratio;
    let pos = state.rl_step % (r + s);
    let do_rl = cfg.rl.rl_only || pos < r;
    if do_rl {
        rl_update(state, session)?;
        state.counts.rl += 1;
        state.rl_step += 1;
    } else {
        let lambda_adv = if cfg.rl.pixelgan_on {
            cfg.train.lambda_adv
        } else {
            0.0
        };
        // a distillation update inside the preference phase; the iteration
        // counter advances inside phase1_iteration
        let before = state.iteration;
        phase1_iteration(state, session, lambda_adv, cfg.rl.pixelgan_on)?;
        debug_assert_eq!(state.iteration, before + 1);
        state.iteration = before; // preference phase accounts its own steps
        state.counts.dm_phase2 += 1;
        state.rl_step += 1;
    }
    Ok(())
}

/// Compute every metric from the current state. Uses an evaluation RNG
/// stream derived from (seed, total updates) so a stored checkpoint replays
/// the row bit-exactly without disturbing the training stream.
pub fn evaluate(state: &TrainState, session: &Session, wall_time: f64) -> Result<MetricsRecord> {
    let cfg = &session.config;
    let d = session.teacher.dim();
    let mut rng = Rng::new(cfg.seed, EVAL_STREAM_BASE + state.total_updates());
    let ctx = SamplingContext { condition: None };
    let z = rng.standard_normal(&[EVAL_SAMPLES, d]);
    let samples = back_simulate(
        &state.gen,
        &z,
        session.grid.top(),
        0,
        &session.grid,
        &session.sched,
        &ctx,
    )?;
    let kl = kl_estimate(&samples, &session.teacher, &session.sched, 5)?;
    let coverage = mode_coverage(
        &samples,
        &session.teacher,
        default_coverage_radius(&session.teacher),
    )?;
    let (mean, cov) = sample_moments(&samples)?;
    let w2 = w2_gaussian(
        &mean,
        &cov,
        &session.teacher.mean(),
        &session.teacher.covariance(),
    )?;
    let rewards = session
        .reward
        .reward_score(&samples, 0, &session.sched, None)?;
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let probe = first_rows(&samples, TRACKING_SAMPLES)?;
    let estimator = NetX0 {
        net: &state.psi,
        condition: None,
    };
    let tracking = crate::eval::psi_tracking_error(
        &estimator,
        &probe,
        &session.sched,
        &mut rng,
        TRACKING_STRATA,
    )?;
    let x_real = session.teacher.sample(256, &mut rng, None)?;
    let x_fake = first_rows(&samples, 256)?;
    let gap = disc_real_fake_gap(&state.disc, &x_real, &x_fake)?;
    let head_losses = per_head_logistic_losses(&state.disc, &x_real, &x_fake)?;
    Ok(MetricsRecord {
        iteration: state.total_updates(),
        phase: state.phase,
        kl_gen_to_teacher: kl,
        w2: Some(w2),
        mode_coverage: coverage,
        mean_reward,
        psi_tracking_error: tracking,
        disc_real_fake_gap: gap,
        disc_head_losses: head_losses,
        wall_time,
    })
}

/// Draw `n` clean samples from the current generator on a dedicated RNG
/// stream, with a uniformly drawn condition per row when the teacher is
/// grouped (condition id -1 marks unconditional rows).
pub fn export_samples(
    state: &TrainState,
    session: &Session,
    n: usize,
) -> Result<(Tensor, Vec<i64>)> {
    let cfg = &session.config;
    let d = session.teacher.dim();
    let mut rng = Rng::new(cfg.seed, EXPORT_STREAM_BASE + state.total_updates());
    let z = rng.standard_normal(&[n, d]);
    let groups = session.teacher.num_groups();
    if groups == 0 {
        let ctx = SamplingContext { condition: None };
        let samples = back_simulate(
            &state.gen,
            &z,
            session.grid.top(),
            0,
            &session.grid,
            &session.sched,
            &ctx,
        )?;
        return Ok((samples, vec![-1; n]));
    }
    let conditions: Vec<usize> = (0..n).map(|_| rng.below(groups)).collect();
    let mut data = vec![0.0; n * d];
    for c in 0..groups {
        let rows: Vec<usize> = (0..n).filter(|i| conditions[*i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let mut sub = vec![0.0; rows.len() * d];
        for (k, &i) in rows.iter().enumerate() {
            sub[k * d..(k + 1) * d].copy_from_slice(&z.data()[i * d..(i + 1) * d]);
        }
        let sub = Tensor::new(vec![rows.len(), d], sub)?;
        let ctx = SamplingContext { condition: Some(c) };
        let out = back_simulate(
            &state.gen,
            &sub,
            session.grid.top(),
            0,
            &session.grid,
            &session.sched,
            &ctx,
        )?;
        for (k, &i) in rows.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&out.data()[k * d..(k + 1) * d]);
        }
    }
    let samples = Tensor::new(vec![n, d], data)?;
    Ok((samples, conditions.iter().map(|&c| c as i64).collect()))
}

fn per_head_logistic_losses(
    disc: &DiscriminatorNet,
    x_real: &Tensor,
    x_fake: &Tensor,
) -> Result<Vec<f64>> {
    let real = disc.logits_matrix(x_real)?;
    let fake = disc.logits_matrix(x_fake)?;
    let heads = real.shape()[1];
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut total = 0.0;
        for i in 0..real.shape()[0] {
            total += softplus(-real.data()[i * heads + h]);
        }
        for i in 0..fake.shape()[0] {
            total += softplus(fake.data()[i * heads + h]);
        }
        out.push(total / real.shape()[0] as f64);
    }
    Ok(out)
}

/// Events surfaced to the run sink.
pub enum Event<'a> {
    Metrics(&'a MetricsRecord),
    Checkpoint(&'a TrainState),
}

pub struct Trainer {
    pub session: Session,
    pub state: TrainState,
    start: Instant,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let session = Session::new(config)?;
        let state = TrainState::init(&session)?;
        Ok(Trainer {
            session,
            state,
            start: Instant::now(),
        })
    }

    pub fn from_parts(session: Session, state: TrainState) -> Self {
        Trainer {
            session,
            state,
            start: Instant::now(),
        }
    }

    pub fn target_updates(&self) -> u64 {
        self.session.config.max_iters + self.session.config.rl.updates
    }

    pub fn is_done(&self) -> bool {
        self.state.total_updates() >= self.target_updates()
    }

    /// Advance one update, handling the phase transition (the reference
    /// policy freezes the moment distillation finishes).
    pub fn step(&mut self) -> Result<()> {
        let cfg = &self.session.config;
        if self.state.iteration < cfg.max_iters {
            phase1_iteration(
                &mut self.state,
                &self.session,
                cfg.train.lambda_adv,
                true,
            )
        } else {
            if self.state.phase == Phase::Distill {
                self.state.phase = Phase::Preference;
            }
            if self.state.p_ref.is_none() {
                self.state.p_ref = Some(freeze_reference(&self.state.gen));
            }
            if self.state.opt_gen_rl.is_none() {
                self.state.opt_gen_rl = Some(AdamState::new(
                    cfg.adam(cfg.train.lr_gen),
                    self.state.gen.params(),
                ));
            }
            phase2_iteration(&mut self.state, &self.session)
        }
    }

    pub fn evaluate_now(&self) -> Result<MetricsRecord> {
        evaluate(
            &self.state,
            &self.session,
            self.start.elapsed().as_secs_f64(),
        )
    }

    /// Run to completion, emitting a checkpoint at the configured interval
    /// (plus the initial and final states) and a metrics record at each
    /// evaluation interval and at the end.
    pub fn run(&mut self, mut sink: impl FnMut(&Session, Event) -> Result<()>) -> Result<()> {
        let eval_every = self.session.config.eval_interval;
        let ckpt_every = self.session.config.checkpoint_interval;
        if self.state.total_updates() == 0 {
            sink(&self.session, Event::Checkpoint(&self.state))?;
        }
        while !self.is_done() {
            self.step()?;
            let total = self.state.total_updates();
            let done = self.is_done();
            if total % eval_every == 0 || done {
                let rec = self.evaluate_now()?;
                sink(&self.session, Event::Metrics(&rec))?;
            }
            if total % ckpt_every == 0 || done {
                sink(&self.session, Event::Checkpoint(&self.state))?;
            }
        }
        Ok(())
    }

    /// Convenience wrapper collecting metrics in memory.
    pub fn run_collect(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut metrics = Vec::new();
        self.run(|_, event| {
            if let Event::Metrics(rec) = event {
                metrics.push(rec.clone());
            }
            Ok(())
        })?;
        Ok(metrics)
    }
}
