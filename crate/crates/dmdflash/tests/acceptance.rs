//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them on success).
//!
//! The trained-model criteria share seeded training runs through in-process
//! caches, so the whole gate performs each multi-minute run exactly once.

use std::sync::OnceLock;
use std::time::Instant;

use dmdflash::checkpoint;
use dmdflash::config::RunConfig;
use dmdflash::diffusion::{
    back_simulate, forward_diffuse, sampling_variance_probe, SamplingContext,
};
use dmdflash::eval::MetricsRecord;
use dmdflash::losses::{
    dmd_surrogate_loss, preference_loss, select_preference_pair, GaussOptX0, NetX0, PreferencePair,
    X0Predictor,
};
use dmdflash::models::DenoiserNet;
use dmdflash::numerics::{Rng, Tape, Tensor};
use dmdflash::teacher::GmmTeacher;
use dmdflash::trainer::{phase1_iteration, Session, TrainState, Trainer};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn verdict(label: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {label}: {tag} — {detail}");
    assert!(pass, "{label}: {detail}");
}

struct TrainedRun {
    trainer: Trainer,
    last: MetricsRecord,
    wall_secs: f64,
}

fn run_to_end(mut cfg: RunConfig, seed: u64) -> TrainedRun {
    cfg.seed = seed;
    cfg.eval_interval = u64::MAX;
    cfg.checkpoint_interval = u64::MAX;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg).expect("config valid");
    let metrics = trainer.run_collect().expect("run completes");
    TrainedRun {
        trainer,
        last: metrics.last().expect("final metrics").clone(),
        wall_secs: start.elapsed().as_secs_f64(),
    }
}

fn phase1_runs() -> &'static Vec<TrainedRun> {
    static CACHE: OnceLock<Vec<TrainedRun>> = OnceLock::new();
    CACHE.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| run_to_end(RunConfig::default(), s))
            .collect()
    })
}

fn dm_only_runs() -> &'static Vec<TrainedRun> {
    static CACHE: OnceLock<Vec<TrainedRun>> = OnceLock::new();
    CACHE.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| {
                let mut cfg = RunConfig::default();
                cfg.train.lambda_adv = 0.0;
                run_to_end(cfg, s)
            })
            .collect()
    })
}

fn ema_off_runs() -> &'static Vec<TrainedRun> {
    static CACHE: OnceLock<Vec<TrainedRun>> = OnceLock::new();
    CACHE.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| {
                let mut cfg = RunConfig::default();
                cfg.train.lambda_ema = 1.0;
                run_to_end(cfg, s)
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-6, f64::max(a.abs(), b.abs()))
}

// ---------------------------------------------------------------------------
// 1. reverse-mode gradients match central finite differences
// ---------------------------------------------------------------------------

/// A random smooth composed graph over `leaves`, ending in a scalar.
fn random_graph(tape: &mut Tape, leaves: &[Tensor], rng: &mut Rng) -> Tensor {
    let mut pool: Vec<Tensor> = leaves.to_vec();
    let n_ops = 3 + rng.below(4);
    for _ in 0..n_ops {
        let pick = pool[rng.below(pool.len())].clone();
        let out = match rng.below(8) {
            0 => {
                let other = pool[rng.below(pool.len())].clone();
                tape.add(&pick, &other)
            }
            1 => {
                let other = pool[rng.below(pool.len())].clone();
                tape.sub(&pick, &other)
            }
            2 => {
                let other = pool[rng.below(pool.len())].clone();
                tape.mul(&pick, &other)
            }
            3 => tape.tanh(&pick),
            4 => tape.silu(&pick),
            5 => tape.softplus(&pick),
            6 => tape.square(&pick),
            _ => tape.scale(&pick, 0.7),
        };
        pool.push(out);
    }
    let last = pool.last().unwrap().clone();
    tape.mean(&last)
}

#[test]
fn c01_autodiff_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = Rng::new(11, 0);
    let mut worst: f64 = 0.0;

    // (a) 50 random composed graphs, full finite differences over every leaf
    for _ in 0..50 {
        let shape = [2 + rng.below(2), 2 + rng.below(3)];
        let n_leaves = 2 + rng.below(2);
        let values: Vec<Tensor> = (0..n_leaves)
            .map(|_| rng.standard_normal(&shape))
            .collect();
        let graph_seed = rng.state();
        let eval = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let leaves: Vec<Tensor> = vals.iter().map(|v| tape.leaf(v)).collect();
            let mut graph_rng = Rng::restore(&graph_seed);
            random_graph(&mut tape, &leaves, &mut graph_rng).value()
        };
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = values.iter().map(|v| tape.leaf(v)).collect();
        let mut graph_rng = Rng::restore(&graph_seed);
        let loss = random_graph(&mut tape, &leaves, &mut graph_rng);
        let grads = tape.backward(&loss).unwrap();
        let h = 1e-6;
        for (li, v) in values.iter().enumerate() {
            let g = grads.wrt(&leaves[li]);
            for i in 0..v.numel() {
                let mut plus = values.clone();
                plus[li].data_mut()[i] += h;
                let mut minus = values.clone();
                minus[li].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(fd, g[i]));
            }
        }
    }

    // (b) the full distillation-phase generator loss, finite differences over
    // sampled parameter coordinates with the held-constant factors frozen
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 16;
    let session = Session::new(cfg).unwrap();
    let mut state = TrainState::init(&session).unwrap();
    for _ in 0..3 {
        phase1_iteration(&mut state, &session, session.config.train.lambda_adv, true).unwrap();
    }
    let d = session.teacher.dim();
    let mut rng2 = Rng::new(77, 3);
    let ctx = SamplingContext { condition: None };
    let z = rng2.standard_normal(&[16, d]);
    let tau_i = 499;
    let t_hat = 249;
    let t_j = 600;
    let x_ti = back_simulate(&state.gen, &z, 999, tau_i, &session.grid, &session.sched, &ctx).unwrap();
    let x_that = back_simulate(&state.gen, &z, 999, t_hat, &session.grid, &session.sched, &ctx).unwrap();
    let lambda_adv = session.config.train.lambda_adv;

    // freeze the score-difference factor by replaying the epsilon draw
    let eps_state = rng2.state();
    let x_hi0 = state.gen.infer(&x_ti, tau_i, None).unwrap();
    let frozen_g = {
        let mut replay = Rng::restore(&eps_state);
        let eps = replay.standard_normal(&[16, d]);
        let x_t = forward_diffuse(&x_hi0, t_j, &eps, &session.sched).unwrap();
        let s_tau = session.teacher.score(&x_t, Some(t_j), &session.sched).unwrap();
        let estimator = NetX0 { net: &state.psi, condition: None };
        let x0_psi = estimator.predict_x0(&x_t, t_j).unwrap();
        let sig2 = session.sched.sigma[t_j] * session.sched.sigma[t_j];
        let sab = session.sched.sqrt_alpha_bar[t_j];
        let mut g = vec![0.0; 16 * d];
        for i in 0..16 {
            let mut l1 = 0.0;
            for j in 0..d {
                let idx = i * d + j;
                let x0_teacher = (x_t.data()[idx] + sig2 * s_tau.data()[idx]) / sab;
                l1 += (x_hi0.data()[idx] - x0_teacher).abs();
            }
            let w = sig2 / sab * d as f64 / l1.max(1e-8);
            for j in 0..d {
                let idx = i * d + j;
                let s_gen = (sab * x0_psi.data()[idx] - x_t.data()[idx]) / sig2;
                g[idx] = w * (s_gen - s_tau.data()[idx]);
            }
        }
        g
    };

    let loss_value = |net: &DenoiserNet| -> f64 {
        let x_hi = net.infer(&x_ti, tau_i, None).unwrap();
        let dmd: f64 = frozen_g
            .iter()
            .zip(x_hi.data())
            .map(|(g, x)| g * x)
            .sum::<f64>()
            / 16.0;
        let x_low = net.infer(&x_that, t_hat, None).unwrap();
        let logits = state.disc.logits_matrix(&x_low).unwrap();
        let softplus = |v: f64| {
            if v > 30.0 { v } else { (1.0 + v.exp()).ln() }
        };
        let adv: f64 =
            logits.data().iter().map(|&l| softplus(-l)).sum::<f64>() / logits.numel() as f64;
        dmd + lambda_adv * adv
    };

    // reverse-mode gradient of the same composite
    let mut tape = Tape::new();
    let theta = state.gen.bind(&mut tape);
    let x_hi = state.gen.forward(&mut tape, &theta, &x_ti, tau_i, None).unwrap();
    let mut loss_rng = Rng::restore(&eps_state);
    let l_dmd = dmd_surrogate_loss(
        &mut tape,
        &x_hi,
        &session.teacher,
        &NetX0 { net: &state.psi, condition: None },
        t_j,
        &session.grid,
        &session.sched,
        &mut loss_rng,
        &session.dmd_spec,
    )
    .unwrap();
    let x_low = state.gen.forward(&mut tape, &theta, &x_that, t_hat, None).unwrap();
    let l_adv =
        dmdflash::losses::gen_adv_loss(&mut tape, &state.disc, &x_low, t_hat, &session.grid)
            .unwrap();
    let weighted = tape.scale(&l_adv, lambda_adv);
    let loss = tape.add(&l_dmd, &weighted);
    let grads = tape.backward(&loss).unwrap();
    let gvecs: Vec<Vec<f64>> = theta.iter().map(|p| grads.wrt(p)).collect();

    let mut coord_rng = Rng::new(5, 9);
    let h = 1e-5;
    let n_params = state.gen.params().len();
    for _ in 0..150 {
        let pi = coord_rng.below(n_params);
        let n = state.gen.params()[pi].numel();
        let ci = coord_rng.below(n);
        let mut plus = state.gen.clone();
        plus.params_mut()[pi].data_mut()[ci] += h;
        let mut minus = state.gen.clone();
        minus.params_mut()[pi].data_mut()[ci] -= h;
        let fd = (loss_value(&plus) - loss_value(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(fd, gvecs[pi][ci]));
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        "01 autodiff-vs-finite-differences",
        worst < 1e-4 && secs < 30.0,
        &format!("max rel err {worst:.2e} over 50 graphs + composite generator loss; {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. analytic mixture scores
// ---------------------------------------------------------------------------

#[test]
fn c02_teacher_scores_match_density_gradients() {
    let sched = RunConfig::default().build_schedule().unwrap();
    let teacher = GmmTeacher::circle(8, 1.0, 0.05, 0).unwrap();
    let mut rng = Rng::new(21, 0);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..100 {
        let t = rng.below(1000);
        let x: Vec<f64> = (0..2).map(|_| 4.0 * (rng.uniform() - 0.5)).collect();
        let xt = Tensor::new(vec![1, 2], x.clone()).unwrap();
        let score = teacher.score(&xt, Some(t), &sched).unwrap();
        for j in 0..2 {
            let mut plus = x.clone();
            plus[j] += h;
            let mut minus = x.clone();
            minus[j] -= h;
            let lp = teacher
                .logdensity(&Tensor::new(vec![1, 2], plus).unwrap(), Some(t), &sched)
                .unwrap()[0];
            let lm = teacher
                .logdensity(&Tensor::new(vec![1, 2], minus).unwrap(), Some(t), &sched)
                .unwrap()[0];
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(fd, score.data()[j]));
        }
    }

    let unit = GmmTeacher::unit_gaussian(2);
    let grid = RunConfig::default().build_grid().unwrap();
    let mut worst_unit: f64 = 0.0;
    for &t in grid.taus() {
        for _ in 0..25 {
            let x = rng.standard_normal(&[1, 2]);
            let s = unit.score(&x, Some(t), &sched).unwrap();
            for j in 0..2 {
                worst_unit = worst_unit.max((s.data()[j] + x.data()[j]).abs());
            }
        }
    }
    verdict(
        "02 oracle-scores",
        worst < 1e-6 && worst_unit < 1e-10,
        &format!("mixture FD rel err {worst:.2e}; isotropic |score + x| {worst_unit:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 3. score-loss fixed point at the exact estimator
// ---------------------------------------------------------------------------

#[test]
fn c03_score_loss_vanishes_at_exact_estimator() {
    let cfg = RunConfig::default();
    let sched = cfg.build_schedule().unwrap();
    let grid = cfg.build_grid().unwrap();
    let spec = cfg.dmd_spec().unwrap();
    let teacher = GmmTeacher::unit_gaussian(2);
    let mut rng = Rng::new(3, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = rng.standard_normal(&[64, 2]);
        let t_j = spec.sample_t(&mut rng);
        let mut tape = Tape::new();
        let leaf = tape.leaf(&x);
        let loss = dmd_surrogate_loss(
            &mut tape,
            &leaf,
            &teacher,
            &GaussOptX0(&sched),
            t_j,
            &grid,
            &sched,
            &mut rng,
            &spec,
        )
        .unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&leaf);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(norm);
    }
    verdict(
        "03 fixed-point-gradient",
        worst < 1e-8,
        &format!("max gradient norm {worst:.2e} over 20 batches"),
    );
}

// ---------------------------------------------------------------------------
// 4. distillation quality at the default budget
// ---------------------------------------------------------------------------

/// Frozen quality thresholds for the default 2000-iteration budget, derived
/// from the brute-force baseline sweep recorded in docs/distill-baseline.md:
/// at least 7 of 8 modes represented and KL to the teacher under 40 nats.
const DISTILL_COVERAGE_FLOOR: f64 = 0.875;
const DISTILL_KL_CEILING: f64 = 40.0;

#[test]
fn c04_distillation_quality() {
    let runs = phase1_runs();
    let good = runs
        .iter()
        .filter(|r| {
            r.last.mode_coverage >= DISTILL_COVERAGE_FLOOR
                && r.last.kl_gen_to_teacher < DISTILL_KL_CEILING
        })
        .count();
    let slowest = runs.iter().map(|r| r.wall_secs).fold(0.0, f64::max);
    let detail: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| {
            format!(
                "seed {s}: kl {:.3} cov {:.3} ({:.0}s)",
                r.last.kl_gen_to_teacher, r.last.mode_coverage, r.wall_secs
            )
        })
        .collect();
    verdict(
        "04 distillation-quality",
        good >= 4 && slowest < 600.0,
        &format!(
            "{good}/5 seeds at coverage >= {DISTILL_COVERAGE_FLOOR} & kl < {DISTILL_KL_CEILING}; {}",
            detail.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. score-only training is mode-seeking
// ---------------------------------------------------------------------------

#[test]
fn c05_mode_seeking_without_adversarial() {
    let joint = phase1_runs();
    let dm = dm_only_runs();
    let mut le = 0;
    let mut strict = 0;
    let mut detail = Vec::new();
    for ((a, b), s) in dm.iter().zip(joint.iter()).zip(SEEDS) {
        let (ca, cb) = (a.last.mode_coverage, b.last.mode_coverage);
        if ca <= cb {
            le += 1;
        }
        if ca < cb {
            strict += 1;
        }
        detail.push(format!("seed {s}: {ca:.3} vs {cb:.3}"));
    }
    verdict(
        "05 mode-seeking",
        le == 5 && strict >= 3,
        &format!(
            "coverage score-only <= joint on {le}/5 seeds, strict on {strict}; {}",
            detail.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. update-frequency accounting and estimator tracking
// ---------------------------------------------------------------------------

#[test]
fn c06_update_accounting_and_tracking() {
    let mut counts_ok = true;
    let mut detail = String::new();
    for ttur in [1u64, 2, 5] {
        let mut cfg = RunConfig::default();
        cfg.max_iters = 30;
        cfg.train.batch_size = 8;
        cfg.train.ttur = ttur;
        cfg.eval_interval = u64::MAX;
        cfg.checkpoint_interval = u64::MAX;
        let mut t = Trainer::new(cfg).unwrap();
        t.run_collect().unwrap();
        let expect_gen = 30u64.div_ceil(ttur);
        let c = t.state.counts;
        let ok = c.gen == expect_gen && c.psi == 30 && c.disc == 30;
        counts_ok &= ok;
        detail.push_str(&format!("ttur {ttur}: gen {}/{} psi {} disc {}; ", c.gen, expect_gen, c.psi, c.disc));
    }

    // tracking floor: freeze the trained generator and let the estimator
    // converge on it, then compare the live run's error against that floor
    let run0 = &phase1_runs()[0];
    let session = &run0.trainer.session;
    let probe = {
        let mut rng = Rng::new(424_242, 0);
        let z = rng.standard_normal(&[1000, 2]);
        back_simulate(
            &run0.trainer.state.gen,
            &z,
            999,
            0,
            &session.grid,
            &session.sched,
            &SamplingContext { condition: None },
        )
        .unwrap()
    };
    let tracking_of = |psi: &DenoiserNet| -> f64 {
        let mut rng = Rng::new(424_243, 0);
        dmdflash::eval::psi_tracking_error(
            &NetX0 { net: psi, condition: None },
            &probe,
            &session.sched,
            &mut rng,
            8,
        )
        .unwrap()
    };
    let live = tracking_of(&run0.trainer.state.psi);
    let mut frozen_cfg = session.config.clone();
    frozen_cfg.train.lr_gen = 1e-300; // generator effectively frozen
    frozen_cfg.train.lambda_ema = 1.0;
    let frozen_session = Session::new(frozen_cfg).unwrap();
    let mut floor_state = TrainState {
        iteration: run0.trainer.state.iteration,
        rl_step: 0,
        phase: dmdflash::eval::Phase::Distill,
        gen: run0.trainer.state.gen.clone(),
        psi: run0.trainer.state.psi.clone(),
        disc: run0.trainer.state.disc.clone(),
        p_ref: None,
        opt_gen: run0.trainer.state.opt_gen.clone(),
        opt_psi: run0.trainer.state.opt_psi.clone(),
        opt_disc: run0.trainer.state.opt_disc.clone(),
        rng: Rng::new(999, 1),
        counts: run0.trainer.state.counts,
    };
    for _ in 0..1500 {
        phase1_iteration(&mut floor_state, &frozen_session, 0.0, false).unwrap();
    }
    let floor = tracking_of(&floor_state.psi);
    let tracking_ok = live <= 2.0 * floor;
    verdict(
        "06 ttur-accounting-and-tracking",
        counts_ok && tracking_ok,
        &format!("{detail}tracking live {live:.4} vs converged floor {floor:.4}"),
    );
}

// ---------------------------------------------------------------------------
// 7. estimator EMA injection helps tracking
// ---------------------------------------------------------------------------

#[test]
fn c07_ema_injection_tracking() {
    let on = median(
        phase1_runs()
            .iter()
            .map(|r| r.last.psi_tracking_error)
            .collect(),
    );
    let off = median(
        ema_off_runs()
            .iter()
            .map(|r| r.last.psi_tracking_error)
            .collect(),
    );
    verdict(
        "07 ema-tracking",
        on <= off,
        &format!("median tracking error with injection {on:.4} vs without {off:.4} (effect {:+.4})", off - on),
    );
}

// ---------------------------------------------------------------------------
// 8. preference-loss identities
// ---------------------------------------------------------------------------

#[test]
fn c08_preference_identities() {
    let cfg = RunConfig::default();
    let sched = cfg.build_schedule().unwrap();
    let grid = cfg.build_grid().unwrap();
    let mut rng = Rng::new(88, 0);
    let gen = DenoiserNet::init(cfg.net_arch(), &mut rng).unwrap();
    let reference = gen.clone();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let t_from = if i % 2 == 0 { 999 } else { 749 };
        let t_to = grid.next_below(t_from).unwrap();
        let z_t = rng.standard_normal(&[1, 2]);
        let z_a = rng.standard_normal(&[1, 2]);
        let z_b = rng.standard_normal(&[1, 2]);
        let scores = vec![rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()];
        let sel = select_preference_pair(&scores).unwrap();
        if sel.degenerate {
            continue;
        }
        let pair = PreferencePair::new(
            z_t, z_a, z_b, t_from, t_to, None, scores, &sel, &grid,
        )
        .unwrap();
        let mut tape = Tape::new();
        let theta = gen.bind(&mut tape);
        let loss = preference_loss(&mut tape, &gen, &theta, &reference, &pair, 0.1, &sched).unwrap();
        worst = worst.max((loss.value() - std::f64::consts::LN_2).abs());
    }

    let mut affine_ok = true;
    for _ in 0..1000 {
        let k = 2 + rng.below(7);
        let scores: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let a = 0.01 + 5.0 * rng.uniform();
        let b = 10.0 * (rng.uniform() - 0.5);
        let mapped: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let s1 = select_preference_pair(&scores).unwrap();
        let s2 = select_preference_pair(&mapped).unwrap();
        affine_ok &= s1.win_idx == s2.win_idx
            && s1.lose_idx == s2.lose_idx
            && s1.degenerate == s2.degenerate;
    }
    verdict(
        "08 preference-identities",
        worst < 1e-12 && affine_ok,
        &format!("|loss - ln 2| max {worst:.2e} at policy == reference; affine invariance {affine_ok}"),
    );
}

// ---------------------------------------------------------------------------
// 9. joint preference + distillation resists reward hacking
// ---------------------------------------------------------------------------

fn hacking_cfg(rl_only: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.eval_interval = cfg.max_iters; // rows at the phase switch and the end
    cfg.rl.updates = 2000;
    cfg.rl.rl_ratio = [5, 1];
    cfg.rl.reward = dmdflash::reward::RewardKind::NormBiased;
    cfg.rl.bias_strength = 4.0; // well above the density/norm crossover
    cfg.rl.rl_only = rl_only;
    // keep the adversarial anchor alive during the joint run's interleaved
    // distillation updates; without it those updates are purely mode-seeking
    // and degrade the match instead of holding it
    cfg.rl.pixelgan_on = true;
    cfg
}

#[test]
fn c09_reward_hacking_mitigation() {
    let mut per_seed_ok = 0;
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let mut cfg = hacking_cfg(false);
        cfg.seed = seed;
        cfg.checkpoint_interval = u64::MAX;
        let mut joint = Trainer::new(cfg).unwrap();
        let rows = joint.run_collect().unwrap();
        let (start, end) = (&rows[0], rows.last().unwrap());
        let mut cfg = hacking_cfg(true);
        cfg.seed = seed;
        cfg.checkpoint_interval = u64::MAX;
        let mut rl_only = Trainer::new(cfg).unwrap();
        let rl_rows = rl_only.run_collect().unwrap();
        let rl_end = rl_rows.last().unwrap();

        let improved = end.mean_reward - start.mean_reward >= 0.10 * start.mean_reward.abs();
        let bounded = end.kl_gen_to_teacher <= 1.5 * start.kl_gen_to_teacher;
        let hacked = rl_end.kl_gen_to_teacher >= 2.0 * end.kl_gen_to_teacher;
        if improved && bounded && hacked {
            per_seed_ok += 1;
        }
        detail.push(format!(
            "seed {seed}: reward {:.2}->{:.2}, kl {:.3}->{:.3}, unconstrained kl {:.3} [{}{}{}]",
            start.mean_reward,
            end.mean_reward,
            start.kl_gen_to_teacher,
            end.kl_gen_to_teacher,
            rl_end.kl_gen_to_teacher,
            if improved { "R" } else { "-" },
            if bounded { "K" } else { "-" },
            if hacked { "H" } else { "-" },
        ));
    }
    verdict(
        "09 reward-hacking-mitigation",
        per_seed_ok >= 4,
        &format!("{per_seed_ok}/5 seeds; {}", detail.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 10. update-ratio ablation table
// ---------------------------------------------------------------------------

#[test]
fn c10_ratio_ablation_shape() {
    let runs = dmdflash::suites::run_suite("rl_ratio", &SEEDS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    dmdflash::suites::write_runs_csv(&dir.path().join("runs.csv"), &runs).unwrap();
    dmdflash::suites::write_summary_csv(&dir.path().join("summary.csv"), &runs).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let table_ok = summary.lines().count() == 5 && runs.len() == 20;

    let med = |variant: &str| -> f64 {
        median(
            runs.iter()
                .filter(|r| r.variant == variant)
                .map(|r| r.metrics.mean_reward)
                .collect(),
        )
    };
    let (m11, m21, m51, m101) = (med("rl1to1"), med("rl2to1"), med("rl5to1"), med("rl10to1"));
    // the reward ordering across ratios is an empirical finding: it is
    // reported here but only the table's completeness is gated
    let ordered = m11 <= m21 && m21 <= m51;
    verdict(
        "10 ratio-ablation",
        table_ok,
        &format!(
            "20 runs, 4 summary rows; median reward 1:1 {m11:.3}, 2:1 {m21:.3}, 5:1 {m51:.3}, 10:1 {m101:.3}; non-decreasing through 5:1 = {ordered} (reported, not gated)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. sampling variance decays along the step grid
// ---------------------------------------------------------------------------

#[test]
fn c11_sampling_variance_profile() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (run, seed) in phase1_runs().iter().zip(SEEDS) {
        let session = &run.trainer.session;
        let mut rng = Rng::new(seed, 1 << 20);
        let ctx = SamplingContext { condition: None };
        let mut top = 0.0;
        let mut bottom = 0.0;
        for _ in 0..10 {
            top += sampling_variance_probe(
                &run.trainer.state.gen,
                &session.grid,
                &session.sched,
                999,
                8,
                &ctx,
                &mut rng,
            )
            .unwrap();
            bottom += sampling_variance_probe(
                &run.trainer.state.gen,
                &session.grid,
                &session.sched,
                249,
                8,
                &ctx,
                &mut rng,
            )
            .unwrap();
        }
        ok &= top > bottom;
        detail.push(format!("seed {seed}: {:.3} vs {:.3}", top / 10.0, bottom / 10.0));
    }
    verdict(
        "11 sampling-variance",
        ok,
        &format!("dispersion top vs bottom step: {}", detail.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 12. bit-exact reproducibility and resume
// ---------------------------------------------------------------------------

#[test]
fn c12_reproducibility() {
    let mut cfg = RunConfig::default();
    cfg.seed = 13;
    cfg.max_iters = 60;
    cfg.rl.updates = 30;
    cfg.rl.groups_per_update = 4;
    cfg.train.batch_size = 32;
    cfg.eval_interval = 30;
    cfg.checkpoint_interval = u64::MAX;

    let run = |cfg: &RunConfig| {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let rows = t.run_collect().unwrap();
        let jsonl: String = rows
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let bytes = checkpoint::encode(&t.session.config, &t.state).unwrap();
        (jsonl, bytes)
    };
    let (m1, c1) = run(&cfg);
    let (m2, c2) = run(&cfg);
    let double_ok = m1 == m2 && c1 == c2;

    // resume mid-run: 45 straight steps vs 45 through a checkpoint round-trip
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..90 {
        straight.step().unwrap();
    }
    let straight_bytes = checkpoint::encode(&straight.session.config, &straight.state).unwrap();
    let mut first = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..45 {
        first.step().unwrap();
    }
    let mid = checkpoint::encode(&first.session.config, &first.state).unwrap();
    let (session, state) = checkpoint::decode(&mid).unwrap();
    let mut resumed = Trainer::from_parts(session, state);
    for _ in 0..45 {
        resumed.step().unwrap();
    }
    let resumed_bytes = checkpoint::encode(&resumed.session.config, &resumed.state).unwrap();
    let resume_ok = straight_bytes == resumed_bytes;
    verdict(
        "12 reproducibility",
        double_ok && resume_ok,
        &format!("double run identical: {double_ok}; resume identical: {resume_ok}"),
    );
}
