//! Canned ablation suites: each suite is a named set of config variants run
//! over a shared seed set, emitting a per-run CSV and a per-variant summary.

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::MetricsRecord;
use crate::trainer::Trainer;

pub const SUITE_NAMES: &[&str] = &[
    "ttur",
    "ema",
    "rl_ratio",
    "noise_range",
    "pixelgan",
    "dm_only",
];

pub const DEFAULT_SEEDS: &[u64] = &[0, 1, 2, 3, 4];

/// Base config shared by the distillation-phase suites.
fn distill_base() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.max_iters = 2000;
    cfg.eval_interval = u64::MAX;
    cfg.checkpoint_interval = u64::MAX;
    cfg
}

/// Base config for suites exercising the preference phase.
fn preference_base() -> RunConfig {
    let mut cfg = distill_base();
    cfg.max_iters = 1000;
    cfg.rl.updates = 1000;
    cfg.rl.rl_ratio = [5, 1];
    cfg
}

/// The config variants of a named suite.
pub fn suite_configs(name: &str) -> Result<Vec<(String, RunConfig)>> {
    let variants = match name {
        "ttur" => [1u64, 2, 5]
            .iter()
            .map(|t| {
                let mut cfg = distill_base();
                cfg.train.ttur = *t;
                (format!("ttur{t}"), cfg)
            })
            .collect(),
        "ema" => {
            let mut on = distill_base();
            on.train.lambda_ema = 0.99;
            let mut off = distill_base();
            // lambda 1 keeps the estimator on its own trajectory: no injection
            off.train.lambda_ema = 1.0;
            vec![("ema_on".to_string(), on), ("ema_off".to_string(), off)]
        }
        "rl_ratio" => [[1u64, 1], [2, 1], [5, 1], [10, 1]]
            .iter()
            .map(|ratio| {
                let mut cfg = preference_base();
                cfg.rl.rl_ratio = *ratio;
                (format!("rl{}to{}", ratio[0], ratio[1]), cfg)
            })
            .collect(),
        "noise_range" => {
            let high = distill_base();
            let mut all = distill_base();
            // distillation over every timestep; no step left for the
            // adversarial branch
            all.grid.low_noise = Vec::new();
            all.train.lambda_adv = 0.0;
            vec![
                ("high_noise".to_string(), high),
                ("all_noise".to_string(), all),
            ]
        }
        "pixelgan" => {
            let mut on = preference_base();
            on.rl.pixelgan_on = true;
            let off = preference_base();
            vec![
                ("pixelgan_on".to_string(), on),
                ("pixelgan_off".to_string(), off),
            ]
        }
        "dm_only" => {
            let mut dm = distill_base();
            dm.train.lambda_adv = 0.0;
            let joint = distill_base();
            vec![
                ("dm_only".to_string(), dm),
                ("dm_gan".to_string(), joint),
            ]
        }
        other => {
            return Err(Error::InvalidArgument(format!("unknown suite `{other}`")));
        }
    };
    Ok(variants)
}

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricsRecord,
}

/// Execute every (variant, seed) combination sequentially.
pub fn run_suite(name: &str, seeds: &[u64]) -> Result<Vec<SuiteRun>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("suite needs at least one seed".into()));
    }
    let variants = suite_configs(name)?;
    let mut runs = Vec::new();
    for (variant, base) in &variants {
        for seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = *seed;
            let mut trainer = Trainer::new(cfg)?;
            let metrics = trainer.run_collect()?;
            let last = metrics
                .last()
                .ok_or_else(|| Error::InvalidArgument("suite run emitted no metrics".into()))?
                .clone();
            runs.push(SuiteRun {
                variant: variant.clone(),
                seed: *seed,
                metrics: last,
            });
        }
    }
    Ok(runs)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn write_runs_csv(path: &Path, runs: &[SuiteRun]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "variant,seed,kl,mode_coverage,mean_reward,w2,psi_tracking_error"
    )?;
    for run in runs {
        let m = &run.metrics;
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            run.variant,
            run.seed,
            m.kl_gen_to_teacher,
            m.mode_coverage,
            m.mean_reward,
            m.w2.unwrap_or(f64::NAN),
            m.psi_tracking_error
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(path: &Path, runs: &[SuiteRun]) -> Result<()> {
    let mut variants: Vec<String> = Vec::new();
    for run in runs {
        if !variants.contains(&run.variant) {
            variants.push(run.variant.clone());
        }
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "variant,seeds,median_kl,median_coverage,median_reward,median_w2,median_tracking"
    )?;
    for variant in &variants {
        let rows: Vec<&SuiteRun> = runs.iter().filter(|r| &r.variant == variant).collect();
        let col = |f: &dyn Fn(&MetricsRecord) -> f64| -> f64 {
            median(rows.iter().map(|r| f(&r.metrics)).collect())
        };
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            variant,
            rows.len(),
            col(&|m| m.kl_gen_to_teacher),
            col(&|m| m.mode_coverage),
            col(&|m| m.mean_reward),
            col(&|m| m.w2.unwrap_or(f64::NAN)),
            col(&|m| m.psi_tracking_error)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_suite_expands() {
        for name in SUITE_NAMES {
            let variants = suite_configs(name).unwrap();
            assert!(variants.len() >= 2 || *name == "ttur");
            for (variant, cfg) in &variants {
                cfg.validate().unwrap_or_else(|e| panic!("{name}/{variant}: {e}"));
            }
        }
        assert_eq!(suite_configs("ttur").unwrap().len(), 3);
        assert_eq!(suite_configs("rl_ratio").unwrap().len(), 4);
        assert!(suite_configs("bogus").is_err());
    }

    #[test]
    fn median_of_even_and_odd_sets() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn tiny_suite_run_emits_expected_grid() {
        // shrink the ttur suite drastically; accounting only
        let variants = suite_configs("ttur").unwrap();
        let mut runs = Vec::new();
        for (variant, base) in &variants {
            for seed in [0u64, 1] {
                let mut cfg = base.clone();
                cfg.max_iters = 4;
                cfg.train.batch_size = 8;
                cfg.seed = seed;
                let mut trainer = Trainer::new(cfg).unwrap();
                let metrics = trainer.run_collect().unwrap();
                runs.push(SuiteRun {
                    variant: variant.clone(),
                    seed,
                    metrics: metrics.last().unwrap().clone(),
                });
            }
        }
        assert_eq!(runs.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        write_runs_csv(&dir.path().join("runs.csv"), &runs).unwrap();
        write_summary_csv(&dir.path().join("summary.csv"), &runs).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 4); // header + 3 variants
        assert!(summary.contains("ttur1,2,"));
        let runs_text = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs_text.lines().count(), 7);
    }
}
