//! Quantitative metrics: KL divergence to the analytic target, Gaussian
//! closed-form 2-Wasserstein, mode coverage, score-tracking error, and the
//! per-evaluation metrics record.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::X0Predictor;
use crate::models::DiscriminatorNet;
use crate::numerics::{Rng, Tensor};
use crate::teacher::GmmTeacher;

/// Training phase a metrics row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Distill,
    Preference,
}

/// One evaluation row. `wall_time` is kept for logging but excluded from
/// serialization so stored metrics are bit-identical across replays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub kl_gen_to_teacher: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w2: Option<f64>,
    pub mode_coverage: f64,
    pub mean_reward: f64,
    pub psi_tracking_error: f64,
    pub disc_real_fake_gap: f64,
    pub disc_head_losses: Vec<f64>,
    #[serde(skip, default)]
    pub wall_time: f64,
}

impl MetricsRecord {
    /// Soft-invariant violations worth surfacing, not hard errors.
    pub fn flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        if !(0.0..=1.0).contains(&self.mode_coverage) {
            flags.push(format!("mode_coverage {} outside [0, 1]", self.mode_coverage));
        }
        if self.kl_gen_to_teacher < -0.05 {
            flags.push(format!(
                "kl estimate {} below Monte-Carlo tolerance",
                self.kl_gen_to_teacher
            ));
        }
        flags
    }
}

/// KL(samples ‖ teacher) with a k-nearest-neighbor density estimate on the
/// sample side and the exact analytic density on the teacher side.
pub fn kl_estimate(
    samples: &Tensor,
    teacher: &GmmTeacher,
    sched: &NoiseSchedule,
    k: usize,
) -> Result<f64> {
    let shape = samples.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("kl_estimate: expected [n, d], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 1000 {
        return Err(Error::InvalidArgument(format!(
            "kl_estimate needs at least 1000 samples, got {n}"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("kl_estimate: bad k {k}")));
    }
    let data = samples.data();
    // log volume of the unit d-ball
    let log_vd = (d as f64 / 2.0) * std::f64::consts::PI.ln()
        - statrs::function::gamma::ln_gamma(d as f64 / 2.0 + 1.0);
    let log_q = teacher.logdensity(samples, None, sched)?;
    let mut total = 0.0;
    let mut dists = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            let mut sq = 0.0;
            for c in 0..d {
                let diff = data[i * d + c] - data[j * d + c];
                sq += diff * diff;
            }
            dists[j] = sq;
        }
        dists[i] = f64::INFINITY; // exclude self
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let r = kth.sqrt().max(1e-12);
        let log_p = digamma(k as f64) - digamma(n as f64) - log_vd - d as f64 * r.ln();
        total += log_p - log_q[i];
    }
    Ok(total / n as f64)
}

/// Fraction of teacher modes with at least `coverage_min` samples inside the
/// closed ball of `radius` around the mode mean; `coverage_min = max(1, n/10^4)`.
pub fn mode_coverage(samples: &Tensor, teacher: &GmmTeacher, radius: f64) -> Result<f64> {
    if radius <= 0.0 {
        return Err(Error::InvalidArgument("mode_coverage: radius > 0".into()));
    }
    let shape = samples.shape();
    let d = teacher.dim();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Shape(format!(
            "mode_coverage: expected [n, {d}], got {shape:?}"
        )));
    }
    let n = shape[0];
    let coverage_min = std::cmp::max(1, n / 10_000);
    let r_sq = radius * radius;
    let mut hit = 0usize;
    for mean in teacher.means() {
        let mut count = 0usize;
        for i in 0..n {
            let sq: f64 = samples
                .row(i)
                .iter()
                .zip(mean)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if sq <= r_sq {
                count += 1;
                if count >= coverage_min {
                    break;
                }
            }
        }
        if count >= coverage_min {
            hit += 1;
        }
    }
    Ok(hit as f64 / teacher.num_components() as f64)
}

/// Default coverage radius: three component standard deviations.
pub fn default_coverage_radius(teacher: &GmmTeacher) -> f64 {
    let max_var = teacher
        .vars()
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max);
    3.0 * max_var.sqrt()
}

/// Mean clean-sample regression error of a score-estimator predictor over a
/// stratified sweep of timesteps — the staleness proxy for how well the
/// estimator tracks the generator's current distribution.
pub fn psi_tracking_error(
    predictor: &dyn X0Predictor,
    x_gen: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    strata: usize,
) -> Result<f64> {
    let shape = x_gen.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "psi_tracking_error: expected non-empty [n, d], got {shape:?}"
        )));
    }
    if strata == 0 {
        return Err(Error::InvalidArgument("psi_tracking_error: strata >= 1".into()));
    }
    let span = sched.t_max - 1;
    let mut total = 0.0;
    for s in 0..strata {
        // stratum midpoints over {1, ..., T-1}
        let t = 1 + ((s as f64 + 0.5) / strata as f64 * (span - 1) as f64).round() as usize;
        let eps = rng.standard_normal(shape);
        let x_t = forward_diffuse(x_gen, t, &eps, sched)?;
        let pred = predictor.predict_x0(&x_t, t)?;
        let mse: f64 = pred
            .data()
            .iter()
            .zip(x_gen.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / x_gen.numel() as f64;
        total += mse;
    }
    Ok(total / strata as f64)
}

/// Empirical mean and covariance of a sample cloud.
pub fn sample_moments(samples: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let shape = samples.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Shape(format!(
            "sample_moments: expected [n >= 2, d], got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        let row = samples.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Closed-form 2-Wasserstein distance between Gaussians fitted to the two
/// moment pairs.
pub fn w2_gaussian(
    mean_a: &[f64],
    cov_a: &[Vec<f64>],
    mean_b: &[f64],
    cov_b: &[Vec<f64>],
) -> Result<f64> {
    let d = mean_a.len();
    if mean_b.len() != d
        || cov_a.len() != d
        || cov_b.len() != d
        || cov_a.iter().any(|r| r.len() != d)
        || cov_b.iter().any(|r| r.len() != d)
    {
        return Err(Error::Shape("w2_gaussian: dimension mismatch".into()));
    }
    let ca = DMatrix::from_fn(d, d, |i, j| cov_a[i][j]);
    let cb = DMatrix::from_fn(d, d, |i, j| cov_b[i][j]);
    let sqrt_cb = sym_sqrt(&cb);
    let inner = sym_sqrt(&(&sqrt_cb * &ca * &sqrt_cb));
    let mean_sq: f64 = mean_a
        .iter()
        .zip(mean_b)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let trace = ca.trace() + cb.trace() - 2.0 * inner.trace();
    Ok((mean_sq + trace.max(0.0)).sqrt())
}

/// Mean real-logit minus mean fake-logit, averaged over heads. Positive once
/// the discriminator separates the batches.
pub fn disc_real_fake_gap(
    disc: &DiscriminatorNet,
    x_real: &Tensor,
    x_fake: &Tensor,
) -> Result<f64> {
    let real = disc.logits_matrix(x_real)?;
    let fake = disc.logits_matrix(x_fake)?;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
    Ok(mean(&real) - mean(&fake))
}
