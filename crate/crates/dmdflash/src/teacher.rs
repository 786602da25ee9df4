//! Analytic Gaussian-mixture target distribution: exact sampler, exact
//! diffused score, exact log-density. Serves as the ground-truth oracle that
//! a pretrained multi-step model would otherwise play.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Weighted Gaussian mixture with diagonal covariances and optional
/// component-to-class grouping for conditional sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmTeacher {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Per-component diagonal variances.
    vars: Vec<Vec<f64>>,
    mode_groups: Option<Vec<usize>>,
}

impl GmmTeacher {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
        mode_groups: Option<Vec<usize>>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
            return Err(Error::config("teacher", "weights/means/vars length mismatch"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "teacher.weights",
                "must be non-negative and sum to 1 within 1e-12",
            ));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) || vars.iter().any(|v| v.len() != d) {
            return Err(Error::config("teacher.means", "inconsistent dimensions"));
        }
        if vars.iter().flatten().any(|v| *v <= 0.0) {
            return Err(Error::config("teacher.covs", "variances must be positive"));
        }
        if let Some(groups) = &mode_groups {
            if groups.len() != weights.len() {
                return Err(Error::config("teacher.mode_groups", "length mismatch"));
            }
        }
        Ok(GmmTeacher {
            weights,
            means,
            vars,
            mode_groups,
        })
    }

    /// `n` equally weighted isotropic components on a circle, optionally
    /// split into `groups` contiguous condition groups.
    pub fn circle(n: usize, radius: f64, sigma: f64, groups: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("teacher.modes", "need at least one mode"));
        }
        let mut weights = vec![1.0 / n as f64; n];
        // exact unit sum despite rounding
        let partial: f64 = weights.iter().take(n - 1).sum();
        weights[n - 1] = 1.0 - partial;
        let means: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        let vars = vec![vec![sigma * sigma; 2]; n];
        let mode_groups = if groups > 0 {
            Some((0..n).map(|i| i * groups / n).collect())
        } else {
            None
        };
        GmmTeacher::new(weights, means, vars, mode_groups)
    }

    /// Single standard normal in `d` dimensions.
    pub fn unit_gaussian(d: usize) -> Self {
        GmmTeacher::new(vec![1.0], vec![vec![0.0; d]], vec![vec![1.0; d]], None)
            .expect("unit gaussian")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn num_groups(&self) -> usize {
        self.mode_groups
            .as_ref()
            .map(|g| g.iter().max().map(|m| m + 1).unwrap_or(0))
            .unwrap_or(0)
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode_groups(&self) -> Option<&[usize]> {
        self.mode_groups.as_deref()
    }

    fn component_weights(&self, condition: Option<usize>) -> Result<Vec<f64>> {
        match condition {
            None => Ok(self.weights.clone()),
            Some(c) => {
                let groups = self
                    .mode_groups
                    .as_ref()
                    .ok_or(Error::UnknownCondition(c))?;
                if c >= self.num_groups() {
                    return Err(Error::UnknownCondition(c));
                }
                let mut w: Vec<f64> = self
                    .weights
                    .iter()
                    .zip(groups)
                    .map(|(w, g)| if *g == c { *w } else { 0.0 })
                    .collect();
                let total: f64 = w.iter().sum();
                for v in &mut w {
                    *v /= total;
                }
                Ok(w)
            }
        }
    }

    /// Exact ancestral sampling; `condition` restricts to its mode group.
    pub fn sample(&self, n: usize, rng: &mut Rng, condition: Option<usize>) -> Result<Tensor> {
        self.sample_with_components(n, rng, condition)
            .map(|(t, _)| t)
    }

    /// Sampling that also reports the chosen component per row.
    pub fn sample_with_components(
        &self,
        n: usize,
        rng: &mut Rng,
        condition: Option<usize>,
    ) -> Result<(Tensor, Vec<usize>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("teacher_sample: n >= 1".into()));
        }
        let weights = self.component_weights(condition)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut components = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.weighted(&weights);
            components.push(c);
            for j in 0..d {
                data.push(self.means[c][j] + self.vars[c][j].sqrt() * rng.normal());
            }
        }
        Ok((Tensor::new(vec![n, d], data)?, components))
    }

    /// Per-component diffused parameters at timestep `t`: mean scale
    /// `sqrt(abar_t)` and additive variance `sigma_t^2` on top of
    /// `abar_t * var`. `t = None` means the clean (undiffused) mixture.
    fn diffusion_factors(&self, t: Option<usize>, sched: &NoiseSchedule) -> Result<(f64, f64)> {
        match t {
            None => Ok((1.0, 0.0)),
            Some(t) => {
                sched.check_t(t)?;
                Ok((sched.alpha_bar[t], sched.sigma[t] * sched.sigma[t]))
            }
        }
    }

    /// Log-density of the diffused marginal per row of `x`, log-sum-exp
    /// stabilized (finite far into the tails).
    pub fn logdensity(&self, x: &Tensor, t: Option<usize>, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let (abar, add_var) = self.diffusion_factors(t, sched)?;
        let d = self.dim();
        if x.shape().len() != 2 || x.shape()[1] != d {
            return Err(Error::Shape(format!(
                "logdensity: expected [n, {d}], got {:?}",
                x.shape()
            )));
        }
        let scale = abar.sqrt();
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mut terms = Vec::with_capacity(self.weights.len());
            for (c, w) in self.weights.iter().enumerate() {
                if *w == 0.0 {
                    terms.push(f64::NEG_INFINITY);
                    continue;
                }
                let mut lp = w.ln();
                for j in 0..d {
                    let var = abar * self.vars[c][j] + add_var;
                    let diff = row[j] - scale * self.means[c][j];
                    lp += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                }
                terms.push(lp);
            }
            out.push(logsumexp(&terms));
        }
        Ok(out)
    }

    /// Exact score (gradient of [`Self::logdensity`] w.r.t. `x`), computed
    /// with stabilized responsibilities.
    pub fn score(&self, x: &Tensor, t: Option<usize>, sched: &NoiseSchedule) -> Result<Tensor> {
        let (abar, add_var) = self.diffusion_factors(t, sched)?;
        let d = self.dim();
        if x.shape().len() != 2 || x.shape()[1] != d {
            return Err(Error::Shape(format!(
                "score: expected [n, {d}], got {:?}",
                x.shape()
            )));
        }
        let scale = abar.sqrt();
        let n = x.shape()[0];
        let k = self.weights.len();
        let mut out = vec![0.0; n * d];
        let mut logterms = vec![0.0; k];
        for i in 0..n {
            let row = x.row(i);
            for (c, w) in self.weights.iter().enumerate() {
                logterms[c] = if *w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let mut lp = w.ln();
                    for j in 0..d {
                        let var = abar * self.vars[c][j] + add_var;
                        let diff = row[j] - scale * self.means[c][j];
                        lp += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                    }
                    lp
                };
            }
            let lse = logsumexp(&logterms);
            for c in 0..k {
                let resp = (logterms[c] - lse).exp();
                if resp == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let var = abar * self.vars[c][j] + add_var;
                    out[i * d + j] += resp * (-(row[j] - scale * self.means[c][j]) / var);
                }
            }
        }
        Tensor::new(vec![n, d], out)
    }

    /// The mixture restricted to one mode group, reweighted to sum to 1.
    /// Its score and log-density are the conditional targets for that class.
    pub fn conditional(&self, condition: usize) -> Result<GmmTeacher> {
        let weights = self.component_weights(Some(condition))?;
        GmmTeacher::new(
            weights,
            self.means.clone(),
            self.vars.clone(),
            self.mode_groups.clone(),
        )
    }

    /// Mean of the clean mixture.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut mu = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for j in 0..d {
                mu[j] += w * m[j];
            }
        }
        mu
    }

    /// Full covariance of the clean mixture.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mu = self.mean();
        let mut cov = vec![vec![0.0; d]; d];
        for (c, w) in self.weights.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    let mut v = (self.means[c][i] - mu[i]) * (self.means[c][j] - mu[j]);
                    if i == j {
                        v += self.vars[c][i];
                    }
                    cov[i][j] += w * v;
                }
            }
        }
        cov
    }
}

fn logsumexp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default_linear()
    }

    #[test]
    fn weight_normalization_enforced() {
        assert!(GmmTeacher::new(
            vec![0.6, 0.6],
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
            None
        )
        .is_err());
        assert!(GmmTeacher::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]], None).is_err());
    }

    #[test]
    fn unit_gaussian_sample_mean_near_zero() {
        let teacher = GmmTeacher::unit_gaussian(2);
        let mut rng = Rng::new(1, 0);
        let n = 10_000;
        let x = teacher.sample(n, &mut rng, None).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "coord {j} mean {mean}");
        }
    }

    #[test]
    fn degenerate_weights_pick_single_component() {
        let teacher = GmmTeacher::new(
            vec![1.0, 0.0],
            vec![vec![0.0, 0.0], vec![10.0, 10.0]],
            vec![vec![0.01, 0.01], vec![0.01, 0.01]],
            None,
        )
        .unwrap();
        let mut rng = Rng::new(2, 0);
        let (x, comps) = teacher.sample_with_components(500, &mut rng, None).unwrap();
        assert!(comps.iter().all(|c| *c == 0));
        assert!(x.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn conditional_sampling_stays_in_group() {
        let teacher = GmmTeacher::circle(8, 1.0, 0.05, 2).unwrap();
        let mut rng = Rng::new(3, 0);
        let (_, comps) = teacher.sample_with_components(200, &mut rng, Some(1)).unwrap();
        let groups = teacher.mode_groups().unwrap();
        assert!(comps.iter().all(|c| groups[*c] == 1));
        assert!(teacher.sample(10, &mut rng, Some(7)).is_err());
    }

    #[test]
    fn unit_gaussian_score_is_negated_input_at_every_t() {
        let teacher = GmmTeacher::unit_gaussian(2);
        let s = sched();
        for t in [None, Some(0), Some(499), Some(999)] {
            let x = Rng::new(4, 0).standard_normal(&[5, 2]);
            let score = teacher.score(&x, t, &s).unwrap();
            for (sc, v) in score.data().iter().zip(x.data()) {
                assert!((sc + v).abs() < 1e-12, "t {t:?}");
            }
        }
    }

    #[test]
    fn score_zero_at_diffused_mean_of_single_component() {
        let teacher = GmmTeacher::new(
            vec![1.0],
            vec![vec![0.7, -0.3]],
            vec![vec![0.02, 0.05]],
            None,
        )
        .unwrap();
        let s = sched();
        let t = 400;
        let x = Tensor::new(
            vec![1, 2],
            vec![s.sqrt_alpha_bar[t] * 0.7, s.sqrt_alpha_bar[t] * -0.3],
        )
        .unwrap();
        let score = teacher.score(&x, Some(t), &s).unwrap();
        assert!(score.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn logdensity_of_standard_normal_at_origin() {
        let teacher = GmmTeacher::unit_gaussian(2);
        let s = sched();
        let x = Tensor::zeros(vec![1, 2]);
        let lp = teacher.logdensity(&x, None, &s).unwrap()[0];
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn far_field_logdensity_is_finite() {
        let teacher = GmmTeacher::circle(8, 1.0, 0.05, 0).unwrap();
        let s = sched();
        let x = Tensor::new(vec![1, 2], vec![100.0, 0.0]).unwrap();
        for t in [None, Some(10), Some(999)] {
            let lp = teacher.logdensity(&x, t, &s).unwrap()[0];
            assert!(lp.is_finite());
            assert!(lp < -100.0);
        }
    }

    #[test]
    fn coincident_mixture_equals_single_component() {
        let single = GmmTeacher::new(vec![1.0], vec![vec![0.2, 0.4]], vec![vec![0.3, 0.3]], None)
            .unwrap();
        let mixed = GmmTeacher::new(
            vec![0.5, 0.5],
            vec![vec![0.2, 0.4], vec![0.2, 0.4]],
            vec![vec![0.3, 0.3], vec![0.3, 0.3]],
            None,
        )
        .unwrap();
        let s = sched();
        let x = Rng::new(5, 0).standard_normal(&[6, 2]);
        let a = single.logdensity(&x, Some(300), &s).unwrap();
        let b = mixed.logdensity(&x, Some(300), &s).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn score_matches_finite_differences_of_logdensity() {
        let teacher = GmmTeacher::circle(8, 1.0, 0.05, 0).unwrap();
        let s = sched();
        let mut rng = Rng::new(6, 0);
        let h = 1e-6;
        for trial in 0..100 {
            let t = if trial % 10 == 0 { 1 } else { rng.below(999) + 1 };
            let mut x = rng.standard_normal(&[1, 2]);
            // keep points in a region of non-negligible density
            for v in x.data_mut() {
                *v *= 1.5;
            }
            let score = teacher.score(&x, Some(t), &s).unwrap();
            for j in 0..2 {
                let mut xp = x.clone();
                xp.data_mut()[j] += h;
                let mut xm = x.clone();
                xm.data_mut()[j] -= h;
                let fd = (teacher.logdensity(&xp, Some(t), &s).unwrap()[0]
                    - teacher.logdensity(&xm, Some(t), &s).unwrap()[0])
                    / (2.0 * h);
                let denom = fd.abs().max(1e-3);
                assert!(
                    (score.data()[j] - fd).abs() / denom < 1e-6,
                    "t {t} coord {j}: {} vs {fd}",
                    score.data()[j]
                );
            }
        }
    }

    #[test]
    fn diffused_moments_match_forward_diffused_samples() {
        // forward-diffusing teacher samples reproduces the analytic diffused
        // mean within Monte-Carlo error
        use crate::diffusion::forward_diffuse;
        let teacher = GmmTeacher::circle(8, 1.0, 0.05, 0).unwrap();
        let s = sched();
        let t = 600;
        let n = 20_000;
        let mut rng = Rng::new(7, 0);
        let x0 = teacher.sample(n, &mut rng, None).unwrap();
        let eps = rng.standard_normal(&[n, 2]);
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        // analytic diffused mean is sqrt(abar) * mixture mean = 0 on the circle
        for j in 0..2 {
            let mean: f64 = (0..n).map(|i| xt.row(i)[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02);
        }
        // analytic diffused second moment: abar * E[x0^2] + sigma^2
        let exp_sq = s.alpha_bar[t] * (0.5 + 0.05f64.powi(2)) + s.sigma[t] * s.sigma[t];
        for j in 0..2 {
            let m2: f64 = (0..n).map(|i| xt.row(i)[j].powi(2)).sum::<f64>() / n as f64;
            assert!((m2 - exp_sq).abs() < 0.03, "coord {j}: {m2} vs {exp_sq}");
        }
    }

    #[test]
    fn clean_moments_of_circle_mixture() {
        let teacher = GmmTeacher::circle(8, 1.0, 0.05, 0).unwrap();
        let mu = teacher.mean();
        assert!(mu.iter().all(|v| v.abs() < 1e-12));
        let cov = teacher.covariance();
        // E[x^2] per coordinate = radius^2/2 + sigma^2
        let expect = 0.5 + 0.0025;
        assert!((cov[0][0] - expect).abs() < 1e-12);
        assert!((cov[1][1] - expect).abs() < 1e-12);
        assert!(cov[0][1].abs() < 1e-12);
    }
}
