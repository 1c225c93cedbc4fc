//! Noise schedules: beta/alpha sequences plus re-spaced sampling
//! subsequences whose cumulative products match the training schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Beta interpolated linearly between the two endpoints.
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Beta/alpha sequences over the usable steps, plus the mapping back to the
/// original training steps.
///
/// Indices `t` are 1-based throughout: `t in 1..=len()`. For a training
/// schedule the mapping is the identity; after [`NoiseSchedule::respace`]
/// `original_step(t)` returns the training step that position `t` stands for
/// (the timestep the denoiser is conditioned on).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_train: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sampling_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Number of diffusion steps of the original training schedule.
    pub fn t_train(&self) -> usize {
        self.t_train
    }

    /// Number of usable steps in this (possibly re-spaced) schedule.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar` of the previous step, with the t=1 convention of 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// Fixed reverse-transition variance: the forward-posterior variance
    /// `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Original training step this position maps to.
    pub fn original_step(&self, t: usize) -> usize {
        self.sampling_steps[t - 1]
    }

    pub fn sampling_steps(&self) -> &[usize] {
        &self.sampling_steps
    }

    pub fn check_range(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!(
                "timestep {t} out of range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        for (i, &b) in self.beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!(
                    "beta[{}] = {b} outside (0, 1)",
                    i + 1
                )));
            }
        }
        let mut running = 1.0;
        for (i, (&a, &ab)) in self.alpha.iter().zip(&self.alpha_bar).enumerate() {
            running *= a;
            if (running - ab).abs() > 1e-6 * ab.abs().max(1e-12) {
                return Err(Error::invalid(format!(
                    "alpha_bar[{}] inconsistent with running product",
                    i + 1
                )));
            }
            if i > 0 && ab >= self.alpha_bar[i - 1] {
                return Err(Error::invalid("alpha_bar must be strictly decreasing"));
            }
        }
        let steps = &self.sampling_steps;
        if steps.len() != self.beta.len()
            || steps.windows(2).any(|w| w[0] >= w[1])
            || *steps.last().unwrap() != self.t_train
        {
            return Err(Error::invalid("sampling steps must be strictly increasing and end at t_train"));
        }
        Ok(())
    }
}

/// Build a training schedule of `t_train` steps.
pub fn build_schedule(t_train: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_train < 2 {
        return Err(Error::invalid("t_train must be at least 2"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        } => (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64)
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_train);
    let mut running = 1.0;
    for &a in &alpha {
        running *= a;
        alpha_bar.push(running);
    }
    let schedule = NoiseSchedule {
        t_train,
        beta,
        alpha,
        alpha_bar,
        sampling_steps: (1..=t_train).collect(),
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Select `t_sample` steps out of a training schedule, recomputing beta so
/// the cumulative products match the kept `alpha_bar` values exactly.
pub fn respace(schedule: &NoiseSchedule, t_sample: usize) -> Result<NoiseSchedule> {
    let t_train = schedule.t_train;
    if t_sample == 0 || t_sample > t_train {
        return Err(Error::invalid(format!(
            "t_sample {t_sample} out of range 1..={t_train}"
        )));
    }
    if schedule.sampling_steps.len() != t_train {
        return Err(Error::invalid("respace expects a training schedule"));
    }
    if t_sample == t_train {
        return Ok(schedule.clone());
    }
    // Evenly spaced positions whose last element is exactly t_train.
    let steps: Vec<usize> = (1..=t_sample)
        .map(|i| ((i * t_train) as f64 / t_sample as f64).round() as usize)
        .map(|s| s.max(1))
        .collect();
    debug_assert!(steps.windows(2).all(|w| w[0] < w[1]));

    let mut beta = Vec::with_capacity(t_sample);
    let mut alpha_bar = Vec::with_capacity(t_sample);
    let mut prev_ab = 1.0;
    for &s in &steps {
        let ab = schedule.alpha_bar(s);
        beta.push(1.0 - ab / prev_ab);
        alpha_bar.push(ab);
        prev_ab = ab;
    }
    let alpha = beta.iter().map(|b| 1.0 - b).collect();
    let out = NoiseSchedule {
        t_train,
        beta,
        alpha,
        alpha_bar,
        sampling_steps: steps,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(t: usize) -> NoiseSchedule {
        build_schedule(t, ScheduleKind::default()).unwrap()
    }

    #[test]
    fn thousand_step_terminal_alpha_bar_is_tiny() {
        // Independent oracle: direct product of the linear betas.
        let s = linear(1000);
        let mut product = 1.0f64;
        for i in 0..1000 {
            product *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - product).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 0.001);
    }

    #[test]
    fn two_step_alpha_bar_is_two_term_product() {
        let s = linear(2);
        assert!((s.alpha_bar(2) - (1.0 - s.beta(1)) * (1.0 - s.beta(2))).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = linear(257);
        for t in 2..=s.len() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn rejects_degenerate_length() {
        assert!(build_schedule(1, ScheduleKind::default()).is_err());
        assert!(build_schedule(0, ScheduleKind::default()).is_err());
    }

    #[test]
    fn respace_identity() {
        let s = linear(64);
        let r = respace(&s, 64).unwrap();
        assert_eq!(s, r);
    }

    #[test]
    fn respace_1000_to_400_keeps_alpha_bar_subsequence() {
        let s = linear(1000);
        let r = respace(&s, 400).unwrap();
        assert_eq!(r.len(), 400);
        assert_eq!(r.original_step(400), 1000);
        // Oracle: recompute the running product of the re-spaced betas and
        // compare with the original alpha_bar at the selected steps.
        let mut running = 1.0;
        for t in 1..=400 {
            running *= 1.0 - r.beta(t);
            let original = s.alpha_bar(r.original_step(t));
            assert!(
                (running - original).abs() <= 1e-12 * original.max(1e-12),
                "t={t}"
            );
            assert_eq!(r.alpha_bar(t), original);
        }
    }

    #[test]
    fn respace_to_single_step() {
        let s = linear(100);
        let r = respace(&s, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.beta(1) - (1.0 - s.alpha_bar(100))).abs() < 1e-15);
        assert_eq!(r.original_step(1), 100);
    }

    #[test]
    fn respace_rejects_out_of_range() {
        let s = linear(100);
        assert!(respace(&s, 0).is_err());
        assert!(respace(&s, 101).is_err());
    }

    #[test]
    fn posterior_variance_zero_at_first_step() {
        let s = linear(50);
        assert_eq!(s.posterior_variance(1), 0.0);
        for t in 2..=50 {
            assert!(s.posterior_variance(t) > 0.0);
            assert!(s.posterior_variance(t) < s.beta(t));
        }
    }
}
