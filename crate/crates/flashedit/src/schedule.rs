//! Variance-preserving cosine noise schedule.

use crate::error::{Error, Result};

/// Cosine schedule over `t in 0..=t_max`: alpha = cos(pi/2 * t/T),
/// sigma = sin(pi/2 * t/T), unit loss weight. alpha^2 + sigma^2 = 1 holds for
/// every step.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
}

impl NoiseSchedule {
    pub fn cosine(t_max: usize) -> Self {
        assert!(t_max >= 1);
        NoiseSchedule { t_max }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// (alpha, sigma, w) at step t.
    pub fn at(&self, t: usize) -> Result<(f64, f64, f64)> {
        if t > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range 0..={}",
                self.t_max
            )));
        }
        let u = std::f64::consts::FRAC_PI_2 * t as f64 / self.t_max as f64;
        Ok((u.cos(), u.sin(), 1.0))
    }
}
