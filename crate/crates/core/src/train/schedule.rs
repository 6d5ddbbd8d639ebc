//! Learning-rate schedules.

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Trapezoid,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::Trapezoid => "trapezoid",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "trapezoid" => Ok(Schedule::Trapezoid),
            other => Err(Error::InvalidArgument(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Warmup fraction of the trapezoid (linear ramp to lr_max).
pub const TRAPEZOID_WARMUP: f64 = 0.05;
/// Decay fraction of the trapezoid (linear ramp to zero at the end).
pub const TRAPEZOID_DECAY: f64 = 0.20;

/// Learning rate at `step` of `total_steps`.
///
/// Cosine: lr_max * 0.5 * (1 + cos(pi * step / total)).
/// Trapezoid: ramp up over the first 5% of steps, hold lr_max, ramp down
/// linearly over the last 20%.
pub fn lr_at(schedule: Schedule, step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    Ok(match schedule {
        Schedule::Cosine => {
            lr_max * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
        }
        Schedule::Trapezoid => {
            let warmup = (total_steps as f64 * TRAPEZOID_WARMUP) as usize;
            let decay_start = (total_steps as f64 * (1.0 - TRAPEZOID_DECAY)) as usize;
            if step < warmup {
                lr_max * (step + 1) as f64 / warmup as f64
            } else if step <= decay_start {
                lr_max
            } else {
                lr_max * (total_steps - step) as f64 / (total_steps - decay_start) as f64
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(lr_at(Schedule::Cosine, 0, 100, 3e-4).unwrap(), 3e-4);
        assert!(lr_at(Schedule::Cosine, 100, 100, 3e-4).unwrap().abs() < 1e-19);
        assert!((lr_at(Schedule::Cosine, 50, 100, 3e-4).unwrap() - 1.5e-4).abs() < 1e-19);
    }

    #[test]
    fn trapezoid_plateau_spans_five_to_eighty_percent() {
        let total = 400;
        let lr = 5e-4;
        for step in 0..(total / 20) {
            assert!(lr_at(Schedule::Trapezoid, step, total, lr).unwrap() <= lr);
        }
        for step in (total / 20)..=(total * 4 / 5) {
            assert_eq!(lr_at(Schedule::Trapezoid, step, total, lr).unwrap(), lr, "step {step}");
        }
        assert!(lr_at(Schedule::Trapezoid, total, total, lr).unwrap().abs() < 1e-19);
        let late = lr_at(Schedule::Trapezoid, total * 9 / 10, total, lr).unwrap();
        assert!(late > 0.0 && late < lr);
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        assert!(lr_at(Schedule::Cosine, 101, 100, 1.0).is_err());
        assert!(lr_at(Schedule::Cosine, 0, 0, 1.0).is_err());
    }
}
