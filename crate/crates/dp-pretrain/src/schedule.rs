//! Batch-size and learning-rate schedules. Batch schedules are piecewise
//! constant and convert directly into accounting segments; the learning rate
//! warms up linearly and decays quadratically to zero.

use crate::accountant::ScheduleSegment;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Expected batch size as a function of the 1-based step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BatchSchedule {
    /// The same size at every step.
    Fixed { size: u64 },
    /// Piecewise-linear ramp: `stages` equal plateaus interpolate from
    /// `start` to `end` over the first `ramp_steps` steps, after which the
    /// size stays at `end`.
    Increasing { start: u64, end: u64, ramp_steps: u64, stages: u64 },
}

impl BatchSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BatchSchedule::Fixed { size } => {
                if size == 0 {
                    return Err(Error::parameter("batch size must be >= 1"));
                }
            }
            BatchSchedule::Increasing { start, end, ramp_steps, stages } => {
                if start == 0 {
                    return Err(Error::parameter("starting batch size must be >= 1"));
                }
                if end < start {
                    return Err(Error::parameter(format!(
                        "ending batch size {end} is below starting size {start}"
                    )));
                }
                if stages == 0 {
                    return Err(Error::parameter("ramp must have at least one stage"));
                }
                if ramp_steps < stages {
                    return Err(Error::parameter(format!(
                        "ramp of {ramp_steps} steps cannot hold {stages} stages"
                    )));
                }
                if (end - start) % stages != 0 {
                    return Err(Error::parameter(format!(
                        "stage count {stages} must divide the batch size span {}",
                        end - start
                    )));
                }
            }
        }
        Ok(())
    }

    /// Batch size at step `t` (1-based; t = 0 reads as step 1).
    pub fn batch_size(&self, t: u64) -> u64 {
        let t = t.max(1);
        match *self {
            BatchSchedule::Fixed { size } => size,
            BatchSchedule::Increasing { start, end, ramp_steps, stages } => {
                if t > ramp_steps {
                    end
                } else {
                    // stage index = ceil(t * stages / ramp) - 1
                    let s = (t * stages).div_ceil(ramp_steps) - 1;
                    start + s * ((end - start) / stages)
                }
            }
        }
    }

    /// Sum of batch sizes over steps 1..=total_steps, in closed form.
    pub fn total_examples(&self, total_steps: u64) -> u64 {
        match *self {
            BatchSchedule::Fixed { size } => total_steps * size,
            BatchSchedule::Increasing { start, end, ramp_steps, stages } => {
                let step = (end - start) / stages;
                let mut total = 0u64;
                for s in 0..stages {
                    // stage s covers steps (s*ramp/stages, (s+1)*ramp/stages]
                    let lo = (s * ramp_steps / stages).min(total_steps);
                    let hi = ((s + 1) * ramp_steps / stages).min(total_steps);
                    total += (hi - lo) * (start + s * step);
                }
                total + total_steps.saturating_sub(ramp_steps) * end
            }
        }
    }

    /// Collapse the schedule into runs of constant sampling rate for the
    /// accountant. `population` is the dataset size n; rates are batch / n.
    pub fn segments(
        &self,
        total_steps: u64,
        population: u64,
        noise_multiplier: f64,
    ) -> Result<Vec<ScheduleSegment>> {
        self.validate()?;
        if population == 0 {
            return Err(Error::parameter("population size must be >= 1"));
        }
        if total_steps == 0 {
            return Err(Error::parameter("schedule must cover at least one step"));
        }
        let mut out: Vec<ScheduleSegment> = Vec::new();
        let mut t = 1;
        while t <= total_steps {
            let b = self.batch_size(t);
            if b > population {
                return Err(Error::parameter(format!(
                    "batch size {b} exceeds population {population}"
                )));
            }
            let rate = b as f64 / population as f64;
            match out.last_mut() {
                Some(seg) if seg.sampling_rate == rate => seg.steps += 1,
                _ => out.push(ScheduleSegment {
                    steps: 1,
                    sampling_rate: rate,
                    noise_multiplier,
                }),
            }
            t += 1;
        }
        Ok(out)
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then quadratic decay to zero
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) || !self.peak.is_finite() {
            return Err(Error::parameter(format!(
                "peak learning rate must be positive, got {}",
                self.peak
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::parameter("schedule must cover at least one step"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::parameter(format!(
                "warmup of {} steps must end before the final step {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at step `t` (1-based). Steps outside [1, total] read 0.
    pub fn lr(&self, t: u64) -> f64 {
        if t == 0 || t > self.total_steps {
            return 0.0;
        }
        if t <= self.warmup_steps {
            self.peak * t as f64 / self.warmup_steps as f64
        } else {
            let frac = (self.total_steps - t) as f64
                / (self.total_steps - self.warmup_steps) as f64;
            self.peak * frac * frac
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_ramp() -> BatchSchedule {
        BatchSchedule::Increasing {
            start: 262_144,
            end: 1_048_576,
            ramp_steps: 7500,
            stages: 4,
        }
    }

    #[test]
    fn fixed_schedule_is_constant() {
        let s = BatchSchedule::Fixed { size: 65_536 };
        s.validate().unwrap();
        for t in [0, 1, 7500, 20000] {
            assert_eq!(s.batch_size(t), 65_536);
        }
        assert_eq!(s.total_examples(20000), 20000 * 65_536);
    }

    #[test]
    fn ramp_boundaries_pinned() {
        let s = reference_ramp();
        s.validate().unwrap();
        assert_eq!(s.batch_size(1), 262_144);
        assert_eq!(s.batch_size(1875), 262_144);
        assert_eq!(s.batch_size(1876), 458_752);
        assert_eq!(s.batch_size(3750), 458_752);
        assert_eq!(s.batch_size(3751), 655_360);
        assert_eq!(s.batch_size(7500), 851_968);
        assert_eq!(s.batch_size(7501), 1_048_576);
        assert_eq!(s.batch_size(20000), 1_048_576);
    }

    #[test]
    fn ramp_example_totals_pinned() {
        let s = reference_ramp();
        assert_eq!(s.total_examples(0), 0);
        assert_eq!(s.total_examples(1876), 1875 * 262_144 + 458_752);
        assert_eq!(s.total_examples(7500), 4_177_920_000);
        assert_eq!(s.total_examples(20000), 4_177_920_000 + 12_500 * 1_048_576);
    }

    #[test]
    fn totals_match_step_by_step_sum() {
        let cases = [
            BatchSchedule::Fixed { size: 7 },
            BatchSchedule::Increasing { start: 8, end: 64, ramp_steps: 96, stages: 7 },
            BatchSchedule::Increasing { start: 5, end: 5, ramp_steps: 10, stages: 1 },
            BatchSchedule::Increasing { start: 3, end: 33, ramp_steps: 11, stages: 10 },
        ];
        for s in cases {
            s.validate().unwrap();
            let mut running = 0;
            let mut prev = 0;
            for t in 1..=150 {
                let b = s.batch_size(t);
                assert!(b >= prev, "{s:?} shrank at step {t}");
                prev = b;
                running += b;
                assert_eq!(s.total_examples(t), running, "{s:?} at step {t}");
            }
        }
    }

    #[test]
    fn invalid_ramps_rejected() {
        assert!(BatchSchedule::Fixed { size: 0 }.validate().is_err());
        let bad = [
            BatchSchedule::Increasing { start: 0, end: 8, ramp_steps: 4, stages: 2 },
            BatchSchedule::Increasing { start: 9, end: 8, ramp_steps: 4, stages: 2 },
            BatchSchedule::Increasing { start: 4, end: 8, ramp_steps: 4, stages: 0 },
            BatchSchedule::Increasing { start: 4, end: 8, ramp_steps: 1, stages: 2 },
            BatchSchedule::Increasing { start: 4, end: 9, ramp_steps: 4, stages: 2 },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?} should not validate");
        }
    }

    #[test]
    fn segments_group_constant_rates() {
        let s = reference_ramp();
        let n = 346_000_000;
        let segs = s.segments(20000, n, 0.5).unwrap();
        assert_eq!(segs.len(), 5);
        let steps: Vec<u64> = segs.iter().map(|g| g.steps).collect();
        assert_eq!(steps, vec![1875, 1875, 1875, 1875, 12500]);
        let sizes = [262_144u64, 458_752, 655_360, 851_968, 1_048_576];
        for (seg, b) in segs.iter().zip(sizes) {
            assert_eq!(seg.sampling_rate, b as f64 / n as f64);
            assert_eq!(seg.noise_multiplier, 0.5);
        }
        let fixed = BatchSchedule::Fixed { size: 32 };
        let segs = fixed.segments(100, 64, 1.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].steps, 100);
        assert_eq!(segs[0].sampling_rate, 0.5);
        assert!(fixed.segments(100, 16, 1.0).is_err(), "batch above population");
    }

    #[test]
    fn lr_warmup_then_quadratic_decay() {
        let s = LrSchedule { peak: 2.0, warmup_steps: 100, total_steps: 500 };
        s.validate().unwrap();
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(25), 0.5);
        assert_eq!(s.lr(50), 1.0);
        assert_eq!(s.lr(100), 2.0);
        // halfway through decay: (200/400)^2 = 1/4 of peak
        assert_eq!(s.lr(300), 0.5);
        assert_eq!(s.lr(500), 0.0);
        assert_eq!(s.lr(501), 0.0);
        // continuity at the warmup boundary
        assert!((s.lr(101) - 2.0).abs() < 2.0 * 2.0 / 400.0 + 1e-12);
        // monotone decreasing after warmup
        let mut prev = f64::INFINITY;
        for t in 100..=500 {
            let v = s.lr(t);
            assert!(v < prev || (v == 0.0 && prev == 0.0));
            prev = v;
        }
    }

    #[test]
    fn zero_warmup_starts_at_peak_decay() {
        let s = LrSchedule { peak: 1.0, warmup_steps: 0, total_steps: 10 };
        s.validate().unwrap();
        assert_eq!(s.lr(1), 0.81);
        assert_eq!(s.lr(10), 0.0);
    }

    #[test]
    fn invalid_lr_schedules_rejected() {
        assert!(LrSchedule { peak: 0.0, warmup_steps: 0, total_steps: 10 }.validate().is_err());
        assert!(LrSchedule { peak: 1.0, warmup_steps: 10, total_steps: 10 }.validate().is_err());
        assert!(LrSchedule { peak: 1.0, warmup_steps: 0, total_steps: 0 }.validate().is_err());
        assert!(
            LrSchedule { peak: f64::INFINITY, warmup_steps: 0, total_steps: 10 }
                .validate()
                .is_err()
        );
    }
}
