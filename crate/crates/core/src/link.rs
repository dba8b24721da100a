//! Injected link behaviour: fixed delay, uniform jitter and datagram loss,
//! drawn from a seeded stream so runs are replayable.

use core::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModel {
    pub fixed_ms: f64,
    pub jitter_ms: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel { fixed_ms: 0.0, jitter_ms: 0.0, drop_prob: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DelayModelError {
    #[error("{0} must be finite and non-negative")]
    Negative(&'static str),
    #[error("drop_prob must lie in [0, 1]")]
    DropOutOfRange,
    #[error("stream channels cannot drop data")]
    DropOnStream,
}

impl DelayModel {
    pub fn fixed(ms: f64) -> Self {
        DelayModel { fixed_ms: ms, ..Default::default() }
    }

    pub fn lossy(drop_prob: f64, seed: u64) -> Self {
        DelayModel { drop_prob, seed, ..Default::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), DelayModelError> {
        for (name, v) in [("fixed_ms", self.fixed_ms), ("jitter_ms", self.jitter_ms)] {
            if !v.is_finite() || v < 0.0 {
                return Err(DelayModelError::Negative(name));
            }
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(DelayModelError::DropOutOfRange);
        }
        Ok(())
    }

    pub fn validate_stream(&self) -> Result<(), DelayModelError> {
        self.validate()?;
        if self.drop_prob != 0.0 {
            return Err(DelayModelError::DropOnStream);
        }
        Ok(())
    }

    pub fn is_passthrough(&self) -> bool {
        self.fixed_ms == 0.0 && self.jitter_ms == 0.0 && self.drop_prob == 0.0
    }
}

/// Per-message decision for one direction of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Deliver { delay: Duration },
    Drop,
}

/// Deterministic decision stream: the same model and seed always yield the
/// same sequence of decisions.
#[derive(Debug, Clone)]
pub struct LinkSchedule {
    model: DelayModel,
    rng: ChaCha8Rng,
}

impl LinkSchedule {
    pub fn new(model: DelayModel) -> Self {
        LinkSchedule { model, rng: ChaCha8Rng::seed_from_u64(model.seed) }
    }

    /// Independent stream for the other direction of the same link.
    pub fn reverse(model: DelayModel) -> Self {
        LinkSchedule { model, rng: ChaCha8Rng::seed_from_u64(model.seed ^ 0x9E37_79B9_7F4A_7C15) }
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    pub fn sample_delay(&mut self) -> Duration {
        let jitter = if self.model.jitter_ms > 0.0 {
            self.rng.random_range(-self.model.jitter_ms..=self.model.jitter_ms)
        } else {
            0.0
        };
        let ms = (self.model.fixed_ms + jitter).max(0.0);
        Duration::from_nanos((ms * 1e6) as u64)
    }

    pub fn next_decision(&mut self) -> Decision {
        // Always draw for loss so the delay stream does not shift with drop_prob.
        let roll: f64 = self.rng.random();
        let delay = self.sample_delay();
        if roll < self.model.drop_prob {
            Decision::Drop
        } else {
            Decision::Deliver { delay }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec::Vec;

    #[test]
    fn passthrough_model() {
        let mut s = LinkSchedule::new(DelayModel::default());
        assert!(DelayModel::default().is_passthrough());
        for _ in 0..10 {
            assert_eq!(s.next_decision(), Decision::Deliver { delay: Duration::ZERO });
        }
    }

    #[test]
    fn certain_and_zero_loss() {
        let mut all = LinkSchedule::new(DelayModel::lossy(1.0, 3));
        assert!((0..100).all(|_| all.next_decision() == Decision::Drop));
        let mut none = LinkSchedule::new(DelayModel::lossy(0.0, 3));
        assert!((0..100).all(|_| none.next_decision() != Decision::Drop));
    }

    #[test]
    fn same_seed_same_decisions() {
        let model = DelayModel { fixed_ms: 1.0, jitter_ms: 0.5, drop_prob: 0.5, seed: 42 };
        let a: Vec<Decision> = {
            let mut s = LinkSchedule::new(model);
            (0..100).map(|_| s.next_decision()).collect()
        };
        let b: Vec<Decision> = {
            let mut s = LinkSchedule::new(model);
            (0..100).map(|_| s.next_decision()).collect()
        };
        assert_eq!(a, b);
        let dropped = a.iter().filter(|d| **d == Decision::Drop).count();
        assert!((30..=70).contains(&dropped), "{dropped}");
    }

    #[test]
    fn jitter_stays_in_band() {
        let mut s = LinkSchedule::new(DelayModel { fixed_ms: 5.0, jitter_ms: 2.0, drop_prob: 0.0, seed: 1 });
        for _ in 0..1000 {
            let d = s.sample_delay().as_secs_f64() * 1e3;
            assert!((3.0..=7.0).contains(&d), "{d}");
        }
    }

    #[test]
    fn validation() {
        assert_eq!(DelayModel::fixed(-1.0).validate(), Err(DelayModelError::Negative("fixed_ms")));
        assert_eq!(DelayModel::lossy(1.5, 0).validate(), Err(DelayModelError::DropOutOfRange));
        assert_eq!(DelayModel::lossy(0.1, 0).validate_stream(), Err(DelayModelError::DropOnStream));
        assert!(DelayModel::fixed(5.0).validate_stream().is_ok());
    }
}
