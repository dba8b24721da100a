//! Seeded sensor reading generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    ReadingKind, SensorKind, SensorReading, DISTANCE_RANGE_CM, HUMIDITY_RANGE_PCT, TEMPERATURE_RANGE_C,
};

pub const MAX_TEMPERATURE_STEP_C: f64 = 0.5;
pub const MAX_HUMIDITY_STEP_PCT: f64 = 1.0;
pub const MAX_DISTANCE_STEP_CM: f64 = 5.0;
/// Mean motion events per second.
pub const MOTION_RATE_HZ: f64 = 0.1;

/// Produces a bounded random walk per sensor kind. The first draw returns
/// the initial state unchanged; later draws step and clamp into the sensor's
/// operating range.
#[derive(Debug, Clone)]
pub struct ReadingGenerator {
    rng: ChaCha8Rng,
    state: ReadingKind,
    period_ms: u64,
    started: bool,
}

impl ReadingGenerator {
    pub fn new(kind: SensorKind, seed: u64, period_ms: u64) -> Self {
        let state = match kind {
            SensorKind::TempHumidity => ReadingKind::TempHumidity { temperature_c: 22.0, humidity_pct: 40.0 },
            SensorKind::Distance => ReadingKind::Distance { cm: 100.0 },
            SensorKind::Motion => ReadingKind::Motion { detected: false },
        };
        Self::with_initial(state, seed, period_ms)
    }

    pub fn with_initial(state: ReadingKind, seed: u64, period_ms: u64) -> Self {
        ReadingGenerator { rng: ChaCha8Rng::seed_from_u64(seed), state, period_ms, started: false }
    }

    fn step(&mut self, max: f64) -> f64 {
        self.rng.random_range(-max..=max)
    }

    pub fn next_reading(&mut self, sampled_at_ns: u64) -> SensorReading {
        if !self.started {
            self.started = true;
            return SensorReading::new(self.state, sampled_at_ns);
        }
        self.state = match self.state {
            ReadingKind::TempHumidity { temperature_c, humidity_pct } => {
                let dt = self.step(MAX_TEMPERATURE_STEP_C);
                let dh = self.step(MAX_HUMIDITY_STEP_PCT);
                ReadingKind::TempHumidity {
                    temperature_c: (temperature_c + dt).clamp(TEMPERATURE_RANGE_C.0, TEMPERATURE_RANGE_C.1),
                    humidity_pct: (humidity_pct + dh).clamp(HUMIDITY_RANGE_PCT.0, HUMIDITY_RANGE_PCT.1),
                }
            }
            ReadingKind::Distance { cm } => {
                let d = self.step(MAX_DISTANCE_STEP_CM);
                ReadingKind::Distance { cm: (cm + d).clamp(DISTANCE_RANGE_CM.0, DISTANCE_RANGE_CM.1) }
            }
            ReadingKind::Motion { .. } => {
                // Poisson arrivals: P(at least one event in one period).
                let p = 1.0 - libm::exp(-MOTION_RATE_HZ * self.period_ms as f64 / 1e3);
                ReadingKind::Motion { detected: self.rng.random::<f64>() < p }
            }
        };
        SensorReading::new(self.state, sampled_at_ns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec::Vec;

    #[test]
    fn deterministic_given_seed() {
        let run = |seed| {
            let mut g = ReadingGenerator::new(SensorKind::TempHumidity, seed, 1000);
            (0..100).map(|i| g.next_reading(i)).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn clamped_to_dht11_range() {
        let mut g = ReadingGenerator::new(SensorKind::TempHumidity, 11, 1000);
        for i in 0..10_000 {
            let r = g.next_reading(i);
            r.validate().unwrap();
        }
    }

    #[test]
    fn steps_are_bounded() {
        let mut g = ReadingGenerator::new(SensorKind::TempHumidity, 2, 1000);
        let mut prev = g.next_reading(0);
        for i in 1..1000 {
            let r = g.next_reading(i);
            if let (
                ReadingKind::TempHumidity { temperature_c: t0, humidity_pct: h0 },
                ReadingKind::TempHumidity { temperature_c: t1, humidity_pct: h1 },
            ) = (prev.kind, r.kind)
            {
                assert!((t1 - t0).abs() <= MAX_TEMPERATURE_STEP_C + 1e-12);
                assert!((h1 - h0).abs() <= MAX_HUMIDITY_STEP_PCT + 1e-12);
            }
            prev = r;
        }
    }

    #[test]
    fn initial_state_reproduces_listing_payload() {
        let init = ReadingKind::TempHumidity { temperature_c: 22.0, humidity_pct: 18.0 };
        let mut g = ReadingGenerator::with_initial(init, 1, 1000);
        assert_eq!(g.next_reading(0).render_json(), br#"{"temperature":22.00,"humidity":18.00}"#);
        // Subsequent steps are pulled back into the operating range.
        g.next_reading(1).validate().unwrap();
    }

    #[test]
    fn distance_and_motion_bounded() {
        let mut d = ReadingGenerator::new(SensorKind::Distance, 3, 100);
        let mut m = ReadingGenerator::new(SensorKind::Motion, 3, 1000);
        let mut events = 0;
        for i in 0..10_000 {
            d.next_reading(i).validate().unwrap();
            if let ReadingKind::Motion { detected: true } = m.next_reading(i).kind {
                events += 1;
            }
        }
        // ~9.5% per 1 s period.
        assert!((700..1300).contains(&events), "{events}");
    }
}
