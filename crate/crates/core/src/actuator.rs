//! LED actuator driven by temperature readings.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::strip_padding;

pub const DEFAULT_THRESHOLD_C: f64 = 22.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Led {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub at_ns: u64,
    pub led: Led,
    pub temperature_c: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("payload carries no numeric temperature")]
pub struct UnparseablePayload;

/// LED state plus the log of state changes. The LED is on exactly when the
/// last valid temperature is strictly above the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    pub led: Led,
    pub threshold_c: f64,
    pub transitions: Vec<Transition>,
    pub skipped: u64,
}

impl Default for ActuatorState {
    fn default() -> Self {
        ActuatorState::new(DEFAULT_THRESHOLD_C)
    }
}

impl ActuatorState {
    pub fn new(threshold_c: f64) -> Self {
        ActuatorState { led: Led::Off, threshold_c, transitions: Vec::new(), skipped: 0 }
    }

    /// Returns the transition if this reading changed the LED.
    pub fn apply_temperature(&mut self, temperature_c: f64, at_ns: u64) -> Option<Transition> {
        let led = if temperature_c > self.threshold_c { Led::On } else { Led::Off };
        if led == self.led {
            return None;
        }
        self.led = led;
        let t = Transition { at_ns, led, temperature_c };
        self.transitions.push(t);
        Some(t)
    }

    /// Feeds a raw message payload. Unparseable payloads are counted and
    /// leave the state untouched.
    pub fn on_payload(&mut self, payload: &[u8], at_ns: u64) -> Result<Option<Transition>, UnparseablePayload> {
        match parse_temperature(payload) {
            Some(t) => Ok(self.apply_temperature(t, at_ns)),
            None => {
                self.skipped += 1;
                Err(UnparseablePayload)
            }
        }
    }
}

/// Pulls `temperature` from a bare reading or from an envelope's `data`.
pub fn parse_temperature(payload: &[u8]) -> Option<f64> {
    let value: serde_json::Value = serde_json::from_slice(strip_padding(payload)).ok()?;
    let t = value
        .get("temperature")
        .or_else(|| value.get("data").and_then(|d| d.get("temperature")))?
        .as_f64()?;
    t.is_finite().then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn reading(t: f64) -> Vec<u8> {
        format!("{{\"temperature\":{t:.2},\"humidity\":36.00}}").into_bytes()
    }

    #[test]
    fn above_threshold_turns_on() {
        let mut a = ActuatorState::default();
        a.on_payload(&reading(25.0), 1).unwrap();
        assert_eq!(a.led, Led::On);
    }

    #[test]
    fn equal_to_threshold_stays_off() {
        let mut a = ActuatorState::default();
        assert_eq!(a.on_payload(&reading(22.0), 1).unwrap(), None);
        assert_eq!(a.led, Led::Off);
    }

    #[test]
    fn transitions_only_on_change() {
        let mut a = ActuatorState::new(22.0);
        for (i, t) in [25.0, 26.0, 20.0].into_iter().enumerate() {
            a.on_payload(&reading(t), i as u64).unwrap();
        }
        let log: Vec<(Led, f64)> = a.transitions.iter().map(|t| (t.led, t.temperature_c)).collect();
        assert_eq!(log, [(Led::On, 25.0), (Led::Off, 20.0)]);
    }

    #[test]
    fn garbage_is_skipped() {
        let mut a = ActuatorState::new(22.0);
        a.on_payload(&reading(30.0), 0).unwrap();
        assert_eq!(a.on_payload(b"not json", 1), Err(UnparseablePayload));
        assert_eq!(a.on_payload(br#"{"motion":true}"#, 2), Err(UnparseablePayload));
        assert_eq!((a.led, a.skipped, a.transitions.len()), (Led::On, 2, 1));
    }

    #[test]
    fn reads_envelope_data() {
        let env = br#"{"meta":{"dev":"dev-1-1","seq":1,"ts":0,"topic":"t"},"data":{"temperature":23.50,"humidity":40.00}}"#;
        assert_eq!(parse_temperature(env), Some(23.5));
    }
}
