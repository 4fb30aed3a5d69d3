//! Emulated root-of-trust timer.
//!
//! The timer accepts one restart time per cycle. Later writes in the same
//! cycle are ignored. When the timer expires it raises a single restart
//! signal, and it only accepts a new time after it has been explicitly
//! rearmed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotPhase {
    AwaitingSet,
    Armed { fire_at: f64 },
    Fired,
}

/// Raised once per cycle when the armed time is reached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestartSignal {
    /// Time the timer was armed to expire.
    pub fire_at: f64,
    /// Time of the poll that observed the expiry.
    pub observed_at: f64,
}

#[derive(Clone, Debug)]
pub struct RotEmulator {
    phase: RotPhase,
    last_poll: Option<f64>,
    cycle: usize,
}

impl Default for RotEmulator {
    fn default() -> Self {
        Self::new()
    }
}

impl RotEmulator {
    pub fn new() -> Self {
        Self {
            phase: RotPhase::AwaitingSet,
            last_poll: None,
            cycle: 0,
        }
    }

    pub fn phase(&self) -> RotPhase {
        self.phase
    }

    pub fn accepts_set(&self) -> bool {
        matches!(self.phase, RotPhase::AwaitingSet)
    }

    /// Number of completed rearms.
    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn fire_at(&self) -> Option<f64> {
        match self.phase {
            RotPhase::Armed { fire_at } => Some(fire_at),
            _ => None,
        }
    }

    /// Arms the timer for `now + delta`. Returns `false` without touching the
    /// state if the timer was already set this cycle or if `delta` is not a
    /// positive finite number.
    pub fn set_restart_time(&mut self, now: f64, delta: f64) -> bool {
        if !self.accepts_set() || !(delta > 0.0) || !delta.is_finite() || !now.is_finite() {
            return false;
        }
        self.phase = RotPhase::Armed { fire_at: now + delta };
        true
    }

    pub fn poll(&mut self, now: f64) -> Result<Option<RestartSignal>> {
        if !now.is_finite() {
            return Err(Error::NonFinite("RoT poll time"));
        }
        if let Some(last) = self.last_poll {
            if now < last {
                return Err(Error::TimeRegression { last, now });
            }
        }
        self.last_poll = Some(now);
        match self.phase {
            RotPhase::Armed { fire_at } if now >= fire_at => {
                self.phase = RotPhase::Fired;
                Ok(Some(RestartSignal {
                    fire_at,
                    observed_at: now,
                }))
            }
            _ => Ok(None),
        }
    }

    pub fn rearm(&mut self) -> Result<()> {
        match self.phase {
            RotPhase::Fired => {
                self.phase = RotPhase::AwaitingSet;
                self.cycle += 1;
                Ok(())
            }
            _ => Err(Error::RearmBeforeFire),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_set_is_ignored() {
        let mut rot = RotEmulator::new();
        assert!(rot.set_restart_time(0.0, 5.0));
        assert_eq!(rot.fire_at(), Some(5.0));
        assert!(!rot.set_restart_time(1.0, 99.0));
        assert_eq!(rot.fire_at(), Some(5.0));
    }

    #[test]
    fn non_positive_delta_rejected() {
        let mut rot = RotEmulator::new();
        assert!(!rot.set_restart_time(0.0, 0.0));
        assert!(!rot.set_restart_time(0.0, -1.0));
        assert!(!rot.set_restart_time(0.0, f64::NAN));
        assert_eq!(rot.phase(), RotPhase::AwaitingSet);
    }

    #[test]
    fn fires_exactly_once() {
        let mut rot = RotEmulator::new();
        rot.set_restart_time(0.0, 5.0);
        assert!(rot.poll(4.999).unwrap().is_none());
        let s = rot.poll(5.0).unwrap().unwrap();
        assert_eq!(s.fire_at, 5.0);
        assert!(rot.poll(6.0).unwrap().is_none());
        assert_eq!(rot.phase(), RotPhase::Fired);
    }

    #[test]
    fn never_set_never_fires() {
        let mut rot = RotEmulator::new();
        for k in 0..1000 {
            assert!(rot.poll(k as f64).unwrap().is_none());
        }
    }

    #[test]
    fn time_regression_is_an_error() {
        let mut rot = RotEmulator::new();
        rot.poll(2.0).unwrap();
        assert!(matches!(rot.poll(1.0), Err(Error::TimeRegression { .. })));
    }

    #[test]
    fn rearm_rules() {
        let mut rot = RotEmulator::new();
        assert!(matches!(rot.rearm(), Err(Error::RearmBeforeFire)));
        rot.set_restart_time(0.0, 1.0);
        assert!(matches!(rot.rearm(), Err(Error::RearmBeforeFire)));
        rot.poll(1.0).unwrap();
        rot.rearm().unwrap();
        assert_eq!(rot.phase(), RotPhase::AwaitingSet);

        let mut accepted = 1;
        if rot.set_restart_time(1.0, 2.0) {
            accepted += 1;
        }
        assert!(!rot.set_restart_time(1.5, 2.0));
        assert_eq!(accepted, 2);
        assert_eq!(rot.cycle(), 1);
    }

    #[test]
    fn fire_time_is_exact_sum() {
        let mut rot = RotEmulator::new();
        let (now, delta) = (0.1, 0.2);
        rot.set_restart_time(now, delta);
        assert_eq!(rot.fire_at().unwrap().to_bits(), (now + delta).to_bits());
    }
}
