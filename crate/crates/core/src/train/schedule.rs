use serde::{Deserialize, Serialize};

/// Learning-rate schedule driven by validation error: divide by the decay
/// factor whenever an epoch's error exceeds the previous epoch's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub learning_rate: f64,
    pub decay: f64,
    pub floor: f64,
    pub previous_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Continue,
    /// The rate was divided; training should resume from the best state.
    Decayed,
    /// The rate fell below the floor.
    Stop,
}

impl Schedule {
    pub fn new(learning_rate: f64, decay: f64, floor: f64) -> Self {
        Schedule {
            learning_rate,
            decay,
            floor,
            previous_error: None,
        }
    }

    pub fn observe(&mut self, error: f64) -> Step {
        let worse = self.previous_error.is_some_and(|p| error > p);
        self.previous_error = Some(error);
        if !worse {
            return Step::Continue;
        }
        self.learning_rate /= self.decay;
        if self.learning_rate < self.floor {
            Step::Stop
        } else {
            Step::Decayed
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_never_decays() {
        let mut s = Schedule::new(0.01, 10.0, 1e-8);
        for e in [0.9, 0.8, 0.5, 0.4, 0.4, 0.1] {
            assert_eq!(s.observe(e), Step::Continue);
        }
        assert_eq!(s.learning_rate, 0.01);
    }

    #[test]
    fn worsening_at_epochs_three_and_five() {
        let mut s = Schedule::new(0.01, 10.0, 1e-8);
        let steps: Vec<Step> = [0.5, 0.4, 0.45, 0.35, 0.38, 0.3].into_iter().map(|e| s.observe(e)).collect();
        assert_eq!(steps[2], Step::Decayed);
        assert_eq!(steps[4], Step::Decayed);
        assert!((s.learning_rate - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn stops_below_floor() {
        let mut s = Schedule::new(0.01, 10.0, 1e-3);
        s.observe(0.2);
        assert_eq!(s.observe(0.3), Step::Decayed);
        assert_eq!(s.observe(0.4), Step::Stop);
    }
}
