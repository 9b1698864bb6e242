use serde::{Deserialize, Serialize};

/// Reduce-on-plateau over a metric to maximise: after more than `patience`
/// consecutive epochs without strict improvement, the learning rate is
/// multiplied by `factor` and the counter restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    #[serde(skip)]
    best: Option<f64>,
    #[serde(skip)]
    bad_epochs: usize,
}

impl Default for ReduceOnPlateau {
    fn default() -> Self {
        Self::new(0.5, 2)
    }
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Returns the factor to apply this epoch, if any.
    pub fn observe(&mut self, metric: f64) -> Option<f64> {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            Some(self.factor)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops once `patience` consecutive epochs fail to beat the best metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.zip(self.best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_trace() {
        let mut es = EarlyStopping::new(2);
        let trace = [0.5, 0.4, 0.4];
        let mut stopped_at = None;
        for (e, m) in trace.iter().enumerate() {
            if es.observe(e + 1, *m).stop {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(es.best(), Some((1, 0.5)));
    }

    #[test]
    fn plateau_halves_once() {
        let mut s = ReduceOnPlateau::new(0.5, 2);
        let actions: Vec<Option<f64>> = [0.6, 0.6, 0.6, 0.6, 0.7].iter().map(|&m| s.observe(m)).collect();
        assert_eq!(actions, vec![None, None, None, Some(0.5), None]);
    }
}
