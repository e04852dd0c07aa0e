/// Reduce-on-plateau learning rate driven by a lower-is-better dev metric.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    initial_lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    /// Checkpoints since the last improvement or reduction.
    stale: usize,
    reductions: u32,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            initial_lr,
            factor,
            patience: patience.max(1),
            best: None,
            stale: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr * self.factor.powi(self.reductions as i32)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }

    /// Records one checkpoint's metric and returns whether it strictly
    /// improved on the best so far.
    pub fn observe(&mut self, metric: f64) -> bool {
        let improved = match self.best {
            None => !metric.is_nan(),
            Some(b) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.reductions += 1;
                self.stale = 0;
            }
        }
        improved
    }
}
