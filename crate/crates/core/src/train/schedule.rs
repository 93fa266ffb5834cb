/// Step-decayed learning rate and linearly ramped batch-norm momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub lr_floor: f64,
    pub bn_momentum_start: f64,
    pub bn_momentum_end: f64,
    /// Epochs taken to ramp from start to end momentum.
    pub bn_ramp_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr0: 0.005,
            decay_every: 20,
            decay_factor: 0.5,
            lr_floor: 1e-5,
            bn_momentum_start: 0.7,
            bn_momentum_end: 0.99,
            bn_ramp_epochs: 100,
        }
    }
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.decay_every.max(1)) as i32;
        (self.lr0 * self.decay_factor.powi(halvings)).max(self.lr_floor)
    }

    pub fn bn_momentum(&self, epoch: usize) -> f64 {
        if self.bn_ramp_epochs == 0 {
            return self.bn_momentum_end;
        }
        let rate = (self.bn_momentum_end - self.bn_momentum_start) / self.bn_ramp_epochs as f64;
        (self.bn_momentum_start + epoch as f64 * rate).min(self.bn_momentum_end)
    }
}

pub fn lr_at_epoch(epoch: usize) -> f64 {
    Schedule::default().lr(epoch)
}

pub fn bn_momentum_at_epoch(epoch: usize) -> f64 {
    Schedule::default().bn_momentum(epoch)
}
