//! Switch trigger that watches minibatch training accuracy for a plateau.

/// Fires once, when the mean accuracy over the last `window` batches has
/// improved by less than `delta` over the previous window while sitting at
/// or above `floor`.
#[derive(Clone, Debug)]
pub struct PlateauMonitor {
    window: usize,
    delta: f64,
    floor: f64,
    history: Vec<f64>,
    fired: bool,
}

impl PlateauMonitor {
    pub fn new(window: usize, delta: f64, floor: f64) -> Self {
        assert!(window >= 1);
        Self {
            window,
            delta,
            floor,
            history: Vec::new(),
            fired: false,
        }
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    /// Pushes one minibatch accuracy; returns true on the single call where
    /// the plateau condition first holds.
    pub fn push(&mut self, minibatch_acc: f64) -> bool {
        if self.fired {
            return false;
        }
        self.history.push(minibatch_acc);
        let w = self.window;
        if self.history.len() < 2 * w {
            return false;
        }
        if self.history.len() > 2 * w {
            self.history.remove(0);
        }
        let prev: f64 = self.history[..w].iter().sum::<f64>() / w as f64;
        let recent: f64 = self.history[w..].iter().sum::<f64>() / w as f64;
        if recent - prev < self.delta && recent >= self.floor {
            self.fired = true;
            return true;
        }
        false
    }
}
