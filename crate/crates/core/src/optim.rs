//! Adam and a reduce-on-plateau learning-rate schedule, operating on flat
//! parameter slices.

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over paired parameter/gradient tensors. The pairing must
    /// keep the same order and shapes across calls.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            assert_eq!(p.len(), g.len());
            assert_eq!(p.len(), m.len());
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let (s1, s2) = (1.0 / bc1, 1.0 / bc2);
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m * s1) / ((*v * s2).sqrt() + eps);
            }
        }
    }
}

/// Halves (by `factor`) the learning rate when the monitored loss fails to
/// improve for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlateauAction {
    Keep,
    Reduced(f64),
    /// The next reduction would fall below the floor.
    Exhausted,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau::new(0.5, 5, 1e-6)
    }
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, floor: f64) -> Self {
        Plateau {
            factor,
            patience,
            floor,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, loss: f64, lr: &mut f64) -> PlateauAction {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return PlateauAction::Keep;
        }
        self.bad_epochs += 1;
        if self.bad_epochs <= self.patience {
            return PlateauAction::Keep;
        }
        self.bad_epochs = 0;
        let next = *lr * self.factor;
        if next < self.floor {
            return PlateauAction::Exhausted;
        }
        *lr = next;
        PlateauAction::Reduced(next)
    }
}
