use super::params::ParamStore;
use super::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update from the gradients currently held in `store`.
    fn step(&mut self, store: &mut ParamStore);
    fn learning_rate(&self) -> f64;
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub const DEFAULT_LR: f64 = 5e-4;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(Self::DEFAULT_LR, Self::DEFAULT_WEIGHT_DECAY)
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for (((w, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// SGD with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.9,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() != store.len() {
            self.velocity = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let vel = self.velocity[id.index()].data_mut();
            for ((w, &g), u) in value.data_mut().iter_mut().zip(grad.data()).zip(vel) {
                *u = self.momentum * *u + g;
                *w -= self.lr * *u;
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
