//! Parameter updates: Adam for backbone training, plain SGD for the
//! re-balancing phase. Weight decay enters as an additive L2 gradient term.

/// Update rule. Adam defaults follow the usual 0.9 / 0.999 moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer over a fixed list of flat parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    /// `shapes` gives the flat length of each tensor the optimizer will see,
    /// in the same order as every later `step` call.
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        let m = shapes.iter().map(|&s| vec![0.0; s]).collect();
        let v = shapes.iter().map(|&s| vec![0.0; s]).collect();
        Optimizer { kind, lr, weight_decay, m, v, t: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `params` and `grads` must match the construction
    /// shapes; the weight-decay term `wd * theta` is added to each gradient
    /// before the rule is applied.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "optimizer tensor count");
        assert_eq!(grads.len(), self.m.len(), "gradient tensor count");
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                        let grad = gi + self.weight_decay * *pi;
                        *pi -= self.lr * grad;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        let grad = g[i] + self.weight_decay * p[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
