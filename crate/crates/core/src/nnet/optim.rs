use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::NnetError;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_blocks(vec![params], grads, lr);
    }

    /// Same update over a parameter vector split into consecutive blocks.
    pub fn step_blocks(&mut self, blocks: Vec<&mut [f64]>, grads: &[f64], lr: f64) {
        let total: usize = blocks.iter().map(|b| b.len()).sum();
        assert_eq!(total, self.m.len(), "optimizer/parameter size");
        assert_eq!(grads.len(), self.m.len(), "gradient size");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for block in blocks {
            for p in block.iter_mut() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
                i += 1;
            }
        }
    }
}

/// Cosine annealing restarted every `cycle_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicCosine {
    pub base_lr: f64,
    pub min_lr: f64,
    pub cycle_steps: u64,
}

impl CyclicCosine {
    pub fn lr(&self, step: u64) -> f64 {
        let phase = (step % self.cycle_steps.max(1)) as f64 / self.cycle_steps.max(1) as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Steps per cosine cycle.
    pub cycle_steps: u64,
    /// Floor of the schedule as a fraction of `learning_rate`.
    pub min_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            weight_decay: 1e-4,
            epochs: 1,
            seed: 0,
            cycle_steps: 1000,
            min_lr_ratio: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnetError::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(NnetError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.cycle_steps == 0 {
            return Err(NnetError::InvalidConfig("cycle_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(NnetError::InvalidConfig("min_lr_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CyclicCosine {
        CyclicCosine {
            base_lr: self.learning_rate,
            min_lr: self.learning_rate * self.min_lr_ratio,
            cycle_steps: self.cycle_steps,
        }
    }
}

/// A network together with its optimizer and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub net: Mlp,
    pub opt: AdamW,
    pub schedule: CyclicCosine,
    pub step: u64,
}

impl Trainer {
    pub fn new(net: Mlp, cfg: &TrainConfig) -> Result<Self, NnetError> {
        cfg.validate()?;
        let opt = AdamW::new(net.param_count(), cfg.weight_decay);
        Ok(Trainer {
            net,
            opt,
            schedule: cfg.schedule(),
            step: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one update from a precomputed loss and flat gradient.
    /// Non-finite values abort without touching the parameters.
    pub fn apply(&mut self, loss: f64, grads: &[f64]) -> Result<f64, NnetError> {
        if !loss.is_finite() {
            return Err(NnetError::NonFiniteLoss {
                step: self.step,
                detail: format!("loss = {loss}"),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnetError::NonFiniteLoss {
                step: self.step,
                detail: format!("gradient[{i}] = {}", grads[i]),
            });
        }
        if grads.len() != self.net.param_count() {
            return Err(NnetError::ShapeMismatch {
                expected: self.net.param_count(),
                got: grads.len(),
            });
        }
        let lr = self.current_lr();
        self.opt.step_blocks(self.net.param_blocks_mut(), grads, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Runs `loss_grad` on the current network and applies the update.
    pub fn train_step(
        &mut self,
        loss_grad: impl FnOnce(&Mlp) -> Result<(f64, Vec<f64>), NnetError>,
    ) -> Result<f64, NnetError> {
        let (loss, grads) = loss_grad(&self.net)?;
        self.apply(loss, &grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn quadratic(net: &Mlp) -> Result<(f64, Vec<f64>), NnetError> {
        // single weight w, loss (w - 3)^2
        let w = net.weights[0][(0, 0)];
        Ok(((w - 3.0).powi(2), vec![2.0 * (w - 3.0), 0.0]))
    }

    #[test]
    fn zero_lr_leaves_params() {
        let net = Mlp::new(&[3, 4, 2], 1, 1.0);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 1e-4,
            ..Default::default()
        };
        let mut tr = Trainer::new(net.clone(), &cfg).unwrap();
        let g = vec![1.0; net.param_count()];
        for _ in 0..10 {
            tr.apply(1.0, &g).unwrap();
        }
        assert_eq!(tr.net, net);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            cycle_steps: 2000,
            min_lr_ratio: 0.0,
            ..Default::default()
        };
        let mut tr = Trainer::new(Mlp::zeros(&[1, 1]), &cfg).unwrap();
        for _ in 0..2000 {
            tr.train_step(quadratic).unwrap();
        }
        assert!((tr.net.weights[0][(0, 0)] - 3.0).abs() < 1e-6, "{}", tr.net.weights[0][(0, 0)]);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut tr = Trainer::new(Mlp::zeros(&[1, 1]), &TrainConfig::default()).unwrap();
        let before = tr.net.clone();
        let err = tr.apply(f64::NAN, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, NnetError::NonFiniteLoss { step: 0, .. }));
        assert!(tr.apply(1.0, &[f64::INFINITY, 0.0]).is_err());
        assert_eq!(tr.net, before);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let run = || {
            let cfg = TrainConfig {
                learning_rate: 1e-2,
                ..Default::default()
            };
            let mut tr = Trainer::new(Mlp::new(&[4, 8, 2], 5, 1.0), &cfg).unwrap();
            let x = DMatrix::from_fn(4, 6, |i, j| (i as f64 + 1.0) * (j as f64 - 2.5) * 0.1);
            let mut trace = Vec::new();
            for _ in 0..100 {
                tr.train_step(|n| {
                    let c = n.forward_cached(&x)?;
                    let y = c.output().clone();
                    let loss = y.map(|v| v * v).sum();
                    let (g, _) = n.backward(&c, &(y * 2.0));
                    Ok((loss, g))
                })
                .unwrap();
                trace.push(tr.net.params());
            }
            trace
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn schedule_shape() {
        let s = CyclicCosine {
            base_lr: 1.0,
            min_lr: 0.1,
            cycle_steps: 100,
        };
        assert_eq!(s.lr(0), 1.0);
        assert!((s.lr(50) - 0.55).abs() < 1e-12);
        assert_eq!(s.lr(100), 1.0);
        assert!(s.lr(99) < 0.11);
    }

    #[test]
    fn invalid_config() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(NnetError::InvalidConfig(_))));
    }
}
