use super::params::{NetworkParams, ParamGrads};
use crate::error::{config_err, Result};

/// Learning-rate schedule applied on top of the base rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// Multiply by `factor` every `every` iterations.
    Step { factor: f64, every: usize },
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(config_err("iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err("learning_rate must be > 0"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(config_err(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if let LrSchedule::Step { factor, every } = self.schedule {
            if !(factor > 0.0) || every == 0 {
                return Err(config_err("step decay needs factor > 0 and every >= 1"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect at zero-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        match self.schedule {
            LrSchedule::Step { factor, every } => {
                self.learning_rate * factor.powi((iter / every) as i32)
            }
            LrSchedule::Cosine => {
                let progress = iter as f64 / self.iterations as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Adam without weight decay. Updated parameters are rounded to `f32`.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &NetworkParams, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.values.len()]).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (ti, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], &grads.values[ti]);
            for j in 0..t.values.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                t.values[j] = f64::from((t.values[j] - update) as f32);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(schedule: LrSchedule) -> TrainConfig {
        TrainConfig {
            iterations: 100,
            batch_size: 4,
            learning_rate: 0.1,
            schedule,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
        }
    }

    #[test]
    fn schedules() {
        let step = cfg(LrSchedule::Step { factor: 0.5, every: 10 });
        assert_eq!(step.lr_at(0), 0.1);
        assert_eq!(step.lr_at(9), 0.1);
        assert!((step.lr_at(25) - 0.025).abs() < 1e-15);
        let cos = cfg(LrSchedule::Cosine);
        assert_eq!(cos.lr_at(0), 0.1);
        assert!((cos.lr_at(50) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(cfg(LrSchedule::Cosine).validate().is_ok());
        let mut c = cfg(LrSchedule::Cosine);
        c.adam_beta2 = 1.0;
        assert!(c.validate().is_err());
        c = cfg(LrSchedule::Cosine);
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = NetworkParams::new();
        p.push("x", vec![2], vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(&p, 0.9, 0.999);
        for _ in 0..2000 {
            let g = ParamGrads {
                values: vec![p.tensors()[0].values.iter().map(|x| 2.0 * x).collect()],
            };
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p.tensors()[0].values.iter().all(|x| x.abs() < 1e-2));
    }
}
