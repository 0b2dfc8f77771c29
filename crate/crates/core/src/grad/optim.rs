use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.9, 0.999, 1e-8, 0.1)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over parallel lists of parameter and gradient buffers; `lrs[i]` applies to buffer `i`.
    pub fn step_slices(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lrs: &[f64],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::invalid(
                "AdamW::step",
                "parameter, gradient and lr lists differ in length",
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::invalid(
                "AdamW::step",
                "parameter layout changed between steps",
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), (m, v)), &lr) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(lrs)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }

    /// Updates every conv of `params`; `lr_of(name)` gives the rate for that conv.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        let grad_convs = grads.convs();
        let mut lrs = Vec::new();
        let mut gs: Vec<&[f64]> = Vec::new();
        for (name, g) in &grad_convs {
            let lr = lr_of(name);
            lrs.extend([lr, lr]);
            gs.push(&g.weight);
            gs.push(&g.bias);
        }
        let mut convs = params.convs_mut();
        let mut ps: Vec<&mut [f64]> = Vec::new();
        for (_, p) in convs.iter_mut() {
            ps.push(&mut p.weight);
            ps.push(&mut p.bias);
        }
        self.step_slices(&mut ps, &gs, &lrs)
    }
}

/// Cosine annealing from `base` to `floor` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let t = (step.min(self.total)) as f64 / self.total as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
