use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{AdamW, CosineSchedule};
use super::synth::synth_scenes;
use crate::consistency::{total_loss, LossReport};
use crate::error::{Error, Result};
use crate::model::{backward, forward, forward_cached, BackwardOptions, ModelConfig, ModelParams};

/// Settings of the synthetic-scene training loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_scenes: usize,
    pub size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Multiplier on the host network's learning rate.
    pub lr_host_scale: f64,
    /// Multiplier on the embedding backbone, decoder and adaptors.
    pub lr_embed_scale: f64,
    /// When false the consistency term never reaches the gradient.
    pub sc_backward: bool,
    /// See [`BackwardOptions::depth_seg_grad_scale`].
    pub depth_seg_grad_scale: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_scenes: 8,
            size: 32,
            steps: 200,
            lr: 5e-3,
            seed: 0,
            lr_host_scale: 1.0,
            lr_embed_scale: 1.0,
            sc_backward: true,
            depth_seg_grad_scale: 0.01,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.size.is_multiple_of(16) || self.size < 32 {
            return Err(Error::invalid(
                "train_toy",
                format!("size {} must be a multiple of 16, >= 32", self.size),
            ));
        }
        if self.n_scenes == 0 {
            return Err(Error::invalid("train_toy", "n_scenes must be positive"));
        }
        if !(self.depth_seg_grad_scale >= 0.0 && self.depth_seg_grad_scale.is_finite()) {
            return Err(Error::invalid(
                "train_toy",
                "depth_seg_grad_scale must be finite and >= 0",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(
                "train_toy",
                format!("lr {} must be positive", self.lr),
            ));
        }
        Ok(())
    }

    fn lr_scale(&self, name: &str) -> f64 {
        if name.starts_with("host.") {
            self.lr_host_scale
        } else if name.starts_with("embed.")
            || name.starts_with("decoder.")
            || name.starts_with("adaptor")
        {
            self.lr_embed_scale
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Mean losses over the scenes before each update, then once after the last.
    pub series: Vec<LossReport>,
    pub params: ModelParams,
}

impl TrainRun {
    pub fn initial(&self) -> &LossReport {
        &self.series[0]
    }

    pub fn last(&self) -> &LossReport {
        self.series
            .last()
            .expect("series holds at least the initial evaluation")
    }

    /// `step,l_sc,l_seg,l_total` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l_sc,l_seg,l_total\n");
        for (i, r) in self.series.iter().enumerate() {
            out.push_str(&format!(
                "{i},{:.17e},{:.17e},{:.17e}\n",
                r.l_sc, r.l_seg, r.l_total
            ));
        }
        out
    }
}

pub fn train_toy(cfg: &TrainConfig) -> Result<TrainRun> {
    train_toy_observed(cfg, |_, _| {})
}

/// As [`train_toy`], calling `observe(step, params)` after every update.
pub fn train_toy_observed(
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &ModelParams),
) -> Result<TrainRun> {
    cfg.validate()?;
    let scenes = synth_scenes(cfg.seed, cfg.n_scenes, cfg.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a3d_5e11);
    let mut params = ModelParams::init(&cfg.model, cfg.size, cfg.size, &mut rng)?;
    let mut opt = AdamW::default();
    let schedule = CosineSchedule {
        base: cfg.lr,
        floor: 0.0,
        total: cfg.steps,
    };
    let opts = BackwardOptions {
        sc_backward: cfg.sc_backward,
        depth_seg_grad_scale: cfg.depth_seg_grad_scale,
    };
    let n = cfg.n_scenes as f64;
    let mut series = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let mut grads = params.zeros_like();
        let (mut l_sc, mut l_seg) = (0.0, 0.0);
        for sc in &scenes {
            if step < cfg.steps {
                let (out, cache) = forward_cached(
                    &sc.rgb,
                    sc.depth.tensor(),
                    Some(&sc.mask),
                    &params,
                    &cfg.model,
                )?;
                grads.add_assign(&backward(&params, &cfg.model, &cache, opts)?);
                l_sc += out.losses.l_sc;
                l_seg += out.losses.l_seg;
            } else {
                let out = forward(
                    &sc.rgb,
                    sc.depth.tensor(),
                    Some(&sc.mask),
                    &params,
                    &cfg.model,
                )?;
                l_sc += out.losses.l_sc;
                l_seg += out.losses.l_seg;
            }
        }
        let report = total_loss(l_sc / n, l_seg / n, cfg.model.effective_lambda())
            .map_err(|_| Error::Diverged { step })?;
        series.push(report);
        if step == cfg.steps {
            break;
        }
        grads.scale(1.0 / n);
        let lr = schedule.lr(step);
        opt.step(&mut params, &grads, |name| lr * cfg.lr_scale(name))?;
        observe(step, &params);
    }
    Ok(TrainRun { series, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        TrainConfig {
            n_scenes: 2,
            steps: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_series() {
        let a = train_toy(&quick()).unwrap();
        let b = train_toy(&quick()).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.params, b.params);
        assert_eq!(a.series.len(), 4);
    }

    #[test]
    fn lambda_zero_matches_disabled_sc_backward() {
        let mut cfg = quick();
        cfg.model.lambda = 0.0;
        let mut with = Vec::new();
        train_toy_observed(&cfg, |_, p| with.push(p.clone())).unwrap();
        cfg.sc_backward = false;
        let mut without = Vec::new();
        train_toy_observed(&cfg, |_, p| without.push(p.clone())).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn rejects_bad_size() {
        let cfg = TrainConfig {
            size: 40,
            ..quick()
        };
        assert!(train_toy(&cfg).is_err());
    }
}
