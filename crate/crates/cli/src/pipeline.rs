//! Single-image run: texture, diffusion, fusion and prediction, with artifacts on disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use texdiff_core::metrics::{MetricsConfig, MetricsReport};
use texdiff_core::model::{forward, ModelConfig, ModelParams};
use texdiff_core::numeric::Tensor;
use texdiff_core::texture::extract_texture;

use crate::config::RunConfig;
use crate::io::{load_depth, load_image, load_mask, save_image, write_rtf, Bundle, ImageKind};

pub const REPORT_SCHEMA: u32 = 1;

/// Fresh parameters for an `h × w` input from `seed`, or the contents of a bundle.
pub fn model_params(
    cfg: &ModelConfig,
    h: usize,
    w: usize,
    seed: u64,
    bundle: Option<&Path>,
) -> anyhow::Result<ModelParams> {
    let mut params = ModelParams::init(cfg, h, w, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if let Some(path) = bundle {
        Bundle::read(path)?.apply(params.convs_mut())?;
    }
    Ok(params)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineInputs {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: Option<PathBuf>,
    pub params: Option<PathBuf>,
}

impl PipelineInputs {
    /// Inputs named in `cfg.io`.
    pub fn from_config(cfg: &RunConfig) -> anyhow::Result<Self> {
        Ok(PipelineInputs {
            rgb: cfg.io.rgb.clone().context("no RGB input given")?,
            depth: cfg.io.depth.clone().context("no depth input given")?,
            gt: cfg.io.gt.clone(),
            params: cfg.io.params.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutputs {
    pub texture: PathBuf,
    pub enhanced: PathBuf,
    pub pred: PathBuf,
    pub report: PathBuf,
}

impl PipelineOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        PipelineOutputs {
            texture: dir.join("texture.rtf"),
            enhanced: dir.join("enhanced.rtf"),
            pred: dir.join("pred.png"),
            report: dir.join("report.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub l_sc: f64,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_seg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// `(stage, milliseconds)` in execution order.
    pub stages: Vec<(String, f64)>,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema: u32,
    pub config: RunConfig,
    pub inputs: PipelineInputs,
    pub image_size: [usize; 2],
    /// Diffusion iterations actually run; absent when the preset has no diffusion.
    pub steps_run: Option<usize>,
    pub params_hash: String,
    pub losses: LossSummary,
    pub prediction: PredictionSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricsReport>,
    pub timing: Timing,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Clock {
    start: Instant,
    last: Instant,
    stages: Vec<(String, f64)>,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Clock {
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages
            .push((stage.into(), (now - self.last).as_secs_f64() * 1e3));
        self.last = now;
    }

    fn finish(self) -> Timing {
        Timing {
            total_ms: self.start.elapsed().as_secs_f64() * 1e3,
            stages: self.stages,
        }
    }
}

/// Runs the model on one RGB-D pair and writes texture, enhanced latent, prediction and report.
pub fn run_pipeline(
    cfg: &RunConfig,
    inputs: &PipelineInputs,
    outputs: &PipelineOutputs,
) -> anyhow::Result<PipelineReport> {
    let mut clock = Clock::new();
    let model = cfg.model_config().context("stage `config`")?;

    let (x, depth, gt) = (|| -> anyhow::Result<(Tensor, Tensor, Option<Tensor>)> {
        let x = load_image(&inputs.rgb, ImageKind::Rgb8)?;
        let depth = load_depth(&inputs.depth)?;
        if (x.height(), x.width()) != (depth.height(), depth.width()) {
            bail!("RGB is {} but depth is {}", x.shape(), depth.shape());
        }
        let gt = inputs.gt.as_deref().map(load_mask).transpose()?;
        Ok((x, depth, gt))
    })()
    .context("stage `load`")?;
    let (h, w) = (x.height(), x.width());
    clock.lap("load");

    let params =
        model_params(&model, h, w, cfg.seed, inputs.params.as_deref()).context("stage `params`")?;
    let params_hash = Bundle::from_convs(params.convs()).content_hash();
    clock.lap("params");

    let texture = extract_texture(&x, &model.texture).context("stage `texture`")?;
    clock.lap("texture");

    let out = forward(&x, &depth, gt.as_ref(), &params, &model).context("stage `model`")?;
    clock.lap("model");

    let probs = &out.prediction.probabilities;
    let metrics = gt
        .as_ref()
        .map(|g| MetricsReport::binary(probs, g, MetricsConfig::default()))
        .transpose()
        .context("stage `metrics`")?;

    (|| -> anyhow::Result<()> {
        write_rtf(&outputs.texture, &texture)?;
        if let Some(e) = &out.enhanced {
            write_rtf(&outputs.enhanced, &e.latent)?;
        }
        save_image(&outputs.pred, probs, ImageKind::Depth8)?;
        Ok(())
    })()
    .context("stage `write`")?;
    clock.lap("write");

    let steps_run = match &out.enhanced {
        Some(_) => Some(params.txd.step_count()?),
        None => None,
    };
    let (lo, hi) = probs.channel_range(0);
    let report = PipelineReport {
        schema: REPORT_SCHEMA,
        config: cfg.clone(),
        inputs: inputs.clone(),
        image_size: [h, w],
        steps_run,
        params_hash,
        losses: LossSummary {
            l_sc: out.losses.l_sc,
            lambda: out.losses.lambda,
            l_seg: gt.as_ref().map(|_| out.losses.l_seg),
            l_total: gt.as_ref().map(|_| out.losses.l_total),
        },
        prediction: PredictionSummary {
            min: lo,
            max: hi,
            mean: probs.mean(),
        },
        metrics,
        timing: clock.finish(),
    };
    std::fs::write(&outputs.report, report.to_json())
        .with_context(|| format!("stage `write`: {}", outputs.report.display()))?;
    Ok(report)
}
