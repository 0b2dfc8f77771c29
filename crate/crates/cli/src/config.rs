//! Run configuration (TOML) and sweep specifications.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use texdiff_core::diffusion::{Steps, TxdConfig};
use texdiff_core::fusion::FusionManner;
use texdiff_core::grad::TrainConfig;
use texdiff_core::model::{Components, ModelConfig};
use texdiff_core::texture::TexConfig;
use texdiff_core::{Error, Result};

/// Input and output locations; every entry may be overridden on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoPaths {
    pub rgb: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Settings of `train-toy` and of the per-row training in sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n_scenes: usize,
    pub size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_host_scale: f64,
    pub lr_embed_scale: f64,
    pub depth_seg_grad_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            n_scenes: t.n_scenes,
            size: t.size,
            steps: t.steps,
            lr: t.lr,
            lr_host_scale: t.lr_host_scale,
            lr_embed_scale: t.lr_embed_scale,
            depth_seg_grad_scale: t.depth_seg_grad_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub alpha: f64,
    /// Working size `[h, w]` of the texture map and the diffusion latent.
    pub texture_size: [usize; 2],
    pub latent_dim: usize,
    pub kernel: usize,
    pub steps: Steps,
    pub lambda: f64,
    pub fusion: FusionManner,
    /// One of `baseline`, `+EB`, `+JEB`, `+TXD`, `+SC`.
    pub components: String,
    pub seed: u64,
    pub io: IoPaths,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tex = TexConfig::default();
        let txd = TxdConfig::default();
        let model = ModelConfig::default();
        RunConfig {
            alpha: tex.alpha,
            texture_size: [tex.target_h, tex.target_w],
            latent_dim: txd.latent_dim,
            kernel: txd.window,
            steps: txd.steps,
            lambda: model.lambda,
            fusion: model.fusion,
            components: "+SC".into(),
            seed: 0,
            io: IoPaths::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        RunConfig::from_toml(&text).map_err(|e| Error::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// Canonical TOML text: every key present, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let [h, w] = self.texture_size;
        let cfg = ModelConfig {
            texture: TexConfig {
                alpha: self.alpha,
                target_h: h,
                target_w: w,
            },
            txd: TxdConfig {
                latent_dim: self.latent_dim,
                window: self.kernel,
                steps: self.steps,
                latent_size: (h, w),
                ..TxdConfig::default()
            },
            fusion: self.fusion,
            lambda: self.lambda,
            components: Components::from_label(&self.components)
                .map_err(|e| Error::Config(e.to_string()))?,
            ..ModelConfig::default()
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        if cfg.txd.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if cfg.txd.window < 3 || cfg.txd.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel {} must be odd and at least 3",
                cfg.txd.window
            )));
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            n_scenes: t.n_scenes,
            size: t.size,
            steps: t.steps,
            lr: t.lr,
            seed: self.seed,
            lr_host_scale: t.lr_host_scale,
            lr_embed_scale: t.lr_embed_scale,
            depth_seg_grad_scale: t.depth_seg_grad_scale,
            sc_backward: true,
            model: self.model_config()?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// The configuration axis a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Kernel,
    Steps,
    Alpha,
    Lambda,
    Fusion,
    Components,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "kernel" => SweepParam::Kernel,
            "steps" => SweepParam::Steps,
            "alpha" => SweepParam::Alpha,
            "lambda" => SweepParam::Lambda,
            "fusion" => SweepParam::Fusion,
            "components" => SweepParam::Components,
            other => return Err(format!("unknown sweep parameter `{other}`")),
        })
    }
}

impl SweepParam {
    /// The ablation grid used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepParam::Kernel => &["3", "5", "7", "9", "11"],
            SweepParam::Steps => &["1", "3", "5"],
            SweepParam::Alpha => &["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7"],
            SweepParam::Lambda => &["0", "0.01", "0.02", "0.03", "0.04"],
            SweepParam::Fusion => &["concat", "hadamard", "add"],
            SweepParam::Components => &["baseline", "+EB", "+JEB", "+TXD", "+SC"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = |e: &dyn std::fmt::Display| {
            Error::Config(format!("{self:?} value `{value}`: {e}").to_lowercase())
        };
        let mut cfg = base.clone();
        match self {
            SweepParam::Kernel => cfg.kernel = value.parse().map_err(|e| bad(&e))?,
            SweepParam::Steps => cfg.steps = value.parse().map_err(|e: String| bad(&e))?,
            SweepParam::Alpha => cfg.alpha = value.parse().map_err(|e| bad(&e))?,
            SweepParam::Lambda => cfg.lambda = value.parse().map_err(|e| bad(&e))?,
            SweepParam::Fusion => cfg.fusion = value.parse().map_err(|e: String| bad(&e))?,
            SweepParam::Components => {
                Components::from_label(value).map_err(|e| bad(&e))?;
                cfg.components = value.to_string();
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<String>,
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn new(
        parameter: SweepParam,
        values: Option<Vec<String>>,
        base: RunConfig,
    ) -> Result<Self> {
        let spec = SweepSpec {
            parameter,
            values: values.unwrap_or_else(|| parameter.default_values()),
            base,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Values must be non-empty and each must yield a valid configuration.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        for v in &self.values {
            self.parameter.apply(&self.base, v)?.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
alpha = 0.25
texture_size = [12, 12]
kernel = 5
steps = 3
lambda = 0.01
fusion = "concat"
seed = 9

[io]
rgb = "in/rgb.png"

[train]
steps = 20
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.kernel, 5);
        assert_eq!(cfg.steps, Steps::Fixed(3));
        assert_eq!(cfg.fusion, FusionManner::Concat);
        assert_eq!(cfg.latent_dim, 24);
        assert_eq!(cfg.train.steps, 20);
        assert_eq!(cfg.train.n_scenes, 8);
        assert_eq!(cfg.io.rgb.as_deref(), Some(Path::new("in/rgb.png")));
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_round_trip() {
        for text in [SAMPLE, "", "steps = \"auto\"\ncomponents = \"+TXD\"\n"] {
            let cfg = RunConfig::from_toml(text).unwrap();
            let canon = cfg.to_toml();
            let again = RunConfig::from_toml(&canon).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(again.to_toml(), canon);
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml("alpah = 0.3").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0").is_err());
        assert!(RunConfig::from_toml("[io]\nimage = \"x\"").is_err());
    }

    #[test]
    fn out_of_range_values_are_errors() {
        for bad in [
            "alpha = 1.5",
            "kernel = 4",
            "kernel = 1",
            "lambda = -1.0",
            "fusion = \"multiply\"",
            "components = \"+XYZ\"",
            "texture_size = [0, 12]",
            "steps = \"many\"",
            "[train]\nsize = 40",
        ] {
            assert!(RunConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn model_config_mapping() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.texture.alpha, 0.25);
        assert_eq!(m.txd.window, 5);
        assert_eq!(m.txd.latent_size, (12, 12));
        assert_eq!(m.components, Components::FULL);
        let t = cfg.train_config().unwrap();
        assert_eq!((t.seed, t.steps), (9, 20));
    }

    #[test]
    fn sweep_specs() {
        let spec = SweepSpec::new(SweepParam::Kernel, None, RunConfig::default()).unwrap();
        assert_eq!(spec.values, ["3", "5", "7", "9", "11"]);
        let rows: Vec<usize> = spec
            .values
            .iter()
            .map(|v| spec.parameter.apply(&spec.base, v).unwrap().kernel)
            .collect();
        assert_eq!(rows, [3, 5, 7, 9, 11]);
        assert!(SweepSpec::new(SweepParam::Alpha, Some(vec![]), RunConfig::default()).is_err());
        assert!(SweepSpec::new(
            SweepParam::Kernel,
            Some(vec!["x".into()]),
            RunConfig::default()
        )
        .is_err());
        assert!(SweepSpec::new(
            SweepParam::Kernel,
            Some(vec!["4".into()]),
            RunConfig::default()
        )
        .is_err());
        for p in [
            SweepParam::Steps,
            SweepParam::Alpha,
            SweepParam::Lambda,
            SweepParam::Fusion,
            SweepParam::Components,
        ] {
            SweepSpec::new(p, None, RunConfig::default()).unwrap();
        }
        assert_eq!("fusion".parse::<SweepParam>().unwrap(), SweepParam::Fusion);
        assert!("depth".parse::<SweepParam>().is_err());
    }
}
