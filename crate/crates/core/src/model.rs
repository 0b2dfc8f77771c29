//! The assembled network: texture extraction, diffusion branch, joint
//! embedding with adaptors, and the host segmentation network, with a full
//! reverse pass for the total loss.

use rand::Rng;

use crate::consistency::{sc_loss, sc_loss_backward, total_loss, LossReport, SsimParams};
use crate::diffusion::{txd_backward, txd_forward, EnhancedDepth, TxdCache, TxdConfig, TxdParams};
use crate::error::{Error, Result};
use crate::fusion::{
    adapt_backward, adapt_forward, decode_backward, decode_forward, embed_backward, embed_forward,
    fuse, fuse_backward, host_backward, host_forward, seg_loss, seg_loss_backward, AdaptorSpec,
    DecoderCache, DecoderParams, EmbedParams, FusionManner, HostCache, HostNet, SegPrediction,
    STAGE_WIDTHS,
};
use crate::numeric::{ConvParams, Shape, StackCache, Tensor};
use crate::texture::{extract_texture, TexConfig};

/// Which parts of the model are active; the five presets stack cumulatively.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Components {
    /// Embedding backbone and adaptors (RGB only unless depth is joined).
    pub embedding: bool,
    /// Raw depth joined with RGB before embedding.
    pub joint_depth: bool,
    /// Depth replaced by the texture-diffused projection.
    pub diffusion: bool,
    /// Structural-consistency term in the loss.
    pub consistency: bool,
}

impl Components {
    pub const BASELINE: Components = Components {
        embedding: false,
        joint_depth: false,
        diffusion: false,
        consistency: false,
    };
    pub const FULL: Components = Components {
        embedding: true,
        joint_depth: true,
        diffusion: true,
        consistency: true,
    };

    /// `baseline`, `+EB`, `+JEB`, `+TXD`, `+SC` in stacking order.
    pub fn ladder() -> Vec<(&'static str, Components)> {
        let mut c = Components::BASELINE;
        let mut out = vec![("baseline", c)];
        c.embedding = true;
        out.push(("+EB", c));
        c.joint_depth = true;
        out.push(("+JEB", c));
        c.diffusion = true;
        out.push(("+TXD", c));
        c.consistency = true;
        out.push(("+SC", c));
        out
    }

    pub fn from_label(label: &str) -> Result<Components> {
        Components::ladder()
            .into_iter()
            .find(|(name, _)| {
                name.eq_ignore_ascii_case(label)
                    || name.trim_start_matches('+').eq_ignore_ascii_case(label)
            })
            .map(|(_, c)| c)
            .ok_or_else(|| Error::invalid("components", format!("unknown preset `{label}`")))
    }
}

impl Default for Components {
    fn default() -> Self {
        Components::FULL
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub texture: TexConfig,
    pub txd: TxdConfig,
    pub fusion: FusionManner,
    pub lambda: f64,
    pub ssim: SsimParams,
    /// Channel width of the joint embedding `E`.
    pub embed_dim: usize,
    /// Width of each per-stage lateral conv in the decoder.
    pub lateral_width: usize,
    /// Init gain of each adaptor's final conv.
    pub adaptor_gain: f64,
    pub components: Components,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            texture: TexConfig::default(),
            txd: TxdConfig::default(),
            fusion: FusionManner::Add,
            lambda: 0.02,
            ssim: SsimParams::default(),
            embed_dim: 32,
            lateral_width: 16,
            adaptor_gain: 0.0,
            components: Components::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.texture.validate()?;
        self.ssim.validate()?;
        if (self.texture.target_h, self.texture.target_w) != self.txd.latent_size {
            return Err(Error::invalid(
                "ModelConfig",
                format!(
                    "texture size {}x{} must equal latent size {:?}",
                    self.texture.target_h, self.texture.target_w, self.txd.latent_size
                ),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(
                "ModelConfig",
                format!("lambda {} must be finite and >= 0", self.lambda),
            ));
        }
        if self.embed_dim == 0 || self.lateral_width == 0 {
            return Err(Error::invalid(
                "ModelConfig",
                "embed_dim and lateral_width must be positive",
            ));
        }
        Ok(())
    }

    /// Weight actually applied to the consistency term.
    pub fn effective_lambda(&self) -> f64 {
        if self.components.consistency && self.components.diffusion {
            self.lambda
        } else {
            0.0
        }
    }
}

/// All learned parameters, sized for one input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub txd: TxdParams,
    pub embed: EmbedParams,
    pub decoder: DecoderParams,
    pub adaptors: AdaptorSpec,
    pub host: HostNet,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let host = HostNet::init(rng)?;
        let txd = TxdParams::init(&cfg.txd, rng)?;
        let embed = EmbedParams::init(cfg.fusion.output_channels(), STAGE_WIDTHS, rng)?;
        let decoder = DecoderParams::init(STAGE_WIDTHS, cfg.lateral_width, cfg.embed_dim, rng)?;
        let adaptors = AdaptorSpec::init(
            cfg.embed_dim,
            &host.layer_inputs(h, w)?,
            cfg.adaptor_gain,
            rng,
        )?;
        Ok(ModelParams {
            txd,
            embed,
            decoder,
            adaptors,
            host,
        })
    }

    /// Every conv with a stable dotted name; the order is fixed.
    pub fn convs(&self) -> Vec<(String, &ConvParams)> {
        let mut out: Vec<(String, &ConvParams)> = self
            .txd
            .convs()
            .into_iter()
            .map(|(n, p)| (format!("txd.{n}"), p))
            .collect();
        for (i, p) in self.embed.stages.iter().enumerate() {
            out.push((format!("embed.stage{i}"), p));
        }
        for (i, p) in self.decoder.lateral.iter().enumerate() {
            out.push((format!("decoder.lateral{i}"), p));
        }
        out.push(("decoder.fuse".into(), &self.decoder.fuse));
        for (i, l) in self.adaptors.layers.iter().enumerate() {
            for (j, p) in l.stack.iter().enumerate() {
                out.push((format!("adaptor{i}.{j}"), p));
            }
        }
        for (i, p) in self.host.layers.iter().enumerate() {
            out.push((format!("host.layer{i}"), p));
        }
        out.push(("host.head".into(), &self.host.head));
        out
    }

    pub fn convs_mut(&mut self) -> Vec<(String, &mut ConvParams)> {
        let mut out: Vec<(String, &mut ConvParams)> = self
            .txd
            .convs_mut()
            .into_iter()
            .map(|(n, p)| (format!("txd.{n}"), p))
            .collect();
        for (i, p) in self.embed.stages.iter_mut().enumerate() {
            out.push((format!("embed.stage{i}"), p));
        }
        for (i, p) in self.decoder.lateral.iter_mut().enumerate() {
            out.push((format!("decoder.lateral{i}"), p));
        }
        out.push(("decoder.fuse".into(), &mut self.decoder.fuse));
        for (i, l) in self.adaptors.layers.iter_mut().enumerate() {
            for (j, p) in l.stack.iter_mut().enumerate() {
                out.push((format!("adaptor{i}.{j}"), p));
            }
        }
        for (i, p) in self.host.layers.iter_mut().enumerate() {
            out.push((format!("host.layer{i}"), p));
        }
        out.push(("host.head".into(), &mut self.host.head));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, p) in g.convs_mut() {
            p.clear();
        }
        g
    }

    /// Adds `other` into `self`, conv by conv.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, dst), (_, src)) in self.convs_mut().into_iter().zip(other.convs()) {
            dst.weight
                .iter_mut()
                .zip(&src.weight)
                .for_each(|(a, b)| *a += b);
            dst.bias
                .iter_mut()
                .zip(&src.bias)
                .for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, p) in self.convs_mut() {
            p.weight
                .iter_mut()
                .chain(p.bias.iter_mut())
                .for_each(|v| *v *= s);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.convs()
            .iter()
            .map(|(_, p)| p.weight.len() + p.bias.len())
            .sum()
    }
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Texture map at the working size (present when diffusion is active).
    pub texture: Option<Tensor>,
    pub enhanced: Option<EnhancedDepth>,
    /// Depth signal joined with RGB, `3×H×W`.
    pub depth_rgb: Option<Tensor>,
    pub prediction: SegPrediction,
    /// Loss terms; `l_seg` is 0 when no ground truth was supplied.
    pub losses: LossReport,
}

#[derive(Clone, Debug)]
struct EmbedCache {
    stages: Vec<StackCache>,
    decoder: DecoderCache,
    adaptors: Vec<(StackCache, Shape)>,
}

/// State kept by [`forward_cached`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ModelCache {
    components: Components,
    x: Tensor,
    gt: Option<Tensor>,
    depth_rgb: Option<Tensor>,
    txd: Option<TxdCache>,
    embed: Option<EmbedCache>,
    host: HostCache,
    prediction: SegPrediction,
}

fn replicate3(d: &Tensor) -> Result<Tensor> {
    if d.channels() != 1 {
        return Err(Error::invalid(
            "depth",
            format!("expected a 1-channel depth map, got {}", d.shape()),
        ));
    }
    let mut data = Vec::with_capacity(3 * d.len());
    for _ in 0..3 {
        data.extend_from_slice(d.data());
    }
    Tensor::from_vec(Shape::new(3, d.height(), d.width()), data)
}

/// Forward pass without retaining intermediate state.
pub fn forward(
    x: &Tensor,
    depth: &Tensor,
    gt: Option<&Tensor>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    forward_cached(x, depth, gt, params, cfg).map(|(o, _)| o)
}

pub fn forward_cached(
    x: &Tensor,
    depth: &Tensor,
    gt: Option<&Tensor>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(ForwardOutput, ModelCache)> {
    cfg.validate()?;
    let comps = cfg.components;
    if x.channels() != 3 {
        return Err(Error::invalid(
            "forward",
            format!("expected RGB input, got {}", x.shape()),
        ));
    }
    if depth.shape() != Shape::new(1, x.height(), x.width()) {
        return Err(Error::shape("forward", x.shape(), depth.shape()));
    }

    let mut texture = None;
    let mut enhanced = None;
    let mut txd_cache = None;
    let depth_rgb = if comps.diffusion {
        let xh = extract_texture(x, &cfg.texture)?;
        let (e, cache) = txd_forward(depth, &xh, &params.txd)?;
        let projected = e.projected.clone();
        texture = Some(xh);
        enhanced = Some(e);
        txd_cache = Some(cache);
        Some(projected)
    } else if comps.joint_depth {
        Some(replicate3(depth)?)
    } else {
        None
    };

    let mut embed_cache = None;
    let injections = if comps.embedding {
        let z = match (&depth_rgb, cfg.fusion) {
            (Some(d), manner) => fuse(d, x, manner)?,
            (None, FusionManner::Concat) => {
                fuse(&Tensor::zeros(x.shape()), x, FusionManner::Concat)?
            }
            (None, _) => x.clone(),
        };
        let (stages, stage_caches) = embed_forward(&z, &params.embed)?;
        let (e, decoder) = decode_forward(&stages, &params.decoder)?;
        let (outs, adaptors) = adapt_forward(&e, &params.adaptors)?;
        embed_cache = Some(EmbedCache {
            stages: stage_caches,
            decoder,
            adaptors,
        });
        Some(outs)
    } else {
        None
    };

    let (prediction, host) = host_forward(x, &params.host, injections.as_deref())?;

    let l_sc = match &depth_rgb {
        Some(d) if comps.diffusion => sc_loss(d, x, &cfg.ssim)?,
        _ => 0.0,
    };
    let l_seg = match gt {
        Some(g) => seg_loss(&prediction, g)?,
        None => 0.0,
    };
    let losses = total_loss(l_sc, l_seg, cfg.effective_lambda())?;

    let cache = ModelCache {
        components: comps,
        x: x.clone(),
        gt: gt.cloned(),
        depth_rgb: depth_rgb.clone(),
        txd: txd_cache,
        embed: embed_cache,
        host,
        prediction: prediction.clone(),
    };
    Ok((
        ForwardOutput {
            texture,
            enhanced,
            depth_rgb,
            prediction,
            losses,
        },
        cache,
    ))
}

/// Settings of the reverse pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardOptions {
    /// When false the consistency term is dropped from the gradient entirely.
    pub sc_backward: bool,
    /// Multiplier on the segmentation gradient entering the diffusion branch through the fusion.
    /// 1 gives the exact gradient of `l_total`.
    pub depth_seg_grad_scale: f64,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            sc_backward: true,
            depth_seg_grad_scale: 1.0,
        }
    }
}

/// Gradient of `l_total` with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &ModelCache,
    opts: BackwardOptions,
) -> Result<ModelParams> {
    if cache.components != cfg.components {
        return Err(Error::invalid(
            "backward",
            "cache was produced with different components",
        ));
    }
    let gt = cache
        .gt
        .as_ref()
        .ok_or(Error::MissingCache("ground truth"))?;
    let mut grads = params.zeros_like();

    let g_logits = seg_loss_backward(&cache.prediction, gt)?;
    let (host_g, inj_g) = host_backward(&params.host, &cache.host, &g_logits)?;
    grads.host = host_g;

    let mut g_depth_rgb: Option<Tensor> = None;
    if cfg.components.embedding {
        let ec = cache
            .embed
            .as_ref()
            .ok_or(Error::MissingCache("embedding"))?;
        let (g_e, ad_g) = adapt_backward(&params.adaptors, &ec.adaptors, &inj_g)?;
        grads.adaptors = ad_g;
        let (stage_g, dec_g) = decode_backward(&params.decoder, &ec.decoder, &g_e)?;
        grads.decoder = dec_g;
        let (g_z, emb_g) = embed_backward(&params.embed, &ec.stages, stage_g)?;
        grads.embed = emb_g;
        if cfg.components.diffusion {
            let scale = opts.depth_seg_grad_scale;
            g_depth_rgb = Some(fuse_backward(&cache.x, cfg.fusion, &g_z)?.map(|v| v * scale));
        }
    }

    if cfg.components.diffusion {
        let d = cache
            .depth_rgb
            .as_ref()
            .ok_or(Error::MissingCache("enhanced depth"))?;
        let lambda = cfg.effective_lambda();
        let mut g = g_depth_rgb.unwrap_or_else(|| Tensor::zeros(d.shape()));
        if opts.sc_backward {
            let g_sc = sc_loss_backward(d, &cache.x, &cfg.ssim)?;
            g = g.zip_with(&g_sc, "backward", |a, b| a + lambda * b)?;
        }
        let tc = cache.txd.as_ref().ok_or(Error::MissingCache("diffusion"))?;
        grads.txd = txd_backward(&params.txd, tc, &g)?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(components: Components) -> ModelConfig {
        let mut cfg = ModelConfig {
            components,
            ..ModelConfig::default()
        };
        cfg.txd.latent_dim = 4;
        cfg.txd.window = 3;
        cfg.txd.predictor_hidden = 4;
        cfg.txd.latent_size = (8, 8);
        cfg.texture.target_h = 8;
        cfg.texture.target_w = 8;
        cfg.embed_dim = 8;
        cfg.lateral_width = 4;
        cfg
    }

    fn inputs(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::random_uniform(Shape::new(3, 32, 32), 0.0, 1.0, &mut rng);
        let d = Tensor::random_uniform(Shape::new(1, 32, 32), 0.0, 1.0, &mut rng);
        let gt = Tensor::from_fn(Shape::new(1, 32, 32), |_, y, x| {
            ((y / 8 + x / 8) % 2) as f64
        });
        (x, d, gt)
    }

    #[test]
    fn ladder_is_cumulative() {
        let ladder = Components::ladder();
        assert_eq!(ladder.len(), 5);
        assert_eq!(ladder[0].1, Components::BASELINE);
        assert_eq!(ladder[4].1, Components::FULL);
        assert_eq!(Components::from_label("txd").unwrap(), ladder[3].1);
        assert!(Components::from_label("xyz").is_err());
    }

    #[test]
    fn shape_contract_for_every_preset() {
        let (x, d, gt) = inputs(1);
        for (_, comps) in Components::ladder() {
            let cfg = small_cfg(comps);
            let params =
                ModelParams::init(&cfg, 32, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let out = forward(&x, &d, Some(&gt), &params, &cfg).unwrap();
            assert_eq!(out.prediction.probabilities.shape(), Shape::new(1, 32, 32));
            assert!(out.losses.l_total.is_finite());
        }
    }

    #[test]
    fn zeroed_adaptors_recover_baseline() {
        let (x, d, _) = inputs(3);
        let cfg = small_cfg(Components::FULL);
        let mut params =
            ModelParams::init(&cfg, 32, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        params.adaptors.zero();
        let full = forward(&x, &d, None, &params, &cfg).unwrap();
        let base = forward(&x, &d, None, &params, &small_cfg(Components::BASELINE)).unwrap();
        assert_eq!(full.prediction, base.prediction);
    }

    #[test]
    fn backward_requires_ground_truth() {
        let (x, d, _) = inputs(5);
        let cfg = small_cfg(Components::FULL);
        let params = ModelParams::init(&cfg, 32, 32, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (_, cache) = forward_cached(&x, &d, None, &params, &cfg).unwrap();
        assert!(matches!(
            backward(&params, &cfg, &cache, BackwardOptions::default()),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_difference_on_a_few_entries() {
        let (x, d, gt) = inputs(7);
        let mut cfg = small_cfg(Components::FULL);
        cfg.lambda = 0.5;
        let params = ModelParams::init(&cfg, 32, 32, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (_, cache) = forward_cached(&x, &d, Some(&gt), &params, &cfg).unwrap();
        let grads = backward(&params, &cfg, &cache, BackwardOptions::default()).unwrap();
        let loss = |p: &ModelParams| forward(&x, &d, Some(&gt), p, &cfg).unwrap().losses.l_total;
        let eps = 1e-5;
        let names: Vec<String> = params.convs().into_iter().map(|(n, _)| n).collect();
        for (idx, name) in names.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.convs_mut()[idx].1.weight[0] += eps;
            minus.convs_mut()[idx].1.weight[0] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let analytic = grads.convs()[idx].1.weight[0];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}: analytic {analytic} numeric {numeric}");
        }
    }
}
