//! Texture diffusion: windowed message passing over a depth latent.
//!
//! The depth map is encoded to a `C`-channel latent at the texture map's
//! resolution. A predictor turns the texture map into `C·r²` logit maps which
//! are regrouped so that predictor channel `c·r² + j` is entry `j` of the
//! kernel for latent channel `c`, then normalized with a softmax over the `r²`
//! window. Each step replaces every latent value with the kernel-weighted sum
//! of its `r×r` neighbourhood (replicate extension at the border), so every
//! step is a convex combination and the latent obeys a maximum principle.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{
    conv2d_backward, conv2d_forward, conv_stack_backward, conv_stack_forward, resample,
    resample_backward, sigmoid, softmax_strided, softmax_strided_backward, ConvCache, ConvParams,
    Padding, ResampleMethod, Shape, StackCache, Tensor,
};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum DepthSource {
    #[default]
    Sensor,
    Estimated,
    Synthetic,
}

/// Single-channel depth with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    data: Tensor,
    pub source: DepthSource,
}

impl DepthMap {
    pub fn new(data: Tensor, source: DepthSource) -> Result<Self> {
        if data.channels() != 1 {
            return Err(Error::shape(
                "DepthMap",
                data.shape(),
                Shape::new(1, data.height(), data.width()),
            ));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "DepthMap",
                format!("value {v} outside [0, 1]"),
            ));
        }
        Ok(DepthMap { data, source })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Diffusion step count: derived from the grid and window, or pinned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "StepsRepr", into = "StepsRepr")]
pub enum Steps {
    #[default]
    Auto,
    Fixed(usize),
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
enum StepsRepr {
    Fixed(usize),
    Named(String),
}

impl TryFrom<StepsRepr> for Steps {
    type Error = String;

    fn try_from(r: StepsRepr) -> std::result::Result<Self, String> {
        match r {
            StepsRepr::Fixed(n) => Ok(Steps::Fixed(n)),
            StepsRepr::Named(s) => s.parse(),
        }
    }
}

impl From<Steps> for StepsRepr {
    fn from(s: Steps) -> Self {
        match s {
            Steps::Auto => StepsRepr::Named("auto".into()),
            Steps::Fixed(n) => StepsRepr::Fixed(n),
        }
    }
}

impl std::str::FromStr for Steps {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "auto" => Ok(Steps::Auto),
            n => n
                .parse()
                .map(Steps::Fixed)
                .map_err(|_| format!("steps must be `auto` or a count, got `{n}`")),
        }
    }
}

impl std::fmt::Display for Steps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Steps::Auto => f.write_str("auto"),
            Steps::Fixed(n) => write!(f, "{n}"),
        }
    }
}

/// Iterations needed for information to cross the whole grid:
/// `ceil(max(h, w) / floor(r / 2))`.
pub fn num_steps(h: usize, w: usize, r: usize) -> Result<usize> {
    if r < 3 || r.is_multiple_of(2) {
        return Err(Error::invalid(
            "num_steps",
            format!("window {r} must be odd and at least 3"),
        ));
    }
    Ok(h.max(w).div_ceil(r / 2))
}

/// Per-channel, per-pixel `r×r` kernels stored `[c][j][u][v]` with `j = p·r + q`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    channels: usize,
    window: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl KernelField {
    /// Softmax-normalizes `C·r²` logit maps into kernels.
    pub fn from_logits(logits: &Tensor, latent_dim: usize, window: usize) -> Result<Self> {
        let taps = window * window;
        if logits.channels() != latent_dim * taps {
            return Err(Error::shape(
                "predict_kernels",
                logits.shape(),
                Shape::new(latent_dim * taps, logits.height(), logits.width()),
            ));
        }
        let mut data = logits.data().to_vec();
        softmax_strided(&mut data, latent_dim, taps, logits.shape().plane());
        Ok(KernelField {
            channels: latent_dim,
            window,
            height: logits.height(),
            width: logits.width(),
            data,
        })
    }

    /// Every kernel entry equal to `1 / r²`.
    pub fn uniform(channels: usize, window: usize, height: usize, width: usize) -> Self {
        let taps = window * window;
        KernelField {
            channels,
            window,
            height,
            width,
            data: vec![1.0 / taps as f64; channels * taps * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, j: usize, u: usize, v: usize) -> f64 {
        let taps = self.window * self.window;
        self.data[((c * taps + j) * self.height + u) * self.width + v]
    }

    /// The `r²` weights of the kernel at `(c, u, v)`.
    pub fn kernel(&self, c: usize, u: usize, v: usize) -> Vec<f64> {
        (0..self.window * self.window)
            .map(|j| self.at(c, j, u, v))
            .collect()
    }

    fn latent_shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }
}

/// Replicate-clamped source index for window offset `t` around `center`.
#[inline]
fn clamp_index(center: usize, t: usize, half: usize, len: usize) -> usize {
    (center + t).saturating_sub(half).min(len - 1)
}

/// One message-passing iteration.
pub fn diffusion_step(latent: &Tensor, kernels: &KernelField) -> Result<Tensor> {
    latent.expect_shape(kernels.latent_shape(), "diffusion_step")?;
    let (h, w) = kernels.spatial();
    let r = kernels.window;
    let half = r / 2;
    let plane = h * w;
    let cols: Vec<Vec<usize>> = (0..r)
        .map(|b| (0..w).map(|v| clamp_index(v, b, half, w)).collect())
        .collect();
    let mut out = Tensor::zeros(latent.shape());
    for c in 0..kernels.channels {
        let src = latent.channel(c);
        let dst = out.channel_mut(c);
        for a in 0..r {
            for (b, col) in cols.iter().enumerate() {
                let j = a * r + b;
                let k = &kernels.data[(c * r * r + j) * plane..(c * r * r + j + 1) * plane];
                for u in 0..h {
                    let y = clamp_index(u, a, half, h);
                    let srow = &src[y * w..(y + 1) * w];
                    let krow = &k[u * w..(u + 1) * w];
                    for ((d, &kv), &x) in dst[u * w..(u + 1) * w].iter_mut().zip(krow).zip(col) {
                        *d += srow[x] * kv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of one step w.r.t. its input latent and its kernel entries.
pub fn diffusion_step_backward(
    latent: &Tensor,
    kernels: &KernelField,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    latent.expect_shape(kernels.latent_shape(), "diffusion_step_backward")?;
    grad_out.expect_shape(latent.shape(), "diffusion_step_backward")?;
    let (h, w) = kernels.spatial();
    let r = kernels.window;
    let half = r / 2;
    let plane = h * w;
    let mut grad_latent = Tensor::zeros(latent.shape());
    let mut grad_kernels = vec![0.0; kernels.data.len()];
    for c in 0..kernels.channels {
        let src = latent.channel(c);
        let g = grad_out.channel(c);
        let gl = grad_latent.channel_mut(c);
        for a in 0..r {
            for b in 0..r {
                let j = a * r + b;
                let off = (c * r * r + j) * plane;
                for u in 0..h {
                    let y = clamp_index(u, a, half, h);
                    for v in 0..w {
                        let x = clamp_index(v, b, half, w);
                        let gv = g[u * w + v];
                        gl[y * w + x] += gv * kernels.data[off + u * w + v];
                        grad_kernels[off + u * w + v] = gv * src[y * w + x];
                    }
                }
            }
        }
    }
    Ok((grad_latent, grad_kernels))
}

/// Shape hyperparameters of the diffusion branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TxdConfig {
    pub latent_dim: usize,
    pub window: usize,
    pub steps: Steps,
    /// Latent resolution; equals the texture map's working size.
    pub latent_size: (usize, usize),
    pub predictor_hidden: usize,
}

impl Default for TxdConfig {
    fn default() -> Self {
        TxdConfig {
            latent_dim: 24,
            window: 7,
            steps: Steps::Auto,
            latent_size: (12, 12),
            predictor_hidden: 32,
        }
    }
}

/// Learned parameters of the diffusion branch.
#[derive(Clone, Debug, PartialEq)]
pub struct TxdParams {
    /// Depth → latent, ReLU between layers, then area-resampled to `latent_size`.
    pub encoder: Vec<ConvParams>,
    /// Texture → `C·r²` kernel logits, ReLU between layers.
    pub predictor: Vec<ConvParams>,
    /// Latent → 3 channels.
    pub projector: ConvParams,
    pub window: usize,
    pub latent_dim: usize,
    pub steps: Steps,
    pub latent_size: (usize, usize),
}

impl TxdParams {
    pub fn init<R: Rng + ?Sized>(cfg: &TxdConfig, rng: &mut R) -> Result<Self> {
        let (c, r) = (cfg.latent_dim, cfg.window);
        if c == 0 || r < 3 || r % 2 == 0 {
            return Err(Error::invalid(
                "TxdParams",
                format!("latent_dim {c} must be >= 1 and window {r} odd >= 3"),
            ));
        }
        let rep = |p: ConvParams| {
            let k = p.kernel();
            p.with_padding(Padding::replicate(k / 2))
        };
        let encoder = vec![
            rep(ConvParams::he_uniform(c, 1, 3, 1.0, rng)?),
            rep(ConvParams::he_uniform(c, c, 3, 1.0, rng)?),
        ];
        // Small final-layer weights keep the first kernels close to uniform.
        let predictor = vec![
            rep(ConvParams::he_uniform(
                cfg.predictor_hidden,
                3,
                3,
                1.0,
                rng,
            )?),
            rep(ConvParams::he_uniform(
                c * r * r,
                cfg.predictor_hidden,
                1,
                0.1,
                rng,
            )?),
        ];
        let projector = rep(ConvParams::he_uniform(3, c, 3, 1.0, rng)?);
        Ok(TxdParams {
            encoder,
            predictor,
            projector,
            window: r,
            latent_dim: c,
            steps: cfg.steps,
            latent_size: cfg.latent_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let taps = self.window * self.window;
        let enc_out = self.encoder.last().map(ConvParams::out_channels);
        let pred_out = self.predictor.last().map(ConvParams::out_channels);
        if enc_out != Some(self.latent_dim) {
            return Err(Error::invalid(
                "TxdParams",
                format!(
                    "encoder ends at {enc_out:?} channels, latent_dim is {}",
                    self.latent_dim
                ),
            ));
        }
        if pred_out != Some(self.latent_dim * taps) {
            return Err(Error::invalid(
                "TxdParams",
                format!(
                    "predictor ends at {pred_out:?} channels, need {}",
                    self.latent_dim * taps
                ),
            ));
        }
        if self.projector.in_channels() != self.latent_dim || self.projector.out_channels() != 3 {
            return Err(Error::invalid(
                "TxdParams",
                "projector must map latent_dim -> 3 channels",
            ));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(
                "TxdParams",
                format!("window {} must be odd >= 3", self.window),
            ));
        }
        Ok(())
    }

    pub fn step_count(&self) -> Result<usize> {
        match self.steps {
            Steps::Fixed(n) => Ok(n),
            Steps::Auto => num_steps(self.latent_size.0, self.latent_size.1, self.window),
        }
    }

    pub fn convs(&self) -> Vec<(String, &ConvParams)> {
        let mut out = Vec::new();
        for (i, p) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}"), p));
        }
        for (i, p) in self.predictor.iter().enumerate() {
            out.push((format!("predictor.{i}"), p));
        }
        out.push(("projector".to_string(), &self.projector));
        out
    }

    pub fn convs_mut(&mut self) -> Vec<(String, &mut ConvParams)> {
        let mut out = Vec::new();
        for (i, p) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}"), p));
        }
        for (i, p) in self.predictor.iter_mut().enumerate() {
            out.push((format!("predictor.{i}"), p));
        }
        out.push(("projector".to_string(), &mut self.projector));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, p) in g.convs_mut() {
            p.clear();
        }
        g
    }
}

/// Output of the diffusion branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedDepth {
    /// Latent after the last diffusion step, `C×h×w`.
    pub latent: Tensor,
    /// Three-channel projection at the depth map's resolution.
    pub projected: Tensor,
}

pub fn encode_depth(d: &DepthMap, params: &TxdParams) -> Result<Tensor> {
    encode_forward(d.tensor(), params).map(|(t, _, _)| t)
}

fn encode_forward(depth: &Tensor, params: &TxdParams) -> Result<(Tensor, StackCache, Shape)> {
    let (full, cache) = conv_stack_forward(depth, &params.encoder, false)?;
    if full.channels() != params.latent_dim {
        return Err(Error::invalid(
            "encode_depth",
            format!(
                "encoder produced {} channels, latent_dim is {}",
                full.channels(),
                params.latent_dim
            ),
        ));
    }
    let (h, w) = params.latent_size;
    let latent = resample(&full, h, w, ResampleMethod::Area)?;
    Ok((latent, cache, full.shape()))
}

pub fn predict_kernels(xh: &Tensor, params: &TxdParams) -> Result<KernelField> {
    predict_forward(xh, params).map(|(k, _)| k)
}

fn predict_forward(xh: &Tensor, params: &TxdParams) -> Result<(KernelField, StackCache)> {
    if xh.shape().spatial() != params.latent_size {
        return Err(Error::invalid(
            "predict_kernels",
            format!(
                "texture map {} does not match latent size {:?}",
                xh.shape(),
                params.latent_size
            ),
        ));
    }
    let (logits, cache) = conv_stack_forward(xh, &params.predictor, false)?;
    let field = KernelField::from_logits(&logits, params.latent_dim, params.window)?;
    Ok((field, cache))
}

/// 3-channel conv, logistic map into `(0, 1)`, bilinear upscale.
pub fn project_and_upscale(
    latent: &Tensor,
    target_h: usize,
    target_w: usize,
    params: &TxdParams,
) -> Result<Tensor> {
    project_forward(latent, target_h, target_w, params).map(|(t, _, _)| t)
}

fn project_forward(
    latent: &Tensor,
    target_h: usize,
    target_w: usize,
    params: &TxdParams,
) -> Result<(Tensor, ConvCache, Tensor)> {
    if params.projector.out_channels() != 3 {
        return Err(Error::invalid(
            "project_and_upscale",
            "projector must output 3 channels",
        ));
    }
    let (small, cache) = conv2d_forward(latent, &params.projector)?;
    let act = small.map(sigmoid);
    let up = resample(&act, target_h, target_w, ResampleMethod::Bilinear)?;
    Ok((up, cache, act))
}

/// Everything the backward pass of the diffusion branch needs.
#[derive(Clone, Debug)]
pub struct TxdCache {
    encoder: StackCache,
    encoder_shape: Shape,
    predictor: StackCache,
    kernels: KernelField,
    /// Latent before each step, then the final latent.
    latents: Vec<Tensor>,
    projector: ConvCache,
    /// Projector output after the logistic map, before upscaling.
    projector_act: Tensor,
}

impl TxdCache {
    pub fn kernels(&self) -> &KernelField {
        &self.kernels
    }

    /// Latents at `t = 0..=S`.
    pub fn latents(&self) -> &[Tensor] {
        &self.latents
    }
}

/// Full diffusion branch with caching for backpropagation.
pub fn txd_forward(
    depth: &Tensor,
    xh: &Tensor,
    params: &TxdParams,
) -> Result<(EnhancedDepth, TxdCache)> {
    params.validate()?;
    let (latent0, encoder, encoder_shape) = encode_forward(depth, params)?;
    let (kernels, predictor) = predict_forward(xh, params)?;
    let steps = params.step_count()?;
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(latent0);
    for _ in 0..steps {
        let next = diffusion_step(latents.last().expect("seeded with latent0"), &kernels)?;
        latents.push(next);
    }
    let latent = latents.last().expect("non-empty").clone();
    let (projected, projector, projector_act) =
        project_forward(&latent, depth.height(), depth.width(), params)?;
    Ok((
        EnhancedDepth { latent, projected },
        TxdCache {
            encoder,
            encoder_shape,
            predictor,
            kernels,
            latents,
            projector,
            projector_act,
        },
    ))
}

/// Backpropagates a gradient on `projected` into every parameter of the branch.
pub fn txd_backward(
    params: &TxdParams,
    cache: &TxdCache,
    grad_projected: &Tensor,
) -> Result<TxdParams> {
    let mut grads = params.zeros_like();
    let g_act = resample_backward(
        grad_projected,
        cache.projector_act.shape(),
        ResampleMethod::Bilinear,
    )?;
    let g_small = cache
        .projector_act
        .zip_with(&g_act, "txd_backward", |s, g| g * s * (1.0 - s))?;
    let proj = conv2d_backward(&params.projector, &cache.projector, &g_small)?;
    grads.projector.accumulate(&proj);

    let mut g = proj.input;
    let mut g_kernels = vec![0.0; cache.kernels.data.len()];
    for t in (0..cache.latents.len() - 1).rev() {
        let (gl, gk) = diffusion_step_backward(&cache.latents[t], &cache.kernels, &g)?;
        for (acc, v) in g_kernels.iter_mut().zip(&gk) {
            *acc += v;
        }
        g = gl;
    }

    let k = &cache.kernels;
    let taps = k.window * k.window;
    let g_logits =
        softmax_strided_backward(&k.data, &g_kernels, k.channels, taps, k.height * k.width);
    let g_logits = Tensor::from_vec(Shape::new(k.channels * taps, k.height, k.width), g_logits)?;
    let (_, pred) = conv_stack_backward(&params.predictor, &cache.predictor, &g_logits)?;
    for (dst, src) in grads.predictor.iter_mut().zip(&pred) {
        dst.accumulate(src);
    }

    let g_full = resample_backward(&g, cache.encoder_shape, ResampleMethod::Area)?;
    let (_, enc) = conv_stack_backward(&params.encoder, &cache.encoder, &g_full)?;
    for (dst, src) in grads.encoder.iter_mut().zip(&enc) {
        dst.accumulate(src);
    }
    Ok(grads)
}

#[derive(Clone, Debug)]
pub struct DiffuseOutput {
    pub enhanced: EnhancedDepth,
    pub steps_run: usize,
    /// Latents at `t = 0..=S` when tracing was requested, otherwise empty.
    pub trace: Vec<Tensor>,
}

/// Encode, predict kernels, run the diffusion steps and project to RGB resolution.
pub fn diffuse(
    d: &DepthMap,
    xh: &Tensor,
    params: &TxdParams,
    trace: bool,
) -> Result<DiffuseOutput> {
    let (enhanced, cache) = txd_forward(d.tensor(), xh, params)?;
    let steps_run = cache.latents.len() - 1;
    Ok(DiffuseOutput {
        enhanced,
        steps_run,
        trace: if trace { cache.latents } else { Vec::new() },
    })
}
