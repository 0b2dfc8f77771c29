//! RGB-D joint embedding and adaptor injection into a host segmentation network.
//!
//! The enhanced depth is combined with the RGB image, run through a small
//! four-stage embedding backbone, decoded into a single joint embedding `E`,
//! and adapted per host layer. Injection is purely additive on the host
//! layer's input activations, so zeroed adaptors recover the host exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{
    channel_concat, conv2d_backward, conv2d_forward, conv_stack_backward, conv_stack_forward,
    relu_backward, resample, resample_backward, sigmoid, ConvCache, ConvParams, ResampleMethod,
    Shape, StackCache, Tensor,
};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum FusionManner {
    #[default]
    Add,
    Hadamard,
    Concat,
}

impl FusionManner {
    pub fn output_channels(self) -> usize {
        match self {
            FusionManner::Concat => 6,
            _ => 3,
        }
    }
}

impl std::str::FromStr for FusionManner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "add" => Ok(FusionManner::Add),
            "hadamard" => Ok(FusionManner::Hadamard),
            "concat" => Ok(FusionManner::Concat),
            other => Err(format!(
                "unknown fusion manner `{other}` (add, hadamard, concat)"
            )),
        }
    }
}

impl std::fmt::Display for FusionManner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionManner::Add => "add",
            FusionManner::Hadamard => "hadamard",
            FusionManner::Concat => "concat",
        })
    }
}

/// Joint input `Z = d_u + x`.
pub fn joint_input(d_u: &Tensor, x: &Tensor) -> Result<Tensor> {
    d_u.expect_shape(x.shape(), "joint_input")?;
    d_u.add(x)
}

/// Joint input under any of the supported fusion manners.
pub fn fuse(d_u: &Tensor, x: &Tensor, manner: FusionManner) -> Result<Tensor> {
    d_u.expect_shape(x.shape(), "fuse")?;
    match manner {
        FusionManner::Add => d_u.add(x),
        FusionManner::Hadamard => d_u.mul(x),
        FusionManner::Concat => channel_concat(&[d_u, x]).map(|(t, _)| t),
    }
}

/// Gradient of [`fuse`] with respect to `d_u`.
pub fn fuse_backward(x: &Tensor, manner: FusionManner, grad_z: &Tensor) -> Result<Tensor> {
    match manner {
        FusionManner::Add => Ok(grad_z.clone()),
        FusionManner::Hadamard => grad_z.mul(x),
        FusionManner::Concat => grad_z.slice_channels(0, x.channels()),
    }
}

/// Backbone outputs `O_1..O_4` at strides 2, 4, 8, 16.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub stages: Vec<Tensor>,
}

impl StageOutputs {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.len() != 4 {
            return Err(Error::invalid(
                "StageOutputs",
                format!("need 4 stages, got {}", stages.len()),
            ));
        }
        for pair in stages.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if b.height >= a.height || b.width >= a.width {
                return Err(Error::invalid(
                    "StageOutputs",
                    format!("resolution must decrease: {a} then {b}"),
                ));
            }
        }
        Ok(StageOutputs { stages })
    }
}

/// Four stride-2 conv + ReLU stages.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    pub stages: Vec<ConvParams>,
}

pub const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 128];

impl EmbedParams {
    pub fn init<R: Rng + ?Sized>(in_ch: usize, widths: [usize; 4], rng: &mut R) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut prev = in_ch;
        for w in widths {
            stages.push(ConvParams::he_uniform(w, prev, 3, 1.0, rng)?.with_stride(2));
            prev = w;
        }
        Ok(EmbedParams { stages })
    }
}

fn check_divisible(shape: Shape) -> Result<()> {
    if !shape.height.is_multiple_of(16)
        || !shape.width.is_multiple_of(16)
        || shape.height == 0
        || shape.width == 0
    {
        return Err(Error::invalid(
            "embed_backbone",
            format!(
                "spatial size {}x{} must be a nonzero multiple of 16",
                shape.height, shape.width
            ),
        ));
    }
    Ok(())
}

pub fn embed_backbone(z: &Tensor, params: &EmbedParams) -> Result<StageOutputs> {
    embed_forward(z, params).map(|(s, _)| s)
}

pub(crate) fn embed_forward(
    z: &Tensor,
    params: &EmbedParams,
) -> Result<(StageOutputs, Vec<StackCache>)> {
    check_divisible(z.shape())?;
    if params.stages.len() != 4 {
        return Err(Error::invalid("embed_backbone", "need exactly 4 stages"));
    }
    let mut outs = Vec::with_capacity(4);
    let mut caches = Vec::with_capacity(4);
    let mut x = z.clone();
    for stage in &params.stages {
        let (y, cache) = conv_stack_forward(&x, std::slice::from_ref(stage), true)?;
        outs.push(y.clone());
        caches.push(cache);
        x = y;
    }
    Ok((StageOutputs::new(outs)?, caches))
}

/// Takes per-stage gradients (including those flowing from later stages) back to `z`.
pub(crate) fn embed_backward(
    params: &EmbedParams,
    caches: &[StackCache],
    mut stage_grads: Vec<Tensor>,
) -> Result<(Tensor, EmbedParams)> {
    let mut grads = EmbedParams {
        stages: params.stages.iter().map(ConvParams::zeros_like).collect(),
    };
    let mut carry: Option<Tensor> = None;
    for i in (0..4).rev() {
        let mut g = std::mem::replace(&mut stage_grads[i], Tensor::zeros(Shape::new(0, 0, 0)));
        if let Some(c) = carry.take() {
            g.add_assign(&c)?;
        }
        let (gin, cg) =
            conv_stack_backward(std::slice::from_ref(&params.stages[i]), &caches[i], &g)?;
        grads.stages[i].accumulate(&cg[0]);
        carry = Some(gin);
    }
    Ok((carry.expect("four stages"), grads))
}

/// Per-stage lateral convs and the fusion conv producing `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub lateral: Vec<ConvParams>,
    pub fuse: ConvParams,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(
        widths: [usize; 4],
        lateral_width: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let lateral = widths
            .iter()
            .map(|&w| ConvParams::he_uniform(lateral_width, w, 1, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvParams::he_uniform(embed_dim, 4 * lateral_width, 3, 1.0, rng)?;
        Ok(DecoderParams { lateral, fuse })
    }
}

pub fn decode_embedding(stages: &StageOutputs, params: &DecoderParams) -> Result<Tensor> {
    decode_forward(stages, params).map(|(e, _)| e)
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderCache {
    lateral: Vec<ConvCache>,
    fuse: ConvCache,
    stage_shapes: Vec<Shape>,
    widths: Vec<usize>,
}

/// Upscale each stage to stage-1 resolution, lateral conv, concatenate, fuse.
pub(crate) fn decode_forward(
    stages: &StageOutputs,
    params: &DecoderParams,
) -> Result<(Tensor, DecoderCache)> {
    if stages.stages.len() != 4 || params.lateral.len() != 4 {
        return Err(Error::invalid(
            "decode_embedding",
            "need 4 stages and 4 lateral convs",
        ));
    }
    let (h, w) = stages.stages[0].shape().spatial();
    let mut feats = Vec::with_capacity(4);
    let mut lateral = Vec::with_capacity(4);
    for (o, conv) in stages.stages.iter().zip(&params.lateral) {
        let up = resample(o, h, w, ResampleMethod::Bilinear)?;
        let (f, cache) = conv2d_forward(&up, conv)?;
        feats.push(f);
        lateral.push(cache);
    }
    let refs: Vec<&Tensor> = feats.iter().collect();
    let (cat, _) = channel_concat(&refs)?;
    let (e, fuse) = conv2d_forward(&cat, &params.fuse)?;
    Ok((
        e,
        DecoderCache {
            lateral,
            fuse,
            stage_shapes: stages.stages.iter().map(Tensor::shape).collect(),
            widths: feats.iter().map(Tensor::channels).collect(),
        },
    ))
}

pub(crate) fn decode_backward(
    params: &DecoderParams,
    cache: &DecoderCache,
    grad_e: &Tensor,
) -> Result<(Vec<Tensor>, DecoderParams)> {
    let mut grads = DecoderParams {
        lateral: params.lateral.iter().map(ConvParams::zeros_like).collect(),
        fuse: params.fuse.zeros_like(),
    };
    let fg = conv2d_backward(&params.fuse, &cache.fuse, grad_e)?;
    grads.fuse.accumulate(&fg);
    let mut offset = 0;
    let mut stage_grads = Vec::with_capacity(4);
    for i in 0..4 {
        let gf = fg.input.slice_channels(offset, offset + cache.widths[i])?;
        offset += cache.widths[i];
        let lg = conv2d_backward(&params.lateral[i], &cache.lateral[i], &gf)?;
        grads.lateral[i].accumulate(&lg);
        stage_grads.push(resample_backward(
            &lg.input,
            cache.stage_shapes[i],
            ResampleMethod::Bilinear,
        )?);
    }
    Ok((stage_grads, grads))
}

/// One adaptor `A_i` and the host-layer input shape it targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorLayer {
    pub target: Shape,
    pub stack: Vec<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorSpec {
    pub layers: Vec<AdaptorLayer>,
}

impl AdaptorSpec {
    /// 1×1 then 3×3 conv with ReLU between, one adaptor per target; `last_gain`
    /// scales the init of the final conv (0 starts exactly at the host baseline).
    pub fn init<R: Rng + ?Sized>(
        embed_dim: usize,
        targets: &[Shape],
        last_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = targets
            .iter()
            .map(|&target| {
                Ok(AdaptorLayer {
                    target,
                    stack: vec![
                        ConvParams::he_uniform(target.channels, embed_dim, 1, 1.0, rng)?,
                        ConvParams::he_uniform(
                            target.channels,
                            target.channels,
                            3,
                            last_gain,
                            rng,
                        )?,
                    ],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptorSpec { layers })
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.stack.iter_mut().for_each(ConvParams::clear);
        }
    }
}

pub fn adapt(e: &Tensor, spec: &AdaptorSpec) -> Result<Vec<Tensor>> {
    adapt_forward(e, spec).map(|(o, _)| o)
}

pub(crate) fn adapt_forward(
    e: &Tensor,
    spec: &AdaptorSpec,
) -> Result<(Vec<Tensor>, Vec<(StackCache, Shape)>)> {
    if spec.layers.is_empty() {
        return Err(Error::invalid("adapt", "adaptor spec has no layers"));
    }
    let mut outs = Vec::with_capacity(spec.layers.len());
    let mut caches = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let (a, cache) = conv_stack_forward(e, &layer.stack, false)?;
        if a.channels() != layer.target.channels {
            return Err(Error::shape("adapt", a.shape(), layer.target));
        }
        let resized = resample(
            &a,
            layer.target.height,
            layer.target.width,
            ResampleMethod::Bilinear,
        )?;
        outs.push(resized);
        caches.push((cache, a.shape()));
    }
    Ok((outs, caches))
}

pub(crate) fn adapt_backward(
    spec: &AdaptorSpec,
    caches: &[(StackCache, Shape)],
    grads_out: &[Tensor],
) -> Result<(Tensor, AdaptorSpec)> {
    let mut grads = spec.clone();
    grads.zero();
    let mut grad_e: Option<Tensor> = None;
    for ((layer, gl), ((cache, shape), g)) in spec
        .layers
        .iter()
        .zip(&mut grads.layers)
        .zip(caches.iter().zip(grads_out))
    {
        let ga = resample_backward(g, *shape, ResampleMethod::Bilinear)?;
        let (ge, cg) = conv_stack_backward(&layer.stack, cache, &ga)?;
        for (dst, src) in gl.stack.iter_mut().zip(&cg) {
            dst.accumulate(src);
        }
        match &mut grad_e {
            Some(acc) => acc.add_assign(&ge)?,
            None => grad_e = Some(ge),
        }
    }
    Ok((grad_e.expect("at least one adaptor"), grads))
}

/// `x'_i = x_i + e_i`.
pub fn inject(x_i: &Tensor, e_i: &Tensor) -> Result<Tensor> {
    x_i.expect_shape(e_i.shape(), "inject")?;
    x_i.add(e_i)
}

/// Toy host segmentation network: conv + ReLU layers and a 1×1 logit head.
#[derive(Clone, Debug, PartialEq)]
pub struct HostNet {
    pub layers: Vec<ConvParams>,
    pub head: ConvParams,
}

impl HostNet {
    /// 3→16 (stride 2), 16→32 (stride 2), 32→32, then a 1×1 head.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Ok(HostNet {
            layers: vec![
                ConvParams::he_uniform(16, 3, 3, 1.0, rng)?.with_stride(2),
                ConvParams::he_uniform(32, 16, 3, 1.0, rng)?.with_stride(2),
                ConvParams::he_uniform(32, 32, 3, 1.0, rng)?,
            ],
            head: ConvParams::he_uniform(1, 32, 1, 1.0, rng)?,
        })
    }

    /// Input shape of every host layer for an `h × w` RGB image.
    pub fn layer_inputs(&self, h: usize, w: usize) -> Result<Vec<Shape>> {
        let mut shape = Shape::new(3, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            out.push(shape);
            shape = l.output_shape(shape)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl SegPrediction {
    pub fn from_logits(logits: Tensor) -> Self {
        let probabilities = logits.map(sigmoid);
        SegPrediction {
            logits,
            probabilities,
        }
    }
}

/// 1×1 conv to a single logit map, bilinear upscale, logistic map.
pub fn seg_head(
    features: &Tensor,
    head: &ConvParams,
    target_h: usize,
    target_w: usize,
) -> Result<SegPrediction> {
    head_forward(features, head, target_h, target_w).map(|(p, _, _)| p)
}

fn head_forward(
    features: &Tensor,
    head: &ConvParams,
    target_h: usize,
    target_w: usize,
) -> Result<(SegPrediction, ConvCache, Shape)> {
    if head.out_channels() != 1 {
        return Err(Error::invalid("seg_head", "head must produce one channel"));
    }
    let (small, cache) = conv2d_forward(features, head)?;
    let logits = resample(&small, target_h, target_w, ResampleMethod::Bilinear)?;
    Ok((SegPrediction::from_logits(logits), cache, small.shape()))
}

#[derive(Clone, Debug)]
pub(crate) struct HostCache {
    /// Input of each layer after injection.
    inputs: Vec<Tensor>,
    convs: Vec<ConvCache>,
    pre: Vec<Tensor>,
    head: ConvCache,
    head_shape: Shape,
}

/// Host forward; `injections[i]` (when given) is added to layer `i`'s input.
pub(crate) fn host_forward(
    x: &Tensor,
    net: &HostNet,
    injections: Option<&[Tensor]>,
) -> Result<(SegPrediction, HostCache)> {
    if let Some(inj) = injections {
        if inj.len() != net.layers.len() {
            return Err(Error::invalid(
                "host_forward",
                format!("{} injections for {} layers", inj.len(), net.layers.len()),
            ));
        }
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut convs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut h = x.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        if let Some(inj) = injections {
            h = inject(&h, &inj[i])?;
        }
        let (z, cache) = conv2d_forward(&h, layer)?;
        inputs.push(h);
        convs.push(cache);
        h = z.map(|v| v.max(0.0));
        pre.push(z);
    }
    let (pred, head, head_shape) = head_forward(&h, &net.head, x.height(), x.width())?;
    Ok((
        pred,
        HostCache {
            inputs,
            convs,
            pre,
            head,
            head_shape,
        },
    ))
}

/// Returns host parameter gradients and the gradient at every layer input (= injection gradient).
pub(crate) fn host_backward(
    net: &HostNet,
    cache: &HostCache,
    grad_logits: &Tensor,
) -> Result<(HostNet, Vec<Tensor>)> {
    let mut grads = HostNet {
        layers: net.layers.iter().map(ConvParams::zeros_like).collect(),
        head: net.head.zeros_like(),
    };
    let g_small = resample_backward(grad_logits, cache.head_shape, ResampleMethod::Bilinear)?;
    let hg = conv2d_backward(&net.head, &cache.head, &g_small)?;
    grads.head.accumulate(&hg);
    let mut g = hg.input;
    let mut input_grads = vec![Tensor::zeros(Shape::new(0, 0, 0)); net.layers.len()];
    for i in (0..net.layers.len()).rev() {
        g = relu_backward(&cache.pre[i], &g)?;
        let cg = conv2d_backward(&net.layers[i], &cache.convs[i], &g)?;
        grads.layers[i].accumulate(&cg);
        g = cg.input;
        input_grads[i] = g.clone();
    }
    debug_assert_eq!(cache.inputs.len(), net.layers.len());
    Ok((grads, input_grads))
}

/// Mean binary cross-entropy on logits against a `{0, 1}` mask.
pub fn seg_loss(pred: &SegPrediction, gt: &Tensor) -> Result<f64> {
    check_binary(gt)?;
    pred.logits.expect_shape(gt.shape(), "seg_loss")?;
    let n = gt.len() as f64;
    let total: f64 = pred
        .logits
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / n)
}

/// Gradient of [`seg_loss`] with respect to the logits.
pub fn seg_loss_backward(pred: &SegPrediction, gt: &Tensor) -> Result<Tensor> {
    check_binary(gt)?;
    let n = gt.len() as f64;
    pred.probabilities
        .zip_with(gt, "seg_loss_backward", |p, y| (p - y) / n)
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(
            "seg_loss",
            format!("ground truth value {v} is not 0 or 1"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(shape: Shape, seed: u64) -> Tensor {
        Tensor::random_uniform(shape, -1.0, 1.0, &mut rng(seed))
    }

    #[test]
    fn joint_input_identities() {
        let x = rand_t(Shape::new(3, 4, 4), 1);
        let d = rand_t(Shape::new(3, 4, 4), 2);
        let zero = Tensor::zeros(x.shape());
        assert_eq!(joint_input(&zero, &x).unwrap(), x);
        assert_eq!(joint_input(&d, &zero).unwrap(), d);
        assert_eq!(joint_input(&d, &x).unwrap(), joint_input(&x, &d).unwrap());
        assert!(joint_input(&d, &Tensor::zeros(Shape::new(3, 4, 5))).is_err());
    }

    #[test]
    fn fusion_manners() {
        let x = rand_t(Shape::new(3, 4, 4), 3);
        let d = rand_t(Shape::new(3, 4, 4), 4);
        assert_eq!(
            fuse(&d, &x, FusionManner::Hadamard).unwrap(),
            d.mul(&x).unwrap()
        );
        let cat = fuse(&d, &x, FusionManner::Concat).unwrap();
        assert_eq!(cat.channels(), 6);
        assert_eq!(cat.slice_channels(0, 3).unwrap(), d);
        assert_eq!(
            "hadamard".parse::<FusionManner>().unwrap(),
            FusionManner::Hadamard
        );
        assert!("sum".parse::<FusionManner>().is_err());
    }

    #[test]
    fn backbone_stride_arithmetic() {
        let params = EmbedParams::init(3, STAGE_WIDTHS, &mut rng(5)).unwrap();
        let out = embed_backbone(&rand_t(Shape::new(3, 32, 32), 6), &params).unwrap();
        let shapes: Vec<Shape> = out.stages.iter().map(Tensor::shape).collect();
        assert_eq!(
            shapes,
            vec![
                Shape::new(16, 16, 16),
                Shape::new(32, 8, 8),
                Shape::new(64, 4, 4),
                Shape::new(128, 2, 2)
            ]
        );
        assert!(embed_backbone(&rand_t(Shape::new(3, 24, 32), 7), &params).is_err());
    }

    #[test]
    fn backbone_zero_input_zero_bias() {
        let params = EmbedParams::init(3, STAGE_WIDTHS, &mut rng(8)).unwrap();
        let out = embed_backbone(&Tensor::zeros(Shape::new(3, 32, 32)), &params).unwrap();
        assert!(out.stages.iter().all(|s| s.max_abs() == 0.0));
    }

    #[test]
    fn backbone_matches_composition() {
        let params = EmbedParams::init(3, STAGE_WIDTHS, &mut rng(9)).unwrap();
        let z = rand_t(Shape::new(3, 32, 16), 10);
        let out = embed_backbone(&z, &params).unwrap();
        let mut x = z;
        for (stage, got) in params.stages.iter().zip(&out.stages) {
            x = conv2d(&x, stage).unwrap().map(|v| v.max(0.0));
            assert!(x.max_abs_diff(got) < 1e-12);
        }
    }

    #[test]
    fn decoder_shapes_and_zero() {
        let params = EmbedParams::init(3, STAGE_WIDTHS, &mut rng(11)).unwrap();
        let mut dec = DecoderParams::init(STAGE_WIDTHS, 16, 32, &mut rng(12)).unwrap();
        let stages = embed_backbone(&rand_t(Shape::new(3, 32, 32), 13), &params).unwrap();
        assert_eq!(
            decode_embedding(&stages, &dec).unwrap().shape(),
            Shape::new(32, 16, 16)
        );
        let zeros = StageOutputs::new(
            stages
                .stages
                .iter()
                .map(|s| Tensor::zeros(s.shape()))
                .collect(),
        )
        .unwrap();
        dec.lateral
            .iter_mut()
            .for_each(|l| l.bias.iter_mut().for_each(|b| *b = 0.0));
        assert_eq!(decode_embedding(&zeros, &dec).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn decoder_single_stage_by_masking() {
        let params = EmbedParams::init(3, STAGE_WIDTHS, &mut rng(14)).unwrap();
        let mut dec = DecoderParams::init(STAGE_WIDTHS, 16, 32, &mut rng(15)).unwrap();
        let stages = embed_backbone(&rand_t(Shape::new(3, 32, 32), 16), &params).unwrap();
        let keep = 2;
        for (i, l) in dec.lateral.iter_mut().enumerate() {
            if i != keep {
                l.clear();
            }
        }
        let e = decode_embedding(&stages, &dec).unwrap();
        // Fusion conv restricted to the kept block's input channels.
        let up = resample(&stages.stages[keep], 16, 16, ResampleMethod::Bilinear).unwrap();
        let f = conv2d(&up, &dec.lateral[keep]).unwrap();
        let k = 3;
        let mut sub = ConvParams::zeros(32, 16, k).unwrap();
        for o in 0..32 {
            for i in 0..16 {
                for t in 0..k * k {
                    sub.weight[(o * 16 + i) * k * k + t] =
                        dec.fuse.weight[(o * 64 + keep * 16 + i) * k * k + t];
                }
            }
        }
        sub.bias = dec.fuse.bias.clone();
        assert!(e.max_abs_diff(&conv2d(&f, &sub).unwrap()) < 1e-12);
    }

    #[test]
    fn adaptor_cases() {
        let e = rand_t(Shape::new(8, 16, 16), 17);
        let targets = [
            Shape::new(3, 32, 32),
            Shape::new(16, 16, 16),
            Shape::new(32, 8, 8),
        ];
        let mut spec = AdaptorSpec::init(8, &targets, 1.0, &mut rng(18)).unwrap();
        let outs = adapt(&e, &spec).unwrap();
        for (o, (t, layer)) in outs.iter().zip(targets.iter().zip(&spec.layers)) {
            assert_eq!(o.shape(), *t);
            let a = conv2d(
                &conv2d(&e, &layer.stack[0]).unwrap().map(|v| v.max(0.0)),
                &layer.stack[1],
            )
            .unwrap();
            let expected = resample(&a, t.height, t.width, ResampleMethod::Bilinear).unwrap();
            assert!(o.max_abs_diff(&expected) < 1e-12);
        }
        spec.zero();
        assert!(adapt(&e, &spec).unwrap().iter().all(|t| t.max_abs() == 0.0));

        let identity = AdaptorSpec {
            layers: vec![AdaptorLayer {
                target: e.shape(),
                stack: vec![ConvParams::channel_copy(8, 8).unwrap()],
            }],
        };
        assert_eq!(adapt(&e, &identity).unwrap()[0], e);

        let wrong = AdaptorSpec {
            layers: vec![AdaptorLayer {
                target: Shape::new(5, 16, 16),
                stack: vec![ConvParams::zeros(4, 8, 1).unwrap()],
            }],
        };
        assert!(adapt(&e, &wrong).is_err());
    }

    #[test]
    fn inject_is_additive_and_invertible() {
        let x = rand_t(Shape::new(4, 5, 5), 19);
        let e = rand_t(Shape::new(4, 5, 5), 20);
        let zero = Tensor::zeros(x.shape());
        assert_eq!(inject(&x, &zero).unwrap(), x);
        assert_eq!(inject(&zero, &e).unwrap(), e);
        let y = inject(&x, &e).unwrap();
        assert!(y.sub(&e).unwrap().max_abs_diff(&x) < 1e-15);
        assert!(inject(&x, &Tensor::zeros(Shape::new(4, 5, 6))).is_err());
    }

    #[test]
    fn head_and_bce() {
        let feats = Tensor::zeros(Shape::new(4, 4, 4));
        let mut head = ConvParams::zeros(1, 4, 1).unwrap();
        let p = seg_head(&feats, &head, 8, 8).unwrap();
        assert!(p.probabilities.data().iter().all(|&v| v == 0.5));
        let gt = Tensor::from_fn(Shape::new(1, 8, 8), |_, y, x| ((x + y) % 2) as f64);
        assert!((seg_loss(&p, &gt).unwrap() - 2f64.ln()).abs() < 1e-15);

        head.bias[0] = 20.0;
        let p = seg_head(&feats, &head, 8, 8).unwrap();
        assert!(p.probabilities.data().iter().all(|&v| v > 0.999));

        let confident = SegPrediction::from_logits(gt.map(|y| if y == 1.0 { 20.0 } else { -20.0 }));
        assert!(seg_loss(&confident, &gt).unwrap() < 1e-8);
        assert!(seg_loss(&confident, &gt.map(|v| v * 0.5)).is_err());
    }

    #[test]
    fn bce_matches_per_pixel_formula() {
        let logits = rand_t(Shape::new(1, 6, 6), 21).scale(4.0);
        let gt = Tensor::from_fn(logits.shape(), |_, y, x| ((3 * y + x) % 2) as f64);
        let pred = SegPrediction::from_logits(logits.clone());
        let expected: f64 = logits
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 36.0;
        assert!((seg_loss(&pred, &gt).unwrap() - expected).abs() < 1e-10);
        for (a, b) in pred.probabilities.data().iter().zip(logits.data()) {
            assert!((a - 1.0 / (1.0 + (-b).exp())).abs() < 1e-12);
        }
    }
}
