use rand::Rng;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub mode: PaddingMode,
    pub size: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        mode: PaddingMode::Zero,
        size: 0,
    };

    pub const fn zero(size: usize) -> Self {
        Padding {
            mode: PaddingMode::Zero,
            size,
        }
    }

    pub const fn replicate(size: usize) -> Self {
        Padding {
            mode: PaddingMode::Replicate,
            size,
        }
    }
}

/// Weights and geometry of one 2-D convolution.
///
/// `weight` is laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || out_ch == 0 || in_ch == 0 {
            return Err(Error::invalid(
                "ConvParams::new",
                format!(
                    "need odd kernel and nonzero channels, got k={kernel} out={out_ch} in={in_ch}"
                ),
            ));
        }
        if weight.len() != out_ch * in_ch * kernel * kernel || bias.len() != out_ch {
            return Err(Error::invalid(
                "ConvParams::new",
                format!(
                    "{} weights / {} biases for {out_ch}x{in_ch}x{kernel}x{kernel}",
                    weight.len(),
                    bias.len()
                ),
            ));
        }
        Ok(ConvParams {
            out_ch,
            in_ch,
            kernel,
            stride: 1,
            padding: Padding::zero(kernel / 2),
            weight,
            bias,
        })
    }

    /// All-zero weights and bias with "same" zero padding.
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Result<Self> {
        Self::new(
            out_ch,
            in_ch,
            kernel,
            vec![0.0; out_ch * in_ch * kernel * kernel],
            vec![0.0; out_ch],
        )
    }

    /// 1×1 convolution that copies input channel `o % in_ch` to output `o`.
    pub fn channel_copy(out_ch: usize, in_ch: usize) -> Result<Self> {
        let mut p = Self::zeros(out_ch, in_ch, 1)?;
        for o in 0..out_ch {
            p.weight[o * in_ch + o % in_ch] = 1.0;
        }
        Ok(p)
    }

    /// Centered uniform init with bound `gain * sqrt(6 / fan_in)`, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(out_ch, in_ch, kernel)?;
        let bound = gain * (6.0 / (in_ch * kernel * kernel) as f64).sqrt();
        if bound > 0.0 {
            for w in &mut p.weight {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    #[inline]
    pub fn weight_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_ch {
            return Err(Error::shape(
                "conv2d",
                input,
                Shape::new(self.in_ch, input.height, input.width),
            ));
        }
        let ph = input.height + 2 * self.padding.size;
        let pw = input.width + 2 * self.padding.size;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::invalid(
                "conv2d",
                format!("input {input} smaller than kernel {}", self.kernel),
            ));
        }
        Ok(Shape::new(
            self.out_ch,
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    /// Zeroes weights and bias in place.
    pub fn clear(&mut self) {
        self.weight.iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Adds a gradient's weight and bias parts into this parameter set.
    pub fn accumulate(&mut self, grads: &ConvGrads) {
        for (w, g) in self.weight.iter_mut().zip(&grads.weight) {
            *w += g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grads.bias) {
            *b += g;
        }
    }

    /// Same geometry, zero values.
    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.clear();
        p
    }
}

/// Forward state kept for [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    input_shape: Shape,
    padded: Vec<f64>,
    ph: usize,
    pw: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn pad_input(input: &Tensor, padding: Padding) -> (Vec<f64>, usize, usize) {
    let Shape {
        channels,
        height,
        width,
    } = input.shape();
    let p = padding.size;
    if p == 0 {
        return (input.data().to_vec(), height, width);
    }
    let (ph, pw) = (height + 2 * p, width + 2 * p);
    let mut out = vec![0.0; channels * ph * pw];
    for c in 0..channels {
        let src = input.channel(c);
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for py in 0..ph {
            let row = &mut dst[py * pw..(py + 1) * pw];
            match padding.mode {
                PaddingMode::Zero => {
                    if py >= p && py < p + height {
                        let y = py - p;
                        row[p..p + width].copy_from_slice(&src[y * width..(y + 1) * width]);
                    }
                }
                PaddingMode::Replicate => {
                    let y = py.saturating_sub(p).min(height - 1);
                    let srow = &src[y * width..(y + 1) * width];
                    for (px, v) in row.iter_mut().enumerate() {
                        *v = srow[px.saturating_sub(p).min(width - 1)];
                    }
                }
            }
        }
    }
    (out, ph, pw)
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_forward(input, params).map(|(out, _)| out)
}

/// Convolution that also returns the state needed for the backward pass.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<(Tensor, ConvCache)> {
    let out_shape = params.output_shape(input.shape())?;
    let (padded, ph, pw) = pad_input(input, params.padding);
    let (oh, ow) = out_shape.spatial();
    let (k, s) = (params.kernel, params.stride);
    let mut out = Tensor::zeros(out_shape);
    for o in 0..params.out_ch {
        let plane = out.channel_mut(o);
        plane.iter_mut().for_each(|v| *v = params.bias[o]);
        for i in 0..params.in_ch {
            let src = &padded[i * ph * pw..(i + 1) * ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let w = params.weight_at(o, i, ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let srow = &src[(oy * s + ky) * pw..(oy * s + ky + 1) * pw];
                        let drow = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            for (d, &v) in drow.iter_mut().zip(&srow[kx..kx + ow]) {
                                *d += w * v;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += w * srow[ox * s + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        out,
        ConvCache {
            input_shape: input.shape(),
            padded,
            ph,
            pw,
        },
    ))
}

pub fn conv2d_backward(
    params: &ConvParams,
    cache: &ConvCache,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let out_shape = params.output_shape(cache.input_shape)?;
    grad_out.expect_shape(out_shape, "conv2d_backward")?;
    let (oh, ow) = out_shape.spatial();
    let (k, s) = (params.kernel, params.stride);
    let (ph, pw) = (cache.ph, cache.pw);

    let mut grad_w = vec![0.0; params.weight.len()];
    let mut grad_b = vec![0.0; params.out_ch];
    let mut grad_padded = vec![0.0; params.in_ch * ph * pw];

    for o in 0..params.out_ch {
        let g = grad_out.channel(o);
        grad_b[o] = g.iter().sum();
        for i in 0..params.in_ch {
            let src = &cache.padded[i * ph * pw..(i + 1) * ph * pw];
            let gsrc = &mut grad_padded[i * ph * pw..(i + 1) * ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((o * params.in_ch + i) * k + ky) * k + kx;
                    let w = params.weight[wi];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let base = (oy * s + ky) * pw;
                        let grow = &g[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let srow = &src[base + kx..base + kx + ow];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            if w != 0.0 {
                                let drow = &mut gsrc[base + kx..base + kx + ow];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += w * gv;
                                }
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                let idx = base + ox * s + kx;
                                acc += gv * src[idx];
                                gsrc[idx] += w * gv;
                            }
                        }
                    }
                    grad_w[wi] = acc;
                }
            }
        }
    }

    let input = unpad_grad(&grad_padded, cache.input_shape, ph, pw, params.padding);
    Ok(ConvGrads {
        input,
        weight: grad_w,
        bias: grad_b,
    })
}

fn unpad_grad(grad_padded: &[f64], shape: Shape, ph: usize, pw: usize, padding: Padding) -> Tensor {
    let p = padding.size;
    let (h, w) = shape.spatial();
    let mut out = Tensor::zeros(shape);
    for c in 0..shape.channels {
        let src = &grad_padded[c * ph * pw..(c + 1) * ph * pw];
        let dst = out.channel_mut(c);
        match padding.mode {
            PaddingMode::Zero => {
                for y in 0..h {
                    dst[y * w..(y + 1) * w]
                        .copy_from_slice(&src[(y + p) * pw + p..(y + p) * pw + p + w]);
                }
            }
            PaddingMode::Replicate => {
                for py in 0..ph {
                    let y = py.saturating_sub(p).min(h - 1);
                    for px in 0..pw {
                        let x = px.saturating_sub(p).min(w - 1);
                        dst[y * w + x] += src[py * pw + px];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops straight from the definition.
    fn conv_reference(input: &Tensor, p: &ConvParams) -> Tensor {
        let shape = p.output_shape(input.shape()).unwrap();
        let pad = p.padding.size as isize;
        let (h, w) = (input.height() as isize, input.width() as isize);
        Tensor::from_fn(shape, |o, oy, ox| {
            let mut acc = p.bias[o];
            for i in 0..p.in_channels() {
                for ky in 0..p.kernel() {
                    for kx in 0..p.kernel() {
                        let y = (oy * p.stride + ky) as isize - pad;
                        let x = (ox * p.stride + kx) as isize - pad;
                        let v = match p.padding.mode {
                            PaddingMode::Zero => {
                                if y < 0 || x < 0 || y >= h || x >= w {
                                    0.0
                                } else {
                                    input.at(i, y as usize, x as usize)
                                }
                            }
                            PaddingMode::Replicate => {
                                input.at(i, y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize)
                            }
                        };
                        acc += p.weight_at(o, i, ky, kx) * v;
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let input = Tensor::full(Shape::new(1, 3, 3), 1.0);
        let p = ConvParams::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.at(0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0), 4.0);
        assert_eq!(out.at(0, 2, 2), 4.0);
        assert_eq!(out.at(0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::random_uniform(Shape::new(1, 6, 5), -2.0, 2.0, &mut rng);
        let p = ConvParams::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d(&input, &p).unwrap(), input);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::random_uniform(Shape::new(2, 5, 5), -1.0, 1.0, &mut rng);
        for (stride, padding) in [
            (1, Padding::zero(1)),
            (1, Padding::replicate(1)),
            (2, Padding::zero(1)),
            (2, Padding::replicate(2)),
            (1, Padding::NONE),
        ] {
            let p = ConvParams::he_uniform(3, 2, 3, 1.0, &mut rng)
                .unwrap()
                .with_stride(stride)
                .with_padding(padding);
            let mut p = p;
            p.bias = vec![0.1, -0.2, 0.3];
            let fast = conv2d(&input, &p).unwrap();
            let slow = conv_reference(&input, &p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(
                fast.max_abs_diff(&slow) < 1e-12,
                "stride {stride} {padding:?}"
            );
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(Shape::new(2, 4, 4));
        let p = ConvParams::zeros(1, 3, 3).unwrap();
        let err = conv2d(&input, &p).unwrap_err().to_string();
        assert!(err.contains("2x4x4") && err.contains("3x4x4"), "{err}");
    }

    #[test]
    fn rejects_even_kernel() {
        assert!(ConvParams::zeros(1, 1, 2).is_err());
    }

    #[test]
    fn unpadded_input_smaller_than_kernel_errors() {
        let input = Tensor::zeros(Shape::new(1, 2, 2));
        let p = ConvParams::zeros(1, 1, 3)
            .unwrap()
            .with_padding(Padding::NONE);
        assert!(conv2d(&input, &p).is_err());
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::random_uniform(Shape::new(1, 4, 4), -1.0, 1.0, &mut rng);
        let p = ConvParams::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        let (_, cache) = conv2d_forward(&input, &p).unwrap();
        let g = Tensor::random_uniform(input.shape(), -1.0, 1.0, &mut rng);
        let grads = conv2d_backward(&p, &cache, &g).unwrap();
        assert_eq!(grads.input, g);
    }

    proptest::proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape::new(2, 6, 7);
            let x = Tensor::random_uniform(shape, -1.0, 1.0, &mut rng);
            let y = Tensor::random_uniform(shape, -1.0, 1.0, &mut rng);
            let p = ConvParams::he_uniform(3, 2, 3, 1.0, &mut rng).unwrap()
                .with_padding(Padding::replicate(1));
            let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &p).unwrap();
            let rhs = conv2d(&x, &p).unwrap().scale(a).add(&conv2d(&y, &p).unwrap().scale(b)).unwrap();
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn identity_kernel_identity_for_any_input(seed in 0u64..1000, c in 1usize..4, h in 1usize..9, w in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::random_uniform(Shape::new(c, h, w), -5.0, 5.0, &mut rng);
            let mut p = ConvParams::zeros(c, c, 1).unwrap();
            for i in 0..c {
                p.weight[i * c + i] = 1.0;
            }
            proptest::prop_assert_eq!(conv2d(&x, &p).unwrap(), x);
        }
    }
}
