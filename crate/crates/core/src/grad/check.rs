use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{ssim, ssim_backward, SsimParams};
use crate::diffusion::{diffusion_step, diffusion_step_backward, KernelField};
use crate::error::{Error, Result};
use crate::fusion::{seg_loss, seg_loss_backward, SegPrediction};
use crate::model::{backward, forward, forward_cached, BackwardOptions, ModelConfig, ModelParams};
use crate::numeric::{
    conv2d, conv2d_backward, conv2d_forward, resample, resample_backward, softmax_axis,
    softmax_axis_backward, softmax_strided_backward, ConvParams, Padding, ResampleMethod, Shape,
    Tensor,
};

/// Central differences of `f` at `x` for every coordinate.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    let all: Vec<usize> = (0..x.len()).collect();
    let vals = finite_diff_at(|t| f(t), x, epsilon, &all)?;
    Tensor::from_vec(x.shape(), vals)
}

/// Central differences of `f` at `x` for the listed flat coordinates only.
pub fn finite_diff_at(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    epsilon: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} max_rel_err={:.3e} samples={:<4} eps={:.0e} tol={:.0e} {}",
            self.op_name,
            self.max_rel_err,
            self.samples,
            self.epsilon,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub const EPSILON: f64 = 1e-5;
pub const SAMPLES_PER_TENSOR: usize = 16;

/// Registered operator names, in run order.
pub const OPS: [&str; 8] = [
    "conv2d",
    "diffusion_step",
    "diffusion_unrolled",
    "softmax",
    "resample",
    "ssim",
    "bce",
    "end_to_end",
];

fn tolerance(op: &str) -> f64 {
    match op {
        "ssim" | "bce" | "softmax" => 1e-4,
        _ => 1e-3,
    }
}

/// Accumulates per-coordinate comparisons for one operator.
struct Checker {
    max_rel: f64,
    samples: usize,
    rng: ChaCha8Rng,
}

impl Checker {
    fn new(seed: u64) -> Self {
        Checker {
            max_rel: 0.0,
            samples: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn pick(&mut self, len: usize, n: usize) -> Vec<usize> {
        sample(&mut self.rng, len, n.min(len)).into_vec()
    }

    /// Compares `analytic` against finite differences of `f` at sampled coordinates of `x`.
    fn tensor(
        &mut self,
        f: impl Fn(&Tensor) -> Result<f64>,
        x: &Tensor,
        analytic: &[f64],
        n: usize,
    ) -> Result<()> {
        let coords = self.pick(x.len(), n);
        let numeric = finite_diff_at(f, x, EPSILON, &coords)?;
        for (&i, nv) in coords.iter().zip(numeric) {
            self.max_rel = self.max_rel.max(relative_error(analytic[i], nv));
            self.samples += 1;
        }
        Ok(())
    }

    fn finish(self, op: &str) -> GradCheckReport {
        let tol = tolerance(op);
        GradCheckReport {
            op_name: op.to_string(),
            max_rel_err: self.max_rel,
            samples: self.samples,
            epsilon: EPSILON,
            tolerance: tol,
            passed: self.max_rel <= tol && self.samples >= SAMPLES_PER_TENSOR,
        }
    }
}

fn rand_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

/// Scalar probe `Σ g ⊙ y`, whose gradient is the backward pass applied to `g`.
fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_weights_tensor(p: &ConvParams) -> Tensor {
    Tensor::from_vec(Shape::new(1, 1, p.weight.len()), p.weight.clone()).expect("length matches")
}

fn bias_tensor(p: &ConvParams) -> Tensor {
    Tensor::from_vec(Shape::new(1, 1, p.bias.len()), p.bias.clone()).expect("length matches")
}

fn check_conv(c: &mut Checker) -> Result<()> {
    let variants = [
        (1, Padding::zero(1), 3),
        (2, Padding::replicate(1), 3),
        (1, Padding::replicate(2), 5),
        (2, Padding::NONE, 1),
    ];
    for (stride, padding, k) in variants {
        let x = rand_tensor(Shape::new(2, 7, 6), &mut c.rng);
        let mut p = ConvParams::zeros(3, 2, k)?
            .with_stride(stride)
            .with_padding(padding);
        p.weight
            .iter_mut()
            .for_each(|w| *w = c.rng.gen_range(-1.0..1.0));
        p.bias
            .iter_mut()
            .for_each(|b| *b = c.rng.gen_range(-1.0..1.0));
        let (y, cache) = conv2d_forward(&x, &p)?;
        let g = rand_tensor(y.shape(), &mut c.rng);
        let grads = conv2d_backward(&p, &cache, &g)?;

        c.tensor(
            |t| Ok(dot(&conv2d(t, &p)?, &g)),
            &x,
            grads.input.data(),
            SAMPLES_PER_TENSOR,
        )?;
        let with_weights = |t: &Tensor| {
            let mut q = p.clone();
            q.weight.copy_from_slice(t.data());
            Ok(dot(&conv2d(&x, &q)?, &g))
        };
        c.tensor(
            with_weights,
            &conv_weights_tensor(&p),
            &grads.weight,
            SAMPLES_PER_TENSOR,
        )?;
        let with_bias = |t: &Tensor| {
            let mut q = p.clone();
            q.bias.copy_from_slice(t.data());
            Ok(dot(&conv2d(&x, &q)?, &g))
        };
        c.tensor(with_bias, &bias_tensor(&p), &grads.bias, SAMPLES_PER_TENSOR)?;
    }
    Ok(())
}

/// `steps` diffusion iterations with kernels normalized from `logits`.
fn unrolled(
    latent: &Tensor,
    logits: &Tensor,
    channels: usize,
    r: usize,
    steps: usize,
) -> Result<Tensor> {
    let k = KernelField::from_logits(logits, channels, r)?;
    let mut h = latent.clone();
    for _ in 0..steps {
        h = diffusion_step(&h, &k)?;
    }
    Ok(h)
}

fn unrolled_backward(
    latent: &Tensor,
    logits: &Tensor,
    channels: usize,
    r: usize,
    steps: usize,
    g: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let k = KernelField::from_logits(logits, channels, r)?;
    let mut states = vec![latent.clone()];
    for _ in 0..steps {
        let next = diffusion_step(states.last().expect("non-empty"), &k)?;
        states.push(next);
    }
    let mut g = g.clone();
    let mut gk = vec![0.0; k.data().len()];
    for t in (0..steps).rev() {
        let (gl, gkt) = diffusion_step_backward(&states[t], &k, &g)?;
        gk.iter_mut().zip(&gkt).for_each(|(a, b)| *a += b);
        g = gl;
    }
    let (h, w) = k.spatial();
    let g_logits = softmax_strided_backward(k.data(), &gk, channels, r * r, h * w);
    Ok((g, g_logits))
}

fn check_diffusion(c: &mut Checker, steps_list: &[usize]) -> Result<()> {
    for &steps in steps_list {
        for r in [3, 5] {
            let ch = 2;
            let latent = rand_tensor(Shape::new(ch, 6, 7), &mut c.rng);
            let logits = rand_tensor(Shape::new(ch * r * r, 6, 7), &mut c.rng).scale(2.0);
            let g = rand_tensor(latent.shape(), &mut c.rng);
            let (gl, glog) = unrolled_backward(&latent, &logits, ch, r, steps, &g)?;
            c.tensor(
                |t| Ok(dot(&unrolled(t, &logits, ch, r, steps)?, &g)),
                &latent,
                gl.data(),
                SAMPLES_PER_TENSOR,
            )?;
            c.tensor(
                |t| Ok(dot(&unrolled(&latent, t, ch, r, steps)?, &g)),
                &logits,
                &glog,
                SAMPLES_PER_TENSOR,
            )?;
        }
    }
    Ok(())
}

fn check_softmax(c: &mut Checker) -> Result<()> {
    for axis in 0..3 {
        let x = rand_tensor(Shape::new(4, 5, 3), &mut c.rng).scale(3.0);
        let y = softmax_axis(&x, axis)?;
        let g = rand_tensor(y.shape(), &mut c.rng);
        let grad = softmax_axis_backward(&y, &g, axis)?;
        c.tensor(
            |t| Ok(dot(&softmax_axis(t, axis)?, &g)),
            &x,
            grad.data(),
            SAMPLES_PER_TENSOR,
        )?;
    }
    Ok(())
}

fn check_resample(c: &mut Checker) -> Result<()> {
    for method in [
        ResampleMethod::Bilinear,
        ResampleMethod::Nearest,
        ResampleMethod::Area,
    ] {
        for (th, tw) in [(11, 13), (3, 4)] {
            let x = rand_tensor(Shape::new(2, 7, 9), &mut c.rng);
            let g = rand_tensor(Shape::new(2, th, tw), &mut c.rng);
            let grad = resample_backward(&g, x.shape(), method)?;
            c.tensor(
                |t| Ok(dot(&resample(t, th, tw, method)?, &g)),
                &x,
                grad.data(),
                SAMPLES_PER_TENSOR,
            )?;
        }
    }
    Ok(())
}

fn check_ssim(c: &mut Checker) -> Result<()> {
    let params = SsimParams::default();
    for _ in 0..2 {
        let b = Tensor::random_uniform(Shape::new(3, 16, 16), 0.0, 1.0, &mut c.rng);
        let a = b.map(|v| 0.7 * v + 0.1).add(&Tensor::random_uniform(
            b.shape(),
            -0.2,
            0.2,
            &mut c.rng,
        ))?;
        let grad = ssim_backward(&a, &b, &params)?;
        c.tensor(
            |t| ssim(t, &b, &params),
            &a,
            grad.data(),
            2 * SAMPLES_PER_TENSOR,
        )?;
    }
    Ok(())
}

fn check_bce(c: &mut Checker) -> Result<()> {
    let logits = rand_tensor(Shape::new(1, 8, 8), &mut c.rng).scale(4.0);
    let gt = Tensor::from_fn(logits.shape(), |_, y, x| ((x * 3 + y) % 2) as f64);
    let grad = seg_loss_backward(&SegPrediction::from_logits(logits.clone()), &gt)?;
    c.tensor(
        |t| seg_loss(&SegPrediction::from_logits(t.clone()), &gt),
        &logits,
        grad.data(),
        2 * SAMPLES_PER_TENSOR,
    )?;
    Ok(())
}

/// Samples of the full-model gradient: `per_tensor` coordinates of every weight and bias.
pub fn check_end_to_end(seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut c = Checker::new(seed);
    let cfg = ModelConfig {
        lambda: 0.5,
        ..ModelConfig::default()
    };
    let size = 32;
    let params = ModelParams::init(&cfg, size, size, &mut c.rng)?;
    let x = Tensor::random_uniform(Shape::new(3, size, size), 0.0, 1.0, &mut c.rng);
    let d = Tensor::random_uniform(Shape::new(1, size, size), 0.0, 1.0, &mut c.rng);
    let gt = Tensor::from_fn(Shape::new(1, size, size), |_, y, x| {
        (((y as f64 - 15.5).powi(2) + (x as f64 - 12.0).powi(2)) < 81.0) as u8 as f64
    });
    let (_, cache) = forward_cached(&x, &d, Some(&gt), &params, &cfg)?;
    let grads = backward(&params, &cfg, &cache, BackwardOptions::default())?;
    let loss = |p: &ModelParams| Ok(forward(&x, &d, Some(&gt), p, &cfg)?.losses.l_total);

    let n_convs = params.convs().len();
    for idx in 0..n_convs {
        let base = params.convs()[idx].1.clone();
        let g = grads.convs()[idx].1.clone();
        let with_weights = |t: &Tensor| {
            let mut p = params.clone();
            p.convs_mut()[idx].1.weight.copy_from_slice(t.data());
            loss(&p)
        };
        c.tensor(
            with_weights,
            &conv_weights_tensor(&base),
            &g.weight,
            per_tensor,
        )?;
        let with_bias = |t: &Tensor| {
            let mut p = params.clone();
            p.convs_mut()[idx].1.bias.copy_from_slice(t.data());
            loss(&p)
        };
        c.tensor(with_bias, &bias_tensor(&base), &g.bias, per_tensor)?;
    }
    Ok(c.finish("end_to_end"))
}

/// Runs one registered check by name.
pub fn gradcheck(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut c = Checker::new(seed);
    match op {
        "conv2d" => check_conv(&mut c)?,
        "diffusion_step" => check_diffusion(&mut c, &[1])?,
        "diffusion_unrolled" => check_diffusion(&mut c, &[3, 4])?,
        "softmax" => check_softmax(&mut c)?,
        "resample" => check_resample(&mut c)?,
        "ssim" => check_ssim(&mut c)?,
        "bce" => check_bce(&mut c)?,
        "end_to_end" => return check_end_to_end(seed, 2),
        other => {
            return Err(Error::invalid(
                "gradcheck",
                format!("unknown op `{other}`; expected one of {}", OPS.join(", ")),
            ))
        }
    }
    Ok(c.finish(op))
}

/// Every registered check, in [`OPS`] order.
pub fn gradcheck_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    OPS.iter().map(|op| gradcheck(op, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2), vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| Ok(3.5), &x, 1e-5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::zeros(Shape::new(1, 1, 1));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn primitive_checks_pass() {
        for op in OPS.iter().filter(|o| **o != "end_to_end") {
            let r = gradcheck(op, 3).unwrap();
            assert!(r.passed, "{r}");
            assert!(r.samples >= SAMPLES_PER_TENSOR);
        }
    }

    #[test]
    fn unknown_op() {
        assert!(gradcheck("matmul", 0).is_err());
    }
}
