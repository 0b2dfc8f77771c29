//! Windowed SSIM, the structural-consistency loss and the total-loss composition.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WindowKind {
    Gaussian { sigma: f64 },
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub window_kind: WindowKind,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    /// 11×11 Gaussian (σ = 1.5), `c1 = 0.01²`, `c2 = 0.03²` for unit dynamic range.
    fn default() -> Self {
        SsimParams {
            window: 11,
            window_kind: WindowKind::Gaussian { sigma: 1.5 },
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(
                "ssim",
                format!("window {} must be odd", self.window),
            ));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::invalid("ssim", "c1 and c2 must be positive"));
        }
        if let WindowKind::Gaussian { sigma } = self.window_kind {
            if !(sigma > 0.0) {
                return Err(Error::invalid(
                    "ssim",
                    format!("sigma {sigma} must be positive"),
                ));
            }
        }
        Ok(())
    }

    /// Normalized `window × window` weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let k = self.window;
        match self.window_kind {
            WindowKind::Uniform => vec![1.0 / (k * k) as f64; k * k],
            WindowKind::Gaussian { sigma } => {
                let half = (k / 2) as f64;
                let g: Vec<f64> = (0..k)
                    .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let total: f64 = g.iter().sum::<f64>().powi(2);
                (0..k * k).map(|i| g[i / k] * g[i % k] / total).collect()
            }
        }
    }
}

/// Weighted first and second moments of one window pair.
#[derive(Clone, Copy, Debug)]
struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

impl WindowStats {
    fn gather(
        a: &[f64],
        b: &[f64],
        width: usize,
        y0: usize,
        x0: usize,
        weights: &[f64],
        k: usize,
    ) -> Self {
        let (mut mu_a, mut mu_b, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dy in 0..k {
            let row = (y0 + dy) * width + x0;
            for dx in 0..k {
                let w = weights[dy * k + dx];
                let (va, vb) = (a[row + dx], b[row + dx]);
                mu_a += w * va;
                mu_b += w * vb;
                aa += w * va * va;
                bb += w * vb * vb;
                ab += w * va * vb;
            }
        }
        WindowStats {
            mu_a,
            mu_b,
            var_a: aa - mu_a * mu_a,
            var_b: bb - mu_b * mu_b,
            cov: ab - mu_a * mu_b,
        }
    }

    /// `(luminance numerator, structure numerator, luminance denominator, structure denominator)`.
    fn terms(&self, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
        (
            2.0 * self.mu_a * self.mu_b + c1,
            2.0 * self.cov + c2,
            self.mu_a * self.mu_a + self.mu_b * self.mu_b + c1,
            self.var_a + self.var_b + c2,
        )
    }
}

fn check_pair(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<()> {
    p.validate()?;
    a.expect_shape(b.shape(), "ssim")?;
    if a.height() < p.window || a.width() < p.window {
        return Err(Error::invalid(
            "ssim",
            format!(
                "image {} smaller than {}x{} window",
                a.shape(),
                p.window,
                p.window
            ),
        ));
    }
    Ok(())
}

/// Mean SSIM over every fully-contained window position and every channel.
///
/// Inputs are expected in `[0, 1]` to match the default constants; this is not enforced.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    check_pair(a, b, p)?;
    let k = p.window;
    let weights = p.weights();
    let (h, w) = a.shape().spatial();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (ca, cb) = (a.channel(c), b.channel(c));
        for y in 0..oh {
            for x in 0..ow {
                let (n1, n2, d1, d2) =
                    WindowStats::gather(ca, cb, w, y, x, &weights, k).terms(p.c1, p.c2);
                total += (n1 * n2) / (d1 * d2);
            }
        }
    }
    Ok(total / (a.channels() * oh * ow) as f64)
}

/// Gradient of [`ssim`] with respect to its first argument.
pub fn ssim_backward(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    check_pair(a, b, p)?;
    let k = p.window;
    let weights = p.weights();
    let (h, w) = a.shape().spatial();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let norm = 1.0 / (a.channels() * oh * ow) as f64;
    let mut grad = Tensor::zeros(a.shape());
    for c in 0..a.channels() {
        let (ca, cb) = (a.channel(c), b.channel(c));
        let g = grad.channel_mut(c);
        for y in 0..oh {
            for x in 0..ow {
                let st = WindowStats::gather(ca, cb, w, y, x, &weights, k);
                let (n1, n2, d1, d2) = st.terms(p.c1, p.c2);
                let s = (n1 * n2) / (d1 * d2);
                let d_mu = 2.0 * st.mu_b * n2 / (d1 * d2) - 2.0 * st.mu_a * s / d1;
                let d_var = -s / d2;
                let d_cov = 2.0 * n1 / (d1 * d2);
                for dy in 0..k {
                    let row = (y + dy) * w + x;
                    for dx in 0..k {
                        let i = row + dx;
                        let wt = weights[dy * k + dx] * norm;
                        g[i] += wt
                            * (d_mu + 2.0 * d_var * (ca[i] - st.mu_a) + d_cov * (cb[i] - st.mu_b));
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Structural-consistency loss `1 − SSIM(d_u, x)`.
pub fn sc_loss(d_u: &Tensor, x: &Tensor, p: &SsimParams) -> Result<f64> {
    Ok(1.0 - ssim(d_u, x, p)?)
}

/// Gradient of [`sc_loss`] with respect to `d_u`.
pub fn sc_loss_backward(d_u: &Tensor, x: &Tensor, p: &SsimParams) -> Result<Tensor> {
    Ok(ssim_backward(d_u, x, p)?.scale(-1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_sc: f64,
    pub l_seg: f64,
    pub lambda: f64,
    pub l_total: f64,
}

/// `l_total = lambda · l_sc + l_seg`.
pub fn total_loss(l_sc: f64, l_seg: f64, lambda: f64) -> Result<LossReport> {
    if !(l_sc.is_finite() && l_seg.is_finite() && lambda.is_finite()) {
        return Err(Error::NonFinite("total_loss".into()));
    }
    if lambda < 0.0 {
        return Err(Error::invalid(
            "total_loss",
            format!("lambda {lambda} is negative"),
        ));
    }
    Ok(LossReport {
        l_sc,
        l_seg,
        lambda,
        l_total: lambda * l_sc + l_seg,
    })
}
