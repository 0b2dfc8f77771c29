//! Frequency-domain texture extraction.
//!
//! The RGB image is area-downsampled to a small working size, each channel is
//! moved to a DC-centered 2-D spectrum, an ideal circular high-pass mask
//! removes everything within `alpha · r_max` of DC, and the inverse transform
//! yields the texture map.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numeric::{resample, ResampleMethod, Shape, Tensor};

/// DC-centered complex spectrum, one plane per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    shape: Shape,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Bin at centered coordinates; `(H/2, W/2)` (integer halves) is DC.
    pub fn at(&self, c: usize, y: usize, x: usize) -> Complex64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// Σ|X_f|² over every bin.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TexConfig {
    /// Cutoff as a fraction of the largest centered spectral radius.
    pub alpha: f64,
    pub target_h: usize,
    pub target_w: usize,
}

impl Default for TexConfig {
    fn default() -> Self {
        TexConfig {
            alpha: 0.3,
            target_h: 12,
            target_w: 12,
        }
    }
}

impl TexConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.target_h < 2 || self.target_w < 2 {
            return Err(Error::invalid(
                "TexConfig",
                format!(
                    "working size {}x{} must be at least 2x2",
                    self.target_h, self.target_w
                ),
            ));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(
            "high_pass",
            format!("alpha {alpha} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// Forward (`inverse == false`) or unnormalized inverse 2-D DFT of one plane, in place.
fn dft2_in_place(
    planner: &mut FftPlanner<f64>,
    plane: &mut [Complex64],
    h: usize,
    w: usize,
    inverse: bool,
) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    row_fft.process(plane);
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for (y, v) in column.iter_mut().enumerate() {
            *v = plane[y * w + x];
        }
        col_fft.process(&mut column);
        for (y, v) in column.iter().enumerate() {
            plane[y * w + x] = *v;
        }
    }
}

/// `centered[(k + n/2) % n] = raw[k]` along both axes.
fn shift(plane: &[Complex64], h: usize, w: usize, to_centered: bool) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); plane.len()];
    for y in 0..h {
        let cy = (y + h / 2) % h;
        for x in 0..w {
            let cx = (x + w / 2) % w;
            if to_centered {
                out[cy * w + cx] = plane[y * w + x];
            } else {
                out[y * w + x] = plane[cy * w + cx];
            }
        }
    }
    out
}

/// 2-D DFT of every channel, returned with DC at the center.
pub fn fft2(input: &Tensor) -> Result<Spectrum> {
    let shape = input.shape();
    let (h, w) = shape.spatial();
    if h < 2 || w < 2 {
        return Err(Error::invalid(
            "fft2",
            format!("need at least 2x2, got {shape}"),
        ));
    }
    let mut planner = FftPlanner::new();
    let mut data = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        let mut plane: Vec<Complex64> = input
            .channel(c)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        dft2_in_place(&mut planner, &mut plane, h, w, false);
        data.extend(shift(&plane, h, w, true));
    }
    Ok(Spectrum { shape, data })
}

/// Inverse of [`fft2`]; returns the real part and the largest imaginary magnitude discarded.
pub fn ifft2_with_residue(spec: &Spectrum) -> (Tensor, f64) {
    let shape = spec.shape;
    let (h, w) = shape.spatial();
    let norm = 1.0 / (h * w) as f64;
    let mut planner = FftPlanner::new();
    let mut out = Tensor::zeros(shape);
    let mut residue = 0.0f64;
    for c in 0..shape.channels {
        let p = shape.plane();
        let mut plane = shift(&spec.data[c * p..(c + 1) * p], h, w, false);
        dft2_in_place(&mut planner, &mut plane, h, w, true);
        for (dst, z) in out.channel_mut(c).iter_mut().zip(&plane) {
            *dst = z.re * norm;
            residue = residue.max((z.im * norm).abs());
        }
    }
    (out, residue)
}

pub fn ifft2(spec: &Spectrum) -> Tensor {
    ifft2_with_residue(spec).0
}

/// Normalized distance of centered bin `(y, x)` from DC.
pub fn normalized_radius(y: usize, x: usize, h: usize, w: usize) -> f64 {
    let dy = y as f64 - (h / 2) as f64;
    let dx = x as f64 - (w / 2) as f64;
    dy.hypot(dx) / (h as f64 / 2.0).hypot(w as f64 / 2.0)
}

/// Ideal high-pass: zeroes every bin whose normalized radius is `<= alpha`.
/// `alpha == 0` leaves the spectrum untouched.
pub fn high_pass(spec: &Spectrum, alpha: f64) -> Result<Spectrum> {
    check_alpha(alpha)?;
    let mut out = spec.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    let Shape {
        channels,
        height,
        width,
    } = spec.shape;
    for y in 0..height {
        for x in 0..width {
            if normalized_radius(y, x, height, width) <= alpha {
                for c in 0..channels {
                    out.data[(c * height + y) * width + x] = Complex64::default();
                }
            }
        }
    }
    Ok(out)
}

/// Texture map of an RGB image at the configured working size.
pub fn extract_texture(x: &Tensor, cfg: &TexConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.channels() != 3 {
        return Err(Error::shape(
            "extract_texture",
            x.shape(),
            Shape::new(3, x.height(), x.width()),
        ));
    }
    let small = resample(x, cfg.target_h, cfg.target_w, ResampleMethod::Area)?;
    let spec = high_pass(&fft2(&small)?, cfg.alpha)?;
    Ok(ifft2(&spec))
}
