use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    /// Align-corners bilinear: output ends map onto input ends.
    Bilinear,
    Nearest,
    /// Exact box averaging over fractional source footprints.
    Area,
}

/// Per-output-index list of `(source index, weight)`.
type AxisWeights = Vec<Vec<(usize, f64)>>;

fn axis_weights(src: usize, dst: usize, method: ResampleMethod) -> AxisWeights {
    match method {
        ResampleMethod::Bilinear => (0..dst)
            .map(|i| {
                if src == 1 || dst == 1 {
                    return vec![(0, 1.0)];
                }
                let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
                let lo = (pos.floor() as usize).min(src - 1);
                let frac = pos - lo as f64;
                if frac == 0.0 || lo + 1 == src {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (lo + 1, frac)]
                }
            })
            .collect(),
        ResampleMethod::Nearest => (0..dst)
            .map(|i| vec![(((2 * i + 1) * src / (2 * dst)).min(src - 1), 1.0)])
            .collect(),
        ResampleMethod::Area => (0..dst)
            .map(|i| {
                // Footprint [i*src, (i+1)*src) in units of 1/dst; source j covers [j*dst, (j+1)*dst).
                let (lo, hi) = (i * src, (i + 1) * src);
                (lo / dst..hi.div_ceil(dst))
                    .filter_map(|j| {
                        let overlap = hi.min((j + 1) * dst).saturating_sub(lo.max(j * dst));
                        (overlap > 0).then(|| (j, overlap as f64 / src as f64))
                    })
                    .collect()
            })
            .collect(),
    }
}

fn apply(input: &Tensor, rows: &AxisWeights, cols: &AxisWeights) -> Tensor {
    let Shape {
        channels, width, ..
    } = input.shape();
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Tensor::zeros(Shape::new(channels, oh, ow));
    let mut tmp = vec![0.0; width];
    for c in 0..channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for (oy, rw) in rows.iter().enumerate() {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for &(y, wy) in rw {
                for (t, &v) in tmp.iter_mut().zip(&src[y * width..(y + 1) * width]) {
                    *t += wy * v;
                }
            }
            for (ox, cw) in cols.iter().enumerate() {
                dst[oy * ow + ox] = cw.iter().map(|&(x, wx)| wx * tmp[x]).sum();
            }
        }
    }
    out
}

fn check_target(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(
            op,
            format!("target size {h}x{w} must be at least 1x1"),
        ));
    }
    Ok(())
}

/// Resizes every channel to `target_h × target_w`.
pub fn resample(
    input: &Tensor,
    target_h: usize,
    target_w: usize,
    method: ResampleMethod,
) -> Result<Tensor> {
    check_target("resample", target_h, target_w)?;
    if input.is_empty() {
        return Err(Error::invalid("resample", "empty input"));
    }
    if input.height() == target_h && input.width() == target_w {
        return Ok(input.clone());
    }
    let rows = axis_weights(input.height(), target_h, method);
    let cols = axis_weights(input.width(), target_w, method);
    Ok(apply(input, &rows, &cols))
}

/// Adjoint of [`resample`]: maps a gradient at the output size back to `input_shape`.
pub fn resample_backward(
    grad_out: &Tensor,
    input_shape: Shape,
    method: ResampleMethod,
) -> Result<Tensor> {
    if grad_out.channels() != input_shape.channels {
        return Err(Error::shape(
            "resample_backward",
            grad_out.shape(),
            input_shape,
        ));
    }
    let (h, w) = input_shape.spatial();
    let (oh, ow) = grad_out.shape().spatial();
    if (h, w) == (oh, ow) {
        return Ok(grad_out.clone());
    }
    let rows = axis_weights(h, oh, method);
    let cols = axis_weights(w, ow, method);
    let mut grad = Tensor::zeros(input_shape);
    let mut tmp = vec![0.0; w];
    for c in 0..input_shape.channels {
        let g = grad_out.channel(c);
        let dst = grad.channel_mut(c);
        for (oy, rw) in rows.iter().enumerate() {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for (ox, cw) in cols.iter().enumerate() {
                let gv = g[oy * ow + ox];
                for &(x, wx) in cw {
                    tmp[x] += wx * gv;
                }
            }
            for &(y, wy) in rw {
                for (d, &t) in dst[y * w..(y + 1) * w].iter_mut().zip(&tmp) {
                    *d += wy * t;
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_stays_constant() {
        let x = Tensor::full(Shape::new(1, 4, 4), 0.37);
        for method in [
            ResampleMethod::Bilinear,
            ResampleMethod::Nearest,
            ResampleMethod::Area,
        ] {
            for (h, w) in [(1, 1), (3, 7), (4, 4), (9, 2), (16, 16)] {
                let y = resample(&x, h, w, method).unwrap();
                assert_eq!(y.shape(), Shape::new(1, h, w));
                assert!(
                    y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15),
                    "{method:?} {h}x{w}"
                );
            }
        }
    }

    #[test]
    fn bilinear_align_corners_closed_form() {
        let x = Tensor::from_vec(Shape::new(1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = resample(&x, 2, 4, ResampleMethod::Bilinear).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in 0..2 {
            for (col, e) in expected.iter().enumerate() {
                assert!((y.at(0, row, col) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn area_up_then_down_is_identity() {
        let x = Tensor::full(Shape::new(2, 3, 5), -1.25);
        let up = resample(&x, 12, 20, ResampleMethod::Area).unwrap();
        let down = resample(&up, 3, 5, ResampleMethod::Area).unwrap();
        assert!(down.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn area_downsample_is_block_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random_uniform(Shape::new(1, 4, 6), 0.0, 1.0, &mut rng);
        let y = resample(&x, 2, 3, ResampleMethod::Area).unwrap();
        for oy in 0..2 {
            for ox in 0..3 {
                let m = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| x.at(0, 2 * oy + dy, 2 * ox + dx))
                    .sum::<f64>()
                    / 4.0;
                assert!((y.at(0, oy, ox) - m).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::zeros(Shape::new(1, 2, 2));
        assert!(resample(&x, 0, 3, ResampleMethod::Bilinear).is_err());
        assert!(resample(&x, 3, 0, ResampleMethod::Area).is_err());
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for method in [
            ResampleMethod::Bilinear,
            ResampleMethod::Nearest,
            ResampleMethod::Area,
        ] {
            let x = Tensor::random_uniform(Shape::new(2, 5, 7), -1.0, 1.0, &mut rng);
            let y = resample(&x, 8, 3, method).unwrap();
            let g = Tensor::random_uniform(y.shape(), -1.0, 1.0, &mut rng);
            let gx = resample_backward(&g, x.shape(), method).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{method:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn bilinear_stays_in_channel_range(seed in 0u64..1000, h in 1usize..10, w in 1usize..10, th in 1usize..20, tw in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::random_uniform(Shape::new(2, h, w), -3.0, 3.0, &mut rng);
            let y = resample(&x, th, tw, ResampleMethod::Bilinear).unwrap();
            for c in 0..2 {
                let (lo, hi) = x.channel_range(c);
                let (ylo, yhi) = y.channel_range(c);
                proptest::prop_assert!(ylo >= lo - 1e-12 && yhi <= hi + 1e-12);
            }
        }
    }
}
