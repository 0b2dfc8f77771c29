use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// `(outer, len, inner)` strides for reducing along `axis` of a C×H×W tensor.
fn axis_layout(shape: Shape, axis: usize) -> Result<(usize, usize, usize)> {
    let dims = [shape.channels, shape.height, shape.width];
    if axis > 2 {
        return Err(Error::invalid(
            "softmax_axis",
            format!("axis {axis} out of range for rank 3"),
        ));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// In-place softmax over the middle index of an `outer × len × inner` buffer.
pub(crate) fn softmax_strided(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    let mut scratch = vec![0.0; inner];
    let mut sums = vec![0.0; inner];
    for o in 0..outer {
        let block = &mut data[o * len * inner..(o + 1) * len * inner];
        scratch.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        for j in 0..len {
            for (m, &v) in scratch.iter_mut().zip(&block[j * inner..(j + 1) * inner]) {
                *m = m.max(v);
            }
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..len {
            let row = &mut block[j * inner..(j + 1) * inner];
            for ((v, &m), s) in row.iter_mut().zip(&scratch).zip(sums.iter_mut()) {
                *v = (*v - m).exp();
                *s += *v;
            }
        }
        for j in 0..len {
            for (v, &s) in block[j * inner..(j + 1) * inner].iter_mut().zip(&sums) {
                *v /= s;
            }
        }
    }
}

/// Vector-Jacobian product of a strided softmax given its output `y`.
pub(crate) fn softmax_strided_backward(
    y: &[f64],
    grad_out: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut grad = vec![0.0; y.len()];
    let mut dots = vec![0.0; inner];
    for o in 0..outer {
        let base = o * len * inner;
        dots.iter_mut().for_each(|d| *d = 0.0);
        for j in 0..len {
            let r = base + j * inner;
            for (t, d) in dots.iter_mut().enumerate() {
                *d += y[r + t] * grad_out[r + t];
            }
        }
        for j in 0..len {
            let r = base + j * inner;
            for (t, &d) in dots.iter().enumerate() {
                grad[r + t] = y[r + t] * (grad_out[r + t] - d);
            }
        }
    }
    grad
}

/// Numerically stabilized softmax along `axis` (0 = channels, 1 = rows, 2 = columns).
pub fn softmax_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let mut out = input.clone();
    softmax_strided(out.data_mut(), outer, len, inner);
    Ok(out)
}

/// Gradient of [`softmax_axis`] w.r.t. its logits, from the forward output.
pub fn softmax_axis_backward(output: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    grad_out.expect_shape(output.shape(), "softmax_axis_backward")?;
    let (outer, len, inner) = axis_layout(output.shape(), axis)?;
    let grad = softmax_strided_backward(output.data(), grad_out.data(), outer, len, inner);
    Tensor::from_vec(output.shape(), grad)
}

/// Stacks tensors along the channel axis; also returns each input's starting channel.
pub fn channel_concat(inputs: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("channel_concat", "no inputs"))?;
    let mut offsets = Vec::with_capacity(inputs.len());
    let mut data = Vec::new();
    let mut channels = 0;
    for t in inputs {
        t.expect_spatial(first, "channel_concat")?;
        offsets.push(channels);
        channels += t.channels();
        data.extend_from_slice(t.data());
    }
    let out = Tensor::from_vec(Shape::new(channels, first.height(), first.width()), data)?;
    Ok((out, offsets))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    input.zip_with(grad, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_are_uniform() {
        let x = Tensor::full(Shape::new(4, 1, 1), 2.5);
        let y = softmax_axis(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn analytic_two_way_softmax() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2), vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax_axis(&x, 2).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::random_uniform(Shape::new(3, 4, 5), -2.0, 2.0, &mut rng);
        for axis in 0..3 {
            let a = softmax_axis(&x, axis).unwrap();
            let b = softmax_axis(&x.map(|v| v + 17.0), axis).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-14);
        }
    }

    #[test]
    fn bad_axis_rejected() {
        assert!(softmax_axis(&Tensor::zeros(Shape::new(1, 1, 1)), 3).is_err());
    }

    #[test]
    fn softmax_gradient_sums_to_zero_along_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::random_uniform(Shape::new(5, 3, 4), -4.0, 4.0, &mut rng);
        let y = softmax_axis(&x, 0).unwrap();
        let g = Tensor::random_uniform(y.shape(), -1.0, 1.0, &mut rng);
        let gx = softmax_axis_backward(&y, &g, 0).unwrap();
        for yy in 0..3 {
            for xx in 0..4 {
                let s: f64 = (0..5).map(|c| gx.at(c, yy, xx)).sum();
                assert!(s.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn concat_shapes_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::random_uniform(Shape::new(1, 3, 4), 0.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(Shape::new(3, 3, 4), 0.0, 1.0, &mut rng);
        let (cat, offsets) = channel_concat(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(4, 3, 4));
        assert_eq!(offsets, vec![0, 1]);
        assert_eq!(cat.slice_channels(0, 1).unwrap(), a);
        assert_eq!(cat.slice_channels(1, 4).unwrap(), b);
        let (single, _) = channel_concat(&[&a]).unwrap();
        assert_eq!(single, a);
    }

    #[test]
    fn concat_spatial_mismatch_errors() {
        let a = Tensor::zeros(Shape::new(1, 3, 4));
        let b = Tensor::zeros(Shape::new(1, 4, 4));
        assert!(channel_concat(&[&a, &b]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_slices_sum_to_one(seed in 0u64..1000, axis in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::random_uniform(Shape::new(3, 4, 5), -50.0, 50.0, &mut rng);
            let y = softmax_axis(&x, axis).unwrap();
            let (outer, len, inner) = axis_layout(x.shape(), axis).unwrap();
            for o in 0..outer {
                for t in 0..inner {
                    let s: f64 = (0..len).map(|j| y.data()[(o * len + j) * inner + t]).sum();
                    proptest::prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
            proptest::prop_assert!(y.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
