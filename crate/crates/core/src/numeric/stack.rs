use super::{
    conv2d_backward, conv2d_forward, relu_backward, ConvCache, ConvGrads, ConvParams, Tensor,
};
use crate::error::{Error, Result};

/// Cached state of a conv chain with ReLU between layers.
#[derive(Clone, Debug)]
pub struct StackCache {
    convs: Vec<ConvCache>,
    /// Pre-activation output of each conv.
    pre: Vec<Tensor>,
    final_relu: bool,
}

/// Runs `layers` in order with ReLU between consecutive convs (and after the
/// last one when `final_relu` is set).
pub fn conv_stack(input: &Tensor, layers: &[ConvParams], final_relu: bool) -> Result<Tensor> {
    conv_stack_forward(input, layers, final_relu).map(|(t, _)| t)
}

pub fn conv_stack_forward(
    input: &Tensor,
    layers: &[ConvParams],
    final_relu: bool,
) -> Result<(Tensor, StackCache)> {
    if layers.is_empty() {
        return Err(Error::invalid("conv_stack", "no layers"));
    }
    let mut convs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        let (z, cache) = conv2d_forward(&x, layer)?;
        convs.push(cache);
        x = if i + 1 < layers.len() || final_relu {
            z.map(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre.push(z);
    }
    Ok((
        x,
        StackCache {
            convs,
            pre,
            final_relu,
        },
    ))
}

/// Returns the input gradient and one [`ConvGrads`] per layer.
pub fn conv_stack_backward(
    layers: &[ConvParams],
    cache: &StackCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<ConvGrads>)> {
    if cache.convs.len() != layers.len() {
        return Err(Error::invalid(
            "conv_stack_backward",
            "cache does not match layer count",
        ));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = grad_out.clone();
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() || cache.final_relu {
            g = relu_backward(&cache.pre[i], &g)?;
        }
        let cg = conv2d_backward(&layers[i], &cache.convs[i], &g)?;
        g = cg.input.clone();
        grads.push(cg);
    }
    grads.reverse();
    Ok((g, grads))
}
