//! Dense C×H×W tensors and the primitive operators the pipeline is built from.
//!
//! Everything here is a pure function of its inputs. Backward passes live next
//! to their forward counterparts.

mod conv;
mod ops;
mod resample;
mod stack;
mod tensor;

pub use conv::{
    conv2d, conv2d_backward, conv2d_forward, ConvCache, ConvGrads, ConvParams, Padding, PaddingMode,
};
pub use ops::{channel_concat, relu, relu_backward, sigmoid, softmax_axis, softmax_axis_backward};
pub(crate) use ops::{softmax_strided, softmax_strided_backward};
pub use resample::{resample, resample_backward, ResampleMethod};
pub use stack::{conv_stack, conv_stack_backward, conv_stack_forward, StackCache};
pub use tensor::{Shape, Tensor};
