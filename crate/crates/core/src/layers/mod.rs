//! Layer transforms. Each layer has a deterministic forward, a stochastic
//! forward (which differs only for dropout) and a moment-propagation forward,
//! all over the same parameters.
//!
//! Every function accepts either a single example (a tensor of exactly the
//! layer's feature rank) or a batch with any number of leading axes.

pub mod conv;
pub mod dense;
pub mod dropout;
pub mod maxpool;
pub mod relu;
pub mod softmax;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_mp, Conv2DSpec, ConvGeometry, ConvGrads, Padding};
pub use dense::{dense_backward, dense_forward, dense_mp, DenseGrads, DenseSpec};
pub use dropout::{dropout_backward, dropout_forward, dropout_mp, dropout_sample, DropoutSpec};
pub use maxpool::{
    maxpool2d_backward, maxpool2d_forward, maxpool2d_forward_with_argmax, maxpool2d_mp, maxpool2d_mp_with,
    maxpool_pair, MaxPool2DSpec,
};
pub use relu::{relu_backward, relu_forward, relu_moments, relu_mp, relu_mp_with};
pub use softmax::{expected_sigmoid, softmax_forward, softmax_mp, softmax_nll_backward};

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::moments::{MomentTensor, MpDiagnostics};
use crate::tensor::Tensor;

/// One layer of a sequential model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dropout(DropoutSpec),
    Dense(DenseSpec),
    Conv2d(Conv2DSpec),
    MaxPool2d(MaxPool2DSpec),
    Relu,
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dropout(_) => "dropout",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::MaxPool2d(_) => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dropout(_) | LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dense(d) => {
                if input != [d.in_dim()] {
                    return Err(shape_err(format!("dense expects [{}], got {:?}", d.in_dim(), input)));
                }
                Ok(vec![d.out_dim()])
            }
            LayerSpec::Conv2d(c) => {
                let g = c.geometry(input)?;
                Ok(vec![g.out_channels, g.out_h, g.out_w])
            }
            LayerSpec::MaxPool2d(p) => Ok(p.output_shape(input)?.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() != 1 || input[0] < 2 {
                    return Err(shape_err(format!("softmax expects [K >= 2], got {:?}", input)));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Deterministic (test-time, standard dropout) forward of a batch whose
    /// trailing axes are `features`.
    pub fn forward(&self, input: &Tensor, features: &[usize]) -> Result<Tensor> {
        match self {
            LayerSpec::Dropout(d) => Ok(dropout_forward(input, d)),
            LayerSpec::Dense(d) => dense_forward(input, d),
            LayerSpec::Conv2d(c) => conv2d_forward(input, c),
            LayerSpec::MaxPool2d(p) => maxpool2d_forward(input, p),
            LayerSpec::Relu => Ok(relu_forward(input)),
            LayerSpec::Flatten => flatten(input.clone(), features),
            LayerSpec::Softmax => softmax_forward(input),
        }
    }

    /// Stochastic forward with dropout masks drawn from `rng`.
    pub fn forward_sampled<R: Rng + ?Sized>(&self, input: &Tensor, features: &[usize], rng: &mut R) -> Result<Tensor> {
        match self {
            LayerSpec::Dropout(d) => Ok(dropout_sample(input, d, rng)),
            other => other.forward(input, features),
        }
    }

    /// Moment-propagation forward. Softmax is not handled here since it ends
    /// the variance channel; see [`softmax_mp`].
    pub fn forward_mp(&self, input: &MomentTensor, features: &[usize], diag: &mut MpDiagnostics) -> Result<MomentTensor> {
        match self {
            LayerSpec::Dropout(d) => Ok(dropout_mp(input, d)),
            LayerSpec::Dense(d) => dense_mp(input, d),
            LayerSpec::Conv2d(c) => conv2d_mp(input, c),
            LayerSpec::MaxPool2d(p) => maxpool2d_mp_with(input, p, diag),
            LayerSpec::Relu => Ok(relu_mp_with(input, diag)),
            LayerSpec::Flatten => {
                let shape = flattened_shape(input.shape(), features)?;
                input.clone().reshape(shape)
            }
            LayerSpec::Softmax => Err(shape_err("softmax yields probabilities, not moments")),
        }
    }
}

impl LayerSpec {
    /// [`LayerSpec::forward_mp`] that reuses the input buffers where the
    /// layer is elementwise.
    pub(crate) fn forward_mp_owned(
        &self,
        mut input: MomentTensor,
        features: &[usize],
        diag: &mut MpDiagnostics,
    ) -> Result<MomentTensor> {
        match self {
            LayerSpec::Dropout(d) => {
                dropout::dropout_mp_in_place(&mut input, d);
                Ok(input)
            }
            LayerSpec::Relu => {
                relu::relu_mp_in_place(&mut input, diag);
                Ok(input)
            }
            LayerSpec::Flatten => {
                let shape = flattened_shape(input.shape(), features)?;
                input.reshape(shape)
            }
            _ => self.forward_mp(&input, features, diag),
        }
    }
}

fn flattened_shape(shape: &[usize], features: &[usize]) -> Result<Vec<usize>> {
    if shape.len() < features.len() || &shape[shape.len() - features.len()..] != features {
        return Err(shape_err(format!("cannot flatten {:?} with feature shape {:?}", shape, features)));
    }
    let mut out = shape[..shape.len() - features.len()].to_vec();
    out.push(features.iter().product());
    Ok(out)
}

fn flatten(input: Tensor, features: &[usize]) -> Result<Tensor> {
    let shape = flattened_shape(input.shape(), features)?;
    input.reshape(shape)
}
