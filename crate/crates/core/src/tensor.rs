use crate::error::{shape_err, Error, Result};

/// A dense row-major array of `f64` values with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    /// A rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Row `i` of a tensor whose leading axis is the batch axis.
    pub fn row(&self, i: usize) -> Tensor {
        let row_len: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * row_len..(i + 1) * row_len].to_vec(),
        }
    }
}

/// Splits `shape` into a batch count and the trailing feature shape of rank
/// `feature_rank`. A tensor of exactly `feature_rank` axes is a batch of one.
pub(crate) fn split_batch(shape: &[usize], feature_rank: usize) -> Result<(usize, &[usize])> {
    if shape.len() < feature_rank {
        return Err(shape_err(format!(
            "expected at least {} axes, got shape {:?}",
            feature_rank, shape
        )));
    }
    let cut = shape.len() - feature_rank;
    let batch = shape[..cut].iter().product();
    Ok((batch, &shape[cut..]))
}

/// Replaces the trailing `feature_rank` axes of `shape` with `new_features`.
pub(crate) fn with_features(shape: &[usize], feature_rank: usize, new_features: &[usize]) -> Vec<usize> {
    let cut = shape.len() - feature_rank;
    let mut out = shape[..cut].to_vec();
    out.extend_from_slice(new_features);
    out
}
