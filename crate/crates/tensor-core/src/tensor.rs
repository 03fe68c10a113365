use crate::error::{Result, TensorError};

/// Dense row-major tensor of 64-bit floats.
///
/// A rank-0 tensor (empty shape) holds exactly one value and is used for
/// scalars such as loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: "zero extent".into(),
            });
        }
        if data.len() != numel {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: format!("data length {} != numel {}", data.len(), numel),
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        TensorData {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        TensorData {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        TensorData {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a multi-index; rank must match.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        self.data[off]
    }
}

/// Offsets and geometry for iterating 1-D lanes along `axis` of `shape`.
///
/// Each lane consists of `len` elements spaced `stride` apart starting at
/// one of the returned offsets.
pub(crate) fn lane_offsets(shape: &[usize], axis: usize) -> (Vec<usize>, usize, usize) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut starts = Vec::with_capacity(outer * stride);
    for o in 0..outer {
        let base = o * len * stride;
        for i in 0..stride {
            starts.push(base + i);
        }
    }
    (starts, stride, len)
}
