//! Dense 5D tensors in (batch, channel, x, y, z) order, x fastest.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {context}: {a:?} vs {b:?}")]
    ShapeMismatch {
        context: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("conv kernel dims must be odd for same padding, got {0:?}")]
    EvenKernel((usize, usize, usize)),
    #[error("spatial dims {dims:?} not divisible by pooling window {window:?}")]
    NotDivisible {
        dims: (usize, usize, usize),
        window: (usize, usize, usize),
    },
    #[error("deconv kernel must equal its stride, got kernel {kernel:?}, stride {stride:?}")]
    KernelStrideMismatch {
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
    },
    #[error("channel count {0} must be even to halve")]
    OddChannels(usize),
    #[error("batch-norm needs at least 2 values per channel in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("data length {got} does not match shape {shape:?} ({expected})")]
    DataLength {
        shape: [usize; 5],
        expected: usize,
        got: usize,
    },
    #[error("graph is inconsistent: {0}")]
    BadGraph(String),
}

/// Dense tensor of shape (n, c, x, y, z), stored contiguously with x fastest
/// within a channel, then y, then z, then channel, then batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NnError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Elements per (batch, channel) slab.
    #[inline]
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [_, cc, xx, yy, zz] = self.shape;
        debug_assert!(c < cc && x < xx && y < yy && z < zz);
        ((((n * cc) + c) * zz + z) * yy + y) * xx + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(n, c, x, y, z)]
    }

    /// The contiguous spatial slab of one (batch, channel) pair.
    #[inline]
    pub fn slab(&self, n: usize, c: usize) -> &[f64] {
        let s = self.spatial();
        let base = (n * self.shape[1] + c) * s;
        &self.data[base..base + s]
    }

    #[inline]
    pub fn slab_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.spatial();
        let base = (n * self.shape[1] + c) * s;
        &mut self.data[base..base + s]
    }
}
