use std::sync::Arc;

use crate::alloc;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Allocation-tracked flat buffer. Every live `Storage` is counted by the
/// [`alloc`] gauge so peak memory can be reported without touching OS RSS.
#[derive(Debug)]
pub(crate) struct Storage<T> {
    data: Vec<T>,
}

impl<T: Scalar> Storage<T> {
    fn new(data: Vec<T>) -> Self {
        alloc::register(data.len() * std::mem::size_of::<T>());
        Storage { data }
    }
}

impl<T> Drop for Storage<T> {
    fn drop(&mut self) {
        alloc::deregister(self.data.len() * std::mem::size_of::<T>());
    }
}

/// Dense n-dimensional tensor, row-major, immutable after creation and cheap
/// to clone (the buffer is shared). Differentiable computation happens by
/// registering tensors on a [`crate::tape::Tape`] and operating on the
/// returned [`crate::tape::Var`] handles.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    storage: Arc<Storage<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} implies {} elements, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, storage: Arc::new(Storage::new(data)) })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        Tensor { shape, storage: Arc::new(Storage::new(vec![T::zero(); n])) }
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        Tensor { shape, storage: Arc::new(Storage::new(vec![value; n])) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(Shape::scalar(), vec![value]).expect("scalar shape")
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.storage.data
    }

    /// Sole element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar(), "item() on non-scalar {}", self.shape);
        self.storage.data[0]
    }

    /// Mutable access, available only while the buffer is not shared
    /// (e.g. parameter updates after the tape of the step was dropped).
    pub fn data_mut(&mut self) -> Option<&mut [T]> {
        Arc::get_mut(&mut self.storage).map(|s| s.data.as_mut_slice())
    }

    /// Copy into the other precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor::from_vec(self.shape.clone(), data).expect("same shape")
    }

    /// True if any element is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data().iter().any(|v| !v.is_finite())
    }
}
