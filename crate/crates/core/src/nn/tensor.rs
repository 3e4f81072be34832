use crate::error::{MeaError, Result};

use super::scalar::Real;

/// Dense `(batch, channels, height, width)` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(MeaError::invalid(format!(
                "tensor dims must be >= 1, got {shape:?}"
            )));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(MeaError::invalid(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch entry.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (b * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (b * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cs, hs, ws] = self.shape;
        self.data[((b * cs + c) * hs + h) * ws + w]
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(MeaError::NumericalFailure {
                context: format!("non-finite value in {what} at flat index {i}"),
                iterations: 0,
                residual: f64::NAN,
            }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| MeaError::invalid("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(MeaError::invalid(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([batch, c, h, w], data)
    }

    /// Batch entries `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }
}
