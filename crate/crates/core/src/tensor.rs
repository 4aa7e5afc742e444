//! Dense row-major tensors of 64-bit reals.
//!
//! Image tensors are laid out batch × height × width × channels, so a
//! pixel's channel values are contiguous in memory.

use crate::error::{Error, Result};

/// A dense multi-dimensional array. Every extent is positive and the data
/// length always equals the product of the extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        check_extents(&shape).expect("tensor extents must be positive");
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        check_extents(&shape).expect("tensor extents must be positive");
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds on axis {i} (extent {ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Interprets the tensor as batch × height × width × channels.
    pub fn nhwc(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, h, w, c] => Ok([b, h, w, c]),
            _ => Err(Error::shape(
                "nhwc",
                format!("expected a rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Copies channels `start..start + len` of a channels-last tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = *self.shape.last().expect("rank >= 1");
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Tensor::new(shape, data)
    }

    /// Copies batch item `index`, keeping a leading extent of 1.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading batch axis, dropping
    /// a leading unit extent from each item if present.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let inner: Vec<usize> = if first.shape.len() > 1 && first.shape[0] == 1 {
            first.shape[1..].to_vec()
        } else {
            first.shape.clone()
        };
        let per: usize = inner.iter().product();
        let mut data = Vec::with_capacity(per * items.len());
        for t in items {
            if t.numel() != per {
                return Err(Error::shape(
                    "stack",
                    format!("item shape {:?} differs from {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_zero_extents() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn multi_index_is_row_major() {
        let t = Tensor::from_fn([2, 3], |i| i as f64);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn slice_channels_picks_trailing_axis() {
        let t = Tensor::from_fn([1, 1, 2, 3], |i| i as f64);
        let s = t.slice_channels(1, 2).unwrap();
        assert_eq!(s.shape(), &[1, 1, 2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
        assert!(t.slice_channels(2, 2).is_err());
    }

    #[test]
    fn stack_and_batch_item_invert() {
        let a = Tensor::from_fn([1, 2, 2, 1], |i| i as f64);
        let b = Tensor::from_fn([1, 2, 2, 1], |i| 10.0 + i as f64);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 1]);
        assert_eq!(s.batch_item(1), b);
        assert_eq!(s.batch_item(0), a);
    }
}
