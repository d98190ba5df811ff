//! Dense row-major tensors.
//!
//! A single generic container carries every value in the pipeline: `f64`
//! for the float path and fake-quantized simulation, `i32` for integer
//! codes and accumulators. Layout is always contiguous row-major, and
//! image batches use NCHW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element interpretation of a tensor's storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Real64,
    Int8Range,
    Int32Acc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Integer codes or accumulators.
pub type IntTensor = Tensor<i32>;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Copy> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = numel(&shape);
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Rows `start..end` along the leading (batch) axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("scalar has no batch axis"))?;
        if start >= end || end > n {
            return Err(Error::shape(format!("batch range {start}..{end} out of 0..{n}")));
        }
        let row = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(shape, self.data[start * row..end * row].to_vec())
    }

    /// Gathers the given rows along the leading axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("scalar has no batch axis"))?;
        let row = self.data.len() / n;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return Err(Error::shape(format!("row {i} out of 0..{n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    pub fn same_shape<U>(&self, other: &Tensor<U>) -> bool {
        self.shape == other.shape
    }
}

impl Tensor<f64> {
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn zeros_like(other: &Tensor<f64>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<f64>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} += {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `(min, max)` of each slice along `axis`.
    pub fn channel_ranges(&self, axis: usize) -> Result<Vec<(f64, f64)>> {
        let c = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range for {:?}", self.shape)))?;
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
        for (i, chunk) in self.data.chunks(inner).enumerate() {
            let r = &mut out[i % c];
            for &v in chunk {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        Ok(out)
    }

    /// Max `|x|` of each slice along `axis`.
    pub fn channel_max_abs(&self, axis: usize) -> Result<Vec<f64>> {
        Ok(self
            .channel_ranges(axis)?
            .into_iter()
            .map(|(lo, hi)| lo.abs().max(hi.abs()))
            .collect())
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor<f64>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max |a - b| / max(max |a|, tiny)`, the relative error used by the
    /// equivalence checks.
    pub fn rel_diff(&self, reference: &Tensor<f64>) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        Ok(diff / reference.max_abs().max(f64::MIN_POSITIVE))
    }
}

/// Equal-width histogram over `[min, max]`, returned as `(left_edge, count)`.
///
/// A constant tensor collapses to a single bin holding every element.
pub fn histogram(t: &Tensor<f64>, bins: usize) -> Result<Vec<(f64, usize)>> {
    if t.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFiniteInput("histogram input".into()));
    }
    let (lo, hi) = (t.min(), t.max());
    if lo == hi {
        return Ok(vec![(lo, t.len())]);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in t.data() {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, c))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(Tensor::new(vec![0, 3], Vec::<f64>::new()).is_err());
    }

    #[test]
    fn select_batch_gathers_rows() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s = t.select_batch(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(t.slice_batch(1, 2).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn histogram_constant_tensor_is_single_bin() {
        let t = Tensor::from_vec(vec![0.0; 4]).unwrap();
        assert_eq!(histogram(&t, 2).unwrap(), vec![(0.0, 4)]);
    }

    #[test]
    fn histogram_uniform_split() {
        let t = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let h = histogram(&t, 2).unwrap();
        assert_eq!(h.iter().map(|b| b.1).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(h[0].0, 0.0);
        assert_eq!(h[1].0, 1.5);
    }

    #[test]
    fn histogram_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..1000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = Tensor::from_vec(data).unwrap();
        for bins in [1, 7, 64] {
            let total: usize = histogram(&t, bins).unwrap().iter().map(|b| b.1).sum();
            assert_eq!(total, 1000);
        }
    }

    #[test]
    fn histogram_rejects_zero_bins() {
        let t = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(histogram(&t, 0).is_err());
    }
}
