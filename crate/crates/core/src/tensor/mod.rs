//! Dense row-major tensors and the kernels the rest of the crate is built on.
//!
//! There is no broadcasting beyond tensor-times-scalar; every binary kernel
//! checks shapes and returns [`Error::Shape`] on mismatch.

mod conv;
mod reshape;

pub use conv::*;
pub use reshape::*;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err("Tensor::new", format!("zero dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: R) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> R) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bytes occupied by the payload.
    pub fn nbytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<R>()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err("dims4", format!("expected rank 4, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, f] => Ok((n, f)),
            _ => shape_err("dims2", format!("expected rank 2, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self> {
        self.check_same(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: R) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: R, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += k * b);
        Ok(())
    }

    pub fn fill(&mut self, value: R) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> R {
        self.sum() / R::lit(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> R {
        self.data
            .iter()
            .fold(R::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<R> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn dot(&self, other: &Self) -> Result<R> {
        self.check_same(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fraction of nonzero entries.
    pub fn nonzero_fraction(&self) -> f64 {
        let nz = self.data.iter().filter(|&&x| x != R::zero()).count();
        nz as f64 / self.data.len() as f64
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| S::lit(x.to_f64())).collect(),
        }
    }

    /// Contiguous slice `[start, end)` along dimension 0.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return shape_err(
                "slice_outer",
                format!("range {start}..{end} out of {:?}", self.shape),
            );
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Writes `src` into rows `[start, start + src.shape[0])` of dimension 0.
    pub fn add_to_outer(&mut self, start: usize, src: &Self) -> Result<()> {
        if src.shape[1..] != self.shape[1..] || start + src.shape[0] > self.shape[0] {
            return shape_err(
                "add_to_outer",
                format!("{:?} at {start} into {:?}", src.shape, self.shape),
            );
        }
        let inner: usize = self.shape[1..].iter().product();
        self.data[start * inner..start * inner + src.data.len()]
            .iter_mut()
            .zip(&src.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// Channels `[start, end)` of an NCHW tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if start >= end || end > c {
            return shape_err("slice_channels", format!("{start}..{end} of {c} channels"));
        }
        let k = end - start;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * k * plane);
        for s in 0..n {
            let base = (s * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + k * plane]);
        }
        Ok(Self {
            shape: vec![n, k, h, w],
            data,
        })
    }

    /// Rows `[start, end)` of the batch dimension as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        self.slice_outer(start, end)
    }

    pub(crate) fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }
}

/// Concatenates NCHW tensors along the batch dimension.
pub fn concat_batch<R: Real>(parts: &[Tensor<R>]) -> Result<Tensor<R>> {
    let Some(first) = parts.first() else {
        return shape_err("concat_batch", "no inputs");
    };
    let mut shape = first.shape().to_vec();
    let mut data = Vec::new();
    shape[0] = 0;
    for p in parts {
        if p.shape()[1..] != first.shape()[1..] {
            return shape_err(
                "concat_batch",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            );
        }
        shape[0] += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[4]);
        assert!(a.add(&b).is_err());
        assert!(a.clone().reshape(&[4]).unwrap().add(&b).is_ok());
    }

    #[test]
    fn channel_slice_is_contiguous_per_sample() {
        let t = Tensor::<f32>::from_fn(&[2, 4, 1, 1], |i| i as f32);
        let s = t.slice_channels(2, 4).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1, 1]);
        assert_eq!(s.data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn nonzero_fraction_counts_spikes() {
        let t = Tensor::<f32>::new(vec![4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.nonzero_fraction(), 0.5);
    }
}
