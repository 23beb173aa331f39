//! Dense row-major tensor with the last dimension contiguous.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero-sized dimension in {dims:?}");
        Tensor { dims: dims.to_vec(), data: vec![value; dims.iter().product()] }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; dims.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for ax in (0..dims.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of the trailing (contiguous) dimension.
    pub fn channels(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_dims("zip_map", other)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_same_dims(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, name: &str, rank: usize) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::shape(
                op,
                format!("{name} must have rank {rank}, got dims {:?}", self.dims),
            ));
        }
        Ok(())
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn frame(&self, index: usize) -> Tensor {
        assert!(self.dims.len() >= 2 && index < self.dims[0]);
        let inner: usize = self.dims[1..].iter().product();
        Tensor {
            dims: self.dims[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(frames: &[Tensor]) -> Result<Tensor> {
        let first = frames.first().ok_or_else(|| Error::invalid("stack", "no frames"))?;
        let mut data = Vec::with_capacity(first.len() * frames.len());
        for f in frames {
            first.expect_same_dims("stack", f)?;
            data.extend_from_slice(&f.data);
        }
        let mut dims = vec![frames.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(dims, data)
    }

    /// Keep channels `[start, start + len)` of the trailing axis.
    pub fn channel_slice(&self, start: usize, len: usize) -> Tensor {
        let c = self.channels();
        assert!(start + len <= c && len > 0);
        let mut dims = self.dims.clone();
        *dims.last_mut().unwrap() = len;
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        Tensor { dims, data }
    }

    /// Concatenate along the trailing axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead = &first.dims[..first.rank() - 1];
        for p in parts {
            if p.rank() != first.rank() || &p.dims[..p.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("leading dims {:?} vs {:?}", first.dims, p.dims),
                ));
            }
        }
        let pixels: usize = lead.iter().product();
        let total: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(pixels * total);
        for px in 0..pixels {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        let mut dims = lead.to_vec();
        dims.push(total);
        Tensor::new(dims, data)
    }
}
