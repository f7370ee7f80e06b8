//! Dense rank-4 tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(batch, channels, rows, cols)`; row-major with `w` fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { b, c, h, w }
    }

    /// A `(rows, cols, 1, 1)` matrix shape.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape4::new(rows, cols, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch entry.
    pub const fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.b, self.c, self.h, self.w)
    }
}

/// Storage precision of parameters and forwarded activations.
///
/// Arithmetic is always carried out in 64-bit; `F32` rounds stored values
/// through single precision and halves the byte accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub const fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Builds a tensor from external data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape("Tensor4::from_vec", "length", shape.numel(), data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor4 { shape, data })
    }

    /// Internal constructor for op outputs; length is checked in debug builds only.
    pub(crate) fn from_raw(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor4 { shape, data }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(b, c, h, w)]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(b, c, h, w);
        self.data[i] = v;
    }

    /// Slice holding batch entry `b`.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.shape.per_sample();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape.per_sample();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape("reshape", "numel", self.shape.numel(), shape.numel()));
        }
        Ok(Tensor4 {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn bytes(&self, precision: Precision) -> usize {
        self.data.len() * precision.bytes()
    }

    /// Rounds every entry through `f32` when `precision` is `F32`.
    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Batch entries `[start, end)` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor4 {
        let n = self.shape.per_sample();
        Tensor4 {
            shape: Shape4::new(end - start, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Gathers the listed batch entries.
    pub fn gather_batch(&self, indices: &[usize]) -> Tensor4 {
        let n = self.shape.per_sample();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor4 {
            shape: Shape4::new(indices.len(), self.shape.c, self.shape.h, self.shape.w),
            data,
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor4) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        let s = Shape4::new(1, 1, 1, 2);
        assert!(matches!(
            Tensor4::from_vec(s, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            Tensor4::from_vec(s, vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor4::from_vec(s, vec![1.0]).is_err());
        assert_eq!(Tensor4::from_vec(s, vec![1.0, 2.0]).unwrap().len(), 2);
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor4::from_fn(Shape4::new(2, 3, 4, 5), |b, c, h, w| (b * 1000 + c * 100 + h * 10 + w) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.sample(1)[0], 1000.0);
    }

    #[test]
    fn f32_rounding() {
        let mut t = Tensor4::full(Shape4::scalar(), 0.1);
        t.round_to(Precision::F32);
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }
}
